from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Optional, Union, get_args, get_origin, get_type_hints

from apb_helper.costmodel import LLAMA_3_1_8B
from apb_helper.errors import ConfigError
from apb_helper.models.toy_llama import ModelConfig
from apb_helper.pipelines.common import ScorerKind, StrategyConfig, StrategyKind
from apb_helper.simnet import Schedule
from apb_helper.tensor_core import DEFAULT_TILE_SIZE
from modules.workload import NeedleSpec


class ReportFormat(Enum):
    JSON = "json"
    CSV = "csv"


class SweepKind(Enum):
    ABLATION = "ablation"
    PRESETS = "presets"
    HOSTS = "hosts"
    SENSITIVITY = "sensitivity"


@dataclass(frozen=True)
class Preset:
    name: str
    n: int
    block_len: int
    anchor_len: int
    passing_len: int
    hosts: int = 8


PRESETS = {
    '32K': Preset('32K', 32768, 4096, 1024, 512),
    '64K': Preset('64K', 65536, 8192, 2048, 1024),
    '128K': Preset('128K', 131072, 16384, 4096, 2048),
    '256K': Preset('256K', 262144, 32768, 8192, 4096),
    '512K': Preset('512K', 524288, 65536, 8192, 8192),
}

# anchor and passing lengths tried by the sensitivity sweep, at the 128K preset
SENSITIVITY_LENGTHS = (1024, 2048, 3072, 4096)
SENSITIVITY_PRESET = '128K'

# host counts of the hosts sweep
HOST_COUNTS = (1, 2, 4, 6, 8)


@dataclass(frozen=True)
class AblationRow:
    use_anchor: bool
    use_passing: bool
    scorer: ScorerKind
    embed_query: bool


ABLATION_LATTICE = {
    'No.0': AblationRow(True, True, ScorerKind.RETAIN, True),
    'No.1': AblationRow(True, True, ScorerKind.RETAIN, False),
    'No.2': AblationRow(True, True, ScorerKind.RANDOM, True),
    'No.3': AblationRow(True, True, ScorerKind.RANDOM, False),
    'No.4': AblationRow(True, False, ScorerKind.RANDOM, True),
    'No.5': AblationRow(True, False, ScorerKind.RANDOM, False),
    'No.6': AblationRow(False, True, ScorerKind.RETAIN, False),
    'No.7': AblationRow(False, True, ScorerKind.RANDOM, False),
    'No.8': AblationRow(False, False, ScorerKind.RANDOM, False),
}

MODEL_PRESETS = {
    'toy': dict(layers=2, hidden=64, heads=4, kv_heads=2, intermediate=128, vocab=256, rope_theta=10000.0),
    'llama-3.1-8b': dict(LLAMA_3_1_8B, vocab=128256, rope_theta=500000.0),
}

# model presets too large to execute on the simulator
FORMULA_ONLY_MODELS = ('llama-3.1-8b',)


@dataclass(frozen=True)
class RunConfig:
    strategy: StrategyKind = StrategyKind.FULL
    hosts: int = 1
    anchor_len: Optional[int] = None
    passing_len: Optional[int] = None
    scorer: ScorerKind = ScorerKind.RETAIN
    embed_query: bool = True
    use_anchor: bool = True
    use_passing: bool = True
    ablation: Optional[str] = None
    seq_len: int = 256
    query_len: int = 0
    seed: int = 0
    weights: Optional[str] = None
    preset: Optional[str] = None
    compare_reference: bool = False
    report: ReportFormat = ReportFormat.JSON
    out: Optional[str] = None
    max_new_tokens: int = 1
    stop_token: Optional[int] = None
    model_preset: Optional[str] = None
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    kv_heads: int = 2
    intermediate: int = 128
    vocab: int = 256
    rope_theta: float = 10000.0
    retain_intermediate: int = 1024
    tile_size: int = DEFAULT_TILE_SIZE
    needle_start: Optional[int] = None
    needle_len: int = 0
    schedule: Schedule = Schedule.ORDERED
    formula_only: bool = False
    sweep: Optional[SweepKind] = None

    @property
    def seq_len_resolved(self):
        return PRESETS[self.preset].n if self.preset else self.seq_len

    @property
    def hosts_resolved(self):
        return PRESETS[self.preset].hosts if self.preset else self.hosts

    @property
    def document_len(self):
        return self.seq_len_resolved - self.query_len

    @property
    def block_len(self):
        return -(-self.document_len // self.hosts_resolved)

    @property
    def needle(self) -> Optional[NeedleSpec]:
        if self.needle_start is None or self.needle_len == 0:
            return None
        return NeedleSpec(self.needle_start, self.needle_len)


def config_key(name):
    return name.replace('_', '-')


def _field_type(hint):
    if get_origin(hint) is Union:
        return next(arg for arg in get_args(hint) if arg is not type(None)), True
    return hint, False


def _convert(key, hint, text):
    kind, optional = _field_type(hint)
    if optional and text.lower() in ('none', ''):
        return None

    if kind is bool:
        lowered = text.lower()
        if lowered in ('true', 'yes', 'on', '1'):
            return True
        if lowered in ('false', 'no', 'off', '0'):
            return False
        raise ConfigError(f'"{key}" expects true/false, got "{text}"')

    if isinstance(kind, type) and issubclass(kind, Enum):
        try:
            return kind(text)
        except ValueError:
            choices = ', '.join(member.value for member in kind)
            raise ConfigError(f'"{key}" must be one of {choices}, got "{text}"') from None

    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f'"{key}" expects {kind.__name__}, got "{text}"') from None


def _format(value):
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config(text, source='<config>') -> RunConfig:
    """Parses `key = value` lines into a RunConfig without cross-field checks."""
    hints = get_type_hints(RunConfig)
    known = {config_key(f.name): f.name for f in fields(RunConfig)}
    values = {}

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'{source}:{number}: expected "key = value", got "{raw.strip()}"')

        key, value = (part.strip() for part in line.split('=', 1))
        if key not in known:
            raise ConfigError(f'{source}:{number}: unknown config key "{key}"')
        name = known[key]
        if name in values:
            raise ConfigError(f'{source}:{number}: duplicate config key "{key}"')
        values[name] = _convert(key, hints[name], value)

    return RunConfig(**values)


def parse_config(text, source='<config>') -> RunConfig:
    return validate_config(read_config(text, source))


def load_config(path, validate=True) -> RunConfig:
    """
    Reads a line-oriented `key = value` run config.

    Args:
        path: config file; `#` starts a comment, keys are the hyphenated field names
        validate: run the cross-field checks; callers that merge overrides first pass False

    Returns:
        The parsed RunConfig, validated unless `validate` is False
    """
    try:
        with open(path, 'rt', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f'cannot read config {path}: {e}') from e
    config = read_config(text, source=str(path))
    return validate_config(config) if validate else config


def dump_config(config: RunConfig) -> str:
    lines = [f'{config_key(f.name)} = {_format(getattr(config, f.name))}' for f in fields(config)]
    return '\n'.join(lines) + '\n'


def save_config(config: RunConfig, path):
    with open(path, 'wt', encoding='utf-8') as f:
        f.write(dump_config(config))


def validate_config(config: RunConfig) -> RunConfig:
    if config.preset is not None and config.preset not in PRESETS:
        raise ConfigError(f'unknown preset "{config.preset}", expected one of {", ".join(PRESETS)}')
    if config.ablation is not None and config.ablation not in ABLATION_LATTICE:
        raise ConfigError(f'unknown ablation row "{config.ablation}", expected one of {", ".join(ABLATION_LATTICE)}')
    if config.model_preset is not None and config.model_preset not in MODEL_PRESETS:
        raise ConfigError(f'unknown model-preset "{config.model_preset}", expected one of {", ".join(MODEL_PRESETS)}')

    # sweeps replace the strategy and fill in the passing length themselves
    if config.strategy == StrategyKind.APB and config.passing_len is None and config.preset is None and config.sweep is None:
        raise ConfigError('strategy apb needs "passing-len" (or a preset)')
    if config.strategy == StrategyKind.FULL and config.hosts_resolved != 1 and config.sweep is None:
        raise ConfigError(f'strategy full runs on one host, got "hosts" = {config.hosts_resolved}')
    if config.hosts < 1:
        raise ConfigError(f'"hosts" must be >= 1, got {config.hosts}')
    if config.seq_len_resolved < 1:
        raise ConfigError(f'"seq-len" must be >= 1, got {config.seq_len_resolved}')
    if not 0 <= config.query_len < config.seq_len_resolved:
        raise ConfigError(f'"query-len" must lie in [0, {config.seq_len_resolved}), got {config.query_len}')
    if config.hosts_resolved > config.document_len:
        raise ConfigError(f'{config.document_len} document tokens cannot be split over {config.hosts_resolved} hosts')
    if config.max_new_tokens < 1:
        raise ConfigError(f'"max-new-tokens" must be >= 1, got {config.max_new_tokens}')
    for name in ('anchor_len', 'passing_len'):
        value = getattr(config, name)
        if value is not None and value < 0:
            raise ConfigError(f'"{config_key(name)}" must be >= 0, got {value}')
    if config.anchor_len is not None and config.anchor_len > config.document_len:
        raise ConfigError(f'"anchor-len" {config.anchor_len} exceeds the {config.document_len}-token document')

    needle = config.needle
    if needle is not None and (needle.start < 0 or needle.stop > config.document_len):
        raise ConfigError(f'needle span [{needle.start}, {needle.stop}) lies outside the {config.document_len}-token document')

    formula_sweeps = (SweepKind.PRESETS, SweepKind.SENSITIVITY)
    if config.model_preset in FORMULA_ONLY_MODELS and not config.formula_only and config.sweep not in formula_sweeps:
        raise ConfigError(f'model-preset {config.model_preset} is formula-only; add "formula-only = true"')

    return config


def apply_ablation(config: RunConfig) -> RunConfig:
    if config.ablation is None:
        return config
    row = ABLATION_LATTICE[config.ablation]
    return replace(config, strategy=StrategyKind.APB, use_anchor=row.use_anchor, use_passing=row.use_passing,
                   scorer=row.scorer, embed_query=row.embed_query)


def model_config(config: RunConfig) -> ModelConfig:
    if config.model_preset is not None:
        dims = MODEL_PRESETS[config.model_preset]
    else:
        dims = dict(layers=config.layers, hidden=config.hidden, heads=config.heads, kv_heads=config.kv_heads,
                    intermediate=config.intermediate, vocab=config.vocab, rope_theta=config.rope_theta)
    return ModelConfig(**dims, retain_intermediate=config.retain_intermediate)


def effective_lengths(config: RunConfig):
    """(anchor_len, passing_len) as the strategy will run them; anchor defaults to a quarter block."""
    config = apply_ablation(config)
    preset = PRESETS.get(config.preset) if config.preset else None

    anchor = config.anchor_len
    passing = config.passing_len
    if preset is not None:
        anchor = preset.anchor_len if anchor is None else anchor
        passing = preset.passing_len if passing is None else passing
    if anchor is None:
        anchor = config.block_len // 4
    passing = passing or 0

    if config.strategy == StrategyKind.STAR:
        return config.block_len, 0
    if config.strategy != StrategyKind.APB:
        return 0, 0
    if not config.use_anchor:
        anchor = 0
    if not config.use_passing:
        passing = 0
    return min(anchor, config.document_len), passing


def strategy_config(config: RunConfig) -> StrategyConfig:
    config = apply_ablation(config)
    anchor, passing = effective_lengths(config)
    needle = config.needle
    return StrategyConfig(
        kind=config.strategy,
        hosts=config.hosts_resolved,
        anchor_len=anchor,
        passing_len=passing,
        embed_query=config.embed_query,
        use_anchor=config.use_anchor,
        use_passing=config.use_passing,
        scorer=config.scorer,
        seed=config.seed,
        tile_size=config.tile_size,
        schedule=config.schedule,
        needle_indices=tuple(needle.indices()) if needle is not None else (),
        record_passing=config.strategy == StrategyKind.APB,
    )

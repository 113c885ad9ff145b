from dataclasses import dataclass, replace
from typing import List, Optional

from tqdm import tqdm

from diffusers.utils import logging

from apb_helper.costmodel import CostParams, CostReport, formula_flops, measured_flops, speed_metric, stage_seconds
from apb_helper.errors import ConfigError
from apb_helper.layout import build_host_layouts, locate_host, split_document_query
from apb_helper.models.toy_llama import ModelConfig, ToyTransformer, reference_prefill
from apb_helper.models.weights_io import load_model
from apb_helper.pipelines.common import PrefillResult, StrategyConfig, StrategyKind, make_group
from apb_helper.pipelines.decode import GenerateResult, generate
from apb_helper.pipelines.strategies import prefill
from apb_helper.pipelines.ulysses import head_shards
from apb_helper.simnet import CommTrace
from apb_helper.utils import calculate_sha256, hidden_checksum, index_digest
from modules.run_config import (
    ABLATION_LATTICE, HOST_COUNTS, PRESETS, SENSITIVITY_LENGTHS, SENSITIVITY_PRESET, RunConfig, SweepKind,
    apply_ablation, effective_lengths, model_config, strategy_config, validate_config,
)
from modules.workload import make_workload


logger = logging.get_logger(__name__)  # pylint: disable=invalid-name


@dataclass
class ExperimentOutputs:
    report: CostReport
    prefill: Optional[PrefillResult] = None
    generated: Optional[GenerateResult] = None
    trace: Optional[CommTrace] = None


def build_model(config: RunConfig) -> ToyTransformer:
    if config.weights is None:
        return ToyTransformer.from_seed(model_config(config), seed=config.seed)

    try:
        model = load_model(config.weights)
    except FileNotFoundError as e:
        raise ConfigError(f'weights file {config.weights} not found') from e
    logger.info(f'weights {config.weights} sha256={calculate_sha256(config.weights)[:12]}')
    return model


def formula_report(config: RunConfig, dims: Optional[ModelConfig] = None) -> CostReport:
    config = apply_ablation(config)
    dims = dims or model_config(config)
    anchor, passing = effective_lengths(config)
    params = CostParams.from_model(dims, config.document_len, config.hosts_resolved, anchor, passing)
    return CostReport(
        strategy=config.strategy.value,
        n=config.seq_len_resolved,
        hosts=config.hosts_resolved,
        anchor_len=anchor,
        passing_len=passing,
        scorer=config.scorer.value,
        formula_flops=formula_flops(config.strategy, params),
        tokens_in=config.seq_len_resolved,
    )


def needle_passed(result: PrefillResult, config: StrategyConfig, layouts) -> Optional[bool]:
    """
    True when every needle row reaches the passing block of every later host, at every layer.

    None when there is nothing to check (no needle, no recording, or no later host).
    """
    if not config.needle_indices or not result.hosts[0].passing:
        return None

    checked = False
    for index in config.needle_indices:
        source = locate_host(index, layouts)
        local = index - source.doc_offset
        for host in result.hosts[source.host:]:
            for layer, (k_passing, _) in host.passing.items():
                needle_key = result.hosts[source.host - 1].cache.keys[layer][:, local]
                matches = (k_passing == needle_key.unsqueeze(1)).all(dim=-1).all(dim=0)
                if not bool(matches.any()):
                    return False
                checked = True
    return True if checked else None


def max_abs_error(result: PrefillResult, document, model: ToyTransformer, tile_size) -> float:
    reference = reference_prefill(document, model, tile_size)
    return float((result.block_hidden() - reference.hidden).abs().max())


def run_experiment(config: RunConfig, model: Optional[ToyTransformer] = None) -> ExperimentOutputs:
    """
    Runs one strategy end to end: workload, prefill, decode and the cost report.

    Args:
        config: validated run config
        model: optional prebuilt model (otherwise seeded or loaded from `weights`)

    Returns:
        ExperimentOutputs with the CostReport and the raw prefill/decode results
    """
    config = validate_config(apply_ablation(config))
    if config.formula_only:
        return ExperimentOutputs(report=formula_report(config))

    model = model or build_model(config)
    strategy = strategy_config(config)
    if strategy.kind == StrategyKind.ULYSSES:
        head_shards(model.config.heads, model.config.kv_heads, strategy.hosts)

    tokens = make_workload(config.seq_len_resolved, config.query_len, config.seed, config.needle, model.config.vocab)
    group = make_group(strategy)

    prefill_result = prefill(tokens, model, strategy, query_len=config.query_len, group=group)
    prefill_counters = group.reset_counters()
    decoded = generate(prefill_result, model, config.max_new_tokens, config.stop_token, group=group, tile_size=config.tile_size)

    split = split_document_query(tokens, config.query_len)
    anchor, passing = effective_lengths(config)
    params = CostParams.from_model(model.config, split.document.numel(), strategy.hosts, anchor, passing)

    report = CostReport(
        strategy=strategy.kind.value,
        n=config.seq_len_resolved,
        hosts=strategy.hosts,
        anchor_len=anchor,
        passing_len=passing,
        scorer=strategy.scorer.value,
        formula_flops=formula_flops(strategy.kind, params),
        measured_flops=measured_flops(prefill_counters),
        comm_elements=group.trace.volume_of('prefill/'),
        prefill_s=prefill_result.seconds,
        decode_s=decoded.seconds,
        speed=speed_metric(tokens.numel(), len(decoded.tokens), prefill_result.seconds, decoded.seconds),
        checksum=hidden_checksum(prefill_result.hidden, decoded.tokens),
        tokens_in=tokens.numel(),
        tokens_out=len(decoded.tokens),
        decode_comm_elements=group.trace.volume_of('decode/'),
        retain_flops=sum(counter.flops['retain'] for counter in prefill_counters),
        anchor_rows=prefill_result.anchor_rows,
        generated=list(decoded.tokens),
        stage_seconds=stage_seconds(prefill_counters),
    )

    if strategy.kind in (StrategyKind.APB, StrategyKind.STAR):
        selections = [host.selected[layer] for host in prefill_result.hosts for layer in sorted(host.selected)]
        report.selected_digest = index_digest(selections)
        if strategy.needle_indices:
            layouts = build_host_layouts(split, strategy.hosts, strategy.anchor_len, strategy.embed_query, strategy.use_anchor)
            report.needle_passed = needle_passed(prefill_result, strategy, layouts)

    if config.compare_reference:
        report.max_abs_err = max_abs_error(prefill_result, split.document, model, config.tile_size)

    return ExperimentOutputs(report=report, prefill=prefill_result, generated=decoded, trace=group.trace)


def sweep_configs(config: RunConfig) -> List[RunConfig]:
    if config.sweep == SweepKind.PRESETS:
        strategy = config.strategy if config.strategy in (StrategyKind.APB, StrategyKind.STAR) else StrategyKind.APB
        return [replace(config, strategy=strategy, preset=name, formula_only=True, sweep=None) for name in PRESETS]

    if config.sweep == SweepKind.ABLATION:
        base = config if config.passing_len is not None or config.preset else replace(config, passing_len=config.block_len // 4)
        return [replace(base, ablation=name, strategy=StrategyKind.APB, sweep=None) for name in ABLATION_LATTICE]

    if config.sweep == SweepKind.SENSITIVITY:
        # formula-only grid over anchor x passing length at a fixed input length
        return [replace(config, strategy=StrategyKind.APB, preset=SENSITIVITY_PRESET, anchor_len=anchor, passing_len=passing,
                        ablation=None, formula_only=True, sweep=None)
                for anchor in SENSITIVITY_LENGTHS for passing in SENSITIVITY_LENGTHS]

    if config.sweep == SweepKind.HOSTS:
        runs = []
        for hosts in HOST_COUNTS:
            if hosts > config.document_len:
                continue
            if config.strategy == StrategyKind.ULYSSES and config.heads % hosts != 0:
                continue
            if config.strategy == StrategyKind.FULL and hosts != 1:
                continue
            runs.append(replace(config, hosts=hosts, preset=None, sweep=None))
        return runs

    return [config]


def run_sweep(config: RunConfig, model: Optional[ToyTransformer] = None) -> List[CostReport]:
    runs = sweep_configs(config)
    if len(runs) > 1 and model is None and not all(run.formula_only for run in runs):
        model = build_model(config)

    reports = []
    for run in tqdm(runs, desc=f'sweep {config.sweep.value if config.sweep else "single"}', disable=len(runs) == 1):
        reports.append(run_experiment(run, model=model).report)
    return reports


def stage_breakdown(report: CostReport):
    total = sum(report.stage_seconds.values())
    if total <= 0:
        return {}
    return {name: seconds / total for name, seconds in report.stage_seconds.items()}

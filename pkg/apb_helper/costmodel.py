import time
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from diffusers.utils import logging

from apb_helper.errors import ContractViolation


logger = logging.get_logger(__name__)  # pylint: disable=invalid-name


STAGES = ('qkv_proj', 'retain', 'comm', 'attention', 'o_proj', 'ffn', 'other')

# Terms the closed-form expressions count: no embedding, LM head, rotary or norms.
TABLE9_STAGES = ('qkv_proj', 'attention', 'o_proj', 'ffn')

LLAMA_3_1_8B = dict(layers=32, hidden=4096, heads=32, kv_heads=8, intermediate=14336)


class FlopCounter:
    def __init__(self):
        self.flops = {name: 0.0 for name in STAGES}
        self.seconds = {name: 0.0 for name in STAGES}

    def add(self, stage, flops):
        self.flops[stage] += float(flops)

    @contextmanager
    def stage(self, name):
        start = time.perf_counter()
        try:
            yield self
        finally:
            self.seconds[name] += time.perf_counter() - start

    def total(self, stages=TABLE9_STAGES):
        return sum(self.flops[name] for name in stages)


def timed(counter: Optional[FlopCounter], stage):
    return counter.stage(stage) if counter is not None else nullcontext()


def measured_flops(counters: List[FlopCounter], stages=TABLE9_STAGES) -> float:
    total = 0.0
    for counter in counters:
        total += counter.total(stages)
    return total


def stage_seconds(counters: List[FlopCounter]) -> Dict[str, float]:
    result = {name: 0.0 for name in STAGES}
    for counter in counters:
        for name in STAGES:
            result[name] += counter.seconds[name]
    return result


@dataclass
class CostParams:
    layers: int
    n: int
    hidden: int
    intermediate: int
    group: int
    hosts: int = 1
    anchor_len: int = 0
    passing_len: int = 0

    def __post_init__(self):
        if min(self.layers, self.n, self.hidden, self.intermediate, self.anchor_len, self.passing_len) < 0:
            raise ContractViolation(f'negative cost parameter in {self}')
        if self.group < 1 or self.hosts < 1:
            raise ContractViolation(f'group and host count must be >= 1 in {self}')

    @classmethod
    def from_model(cls, config, n, hosts=1, anchor_len=0, passing_len=0):
        return cls(
            layers=config.layers, n=n, hidden=config.hidden, intermediate=config.intermediate,
            group=config.group, hosts=hosts, anchor_len=anchor_len, passing_len=passing_len,
        )


def flops_full(p: CostParams) -> float:
    L, n, d, I, g = float(p.layers), float(p.n), float(p.hidden), float(p.intermediate), float(p.group)
    return L * (4 * n * d * d + 4 / g * n * d * d + 2 * n * n * d + 6 * n * d * I)


def flops_star(p: CostParams) -> float:
    L, n, d, I, g = float(p.layers), float(p.n), float(p.hidden), float(p.intermediate), float(p.group)
    H = float(p.hosts)
    return (L / H) * ((8 * H - 4) * n * d * d + (8 * H - 4) / g * n * d * d + (8 * H - 6) / H * n * n * d + (12 * H - 6) * n * d * I)


def flops_apb(p: CostParams) -> float:
    # evaluated exactly as printed, including the n/(H d) placement in the first term
    L, n, d, I, g = float(p.layers), float(p.n), float(p.hidden), float(p.intermediate), float(p.group)
    H, la, lp = float(p.hosts), float(p.anchor_len), float(p.passing_len)
    nb = n / H
    first = 4 * (1 + 1 / g + 0.5 * n / (H * d) + 1.5 * I / d) * nb * d * d
    second = 4 * (H - 1) * (1 + 1 / g + 0.5 * (nb + la) / d + 1.5 * I / d) * (nb + la) * d * d
    third = lp * H * (H - 1) * (nb + la) * d
    return L * (first + second + third)


def formula_flops(kind, p: CostParams) -> float:
    name = getattr(kind, 'value', kind)
    if name in ('full', 'ring', 'ulysses'):
        return flops_full(p)
    if name == 'star':
        return flops_star(p)
    if name == 'apb':
        return flops_apb(p)
    raise ContractViolation(f'no closed form for strategy {name}')


def speed_metric(tokens_in, tokens_out, prefill_s, decode_s) -> float:
    elapsed = prefill_s + decode_s
    if prefill_s < 0 or decode_s < 0 or elapsed <= 0:
        raise ContractViolation(f'speed needs positive elapsed time, got prefill={prefill_s} decode={decode_s}')
    return (tokens_in + tokens_out) / elapsed


@dataclass
class CostReport:
    strategy: str
    n: int
    hosts: int
    anchor_len: int
    passing_len: int
    scorer: str
    formula_flops: float
    measured_flops: float = 0.0
    comm_elements: int = 0
    prefill_s: float = 0.0
    decode_s: float = 0.0
    speed: float = 0.0
    checksum: str = ''
    max_abs_err: Optional[float] = None
    tokens_in: int = 0
    tokens_out: int = 0
    decode_comm_elements: int = 0
    retain_flops: float = 0.0
    anchor_rows: int = 0
    selected_digest: str = ''
    needle_passed: Optional[bool] = None
    generated: List[int] = field(default_factory=list)
    stage_seconds: Dict[str, float] = field(default_factory=dict)

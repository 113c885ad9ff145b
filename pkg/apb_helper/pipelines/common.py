from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import torch

from apb_helper.costmodel import FlopCounter
from apb_helper.errors import ConfigError
from apb_helper.models.toy_llama import KVCache
from apb_helper.simnet import CommTrace, HostGroup, Schedule
from apb_helper.tensor_core import DEFAULT_TILE_SIZE


class StrategyKind(Enum):
    FULL = "full"
    RING = "ring"
    ULYSSES = "ulysses"
    STAR = "star"
    APB = "apb"


class ScorerKind(Enum):
    RETAIN = "retain"
    RANDOM = "random"
    ORACLE = "oracle"


@dataclass(frozen=True)
class StrategyConfig:
    kind: StrategyKind = StrategyKind.APB
    hosts: int = 1
    anchor_len: int = 0
    passing_len: int = 0
    embed_query: bool = True
    use_anchor: bool = True
    use_passing: bool = True
    scorer: ScorerKind = ScorerKind.RETAIN
    seed: int = 0
    tile_size: int = DEFAULT_TILE_SIZE
    schedule: Schedule = Schedule.ORDERED
    # document indices the oracle scorer pins to +inf
    needle_indices: Tuple[int, ...] = ()
    record_passing: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'kind', StrategyKind(self.kind))
        object.__setattr__(self, 'scorer', ScorerKind(self.scorer))
        object.__setattr__(self, 'schedule', Schedule(self.schedule))
        object.__setattr__(self, 'needle_indices', tuple(int(i) for i in self.needle_indices))

        if self.hosts < 1:
            raise ConfigError(f'hosts must be >= 1, got {self.hosts}')
        if self.kind == StrategyKind.FULL and self.hosts != 1:
            raise ConfigError(f'full attention runs on one host, got hosts={self.hosts}')
        if self.anchor_len < 0 or self.passing_len < 0:
            raise ConfigError(f'anchor and passing lengths must be >= 0, got {self.anchor_len}, {self.passing_len}')
        if self.tile_size < 1:
            raise ConfigError(f'tile size must be >= 1, got {self.tile_size}')

    def for_star(self, first_block_len):
        """Star attention is APB with the first block as anchor, no query embedding and nothing passed."""
        return replace(self, anchor_len=first_block_len, passing_len=0, embed_query=False, use_anchor=True, use_passing=False)


@dataclass
class HostPrefill:
    hidden: torch.Tensor
    cache: KVCache
    block_positions: torch.Tensor
    logits: torch.Tensor
    anchor_rows: int = 0
    selected: Dict[int, torch.Tensor] = field(default_factory=dict)
    passing: Dict[int, Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)


@dataclass
class PrefillResult:
    strategy: StrategyKind
    hosts: List[HostPrefill]
    query: torch.Tensor
    trace: CommTrace
    counters: List[FlopCounter]
    seconds: float = 0.0

    @property
    def hidden(self) -> List[torch.Tensor]:
        return [host.hidden for host in self.hosts]

    @property
    def caches(self) -> List[KVCache]:
        return [host.cache for host in self.hosts]

    @property
    def logits(self):
        return self.hosts[-1].logits

    @property
    def first_token(self) -> int:
        return int(torch.argmax(self.logits))

    @property
    def decode_base(self) -> int:
        return int(self.hosts[-1].block_positions[-1]) + 1

    @property
    def anchor_rows(self) -> int:
        return sum(host.anchor_rows for host in self.hosts)

    def cache_rows(self, layer) -> int:
        return sum(host.cache.length(layer) for host in self.hosts)

    def block_hidden(self) -> torch.Tensor:
        return torch.cat(self.hidden, dim=0)


def make_group(config: StrategyConfig, hosts: Optional[int] = None) -> HostGroup:
    return HostGroup(config.hosts if hosts is None else hosts, schedule=config.schedule, seed=config.seed)

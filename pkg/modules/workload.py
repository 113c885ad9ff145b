from dataclasses import dataclass
from typing import Optional

import torch

from apb_helper.errors import ConfigError

# the top NEEDLE_PERIOD token ids are kept out of the filler so a planted needle is unique
NEEDLE_PERIOD = 4


@dataclass(frozen=True)
class NeedleSpec:
    """A planted span of the document, filled with a repeating pattern of reserved token ids"""
    start: int
    length: int

    @property
    def stop(self):
        return self.start + self.length

    def indices(self):
        return range(self.start, self.stop)

    def pattern(self, vocab):
        reserved = torch.arange(vocab - NEEDLE_PERIOD, vocab)
        return reserved[torch.arange(self.length) % NEEDLE_PERIOD]


def make_workload(n, query_len, seed, needle: Optional[NeedleSpec] = None, vocab=256) -> torch.Tensor:
    """
    Builds a seeded synthetic input of n tokens; the last query_len tokens form the query.

    Args:
        n: total input length (document + query)
        query_len: query length, the needle must fit in the document before it
        seed: generator seed, same seed gives the same sequence
        needle: optional planted span
        vocab: vocabulary size of the model

    Returns:
        LongTensor of shape (n,)
    """
    if vocab <= NEEDLE_PERIOD:
        raise ConfigError(f'vocab must exceed {NEEDLE_PERIOD} reserved needle ids, got {vocab}')
    if not 0 <= query_len < n:
        raise ConfigError(f'query length must lie in [0, {n}), got {query_len}')

    generator = torch.Generator().manual_seed(int(seed))
    tokens = torch.randint(0, vocab - NEEDLE_PERIOD, (n,), generator=generator)

    if needle is not None:
        if needle.start < 0 or needle.length < 1 or needle.stop > n - query_len:
            raise ConfigError(f'needle span [{needle.start}, {needle.stop}) lies outside the {n - query_len}-token document')
        tokens[needle.start:needle.stop] = needle.pattern(vocab)

    return tokens

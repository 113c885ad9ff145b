from dataclasses import dataclass
from typing import Iterable, Optional

import einops
import torch
import torch.nn as nn

from apb_helper.errors import ContractViolation, ScorerWeightsUnavailable


class RetainingHead(nn.Module):
    """Per-KV-head two-layer MLP mapping [q, k, v] features of a token to one importance score."""

    def __init__(self, kv_heads, in_features, intermediate):
        super().__init__()
        self.w1 = nn.Parameter(torch.zeros(kv_heads, in_features, intermediate))
        self.w2 = nn.Parameter(torch.zeros(kv_heads, intermediate))

    @property
    def intermediate(self):
        return self.w1.shape[-1]

    def forward(self, features):
        hidden = nn.functional.silu(torch.einsum('knf,kfr->knr', features, self.w1))
        return torch.einsum('knr,kr->kn', hidden, self.w2)


@dataclass
class CompressedBlock:
    indices: torch.Tensor
    keys: torch.Tensor
    values: torch.Tensor
    positions: torch.Tensor

    def __len__(self):
        return int(self.indices.numel())


def retaining_head_score(q, k, v, head: Optional[RetainingHead], group, layer=None, counter=None) -> torch.Tensor:
    """
    Scores every block token with the layer's retaining head.

    q: (heads, n, hd), k/v: (kv_heads, n, hd). Query heads of one group are averaged,
    features are [q, k, v] per KV head and the per-head scores are reduced by max.
    """
    if head is None:
        raise ScorerWeightsUnavailable(layer)

    q_grouped = einops.reduce(q, '(k g) n c -> k n c', 'mean', g=group)
    features = torch.cat([q_grouped, k, v], dim=-1)
    scores = head(features)

    if counter is not None:
        kv_heads, n, in_features = features.shape
        counter.add('retain', 2.0 * kv_heads * n * (in_features * head.intermediate + head.intermediate))

    return scores.amax(dim=0)


def random_score(seed, block_len) -> torch.Tensor:
    generator = torch.Generator().manual_seed(int(seed))
    return torch.rand(block_len, generator=generator)


def oracle_score(block_len, needle_indices: Iterable[int] = ()) -> torch.Tensor:
    scores = torch.zeros(block_len)
    needle_indices = list(needle_indices)
    if needle_indices:
        scores[torch.as_tensor(needle_indices, dtype=torch.long)] = float('inf')
    return scores


def select_top(scores, passing_len) -> torch.Tensor:
    if passing_len < 0:
        raise ContractViolation(f'passing length must be >= 0, got {passing_len}')

    scores = torch.as_tensor(scores, dtype=torch.float32)
    if bool(torch.isnan(scores).any()):
        raise ContractViolation('importance scores contain NaN')

    count = min(passing_len, scores.numel())
    # stable descending sort keeps equal scores in index order, so ties go to the lower index
    order = torch.sort(scores, descending=True, stable=True).indices[:count]
    return torch.sort(order).values


def compress_block(keys, values, positions, indices) -> CompressedBlock:
    indices = torch.as_tensor(indices, dtype=torch.long)
    n = keys.shape[-2]

    if indices.numel() > 0:
        if int(indices.min()) < 0 or int(indices.max()) >= n:
            raise ContractViolation(f'compression index out of range for a block of {n} rows: {indices.tolist()}')
        if indices.numel() > 1 and not bool((indices[1:] > indices[:-1]).all()):
            raise ContractViolation(f'compression indices must be strictly ascending: {indices.tolist()}')

    positions = torch.as_tensor(positions, dtype=torch.long)
    return CompressedBlock(
        indices=indices,
        keys=keys[..., indices, :],
        values=values[..., indices, :],
        positions=positions[indices],
    )

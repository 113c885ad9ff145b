import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import torch

from apb_helper.errors import ConfigError, ContractViolation, EmptyAttentionRow


DEFAULT_TILE_SIZE = 64


class MaskMode(Enum):
    APB = "apb"
    CAUSAL = "causal"
    FULL = "full"


@dataclass(frozen=True)
class MaskSpec:
    """
    Block-structured boolean mask over keys laid out as [anchor | passing | block].

    Query rows are the anchor rows followed by the block rows. Anchor queries see
    anchor keys causally and nothing else; block queries see every anchor key, every
    passing key and the block keys up to their own index.

    CAUSAL is the same rule with no anchor (the passing segment acts as a fully
    visible prefix). FULL makes every key visible and leaves the query count free.
    """
    anchor_len: int
    passing_len: int
    block_len: int
    mode: MaskMode = MaskMode.APB

    def __post_init__(self):
        if min(self.anchor_len, self.passing_len, self.block_len) < 0:
            raise ContractViolation(f'negative mask segment in {self}')
        if self.mode == MaskMode.CAUSAL and self.anchor_len != 0:
            raise ContractViolation('causal mask cannot carry an anchor segment')
        if self.mode == MaskMode.FULL and self.key_len < 1:
            raise ContractViolation('full mask needs at least one key')
        if self.mode != MaskMode.FULL and self.anchor_len + self.block_len < 1:
            raise ContractViolation('mask has no query rows')

    @classmethod
    def causal(cls, block_len, prefix_len=0):
        return cls(0, prefix_len, block_len, MaskMode.CAUSAL)

    @classmethod
    def full(cls, key_len):
        return cls(0, key_len, 0, MaskMode.FULL)

    @property
    def key_len(self):
        return self.anchor_len + self.passing_len + self.block_len

    @property
    def query_len(self) -> Optional[int]:
        if self.mode == MaskMode.FULL:
            return None
        return self.anchor_len + self.block_len

    def check(self, query_rows, key_rows):
        if key_rows != self.key_len:
            raise ContractViolation(f'mask expects {self.key_len} keys, got {key_rows}')
        if self.query_len is not None and query_rows != self.query_len:
            raise ContractViolation(f'mask expects {self.query_len} query rows, got {query_rows}')

    def visible(self, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
        if self.mode == MaskMode.FULL:
            return torch.ones(torch.broadcast_shapes(rows.shape, cols.shape), dtype=torch.bool)

        a, p = self.anchor_len, self.passing_len
        anchor_row = rows < a
        in_anchor = cols < a
        in_passing = (cols >= a) & (cols < a + p)
        in_block = cols >= a + p

        anchor_part = in_anchor & (~anchor_row | (cols <= rows))
        passing_part = in_passing & ~anchor_row
        block_part = in_block & ~anchor_row & ((cols - a - p) <= (rows - a))
        return anchor_part | passing_part | block_part

    def dense(self, query_rows=None) -> torch.Tensor:
        if query_rows is None:
            query_rows = self.query_len
        assert query_rows is not None, 'full mask needs an explicit query count'
        rows = torch.arange(query_rows).unsqueeze(1)
        cols = torch.arange(self.key_len).unsqueeze(0)
        return self.visible(rows, cols)

    def counted_entries(self, query_rows) -> float:
        # causal triangles count as half squares, rectangles exactly
        if self.mode == MaskMode.FULL:
            return float(query_rows) * float(self.key_len)
        a, p, b = float(self.anchor_len), float(self.passing_len), float(self.block_len)
        return a * a / 2 + b * (a + p) + b * b / 2


@dataclass
class PartialAttention:
    out: torch.Tensor
    lse: torch.Tensor

    def __post_init__(self):
        if self.out.shape[:-1] != self.lse.shape:
            raise ContractViolation(f'partial attention rows mismatch: out {tuple(self.out.shape)} vs lse {tuple(self.lse.shape)}')

    @property
    def rows(self):
        return self.out.shape[-2]


def softmax_row(scores, mask=None) -> torch.Tensor:
    scores = torch.as_tensor(scores, dtype=torch.float32)
    if mask is None:
        mask = torch.ones_like(scores, dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)

    if not bool(mask.any()):
        raise EmptyAttentionRow([0])

    masked = scores.double().masked_fill(~mask, float('-inf'))
    e = torch.exp(masked - masked.max())
    return (e / e.sum()).float()


def rope_frequencies(positions, head_dim, theta_base):
    if head_dim % 2 != 0:
        raise ConfigError(f'rotary embedding needs an even head dim, got {head_dim}')
    inv_freq = 1.0 / (theta_base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    angles = torch.outer(positions.to(torch.float64), inv_freq)
    return angles.cos(), angles.sin()


def rope_apply(x: torch.Tensor, positions, theta_base: float) -> torch.Tensor:
    tokens, head_dim = x.shape[-2], x.shape[-1]
    positions = torch.as_tensor(positions, dtype=torch.long)
    if positions.shape != (tokens,):
        raise ContractViolation(f'{tokens} tokens but {tuple(positions.shape)} positions')

    cos, sin = rope_frequencies(positions, head_dim, theta_base)
    x_real, x_imag = x.double().unflatten(-1, (-1, 2)).unbind(-1)
    out = torch.stack([x_real * cos - x_imag * sin, x_real * sin + x_imag * cos], dim=-1).flatten(-2)
    return out.to(x.dtype)


def tiled_attention(q, k, v, mask: MaskSpec, scale=None, tile_size=DEFAULT_TILE_SIZE, counter=None, stage='attention') -> PartialAttention:
    """
    Streaming masked attention over fixed-size key tiles.

    q: (..., nq, hd), k: (..., nk, hd), v: (..., nk, hv) with identical leading dims.
    Returns the normalised output and the per-row log-sum-exp of the scaled scores.
    """
    nq, head_dim = q.shape[-2], q.shape[-1]
    nk = k.shape[-2]

    if k.shape[-1] != head_dim or k.shape[:-2] != q.shape[:-2]:
        raise ContractViolation(f'query {tuple(q.shape)} and key {tuple(k.shape)} shapes disagree')
    if v.shape[:-1] != k.shape[:-1]:
        raise ContractViolation(f'key {tuple(k.shape)} and value {tuple(v.shape)} row counts disagree')
    if tile_size < 1:
        raise ContractViolation(f'tile size must be positive, got {tile_size}')
    mask.check(nq, nk)

    if scale is None:
        scale = 1.0 / math.sqrt(head_dim)

    lead = q.shape[:-2]
    rows = torch.arange(nq).unsqueeze(1)
    running_max = torch.full((*lead, nq), float('-inf'), dtype=torch.float32)
    denom = torch.zeros((*lead, nq), dtype=torch.float64)
    acc = torch.zeros((*lead, nq, v.shape[-1]), dtype=torch.float32)

    for start in range(0, nk, tile_size):
        end = min(start + tile_size, nk)
        visible = mask.visible(rows, torch.arange(start, end).unsqueeze(0))
        if not bool(visible.any()):
            continue

        scores = torch.matmul(q, k[..., start:end, :].transpose(-1, -2)) * scale
        scores = scores.masked_fill(~visible, float('-inf'))

        new_max = torch.maximum(running_max, scores.amax(dim=-1))
        shift = torch.where(torch.isinf(new_max), torch.zeros_like(new_max), new_max)

        p = torch.exp(scores - shift.unsqueeze(-1))
        alpha = torch.exp(running_max - shift)

        denom = denom * alpha.double() + p.sum(dim=-1, dtype=torch.float64)
        acc = acc * alpha.unsqueeze(-1) + torch.matmul(p, v[..., start:end, :])
        running_max = new_max

    empty = denom == 0
    if bool(empty.any()):
        raise EmptyAttentionRow(torch.nonzero(empty.reshape(-1, nq).any(dim=0)).flatten().tolist())

    out = (acc.double() / denom.unsqueeze(-1)).float()
    lse = (running_max.double() + denom.log()).float()

    if counter is not None:
        heads = math.prod(lead)
        counter.add(stage, 4.0 * mask.counted_entries(nq) * head_dim * heads)

    return PartialAttention(out=out, lse=lse)


def merge_partial_lse(parts: Sequence[PartialAttention]) -> PartialAttention:
    if len(parts) == 0:
        raise ContractViolation('nothing to merge')

    shape = parts[0].out.shape
    for part in parts[1:]:
        if part.out.shape != shape:
            raise ContractViolation(f'cannot merge partial attentions of shapes {tuple(shape)} and {tuple(part.out.shape)}')

    if len(parts) == 1:
        return parts[0]

    lse = torch.stack([part.lse.double() for part in parts])
    total = torch.logsumexp(lse, dim=0)
    weights = torch.exp(lse - total)

    out = torch.zeros(shape, dtype=torch.float64)
    for part, weight in zip(parts, weights):
        out = out + part.out.double() * weight.unsqueeze(-1)

    return PartialAttention(out=out.float(), lse=total.float())


def merge_partial_attention(parts: Sequence[PartialAttention]) -> torch.Tensor:
    return merge_partial_lse(parts).out

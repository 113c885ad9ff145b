import math
from dataclasses import dataclass, field
from typing import List, Optional

import einops
import torch
import torch.nn as nn

from diffusers.utils import logging

from apb_helper.compressor import RetainingHead
from apb_helper.costmodel import timed
from apb_helper.errors import ConfigError, ContractViolation
from apb_helper.tensor_core import DEFAULT_TILE_SIZE, MaskSpec, PartialAttention, rope_apply, tiled_attention


logger = logging.get_logger(__name__)  # pylint: disable=invalid-name


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    kv_heads: int = 2
    intermediate: int = 128
    vocab: int = 256
    rope_theta: float = 10000.0
    retain_intermediate: int = 1024

    def __post_init__(self):
        for name in ('layers', 'hidden', 'heads', 'kv_heads', 'intermediate', 'vocab', 'retain_intermediate'):
            if getattr(self, name) < 1:
                raise ConfigError(f'model {name} must be >= 1, got {getattr(self, name)}')
        if self.heads % self.kv_heads != 0:
            raise ConfigError(f'heads ({self.heads}) must be divisible by kv_heads ({self.kv_heads})')
        if self.hidden % self.heads != 0:
            raise ConfigError(f'hidden ({self.hidden}) must be divisible by heads ({self.heads})')
        if self.head_dim % 2 != 0:
            raise ConfigError(f'head dim must be even for rotary positions, got {self.head_dim}')

    @property
    def head_dim(self):
        return self.hidden // self.heads

    @property
    def group(self):
        return self.heads // self.kv_heads

    @property
    def kv_dim(self):
        return self.kv_heads * self.head_dim


class ToyDecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig, with_retaining_head=True):
        super().__init__()

        self.q_proj = nn.Linear(config.hidden, config.hidden, bias=False)
        self.k_proj = nn.Linear(config.hidden, config.kv_dim, bias=False)
        self.v_proj = nn.Linear(config.hidden, config.kv_dim, bias=False)
        self.o_proj = nn.Linear(config.hidden, config.hidden, bias=False)

        self.gate_proj = nn.Linear(config.hidden, config.intermediate, bias=False)
        self.up_proj = nn.Linear(config.hidden, config.intermediate, bias=False)
        self.down_proj = nn.Linear(config.intermediate, config.hidden, bias=False)

        self.retaining_head = None
        if with_retaining_head:
            self.retaining_head = RetainingHead(config.kv_heads, 3 * config.head_dim, config.retain_intermediate)


class ToyTransformer(nn.Module):
    """
    Decoder-only toy transformer: token embedding, L blocks of (GQA attention with
    rotary positions + SwiGLU FFN) with residuals, LM head tied to the embedding.
    Normalisation layers are left out on purpose; every strategy runs this same block.
    """

    def __init__(self, config: ModelConfig, with_retaining_heads=True):
        super().__init__()
        self.config = config
        self.embed_tokens = nn.Embedding(config.vocab, config.hidden)
        self.layers = nn.ModuleList([ToyDecoderLayer(config, with_retaining_heads) for _ in range(config.layers)])
        self.requires_grad_(False)

    @property
    def has_retaining_heads(self):
        return all(layer.retaining_head is not None for layer in self.layers)

    @classmethod
    def from_seed(cls, config: ModelConfig, seed=0, with_retaining_heads=True, std=0.02):
        model = cls(config, with_retaining_heads=with_retaining_heads)
        model.initialize_weights(seed, std=std)
        return model

    @torch.no_grad()
    def initialize_weights(self, seed, std=0.02):
        generator = torch.Generator().manual_seed(int(seed))
        for _, param in self.named_parameters():
            param.copy_(torch.randn(param.shape, generator=generator) * std)
        logger.debug(f'initialised {sum(p.numel() for p in self.parameters())} weights from seed {seed}')

    @torch.no_grad()
    def embed(self, tokens):
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        if tokens.numel() > 0 and (int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab):
            raise ContractViolation(f'token ids must lie in [0, {self.config.vocab})')
        return self.embed_tokens(tokens)

    @torch.no_grad()
    def lm_logits(self, hidden):
        return hidden @ self.embed_tokens.weight.T


@dataclass
class KVCache:
    keys: List[Optional[torch.Tensor]] = field(default_factory=list)
    values: List[Optional[torch.Tensor]] = field(default_factory=list)
    positions: List[Optional[torch.Tensor]] = field(default_factory=list)

    @classmethod
    def empty(cls, layers):
        return cls([None] * layers, [None] * layers, [None] * layers)

    @property
    def layers(self):
        return len(self.keys)

    def length(self, layer):
        return 0 if self.keys[layer] is None else self.keys[layer].shape[-2]

    def append(self, layer, keys, values, positions):
        positions = torch.as_tensor(positions, dtype=torch.long)
        if keys.shape[-2] != values.shape[-2] or keys.shape[-2] != positions.numel():
            raise ContractViolation(f'cache append of {keys.shape[-2]} keys, {values.shape[-2]} values, {positions.numel()} positions')
        if self.keys[layer] is None:
            self.keys[layer], self.values[layer], self.positions[layer] = keys, values, positions
        else:
            self.keys[layer] = torch.cat([self.keys[layer], keys], dim=-2)
            self.values[layer] = torch.cat([self.values[layer], values], dim=-2)
            self.positions[layer] = torch.cat([self.positions[layer], positions])

    def clone(self):
        copy = lambda xs: [None if x is None else x.clone() for x in xs]
        return KVCache(copy(self.keys), copy(self.values), copy(self.positions))


@dataclass
class ReferencePrefill:
    hidden: torch.Tensor
    cache: KVCache
    logits: torch.Tensor
    next_token: int


def linear(x, module: nn.Linear, counter=None, stage='other'):
    with timed(counter, stage):
        out = module(x)
    if counter is not None:
        counter.add(stage, 2.0 * math.prod(x.shape[:-1]) * module.in_features * module.out_features)
    return out


@torch.no_grad()
def project_qkv(hidden, layer, model: ToyTransformer, positions, counter=None):
    config = model.config
    if hidden.shape[-1] != config.hidden:
        raise ContractViolation(f'hidden states have {hidden.shape[-1]} columns, model width is {config.hidden}')
    positions = torch.as_tensor(positions, dtype=torch.long)
    if positions.numel() != hidden.shape[0]:
        raise ContractViolation(f'{hidden.shape[0]} tokens but {positions.numel()} positions')

    block = model.layers[layer]
    q = linear(hidden, block.q_proj, counter, 'qkv_proj')
    k = linear(hidden, block.k_proj, counter, 'qkv_proj')
    v = linear(hidden, block.v_proj, counter, 'qkv_proj')

    q = einops.rearrange(q, 'n (h c) -> h n c', h=config.heads)
    k = einops.rearrange(k, 'n (h c) -> h n c', h=config.kv_heads)
    v = einops.rearrange(v, 'n (h c) -> h n c', h=config.kv_heads)

    with timed(counter, 'other'):
        q = rope_apply(q, positions, config.rope_theta)
        k = rope_apply(k, positions, config.rope_theta)

    return q, k, v


def expand_kv(x, group):
    return einops.repeat(x, 'k n c -> (k g) n c', g=group)


@torch.no_grad()
def grouped_attention(q, k, v, mask: MaskSpec, config: ModelConfig, tile_size=DEFAULT_TILE_SIZE, counter=None) -> PartialAttention:
    group = q.shape[0] // k.shape[0]
    with timed(counter, 'attention'):
        return tiled_attention(q, expand_kv(k, group), expand_kv(v, group), mask, tile_size=tile_size, counter=counter)


@torch.no_grad()
def ffn_forward(x, layer, model: ToyTransformer, counter=None):
    if x.shape[-1] != model.config.hidden:
        raise ContractViolation(f'ffn input has {x.shape[-1]} columns, model width is {model.config.hidden}')
    block = model.layers[layer]
    gate = linear(x, block.gate_proj, counter, 'ffn')
    up = linear(x, block.up_proj, counter, 'ffn')
    return linear(nn.functional.silu(gate) * up, block.down_proj, counter, 'ffn')


@torch.no_grad()
def finish_layer(hidden, attn_out, layer, model: ToyTransformer, counter=None):
    merged = einops.rearrange(attn_out, 'h n c -> n (h c)')
    hidden = hidden + linear(merged, model.layers[layer].o_proj, counter, 'o_proj')
    return hidden + ffn_forward(hidden, layer, model, counter)


@torch.no_grad()
def reference_prefill(tokens, model: ToyTransformer, tile_size=DEFAULT_TILE_SIZE, counter=None) -> ReferencePrefill:
    tokens = torch.as_tensor(tokens, dtype=torch.long)
    if tokens.numel() == 0:
        raise ContractViolation('reference prefill needs at least one token')

    n = tokens.numel()
    positions = torch.arange(n)
    hidden = model.embed(tokens)
    cache = KVCache.empty(model.config.layers)

    for layer in range(model.config.layers):
        q, k, v = project_qkv(hidden, layer, model, positions, counter)
        attn = grouped_attention(q, k, v, MaskSpec.causal(n), model.config, tile_size, counter)
        hidden = finish_layer(hidden, attn.out, layer, model, counter)
        cache.append(layer, k, v, positions)

    logits = model.lm_logits(hidden[-1])
    return ReferencePrefill(hidden=hidden, cache=cache, logits=logits, next_token=int(torch.argmax(logits)))

import math

import pytest
import torch

from apb_helper.models.toy_llama import ModelConfig, ToyTransformer


TOY_DIMS = dict(layers=2, hidden=64, heads=4, kv_heads=2, intermediate=128, vocab=256)


def dense_attention(q, k, v, visible, scale=None):
    """Naive float64 masked attention over the whole score matrix."""
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = torch.matmul(q.double(), k.double().transpose(-1, -2)) * scale
    scores = scores.masked_fill(~visible, float('-inf'))
    lse = torch.logsumexp(scores, dim=-1)
    out = torch.matmul(torch.softmax(scores, dim=-1), v.double())
    return out, lse


def apb_visible(anchor_len, passing_len, block_len):
    """Mask rows [anchor; block] over keys [anchor | passing | block], built row by row."""
    a, p, b = anchor_len, passing_len, block_len
    mask = torch.zeros(a + b, a + p + b, dtype=torch.bool)
    for r in range(a):
        mask[r, :r + 1] = True
    for i in range(b):
        mask[a + i, :a + p] = True
        mask[a + i, a + p:a + p + i + 1] = True
    return mask


def naive_rope(x, positions, theta_base):
    head_dim = x.shape[-1]
    inv_freq = theta_base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = positions.double().unsqueeze(-1) * inv_freq
    pairs = torch.view_as_complex(x.double().reshape(*x.shape[:-1], head_dim // 2, 2).contiguous())
    rotated = pairs * torch.polar(torch.ones_like(angles), angles)
    return torch.view_as_real(rotated).reshape(x.shape)


def naive_qkv(hidden, layer, model, positions):
    config = model.config
    block = model.layers[layer]
    h = hidden.double()
    q = (h @ block.q_proj.weight.double().T).reshape(-1, config.heads, config.head_dim).transpose(0, 1)
    k = (h @ block.k_proj.weight.double().T).reshape(-1, config.kv_heads, config.head_dim).transpose(0, 1)
    v = (h @ block.v_proj.weight.double().T).reshape(-1, config.kv_heads, config.head_dim).transpose(0, 1)
    return naive_rope(q, positions, config.rope_theta), naive_rope(k, positions, config.rope_theta), v


def naive_tail(hidden, attn, layer, model):
    block = model.layers[layer]
    merged = attn.transpose(0, 1).reshape(hidden.shape[0], -1)
    hidden = hidden.double() + merged @ block.o_proj.weight.double().T
    gate = hidden @ block.gate_proj.weight.double().T
    up = hidden @ block.up_proj.weight.double().T
    return hidden + (torch.nn.functional.silu(gate) * up) @ block.down_proj.weight.double().T


def naive_prefill(tokens, model, positions=None, visible=None, extra_keys=None):
    """
    Float64 forward over `tokens`; `extra_keys(layer)` may return (k, v, insert_at) rows spliced
    into the key set before attention, with `visible` the dense mask over the final key order.
    """
    config = model.config
    n = tokens.numel()
    positions = torch.arange(n) if positions is None else positions
    visible = torch.tril(torch.ones(n, n, dtype=torch.bool)) if visible is None else visible
    hidden = model.embed_tokens.weight[tokens].double()

    for layer in range(config.layers):
        q, k, v = naive_qkv(hidden, layer, model, positions)
        if extra_keys is not None:
            extra_k, extra_v, at = extra_keys(layer)
            k = torch.cat([k[:, :at], extra_k.double(), k[:, at:]], dim=1)
            v = torch.cat([v[:, :at], extra_v.double(), v[:, at:]], dim=1)
        k = k.repeat_interleave(config.group, dim=0)
        v = v.repeat_interleave(config.group, dim=0)
        attn, _ = dense_attention(q, k, v, visible)
        hidden = naive_tail(hidden, attn, layer, model)
    return hidden


@pytest.fixture(scope='session')
def toy_config():
    return ModelConfig(**TOY_DIMS)


@pytest.fixture(scope='session')
def toy_model(toy_config):
    return ToyTransformer.from_seed(toy_config, seed=0)


@pytest.fixture(scope='session')
def plain_model(toy_config):
    return ToyTransformer.from_seed(toy_config, seed=0, with_retaining_heads=False)


@pytest.fixture
def toy_tokens():
    generator = torch.Generator().manual_seed(1)
    return torch.randint(0, TOY_DIMS['vocab'], (256,), generator=generator)


@pytest.fixture(scope='session')
def oracles():
    class Oracles:
        attention = staticmethod(dense_attention)
        apb_visible = staticmethod(apb_visible)
        rope = staticmethod(naive_rope)
        qkv = staticmethod(naive_qkv)
        prefill = staticmethod(naive_prefill)
    return Oracles

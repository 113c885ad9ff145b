import time
from dataclasses import dataclass, field
from typing import List, Optional

import torch

from diffusers.utils import logging

from apb_helper.errors import ConfigError
from apb_helper.models.toy_llama import KVCache, ToyTransformer, finish_layer, grouped_attention, project_qkv, reference_prefill
from apb_helper.pipelines.common import PrefillResult
from apb_helper.simnet import HostGroup, gather
from apb_helper.tensor_core import DEFAULT_TILE_SIZE, MaskSpec, merge_partial_lse


logger = logging.get_logger(__name__)  # pylint: disable=invalid-name


@dataclass
class GenerateResult:
    tokens: List[int]
    per_host: List[List[int]]
    # per host, the hidden states of every decode step
    hidden: List[List[torch.Tensor]] = field(default_factory=list)
    seconds: float = 0.0


def accu_decode_step(ctx, tokens, positions, cache: KVCache, model: ToyTransformer, tile_size=DEFAULT_TILE_SIZE):
    """
    One decode step over the distributed caches; a generator yielding one Gather per layer.

    Every host attends the new tokens against its own block cache. Only the last host
    also sees the new tokens' keys (causally) and appends them to its cache. The
    partials are merged by log-sum-exp and the layer tail runs identically everywhere.
    """
    hidden = model.embed(tokens)
    x_len = hidden.shape[0]

    for layer in range(model.config.layers):
        q, k, v = project_qkv(hidden, layer, model, positions, ctx.counter)
        prefix = cache.length(layer)

        if ctx.is_last:
            keys = k if prefix == 0 else torch.cat([cache.keys[layer], k], dim=-2)
            values = v if prefix == 0 else torch.cat([cache.values[layer], v], dim=-2)
            part = grouped_attention(q, keys, values, MaskSpec.causal(x_len, prefix_len=prefix), model.config, tile_size, ctx.counter)
            cache.append(layer, k, v, positions)
        else:
            part = grouped_attention(q, cache.keys[layer], cache.values[layer], MaskSpec.full(prefix), model.config, tile_size, ctx.counter)

        parts = yield gather(part, root=ctx.hosts, tag=f'decode/layer{layer}')
        hidden = finish_layer(hidden, merge_partial_lse(parts).out, layer, model, ctx.counter)

    return hidden, model.lm_logits(hidden[-1])


def generate_host(ctx, prefill: PrefillResult, model: ToyTransformer, max_new_tokens, stop_token, tile_size):
    cache = prefill.caches[ctx.host - 1].clone()
    base = prefill.decode_base
    generated = []
    hidden_states = []

    if prefill.query.numel() > 0:
        x = prefill.query
    else:
        # no query chunk: the prefill logits of the last document row pick the first token
        generated.append(prefill.first_token)
        x = torch.tensor([prefill.first_token])

    t = 0
    while len(generated) < max_new_tokens and (stop_token is None or not generated or generated[-1] != stop_token):
        positions = torch.arange(base + t, base + t + x.numel())
        hidden, logits = yield from accu_decode_step(ctx, x, positions, cache, model, tile_size)
        hidden_states.append(hidden)
        t += x.numel()
        token = int(torch.argmax(logits))
        generated.append(token)
        x = torch.tensor([token])

    return generated, hidden_states


def generate(prefill: PrefillResult, model: ToyTransformer, max_new_tokens=1, stop_token: Optional[int] = None,
             group: Optional[HostGroup] = None, tile_size=DEFAULT_TILE_SIZE) -> GenerateResult:
    if max_new_tokens < 1:
        raise ConfigError(f'max_new_tokens must be >= 1, got {max_new_tokens}')

    group = group or HostGroup(len(prefill.hosts))
    if group.hosts != len(prefill.hosts):
        raise ConfigError(f'decode group has {group.hosts} hosts, prefill ran on {len(prefill.hosts)}')

    start = time.perf_counter()
    outputs = group.run(generate_host, prefill, model, max_new_tokens, stop_token, tile_size)
    seconds = time.perf_counter() - start

    per_host = [tokens for tokens, _ in outputs]
    logger.info(f'generated {len(per_host[-1])} tokens in {seconds:.3f}s')
    return GenerateResult(tokens=per_host[-1], per_host=per_host, hidden=[h for _, h in outputs], seconds=seconds)


@torch.no_grad()
def reference_generate(tokens, model: ToyTransformer, max_new_tokens=1, stop_token=None, tile_size=DEFAULT_TILE_SIZE):
    """Single-host greedy decoding by re-running the causal prefill on the growing sequence."""
    sequence = torch.as_tensor(tokens, dtype=torch.long)
    generated = []
    while len(generated) < max_new_tokens:
        token = reference_prefill(sequence, model, tile_size).next_token
        generated.append(token)
        if stop_token is not None and token == stop_token:
            break
        sequence = torch.cat([sequence, torch.tensor([token])])
    return generated

import time
from dataclasses import replace

import torch

from diffusers.utils import logging

from apb_helper.layout import split_context, split_document_query
from apb_helper.models.toy_llama import KVCache, ToyTransformer, finish_layer, grouped_attention, project_qkv
from apb_helper.pipelines.common import HostPrefill, PrefillResult, StrategyConfig, StrategyKind, make_group
from apb_helper.simnet import ring_pass
from apb_helper.tensor_core import MaskSpec, merge_partial_lse


logger = logging.get_logger(__name__)  # pylint: disable=invalid-name


def block_offsets(blocks):
    offsets, start = [], 0
    for block in blocks:
        offsets.append(start)
        start += block.numel()
    return offsets


def ring_host(ctx, blocks, offsets, model: ToyTransformer, config: StrategyConfig):
    block = blocks[ctx.host - 1]
    positions = torch.arange(offsets[ctx.host - 1], offsets[ctx.host - 1] + block.numel())
    hidden = model.embed(block)
    cache = KVCache.empty(model.config.layers)

    for layer in range(model.config.layers):
        q, k, v = project_qkv(hidden, layer, model, positions, ctx.counter)
        parts = [grouped_attention(q, k, v, MaskSpec.causal(block.numel()), model.config, config.tile_size, ctx.counter)]

        held = dict(keys=k, values=v, source=ctx.host)
        for step in range(ctx.hosts - 1):
            held = yield ring_pass(held, step, tag=f'prefill/layer{layer}/ring{step}')
            # shards from later hosts are fully masked for this block's queries
            if held['source'] < ctx.host:
                full = MaskSpec.full(held['keys'].shape[-2])
                parts.append(grouped_attention(q, held['keys'], held['values'], full, model.config, config.tile_size, ctx.counter))

        hidden = finish_layer(hidden, merge_partial_lse(parts).out, layer, model, ctx.counter)
        cache.append(layer, k, v, positions)

    return HostPrefill(hidden=hidden, cache=cache, block_positions=positions, logits=model.lm_logits(hidden[-1]))


def ring_attention_prefill(tokens, model: ToyTransformer, config: StrategyConfig, query_len=0, group=None) -> PrefillResult:
    split = split_document_query(tokens, query_len)
    blocks = split_context(split.document, config.hosts)
    group = group or make_group(config)

    start = time.perf_counter()
    hosts = group.run(ring_host, blocks, block_offsets(blocks), model, config)
    seconds = time.perf_counter() - start

    logger.info(f'{config.kind.value} prefill of {split.document.numel()} tokens on {config.hosts} hosts took {seconds:.3f}s')
    return PrefillResult(
        strategy=config.kind, hosts=hosts, query=split.query,
        trace=group.trace, counters=group.counters, seconds=seconds,
    )


def full_attention_prefill(tokens, model: ToyTransformer, config: StrategyConfig, query_len=0, group=None) -> PrefillResult:
    """Single-host causal prefill; the ring with one host never passes anything."""
    config = replace(config, kind=StrategyKind.FULL, hosts=1)
    return ring_attention_prefill(tokens, model, config, query_len=query_len, group=group)

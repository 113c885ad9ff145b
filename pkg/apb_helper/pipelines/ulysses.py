import time

import torch

from diffusers.utils import logging

from apb_helper.costmodel import timed
from apb_helper.errors import ConfigError
from apb_helper.layout import split_context, split_document_query
from apb_helper.models.toy_llama import KVCache, ToyTransformer, finish_layer, project_qkv
from apb_helper.pipelines.common import HostPrefill, PrefillResult, StrategyConfig, make_group
from apb_helper.pipelines.ring import block_offsets
from apb_helper.simnet import all_to_all
from apb_helper.tensor_core import MaskSpec, tiled_attention


logger = logging.get_logger(__name__)  # pylint: disable=invalid-name


def head_shards(heads, kv_heads, hosts):
    """
    Query-head range and the KV heads it needs, per host.

    With more hosts than KV heads several hosts share (and each receive) one KV head.
    """
    if hosts > heads:
        raise ConfigError(f'ulysses cannot shard {heads} heads over {hosts} hosts')
    if heads % hosts != 0:
        raise ConfigError(f'ulysses needs heads ({heads}) divisible by hosts ({hosts})')

    group = heads // kv_heads
    per_host = heads // hosts
    shards = []
    for j in range(hosts):
        q_heads = range(j * per_host, (j + 1) * per_host)
        kv_range = range(q_heads[0] // group, q_heads[-1] // group + 1)
        shards.append((q_heads, kv_range))
    return shards


def ulysses_host(ctx, blocks, offsets, shards, model: ToyTransformer, config: StrategyConfig):
    block = blocks[ctx.host - 1]
    positions = torch.arange(offsets[ctx.host - 1], offsets[ctx.host - 1] + block.numel())
    hidden = model.embed(block)
    cache = KVCache.empty(model.config.layers)

    group = model.config.group
    my_heads, my_kv = shards[ctx.host - 1]
    kv_index = torch.tensor([h // group - my_kv[0] for h in my_heads])
    total = sum(b.numel() for b in blocks)

    for layer in range(model.config.layers):
        q, k, v = project_qkv(hidden, layer, model, positions, ctx.counter)

        outgoing = [
            dict(q=q[heads.start:heads.stop], k=k[kv.start:kv.stop], v=v[kv.start:kv.stop])
            for heads, kv in shards
        ]
        incoming = yield all_to_all(outgoing, tag=f'prefill/layer{layer}/qkv')

        with timed(ctx.counter, 'comm'):
            q_all = torch.cat([part['q'] for part in incoming], dim=-2)
            k_all = torch.cat([part['k'] for part in incoming], dim=-2)[kv_index]
            v_all = torch.cat([part['v'] for part in incoming], dim=-2)[kv_index]

        with timed(ctx.counter, 'attention'):
            attn = tiled_attention(q_all, k_all, v_all, MaskSpec.causal(total), tile_size=config.tile_size, counter=ctx.counter)

        outgoing = [attn.out[:, start:start + b.numel()] for start, b in zip(offsets, blocks)]
        incoming = yield all_to_all(outgoing, tag=f'prefill/layer{layer}/out')

        hidden = finish_layer(hidden, torch.cat(incoming, dim=0), layer, model, ctx.counter)
        cache.append(layer, k, v, positions)

    return HostPrefill(hidden=hidden, cache=cache, block_positions=positions, logits=model.lm_logits(hidden[-1]))


def ulysses_prefill(tokens, model: ToyTransformer, config: StrategyConfig, query_len=0, group=None) -> PrefillResult:
    shards = head_shards(model.config.heads, model.config.kv_heads, config.hosts)
    split = split_document_query(tokens, query_len)
    blocks = split_context(split.document, config.hosts)
    group = group or make_group(config)

    start = time.perf_counter()
    hosts = group.run(ulysses_host, blocks, block_offsets(blocks), shards, model, config)
    seconds = time.perf_counter() - start

    logger.info(f'ulysses prefill of {split.document.numel()} tokens on {config.hosts} hosts took {seconds:.3f}s')
    return PrefillResult(
        strategy=config.kind, hosts=hosts, query=split.query,
        trace=group.trace, counters=group.counters, seconds=seconds,
    )

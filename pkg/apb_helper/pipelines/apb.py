import time
from dataclasses import replace

import torch

from diffusers.utils import logging

from apb_helper.compressor import compress_block, oracle_score, random_score, retaining_head_score, select_top
from apb_helper.costmodel import timed
from apb_helper.layout import HostLayout, build_apb_mask, build_host_layouts, split_document_query
from apb_helper.models.toy_llama import KVCache, ToyTransformer, finish_layer, grouped_attention, project_qkv
from apb_helper.pipelines.common import HostPrefill, PrefillResult, ScorerKind, StrategyConfig, StrategyKind, make_group
from apb_helper.simnet import all_gather
from apb_helper.utils import derive_seed


logger = logging.get_logger(__name__)  # pylint: disable=invalid-name


def score_block(ctx, q, k, v, layer, layout: HostLayout, model: ToyTransformer, config: StrategyConfig):
    if config.scorer == ScorerKind.RANDOM:
        return random_score(derive_seed(config.seed, ctx.host, layer), layout.block_len)
    if config.scorer == ScorerKind.ORACLE:
        local = [i - layout.doc_offset for i in config.needle_indices if layout.contains(i)]
        return oracle_score(layout.block_len, local)
    with timed(ctx.counter, 'retain'):
        head = model.layers[layer].retaining_head
        return retaining_head_score(q, k, v, head, model.config.group, layer=layer, counter=ctx.counter)


def passes_blocks(config: StrategyConfig, hosts):
    return config.use_passing and config.passing_len > 0 and hosts > 1


def apb_prefill_layer(ctx, hidden, layer, layout: HostLayout, model: ToyTransformer, config: StrategyConfig):
    """
    One APB layer on one host; a generator that yields its AllGather barriers.

    Returns (hidden over [anchor, block] rows, block K, block V, selected indices, passing K/V).
    """
    counter = ctx.counter
    q, k, v = project_qkv(hidden, layer, model, layout.positions, counter)

    a = layout.anchor_len
    k_anchor, v_anchor = k[:, :a], v[:, :a]
    k_block, v_block = k[:, a:], v[:, a:]

    selected = torch.zeros(0, dtype=torch.long)
    k_passing, v_passing = k[:, :0], v[:, :0]

    if passes_blocks(config, ctx.hosts):
        scores = score_block(ctx, q[:, a:], k_block, v_block, layer, layout, model, config)
        selected = select_top(scores, config.passing_len)
        compressed = compress_block(k_block, v_block, layout.block_positions, selected)

        gathered_k = yield all_gather(compressed.keys, tag=f'prefill/layer{layer}/k')
        gathered_v = yield all_gather(compressed.values, tag=f'prefill/layer{layer}/v')

        # only blocks from earlier hosts are visible; later ones are ignored
        with timed(counter, 'comm'):
            if ctx.host > 1:
                k_passing = torch.cat(gathered_k[:ctx.host - 1], dim=-2)
                v_passing = torch.cat(gathered_v[:ctx.host - 1], dim=-2)

    mask = build_apb_mask(a, k_passing.shape[-2], layout.block_len)
    keys = torch.cat([k_anchor, k_passing, k_block], dim=-2)
    values = torch.cat([v_anchor, v_passing, v_block], dim=-2)

    attn = grouped_attention(q, keys, values, mask, model.config, config.tile_size, counter)
    hidden = finish_layer(hidden, attn.out, layer, model, counter)

    return hidden, k_block, v_block, selected, (k_passing, v_passing)


def apb_host(ctx, layouts, model: ToyTransformer, config: StrategyConfig):
    layout = layouts[ctx.host - 1]
    hidden = model.embed(layout.tokens)
    cache = KVCache.empty(model.config.layers)
    result = HostPrefill(
        hidden=hidden, cache=cache, block_positions=layout.block_positions,
        logits=None, anchor_rows=layout.anchor_len,
    )

    for layer in range(model.config.layers):
        hidden, k_block, v_block, selected, passing = yield from apb_prefill_layer(ctx, hidden, layer, layout, model, config)
        # anchor K/V is recomputed per host and never cached
        cache.append(layer, k_block, v_block, layout.block_positions)
        if config.record_passing:
            result.selected[layer] = selected
            result.passing[layer] = passing

    result.hidden = hidden[layout.anchor_len:]
    result.logits = model.lm_logits(result.hidden[-1])
    return result


def apb_prefill(tokens, model: ToyTransformer, config: StrategyConfig, query_len=0, group=None) -> PrefillResult:
    split = split_document_query(tokens, query_len)
    if config.kind == StrategyKind.STAR:
        first_block = -(-split.document.numel() // config.hosts)
        config = config.for_star(first_block)

    layouts = build_host_layouts(split, config.hosts, config.anchor_len, config.embed_query, config.use_anchor)
    group = group or make_group(config)

    if passes_blocks(config, config.hosts) and config.scorer == ScorerKind.RETAIN and not model.has_retaining_heads:
        logger.warning('model has no retaining heads; scoring blocks with the random scorer instead')
        config = replace(config, scorer=ScorerKind.RANDOM)

    start = time.perf_counter()
    hosts = group.run(apb_host, layouts, model, config)
    seconds = time.perf_counter() - start

    logger.info(f'{config.kind.value} prefill of {split.document.numel()} tokens on {config.hosts} hosts '
                f'(l_a={config.anchor_len}, l_p={config.passing_len}) took {seconds:.3f}s')

    return PrefillResult(
        strategy=config.kind, hosts=hosts, query=split.query,
        trace=group.trace, counters=group.counters, seconds=seconds,
    )

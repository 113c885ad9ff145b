from dataclasses import dataclass
from typing import List

import torch

from apb_helper.errors import ContractViolation
from apb_helper.tensor_core import MaskSpec


@dataclass
class SplitInput:
    document: torch.Tensor
    query: torch.Tensor

    def __post_init__(self):
        if self.document.numel() < 1:
            raise ContractViolation('document must hold at least one token')


@dataclass
class HostLayout:
    host: int
    anchor_tokens: torch.Tensor
    block_tokens: torch.Tensor
    anchor_positions: torch.Tensor
    block_positions: torch.Tensor
    doc_offset: int = 0
    embed_query: bool = True
    has_anchor: bool = True

    @property
    def anchor_len(self):
        return int(self.anchor_tokens.numel())

    @property
    def block_len(self):
        return int(self.block_tokens.numel())

    @property
    def tokens(self):
        return torch.cat([self.anchor_tokens, self.block_tokens])

    @property
    def positions(self):
        return torch.cat([self.anchor_positions, self.block_positions])

    def contains(self, doc_index):
        return self.doc_offset <= doc_index < self.doc_offset + self.block_len


def _as_tokens(tokens):
    return torch.as_tensor(tokens, dtype=torch.long).reshape(-1)


def split_document_query(tokens, query_len) -> SplitInput:
    tokens = _as_tokens(tokens)
    if query_len < 0 or query_len >= tokens.numel():
        raise ContractViolation(f'query length must lie in [0, {tokens.numel()}), got {query_len}')
    cut = tokens.numel() - query_len
    return SplitInput(document=tokens[:cut], query=tokens[cut:])


def split_context(document, hosts) -> List[torch.Tensor]:
    document = _as_tokens(document)
    if hosts < 1:
        raise ContractViolation(f'host count must be >= 1, got {hosts}')
    if hosts > document.numel():
        raise ContractViolation(f'cannot split {document.numel()} document tokens over {hosts} hosts')

    base, extra = divmod(document.numel(), hosts)
    sizes = [base + 1 if h < extra else base for h in range(hosts)]
    return list(torch.split(document, sizes))


def build_anchor(query, document, anchor_len, host, embed_query=True) -> torch.Tensor:
    query, document = _as_tokens(query), _as_tokens(document)
    if anchor_len < 0 or anchor_len > document.numel():
        raise ContractViolation(f'anchor length must lie in [0, {document.numel()}], got {anchor_len}')
    if host == 1:
        return document[:0]
    prefix = document[:anchor_len]
    return torch.cat([query, prefix]) if embed_query else prefix


def assign_positions(layout: HostLayout, query_len, anchor_len):
    """Anchor tokens take 0..len(anchor)-1; block tokens continue right after the anchor."""
    start = layout.anchor_len
    if layout.host > 1 and layout.has_anchor and layout.anchor_len != (query_len if layout.embed_query else 0) + anchor_len:
        raise ContractViolation(f'host {layout.host} anchor holds {layout.anchor_len} tokens, expected l_q={query_len} + l_a={anchor_len}')
    anchor_positions = torch.arange(start)
    block_positions = torch.arange(start, start + layout.block_len)
    return anchor_positions, block_positions


def build_apb_mask(anchor_len, passing_len, block_len) -> MaskSpec:
    return MaskSpec(anchor_len, passing_len, block_len)


def build_host_layouts(split: SplitInput, hosts, anchor_len, embed_query=True, use_anchor=True) -> List[HostLayout]:
    """
    Lays the document out over hosts. Without an anchor the query cannot be embedded,
    so `use_anchor=False` also drops the query from every host.
    """
    blocks = split_context(split.document, hosts)
    layouts = []
    offset = 0
    for index, block in enumerate(blocks):
        host = index + 1
        if use_anchor:
            anchor = build_anchor(split.query, split.document, anchor_len, host, embed_query)
        else:
            anchor = split.document[:0]
        layout = HostLayout(
            host=host,
            anchor_tokens=anchor,
            block_tokens=block,
            anchor_positions=torch.arange(0),
            block_positions=torch.arange(0),
            doc_offset=offset,
            embed_query=embed_query and use_anchor,
            has_anchor=use_anchor and host > 1,
        )
        layout.anchor_positions, layout.block_positions = assign_positions(layout, split.query.numel(), anchor_len)
        layouts.append(layout)
        offset += block.numel()
    return layouts


def locate_host(doc_index, layouts: List[HostLayout]) -> HostLayout:
    for layout in layouts:
        if layout.contains(doc_index):
            return layout
    raise ContractViolation(f'document index {doc_index} lies outside every host block')

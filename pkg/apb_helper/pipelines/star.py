from dataclasses import replace

from apb_helper.models.toy_llama import ToyTransformer
from apb_helper.pipelines.apb import apb_prefill
from apb_helper.pipelines.common import PrefillResult, StrategyConfig, StrategyKind


def star_attention_prefill(tokens, model: ToyTransformer, config: StrategyConfig, query_len=0, group=None) -> PrefillResult:
    """
    Star attention: every host after the first prepends the first document block as
    its anchor and attends locally. Nothing is communicated during prefill.
    """
    return apb_prefill(tokens, model, replace(config, kind=StrategyKind.STAR), query_len=query_len, group=group)

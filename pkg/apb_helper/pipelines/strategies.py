from apb_helper.models.toy_llama import ToyTransformer
from apb_helper.pipelines.apb import apb_prefill
from apb_helper.pipelines.common import PrefillResult, StrategyConfig, StrategyKind
from apb_helper.pipelines.ring import full_attention_prefill, ring_attention_prefill
from apb_helper.pipelines.star import star_attention_prefill
from apb_helper.pipelines.ulysses import ulysses_prefill


PREFILL_FUNCTIONS = {
    StrategyKind.FULL: full_attention_prefill,
    StrategyKind.RING: ring_attention_prefill,
    StrategyKind.ULYSSES: ulysses_prefill,
    StrategyKind.STAR: star_attention_prefill,
    StrategyKind.APB: apb_prefill,
}


def prefill(tokens, model: ToyTransformer, config: StrategyConfig, query_len=0, group=None) -> PrefillResult:
    return PREFILL_FUNCTIONS[config.kind](tokens, model, config, query_len=query_len, group=group)

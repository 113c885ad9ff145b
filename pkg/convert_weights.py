import argparse
import logging

from apb_helper.models.toy_llama import ModelConfig, ToyTransformer
from apb_helper.models.weights_io import load_model, save_model


logger = logging.getLogger(__name__)
logging.basicConfig(level=logging.INFO)


def convert(input_file, output_file):
    model = load_model(input_file)
    logger.info(f"loaded {input_file}: {model.config}")
    save_model(model, output_file)
    logger.info("done")


def initialize(output_file, config: ModelConfig, seed, with_retaining_heads):
    model = ToyTransformer.from_seed(config, seed=seed, with_retaining_heads=with_retaining_heads)
    logger.info(f"initialised {config} from seed {seed} (retaining heads: {with_retaining_heads})")
    save_model(model, output_file)
    logger.info("done")


def parse_args():
    parser = argparse.ArgumentParser(description="Convert toy transformer weights between APBW and safetensors, or write seeded weights")
    parser.add_argument("--input", type=str, help="input weights file (omit to write seeded weights)")
    parser.add_argument("--output", type=str, required=True, help="output weights file; .safetensors selects that format")
    parser.add_argument("--seed", type=int, default=0, help="seed for fresh weights")
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--hidden", type=int, default=64)
    parser.add_argument("--heads", type=int, default=4)
    parser.add_argument("--kv-heads", type=int, default=2)
    parser.add_argument("--intermediate", type=int, default=128)
    parser.add_argument("--vocab", type=int, default=256)
    parser.add_argument("--rope-theta", type=float, default=10000.0)
    parser.add_argument("--retain-intermediate", type=int, default=1024)
    parser.add_argument("--retaining-heads", action=argparse.BooleanOptionalAction, default=True, help="include retaining-head weights")
    args = parser.parse_args()
    return args


if __name__ == "__main__":
    args = parse_args()
    if args.input:
        convert(args.input, args.output)
    else:
        config = ModelConfig(
            layers=args.layers, hidden=args.hidden, heads=args.heads, kv_heads=args.kv_heads,
            intermediate=args.intermediate, vocab=args.vocab, rope_theta=args.rope_theta,
            retain_intermediate=args.retain_intermediate,
        )
        initialize(args.output, config, args.seed, args.retaining_heads)

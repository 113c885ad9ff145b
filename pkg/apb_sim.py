import argparse
import logging
import sys
from dataclasses import replace

from apb_helper.errors import ConfigError, ContractViolation
from apb_helper.pipelines.common import ScorerKind, StrategyKind
from apb_helper.simnet import Schedule
from modules.experiment import run_sweep, stage_breakdown
from modules.report import emit_report
from modules.run_config import (
    ABLATION_LATTICE, MODEL_PRESETS, PRESETS, ReportFormat, RunConfig, SweepKind, load_config, validate_config,
)


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONTRACT = 3

# flags given as enum values, converted after parsing
ENUM_FLAGS = {
    'strategy': StrategyKind,
    'scorer': ScorerKind,
    'report': ReportFormat,
    'schedule': Schedule,
    'sweep': SweepKind,
}


def enum_values(kind):
    return [member.value for member in kind]


def build_parser():
    parser = argparse.ArgumentParser(description="Simulate distributed long-context prefill strategies on a toy transformer",
                                     argument_default=argparse.SUPPRESS)
    parser.add_argument("config", nargs='?', help="optional key = value run config; flags override it")

    parser.add_argument("--strategy", choices=enum_values(StrategyKind), help="prefill strategy")
    parser.add_argument("--hosts", type=int, help="number of simulated hosts")
    parser.add_argument("--anchor-len", type=int, help="document tokens copied into every anchor block (default: a quarter block)")
    parser.add_argument("--passing-len", type=int, help="KV rows each host passes on per layer (required for apb)")
    parser.add_argument("--scorer", choices=enum_values(ScorerKind), help="block compressor scorer")
    parser.add_argument("--embed-query", action=argparse.BooleanOptionalAction, help="put the query in front of the anchor block")
    parser.add_argument("--anchor", dest="use_anchor", action=argparse.BooleanOptionalAction, help="use anchor blocks")
    parser.add_argument("--passing", dest="use_passing", action=argparse.BooleanOptionalAction, help="use passing blocks")
    parser.add_argument("--ablation", choices=list(ABLATION_LATTICE), help="apply one row of the ablation lattice")
    parser.add_argument("--seq-len", type=int, help="total input length (document + query)")
    parser.add_argument("--query-len", type=int, help="query length at the end of the input")
    parser.add_argument("--seed", type=int, help="seed for weights, workload and random scores")
    parser.add_argument("--weights", type=str, help="APBW or .safetensors weights file")
    parser.add_argument("--preset", choices=list(PRESETS), help="input-length preset (sets n, l_a, l_p and H=8)")
    parser.add_argument("--compare-reference", action=argparse.BooleanOptionalAction, help="report max-abs error against single-host prefill")
    parser.add_argument("--report", choices=enum_values(ReportFormat), help="report format")
    parser.add_argument("--out", type=str, help="report path (stdout when omitted)")
    parser.add_argument("--max-new-tokens", type=int, help="tokens to generate")
    parser.add_argument("--stop-token", type=int, help="token id that ends generation")
    parser.add_argument("--model-preset", choices=list(MODEL_PRESETS), help="named model dimensions")
    parser.add_argument("--layers", type=int)
    parser.add_argument("--hidden", type=int)
    parser.add_argument("--heads", type=int)
    parser.add_argument("--kv-heads", type=int)
    parser.add_argument("--intermediate", type=int)
    parser.add_argument("--vocab", type=int)
    parser.add_argument("--rope-theta", type=float)
    parser.add_argument("--retain-intermediate", type=int, help="hidden width of the retaining heads")
    parser.add_argument("--tile-size", type=int, help="key tile size of the attention kernel")
    parser.add_argument("--needle-start", type=int, help="document index of a planted needle")
    parser.add_argument("--needle-len", type=int, help="needle length in tokens")
    parser.add_argument("--schedule", choices=enum_values(Schedule), help="order in which hosts advance between barriers")
    parser.add_argument("--formula-only", action=argparse.BooleanOptionalAction, help="only evaluate the closed-form FLOPs")
    parser.add_argument("--sweep", choices=enum_values(SweepKind), help="run a sweep instead of a single experiment")
    return parser


def resolve_config(args) -> RunConfig:
    overrides = vars(args)
    path = overrides.pop('config', None)
    for name, kind in ENUM_FLAGS.items():
        if name in overrides:
            overrides[name] = kind(overrides[name])
    config = load_config(path, validate=False) if path else RunConfig()
    return validate_config(replace(config, **overrides))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO)

    try:
        config = resolve_config(args)
        print(config)
        reports = run_sweep(config)
        emit_report(reports if config.sweep else reports[0], config.report, config.out)
    except ConfigError as e:
        print(f'config error: {e}', file=sys.stderr)
        return EXIT_CONFIG
    except ContractViolation as e:
        print(f'contract violation: {e}', file=sys.stderr)
        return EXIT_CONTRACT

    for report in reports:
        share = ', '.join(f'{name}={value:.0%}' for name, value in stage_breakdown(report).items() if value > 0)
        print(f'{report.strategy} n={report.n} H={report.hosts}: formula {report.formula_flops:.4g} FLOPs, '
              f'measured {report.measured_flops:.4g}, comm {report.comm_elements} elements'
              + (f' [{share}]' if share else ''))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

import json

import pytest
import torch

import apb_sim
from apb_helper.errors import ConfigError, ContractViolation
from apb_helper.layout import build_host_layouts, locate_host, split_document_query
from apb_helper.pipelines.common import ScorerKind, StrategyKind
from apb_helper.simnet import Schedule
from apb_helper.utils import read_from_json
from modules.experiment import formula_report, run_experiment, run_sweep, sweep_configs
from modules.report import REPORT_FIELDS, emit_report, report_row, strip_timing
from modules.run_config import (
    ABLATION_LATTICE, HOST_COUNTS, PRESETS, SENSITIVITY_LENGTHS, ReportFormat, RunConfig, SweepKind, dump_config,
    effective_lengths, load_config, parse_config, strategy_config,
)
from modules.workload import NeedleSpec, make_workload


def test_parse_minimal_config():
    config = parse_config('strategy = ring\nhosts = 2  # two simulated hosts\n\nseq-len = 128\n')
    assert config.strategy == StrategyKind.RING
    assert config.hosts == 2
    assert config.seq_len == 128
    assert config.report == ReportFormat.JSON


def test_apb_needs_passing_len():
    with pytest.raises(ConfigError, match='passing-len'):
        parse_config('strategy = apb\nhosts = 4\n')


def test_parse_config_names_bad_keys():
    with pytest.raises(ConfigError, match='anchor_length'):
        parse_config('anchor_length = 3\n')
    with pytest.raises(ConfigError, match='duplicate'):
        parse_config('hosts = 1\nhosts = 1\n')
    with pytest.raises(ConfigError, match='hosts'):
        parse_config('hosts = two\n')
    with pytest.raises(ConfigError, match='scorer'):
        parse_config('scorer = magic\n')
    with pytest.raises(ConfigError, match='query-len'):
        parse_config('query-len = 256\n')


def test_config_round_trip(tmp_path):
    config = RunConfig(strategy=StrategyKind.APB, hosts=4, passing_len=8, anchor_len=None, scorer=ScorerKind.RANDOM,
                       embed_query=False, schedule=Schedule.SHUFFLED, report=ReportFormat.CSV, rope_theta=500000.0)
    assert parse_config(dump_config(config)) == config

    path = tmp_path / 'run.cfg'
    path.write_text(dump_config(config), encoding='utf-8')
    assert load_config(path) == config

    with pytest.raises(ConfigError):
        load_config(tmp_path / 'missing.cfg')


def test_preset_lengths():
    config = RunConfig(strategy=StrategyKind.APB, preset='128K', formula_only=True)
    assert config.seq_len_resolved == 131072
    assert config.hosts_resolved == 8
    assert config.block_len == 16384
    assert effective_lengths(config) == (4096, 2048)

    report = formula_report(config)
    assert (report.n, report.hosts, report.anchor_len, report.passing_len) == (131072, 8, 4096, 2048)


def test_effective_lengths_defaults():
    assert effective_lengths(RunConfig(strategy=StrategyKind.APB, hosts=4, passing_len=8)) == (16, 8)
    assert effective_lengths(RunConfig(strategy=StrategyKind.STAR, hosts=4)) == (64, 0)
    assert effective_lengths(RunConfig(strategy=StrategyKind.RING, hosts=4, anchor_len=9)) == (0, 0)
    assert effective_lengths(RunConfig(strategy=StrategyKind.APB, hosts=4, passing_len=8, ablation='No.8')) == (0, 0)


def test_ablation_rows_reach_the_strategy():
    config = strategy_config(RunConfig(strategy=StrategyKind.RING, hosts=4, passing_len=8, ablation='No.3'))
    assert config.kind == StrategyKind.APB
    assert config.scorer == ScorerKind.RANDOM
    assert not config.embed_query
    assert config.use_anchor and config.use_passing


def test_workload_is_seeded():
    first = make_workload(256, 16, seed=3)
    assert torch.equal(first, make_workload(256, 16, seed=3))
    assert not torch.equal(first, make_workload(256, 16, seed=4))
    assert int(first.max()) < 252

    needle = NeedleSpec(start=100, length=6)
    planted = make_workload(256, 16, seed=3, needle=needle)
    assert planted[100:106].tolist() == [252, 253, 254, 255, 252, 253]
    assert torch.equal(planted[:100], first[:100])

    with pytest.raises(ConfigError):
        make_workload(256, 16, seed=3, needle=NeedleSpec(start=238, length=4))


def test_locate_needle_host_at_128k():
    tokens = make_workload(131072, 0, seed=0)
    layouts = build_host_layouts(split_document_query(tokens, 0), 8, anchor_len=4096)
    assert locate_host(40000, layouts).host == 3


def test_ring_experiment_matches_reference():
    config = RunConfig(strategy=StrategyKind.RING, hosts=4, seq_len=128, query_len=8, compare_reference=True, max_new_tokens=3)
    report = run_experiment(config).report
    assert report.max_abs_err <= 1e-5
    assert report.measured_flops == report.formula_flops
    assert report.tokens_in == 128
    assert report.tokens_out == 3
    assert len(report.checksum) == 64


def test_oracle_needle_reaches_later_hosts():
    config = RunConfig(strategy=StrategyKind.APB, hosts=4, seq_len=128, passing_len=4, scorer=ScorerKind.ORACLE,
                       needle_start=40, needle_len=4)
    report = run_experiment(config).report
    assert report.needle_passed is True
    assert report.comm_elements > 0
    assert report.selected_digest


@pytest.mark.parametrize('seed', range(50))
def test_oracle_needle_passes_for_every_seed(seed, toy_model):
    # 256 document tokens over 4 hosts: blocks of 64, the needle sits on hosts 1..3
    start = (seed % 3) * 64 + (seed * 7) % 60
    config = RunConfig(strategy=StrategyKind.APB, hosts=4, seq_len=256, passing_len=4, scorer=ScorerKind.ORACLE,
                       needle_start=start, needle_len=4, seed=seed)
    report = run_experiment(config, model=toy_model).report
    assert report.needle_passed is True


def test_star_experiment_has_no_prefill_traffic():
    report = run_experiment(RunConfig(strategy=StrategyKind.STAR, hosts=4, seq_len=128, max_new_tokens=2)).report
    assert report.comm_elements == 0
    assert report.decode_comm_elements > 0
    assert report.anchor_len == 32


def test_reports_reproducible_across_schedules():
    rows = []
    for schedule in Schedule:
        config = RunConfig(strategy=StrategyKind.APB, hosts=4, seq_len=128, query_len=8, passing_len=4,
                           schedule=schedule, max_new_tokens=2)
        rows.append(strip_timing(report_row(run_experiment(config).report)))
    assert all(row == rows[0] for row in rows)


def test_json_report(tmp_path, capsys):
    report = run_experiment(RunConfig(strategy=StrategyKind.RING, hosts=2, seq_len=64)).report
    path = tmp_path / 'report.json'
    emit_report(report, ReportFormat.JSON, path)
    data = read_from_json(path)
    assert set(REPORT_FIELDS) <= set(data)
    assert data['H'] == 2 and data['l_p'] == 0

    emit_report([report, report], ReportFormat.JSON)
    printed = json.loads(capsys.readouterr().out)
    assert len(printed) == 2


def test_csv_header_written_once(tmp_path):
    report = run_experiment(RunConfig(strategy=StrategyKind.FULL, seq_len=32)).report
    path = tmp_path / 'report.csv'
    emit_report(report, ReportFormat.CSV, path)
    emit_report([report, report], ReportFormat.CSV, path)

    lines = path.read_text(encoding='utf-8').splitlines()
    assert len(lines) == 4
    assert lines[0].startswith('strategy,n,H,l_a,l_p,scorer')
    assert sum(line.startswith('strategy,') for line in lines) == 1


def test_presets_sweep():
    reports = run_sweep(RunConfig(sweep=SweepKind.PRESETS, model_preset='llama-3.1-8b'))
    assert [r.n for r in reports] == [p.n for p in PRESETS.values()]
    flops = [r.formula_flops for r in reports]
    assert flops == sorted(flops)
    assert all(r.strategy == 'apb' and r.measured_flops == 0 for r in reports)


def test_ablation_sweep_runs_every_row():
    reports = run_sweep(RunConfig(sweep=SweepKind.ABLATION, hosts=2, seq_len=64, query_len=4))
    assert len(reports) == 9
    assert reports[0].passing_len == 7
    rows = dict(zip(ABLATION_LATTICE, reports))

    for name, report in rows.items():
        if name in ('No.6', 'No.7', 'No.8'):
            assert report.anchor_rows == 0, name
        else:
            assert report.anchor_rows > 0, name
        if name in ('No.4', 'No.5', 'No.8'):
            assert report.comm_elements == 0, name
        else:
            assert report.comm_elements > 0, name

    # rows that differ only in the scorer pick different passing rows
    assert rows['No.0'].scorer == 'retain' and rows['No.2'].scorer == 'random'
    assert rows['No.0'].selected_digest != rows['No.2'].selected_digest
    assert rows['No.6'].selected_digest != rows['No.7'].selected_digest
    # the query only moves the anchor, so embedding it changes the anchor rows
    assert rows['No.0'].anchor_rows == rows['No.1'].anchor_rows + 4


def test_hosts_sweep_skips_impossible_runs():
    runs = sweep_configs(RunConfig(strategy=StrategyKind.ULYSSES, sweep=SweepKind.HOSTS))
    assert [run.hosts for run in runs] == [1, 2, 4]

    ring = sweep_configs(RunConfig(strategy=StrategyKind.RING, seq_len=64, sweep=SweepKind.HOSTS))
    assert [run.hosts for run in ring] == list(HOST_COUNTS) == [1, 2, 4, 6, 8]


def test_six_hosts_split_unevenly_and_stay_exact():
    # 64 tokens over 6 hosts gives blocks of 11, 11, 11, 11, 10, 10
    report = run_experiment(RunConfig(strategy=StrategyKind.RING, hosts=6, seq_len=64, compare_reference=True)).report
    assert report.hosts == 6
    assert report.max_abs_err <= 1e-5


def test_sensitivity_sweep_grid():
    reports = run_sweep(RunConfig(sweep=SweepKind.SENSITIVITY, model_preset='llama-3.1-8b'))
    assert len(reports) == len(SENSITIVITY_LENGTHS) ** 2 == 16
    assert all(r.strategy == 'apb' and r.n == 131072 and r.hosts == 8 and r.measured_flops == 0 for r in reports)
    assert [(r.anchor_len, r.passing_len) for r in reports[:4]] == [(1024, lp) for lp in SENSITIVITY_LENGTHS]

    grid = {(r.anchor_len, r.passing_len): r.formula_flops for r in reports}
    for a in SENSITIVITY_LENGTHS:
        row = [grid[a, p] for p in SENSITIVITY_LENGTHS]
        assert row == sorted(row) and len(set(row)) == 4
    for p in SENSITIVITY_LENGTHS:
        column = [grid[a, p] for a in SENSITIVITY_LENGTHS]
        assert column == sorted(column) and len(set(column)) == 4


def test_cli_exit_codes(tmp_path, monkeypatch):
    out = tmp_path / 'cli.json'
    assert apb_sim.main(['--strategy', 'ring', '--hosts', '2', '--seq-len', '64', '--out', str(out)]) == apb_sim.EXIT_OK
    assert read_from_json(out)['strategy'] == 'ring'

    assert apb_sim.main(['--strategy', 'apb', '--hosts', '2']) == apb_sim.EXIT_CONFIG

    config = tmp_path / 'run.cfg'
    config.write_text('strategy = full\nseq-len = 32\n', encoding='utf-8')
    assert apb_sim.main([str(config), '--no-compare-reference', '--out', str(out)]) == apb_sim.EXIT_OK

    def broken(_config):
        raise ContractViolation('boom')

    monkeypatch.setattr(apb_sim, 'run_sweep', broken)
    assert apb_sim.main(['--strategy', 'full']) == apb_sim.EXIT_CONTRACT


def test_cli_flags_complete_a_partial_config_file(tmp_path):
    out = tmp_path / 'cli.json'
    partial = tmp_path / 'partial.cfg'
    # a file that is invalid on its own; the flag supplies the missing field
    partial.write_text('hosts = 4\nseq-len = 64\n', encoding='utf-8')
    assert apb_sim.main([str(partial), '--strategy', 'ring', '--out', str(out)]) == apb_sim.EXIT_OK
    assert read_from_json(out)['H'] == 4

    apb = tmp_path / 'apb.cfg'
    apb.write_text('strategy = apb\nhosts = 2\nseq-len = 64\n', encoding='utf-8')
    assert apb_sim.main([str(apb), '--passing-len', '4', '--out', str(out)]) == apb_sim.EXIT_OK
    assert read_from_json(out)['l_p'] == 4

    assert apb_sim.main([str(apb), '--out', str(out)]) == apb_sim.EXIT_CONFIG


def test_load_config_can_defer_validation(tmp_path):
    path = tmp_path / 'partial.cfg'
    path.write_text('strategy = apb\nhosts = 2\n', encoding='utf-8')
    with pytest.raises(ConfigError, match='passing-len'):
        load_config(path)
    assert load_config(path, validate=False).passing_len is None


def test_cli_choices_are_enum_values():
    help_text = apb_sim.build_parser().format_help()
    assert 'StrategyKind' not in help_text and 'Schedule.' not in help_text
    assert '{full,ring,ulysses,star,apb}' in help_text

    config = apb_sim.resolve_config(apb_sim.build_parser().parse_args(
        ['--strategy', 'ulysses', '--hosts', '2', '--schedule', 'shuffled', '--report', 'csv']))
    assert config.strategy == StrategyKind.ULYSSES
    assert config.schedule == Schedule.SHUFFLED
    assert config.report == ReportFormat.CSV

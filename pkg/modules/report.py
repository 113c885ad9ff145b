import csv
import json
import os
import sys
from typing import Iterable, List, Union

from apb_helper.costmodel import CostReport
from apb_helper.errors import ConfigError
from apb_helper.utils import write_to_json
from modules.run_config import ReportFormat


REPORT_FIELDS = (
    'strategy', 'n', 'H', 'l_a', 'l_p', 'scorer', 'formula_flops', 'measured_flops',
    'comm_elements', 'prefill_s', 'decode_s', 'speed', 'checksum', 'max_abs_err',
)

EXTRA_FIELDS = (
    'tokens_in', 'tokens_out', 'decode_comm_elements', 'retain_flops', 'anchor_rows',
    'selected_digest', 'needle_passed', 'generated', 'stage_seconds',
)

# wall-clock fields; everything else is reproducible for a fixed seed
TIMING_FIELDS = ('prefill_s', 'decode_s', 'speed', 'stage_seconds')

_ATTRIBUTES = {'H': 'hosts', 'l_a': 'anchor_len', 'l_p': 'passing_len'}


def report_row(report: CostReport) -> dict:
    return {name: getattr(report, _ATTRIBUTES.get(name, name)) for name in REPORT_FIELDS + EXTRA_FIELDS}


def strip_timing(row: dict) -> dict:
    return {key: value for key, value in row.items() if key not in TIMING_FIELDS}


def _csv_value(value):
    if value is None:
        return ''
    if isinstance(value, (list, dict)):
        return json.dumps(value)
    return value


def emit_report(reports: Union[CostReport, Iterable[CostReport]], fmt: ReportFormat = ReportFormat.JSON, path=None):
    """
    Writes one report (or a sweep of them) as a JSON document or as CSV rows.

    Args:
        reports: a CostReport or a list of them
        fmt: json writes a single object (a list for sweeps); csv appends rows and writes the header once per file
        path: output file, None prints to stdout

    Returns:
        The rows that were written
    """
    single = isinstance(reports, CostReport)
    rows: List[dict] = [report_row(r) for r in ([reports] if single else reports)]
    fmt = ReportFormat(fmt)

    try:
        if fmt == ReportFormat.JSON:
            data = rows[0] if single else rows
            if path is None:
                print(json.dumps(data, indent=4))
            else:
                write_to_json(data, path)
        else:
            names = REPORT_FIELDS + EXTRA_FIELDS
            if path is None:
                writer = csv.writer(sys.stdout)
                writer.writerow(names)
                for row in rows:
                    writer.writerow([_csv_value(row[name]) for name in names])
            else:
                new_file = not os.path.exists(path) or os.path.getsize(path) == 0
                with open(path, 'at', encoding='utf-8', newline='') as f:
                    writer = csv.writer(f)
                    if new_file:
                        writer.writerow(names)
                    for row in rows:
                        writer.writerow([_csv_value(row[name]) for name in names])
    except OSError as e:
        raise ConfigError(f'cannot write report to {path}: {e}') from e

    return rows

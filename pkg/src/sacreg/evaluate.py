"""Batch evaluation of a checkpoint (or the identity transform) over case directories.

CSV schema, one row per case::

    case_id, mean_dice, hd95, assd, folding_pct, mean_epe

Label-derived columns are ``nan`` when a case has no labels, and ``mean_epe``
is ``nan`` without a ground-truth flow.
"""
from __future__ import annotations

import csv
import math
import warnings
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .metrics import MetricReport, evaluate_case
from .network import SACBNet
from .train import case_dirs, load_case_checked, load_model, register
from .volume_io import SyntheticCase

CSV_COLUMNS = ("case_id", "mean_dice", "hd95", "assd", "folding_pct", "mean_epe")
IDENTITY = "identity"


def evaluate_cases(net: SACBNet | None, cases: list[tuple[str, SyntheticCase]]) -> list[tuple[str, MetricReport]]:
    results = []
    for case_id, case in cases:
        flow, _ = register(net, case.moving, case.fixed)
        report = evaluate_case(flow.vectors, case.labels_m, case.labels_f, case.gt_flow, case.fixed.spacing)
        results.append((case_id, report))
    return results


def load_cases(root) -> list[tuple[str, SyntheticCase]]:
    return [(p.name, load_case_checked(p)) for p in case_dirs(root)]


def _cell(value: float) -> str:
    return "nan" if math.isnan(value) else repr(float(value))


def write_csv(results: list[tuple[str, MetricReport]], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for case_id, r in results:
            w.writerow([case_id, *(_cell(getattr(r, c)) for c in CSV_COLUMNS[1:])])
    return path


def format_table(results: list[tuple[str, MetricReport]]) -> str:
    head = f"{'case':<16}{'dice':>9}{'hd95':>9}{'assd':>9}{'fold%':>9}{'epe':>9}"
    lines = [head, "-" * len(head)]
    for case_id, r in results:
        lines.append(f"{case_id:<16}{r.mean_dice:9.4f}{r.hd95:9.3f}{r.assd:9.3f}{r.folding_pct:9.3f}{r.mean_epe:9.3f}")
    if len(results) > 1:
        cols = np.array([[getattr(r, c) for c in CSV_COLUMNS[1:]] for _, r in results], dtype=float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            mean = np.nanmean(cols, axis=0)
        lines.append("-" * len(head))
        lines.append(f"{'mean':<16}{mean[0]:9.4f}" + "".join(f"{v:9.3f}" for v in mean[1:]))
    return "\n".join(lines) + "\n"


def evaluate(ckpt, cases_dir, csv_path=None, threads: int = 1) -> list[tuple[str, MetricReport]]:
    """Register every case under ``cases_dir`` with ``ckpt`` (a path or ``"identity"``) and score it."""
    with threadpool_limits(limits=threads):
        net = None if str(ckpt) == IDENTITY else load_model(ckpt)[0]
        results = evaluate_cases(net, load_cases(cases_dir))
    if csv_path is not None:
        write_csv(results, csv_path)
    return results

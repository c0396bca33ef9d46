"""Ablation sweeps over SACB placement, cluster count and descriptor mode.

A sweep spec is a list of items separated by newlines or ``;``:

* ``grid`` expands to the reference grid: no SACB, then N=5 with SACB on
  scale 5, 5-4, 5-4-3 and 5-4-3-2, then N=7, 9 and 11 on all four scales;
* ``key=v1|v2|...`` adds an axis over any config key (e.g. ``sacb.mode=spatial|channel|mix``).

Rows are the cross product of all items; an empty spec is a single base run.
"""
from __future__ import annotations

import itertools
import time
import tracemalloc
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import KEYS, TrainConfig, parse_value
from .evaluate import evaluate_cases
from .metrics import MetricReport
from .tensor import ContractError
from .train import case_dirs, load_case_checked, make_sampler, train
from .volume_io import synth_pair

REFERENCE_GRID: tuple[dict, ...] = (
    {"sacb_scales": ()},
    {"sacb_scales": (5,), "clusters": 5},
    {"sacb_scales": (5, 4), "clusters": 5},
    {"sacb_scales": (5, 4, 3), "clusters": 5},
    {"sacb_scales": (5, 4, 3, 2), "clusters": 5},
    {"sacb_scales": (5, 4, 3, 2), "clusters": 7},
    {"sacb_scales": (5, 4, 3, 2), "clusters": 9},
    {"sacb_scales": (5, 4, 3, 2), "clusters": 11},
)
N_GRID = (5, 7, 9, 11)
SCALE_PREFIXES = ((), (5,), (5, 4), (5, 4, 3), (5, 4, 3, 2))


@dataclass
class AblationRow:
    config: TrainConfig
    report: MetricReport
    seconds: float
    peak_mib: float
    final_loss: float


def parse_sweep(spec: str) -> list[list[dict]]:
    """Return one list of override dicts per sweep item."""
    axes: list[list[dict]] = []
    for item in spec.replace(";", "\n").splitlines():
        item = item.split("#", 1)[0].strip()
        if not item:
            continue
        if item == "grid":
            axes.append([dict(row) for row in REFERENCE_GRID])
            continue
        if "=" not in item:
            raise ContractError(f"bad sweep item {item!r}: expected 'grid' or key=v1|v2")
        key, values = (p.strip() for p in item.split("=", 1))
        if key not in KEYS:
            raise ContractError(f"unknown sweep key {key!r}")
        field = KEYS[key]
        axes.append([{field: parse_value(field, v)} for v in values.split("|")])
    return axes


def expand_sweep(base: TrainConfig, spec: str) -> list[TrainConfig]:
    axes = parse_sweep(spec)
    configs = []
    for combo in itertools.product(*axes):
        overrides: dict = {}
        for part in combo:
            overrides.update(part)
        configs.append(base.replace(**overrides))
    return configs


def _eval_cases(cfg: TrainConfig):
    if cfg.data_source == "dir":
        return [(p.name, load_case_checked(p)) for p in case_dirs(cfg.data_path)]
    if cfg.data_resample:
        # held-out seeds, never drawn during training
        seeds = [cfg.data_seed + 100_000 + i for i in range(3)]
        return [(f"synth{s}", synth_pair(s, cfg.data_size, cfg.data_max_disp, cfg.data_sigma)) for s in seeds]
    return [(f"synth{cfg.data_seed}", make_sampler(cfg)(0))]


def run_one(cfg: TrainConfig, log=None) -> AblationRow:
    cases = _eval_cases(cfg)
    tracemalloc.start()
    t0 = time.perf_counter()
    try:
        result = train(cfg, log=log)
        seconds = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    scored = evaluate_cases(result.net, cases)
    reports = [r for _, r in scored]
    mean = MetricReport(
        mean_dice=float(np.mean([r.mean_dice for r in reports])),
        hd95=float(np.mean([r.hd95 for r in reports])),
        assd=float(np.mean([r.assd for r in reports])),
        folding_pct=float(np.mean([r.folding_pct for r in reports])),
        mean_epe=float(np.mean([r.mean_epe for r in reports])),
    )
    return AblationRow(cfg, mean, seconds, peak / 2**20, result.trace[-1][1])


def run_sweep(base: TrainConfig, spec: str, workdir, log=None) -> list[AblationRow]:
    workdir = Path(workdir)
    rows = []
    for i, cfg in enumerate(expand_sweep(base, spec)):
        cfg = cfg.replace(checkpoint_path=str(workdir / f"run{i:02d}.sack"), trace_path=str(workdir / f"run{i:02d}_trace.csv"))
        if log:
            log(f"[{i}] scales={_scales(cfg)} N={cfg.clusters} mode={cfg.mode}")
        rows.append(run_one(cfg))
    return rows


def _scales(cfg: TrainConfig) -> str:
    return ",".join(str(s) for s in sorted(cfg.sacb_scales, reverse=True)) or "none"


def format_report(rows: list[AblationRow]) -> str:
    header = ["N", "Scale5", "Scale4", "Scale3", "Scale2", "mode", "Dice", "HD95", "|J|<0 %", "EPE", "final loss", "Time (s)", "Peak mem (MiB)"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        c = r.config
        sacb = bool(c.sacb_scales)
        marks = ["✓" if s in c.sacb_scales else "✗" for s in (5, 4, 3, 2)]
        cells = [
            str(c.clusters) if sacb else "-",
            *marks,
            c.mode if sacb else "-",
            f"{r.report.mean_dice:.4f}",
            f"{r.report.hd95:.3f}",
            f"{r.report.folding_pct:.3f}",
            f"{r.report.mean_epe:.3f}",
            f"{r.final_loss:.5f}",
            f"{r.seconds:.2f}",
            f"{r.peak_mib:.1f}",
        ]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def ablate(base: TrainConfig, spec: str, out, log=None) -> list[AblationRow]:
    """Run the sweep and write the markdown report to ``out``; run artefacts go next to it."""
    out = Path(out)
    rows = run_sweep(base, spec, out.parent / (out.stem + "_runs"), log)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("# Ablation results\n\n" + format_report(rows), encoding="utf-8")
    return rows

"""Training loop, model loading and single-pair registration."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, load_checkpoint, load_into, save_checkpoint
from .config import TrainConfig, dump_config, parse_config
from .losses import total_loss
from .network import SACBNet, ScaleDiagnostics
from .optim import AdamState, adam_step, clip_global_norm
from .tensor import ContractError, no_grad
from .volume_io import DisplacementField, SyntheticCase, Volume, VolumeFormatError, load_case, synth_pair

TRACE_COLUMNS = ("iter", "total", "sim", "reg")


class DataError(RuntimeError):
    pass


@dataclass
class TrainResult:
    net: SACBNet
    adam: AdamState
    trace: list[tuple[int, float, float, float]]
    config: TrainConfig
    checkpoint: Path | None = None
    seconds: float = 0.0
    grad_norms: list[float] = field(default_factory=list)


def build_net(cfg: TrainConfig) -> SACBNet:
    return SACBNet(cfg.model_config(), seed=cfg.seed)


def case_dirs(root) -> list[Path]:
    """Case directories under ``root``: ``root`` itself if it holds a pair, else its sorted subdirectories."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"case directory {root} does not exist")
    if any(root.glob("moving.*")):
        return [root]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("moving.*")))
    if not dirs:
        raise DataError(f"no cases found under {root}")
    return dirs


def load_case_checked(path: Path) -> SyntheticCase:
    try:
        case = load_case(path)
    except (VolumeFormatError, ContractError, OSError) as exc:
        raise DataError(f"case {path.name}: {exc}") from exc
    if case.moving.shape != case.fixed.shape:
        raise DataError(f"case {path.name}: moving {case.moving.shape} and fixed {case.fixed.shape} differ")
    return case


def make_sampler(cfg: TrainConfig) -> Callable[[int], SyntheticCase]:
    """Map an iteration index to the training pair used at that iteration."""
    if cfg.data_source == "synthetic":
        def synth(seed):
            return synth_pair(seed, cfg.data_size, cfg.data_max_disp, cfg.data_sigma)

        if cfg.data_resample:
            return lambda it: synth(cfg.data_seed + it)
        fixed_case = synth(cfg.data_seed)
        return lambda it: fixed_case

    dirs = case_dirs(cfg.data_path)
    cache: dict[Path, SyntheticCase] = {}

    def pick(it: int) -> SyntheticCase:
        # seeded per iteration so a resumed run sees the same sequence
        idx = int(np.random.default_rng([cfg.seed, it]).integers(len(dirs)))
        path = dirs[idx]
        if path not in cache:
            cache[path] = load_case_checked(path)
        return cache[path]

    return pick


def _write_trace(path: Path, rows, append: bool) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists())
    with open(path, "w" if fresh else "a", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(TRACE_COLUMNS)
        for it, total, sim, reg in rows:
            w.writerow([it, repr(total), repr(sim), repr(reg)])


def read_trace(path) -> list[tuple[int, float, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]


def make_checkpoint(net: SACBNet, adam: AdamState, iteration: int, cfg: TrainConfig) -> Checkpoint:
    params = {name: p.data.copy() for name, p in net.named_parameters().items()}
    return Checkpoint(params, adam, iteration, dump_config(cfg))


def train(
    cfg: TrainConfig,
    resume=None,
    log: Callable[[str], None] | None = None,
    sampler: Callable[[int], SyntheticCase] | None = None,
) -> TrainResult:
    """Optimise the network on pairs from ``cfg``'s data source; writes the trace CSV and checkpoints."""
    with threadpool_limits(limits=cfg.threads):
        return _train(cfg, resume, log, sampler)


def _train(cfg, resume, log, sampler) -> TrainResult:
    net = build_net(cfg)
    params = net.named_parameters()
    adam = AdamState()
    start = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        load_into(net, ckpt)
        adam = AdamState(ckpt.adam.step, {k: v.copy() for k, v in ckpt.adam.m.items()}, {k: v.copy() for k, v in ckpt.adam.v.items()})
        start = ckpt.iteration
    sampler = sampler or make_sampler(cfg)

    trace: list[tuple[int, float, float, float]] = []
    norms: list[float] = []
    ckpt_path = Path(cfg.checkpoint_path) if cfg.checkpoint_path else None
    trace_path = Path(cfg.trace_path) if cfg.trace_path else None
    t0 = time.perf_counter()
    for it in range(start, cfg.iterations):
        case = sampler(it)
        moving, fixed = case.moving.as_tensor(), case.fixed.as_tensor()
        flow, _ = net(moving, fixed)
        rep = total_loss(moving, fixed, flow, cfg.lam, cfg.ncc_window, cfg.ncc_reduction)
        row = (it, *rep.row())
        if not all(math.isfinite(v) for v in row[1:]):
            raise FloatingPointError(f"non-finite loss at iteration {it}: {row[1:]}")
        trace.append(row)
        rep.total.backward()
        grads = {name: p.grad for name, p in params.items() if p.grad is not None}
        norms.append(clip_global_norm(grads, cfg.clip_norm))
        adam_step(params, grads, adam, cfg.lr)
        net.zero_grad()

        done = it + 1
        if log and (it % max(cfg.log_every, 1) == 0 or done == cfg.iterations):
            log(f"iter {it:5d}  total {row[1]:+.5f}  sim {row[2]:+.5f}  reg {row[3]:.5f}  |g| {norms[-1]:.3f}  {time.perf_counter() - t0:.1f}s")
        if ckpt_path and cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0 and done < cfg.iterations:
            save_checkpoint(ckpt_path, make_checkpoint(net, adam, done, cfg))

    elapsed = time.perf_counter() - t0
    if trace_path:
        _write_trace(trace_path, trace, append=resume is not None)
    if ckpt_path:
        save_checkpoint(ckpt_path, make_checkpoint(net, adam, max(start, cfg.iterations), cfg))
    return TrainResult(net, adam, trace, cfg, ckpt_path, elapsed, norms)


def load_model(path) -> tuple[SACBNet, TrainConfig]:
    """Rebuild the network stored in a checkpoint (architecture comes from its config snapshot)."""
    ckpt = load_checkpoint(path)
    cfg = parse_config(ckpt.config_text)
    net = build_net(cfg)
    load_into(net, ckpt)
    return net, cfg


def register(net: SACBNet | None, moving: Volume, fixed: Volume) -> tuple[DisplacementField, list[ScaleDiagnostics]]:
    """Displacement taking fixed-frame points into ``moving``; ``net=None`` gives the identity transform."""
    if moving.shape != fixed.shape:
        raise ContractError(f"moving {moving.shape} and fixed {fixed.shape} differ")
    if net is None:
        return DisplacementField(np.zeros((3, *fixed.shape), dtype=np.float32)), []
    with no_grad():
        flow, diags = net(moving.as_tensor(), fixed.as_tensor())
    return DisplacementField(flow.data), diags


def format_diagnostics(diags: list[ScaleDiagnostics]) -> str:
    lines = ["scale  source  max_norm  mean_norm  max_abs  clusters"]
    for d in diags:
        clusters = ",".join(f"{k}:{v}" for k, v in sorted(d.n_clusters.items())) or "-"
        lines.append(f"{d.scale:5d}  {d.source:6s}  {d.max_norm:8.4f}  {d.mean_norm:9.4f}  {d.max_abs_component:7.4f}  {clusters}")
    return "\n".join(lines) + "\n"

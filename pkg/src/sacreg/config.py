"""Experiment configuration: ``key = value`` lines with dotted section keys and ``#`` comments."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .encoder import DEFAULT_CHANNELS
from .network import SACB_SCALES, ModelConfig
from .sacb import ClusterConfig
from .tensor import ContractError


@dataclass
class TrainConfig:
    lr: float = 1e-4
    iterations: int = 300
    lam: float = 1.0
    seed: int = 0
    threads: int = 1
    clip_norm: float = 10.0
    ncc_window: int = 9
    ncc_reduction: str = "sum"
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    match_window: int = 3
    head_hidden: int = 16
    sacb_scales: tuple[int, ...] = SACB_SCALES
    clusters: int = 7
    mode: str = "spatial"
    share_streams: bool = True
    kmeans_max_iter: int = 25
    kmeans_tol: float = 1e-4
    detach_centroids: bool = False
    warm_start: bool = False
    data_source: str = "synthetic"
    data_path: str = ""
    data_size: int = 48
    data_max_disp: float = 4.0
    data_sigma: float = 6.0
    data_seed: int = 0
    data_resample: bool = False
    checkpoint_path: str = "run/model.sack"
    checkpoint_every: int = 0
    trace_path: str = "run/trace.csv"
    log_every: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ContractError(f"lr must be > 0, got {self.lr}")
        if self.iterations < 1:
            raise ContractError(f"iterations must be >= 1, got {self.iterations}")
        if not set(self.sacb_scales) <= set(SACB_SCALES):
            raise ContractError(f"sacb.scales must be a subset of {SACB_SCALES}, got {self.sacb_scales}")
        if self.ncc_reduction not in ("sum", "mean"):
            raise ContractError(f"ncc.reduction must be sum or mean, got {self.ncc_reduction!r}")
        if self.data_source not in ("synthetic", "dir"):
            raise ContractError(f"data.source must be synthetic or dir, got {self.data_source!r}")
        if self.clusters < 1:
            raise ContractError("sacb.clusters must be >= 1")

    def model_config(self) -> ModelConfig:
        cluster = ClusterConfig(
            n_clusters=self.clusters,
            mode=self.mode,
            max_iter=self.kmeans_max_iter,
            tol=self.kmeans_tol,
            seed=self.seed,
            detach_centroids=self.detach_centroids,
            warm_start=self.warm_start,
        )
        return ModelConfig(
            channels=tuple(self.channels),
            match_window=self.match_window,
            sacb_scales=tuple(self.sacb_scales),
            share_streams=self.share_streams,
            head_hidden=self.head_hidden,
            cluster=cluster,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# file key -> dataclass field
KEYS = {
    "lr": "lr",
    "iterations": "iterations",
    "lambda": "lam",
    "seed": "seed",
    "threads": "threads",
    "clip_norm": "clip_norm",
    "ncc.window": "ncc_window",
    "ncc.reduction": "ncc_reduction",
    "encoder.channels": "channels",
    "matching.window": "match_window",
    "head.hidden": "head_hidden",
    "sacb.scales": "sacb_scales",
    "sacb.clusters": "clusters",
    "sacb.mode": "mode",
    "sacb.share_streams": "share_streams",
    "sacb.max_iter": "kmeans_max_iter",
    "sacb.tol": "kmeans_tol",
    "sacb.detach_centroids": "detach_centroids",
    "sacb.warm_start": "warm_start",
    "data.source": "data_source",
    "data.path": "data_path",
    "data.size": "data_size",
    "data.max_disp": "data_max_disp",
    "data.sigma": "data_sigma",
    "data.seed": "data_seed",
    "data.resample": "data_resample",
    "checkpoint.path": "checkpoint_path",
    "checkpoint.every": "checkpoint_every",
    "log.trace": "trace_path",
    "log.every": "log_every",
}
_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def parse_value(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            text = raw.strip("[]() ")
            if text.lower() in ("", "none"):
                return ()
            return tuple(int(p) for p in text.replace(",", " ").split())
    except ValueError:
        raise ContractError(f"bad value for {name}: {raw!r}") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value) if value else "none"
    return str(value)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = dataclasses.asdict(base) if base is not None else {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ContractError(f"line {lineno}: unknown config key {key!r}")
        values[KEYS[key]] = parse_value(KEYS[key], raw)
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"{key} = {_format_value(getattr(cfg, name))}" for key, name in KEYS.items()]
    return "\n".join(lines) + "\n"

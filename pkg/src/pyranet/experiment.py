"""Serializable experiment configuration and the run driver behind ``pyranet train``."""
from __future__ import annotations

import json
import platform
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy

from . import __version__
from .hourglass import HourglassConfig
from .init import InitScheme
from .seeds import derive_seed
from .synth import JOINT_NAMES, Dataset, FigureSpec, generate, load_dataset
from .train import TrainConfig, TrainResult, train

__all__ = ["DataConfig", "ExperimentConfig", "make_datasets", "run_experiment", "versions"]


@dataclass(frozen=True)
class DataConfig:
    """Either a dataset directory (``path``) or a generation recipe."""

    path: str | None = None
    train_split: str = "train"
    val_split: str = "val"
    train_count: int = 2000
    val_count: int = 200
    figure: FigureSpec = field(default_factory=FigureSpec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["figure"] = self.figure.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DataConfig":
        d = dict(d)
        if "figure" in d:
            d["figure"] = FigureSpec.from_dict(d["figure"])
        return cls(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    model: HourglassConfig = field(default_factory=lambda: HourglassConfig(channels=16))
    init: InitScheme = field(default_factory=lambda: InitScheme("msr"))
    optimization: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out: str | None = None

    def to_dict(self) -> dict:
        opt = self.optimization.to_dict()
        opt.pop("seed")
        return {
            "model": self.model.to_dict(),
            "init": asdict(self.init),
            "optimization": opt,
            "data": self.data.to_dict(),
            "seed": self.seed,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        base = cls()
        seed = int(d.get("seed", base.seed))
        opt = dict(d.get("optimization", {}))
        opt["seed"] = seed
        return cls(
            model=HourglassConfig.from_dict(d["model"]) if "model" in d else base.model,
            init=InitScheme(**d["init"]) if "init" in d else base.init,
            optimization=TrainConfig.from_dict({**base.optimization.to_dict(), **opt}),
            data=DataConfig.from_dict(d["data"]) if "data" in d else base.data,
            seed=seed,
            out=d.get("out", base.out),
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, optimization=replace(self.optimization, seed=seed))


def versions() -> dict:
    return {"pyranet": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def make_datasets(cfg: DataConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Load the configured splits, or generate disjoint train/val sets from a derived seed."""
    if cfg.path is not None:
        root = Path(cfg.path)
        if not (root / "index.json").is_file():
            raise FileNotFoundError(f"dataset directory {root} has no index.json")
        splits = load_dataset(root)
        for name in (cfg.train_split, cfg.val_split):
            if name not in splits:
                raise KeyError(f"dataset {root} has no split {name!r} (found {sorted(splits)})")
        return splits[cfg.train_split], splits[cfg.val_split]
    data_seed = derive_seed(seed, "data")
    tr = generate(cfg.train_count, cfg.figure, data_seed, start=0)
    va = generate(cfg.val_count, cfg.figure, data_seed, start=cfg.train_count)
    return tr, va


def run_experiment(cfg: ExperimentConfig, progress=None) -> TrainResult:
    """Train one model; with ``cfg.out`` set, the run directory gets config.json,
    metrics.csv and the checkpoint."""
    train_data, val_data = make_datasets(cfg.data, cfg.seed)
    out = None
    if cfg.out is not None:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "versions": versions()}, indent=1))
    opt = replace(cfg.optimization, seed=cfg.seed)
    return train(cfg.model, train_data, val_data, opt, cfg.init, out_dir=out, joint_names=JOINT_NAMES,
                 progress=progress)

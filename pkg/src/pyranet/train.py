"""RMSProp training of stacked hourglasses, checkpoints and metric logs."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .graph import Graph, backward, forward
from .hourglass import (HourglassConfig, KeypointSet, build_hourglass, decode_keypoints, make_targets,
                        mse_loss, pck)
from .init import InitScheme, apply_init
from .seeds import derive_seed
from .synth import FLIP_PERMUTATION, Dataset, image_to_heatmap

log = logging.getLogger(__name__)

__all__ = [
    "TrainingDiverged",
    "CheckpointError",
    "TrainConfig",
    "rmsprop_step",
    "lr_at",
    "augment_sample",
    "flip_sample",
    "bbox_normalizer",
    "predict",
    "evaluate",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "METRIC_COLUMNS",
]

CHECKPOINT_FORMAT = "pyranet-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    """Loss or gradient became non-finite."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 7e-4
    lr_drops: tuple[int, ...] = (20, 27)
    lr_factor: float = 0.1
    rms_decay: float = 0.99
    rms_eps: float = 1e-8
    sigma: float = 1.0
    augment: bool = True
    scale_jitter: float = 0.25
    max_rotation: float = 30.0
    noise_std: float = 0.05
    pck_threshold: float = 0.2
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drops"] = list(self.lr_drops)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "lr_drops" in d:
            d["lr_drops"] = tuple(d["lr_drops"])
        return cls(**d)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Piecewise-constant schedule; ``epoch`` counts from 0."""
    return cfg.lr * cfg.lr_factor ** sum(epoch >= d for d in cfg.lr_drops)


def rmsprop_step(params: dict, grads: Mapping, state: dict, lr: float, decay: float = 0.99,
                 eps: float = 1e-8) -> dict:
    """In-place RMSProp: acc <- decay acc + (1-decay) g^2; p <- p - lr g / (sqrt(acc) + eps)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        acc = state.get(name)
        if acc is None:
            acc = state[name] = np.zeros_like(params[name])
        acc *= decay
        acc += (1 - decay) * g * g
        params[name] -= (lr * g / (np.sqrt(acc) + eps)).astype(params[name].dtype)
    return params


# ---------------------------------------------------------------------------
# augmentation


def flip_sample(image: np.ndarray, joints: np.ndarray):
    """Mirror horizontally and swap left/right joint labels."""
    w = image.shape[-1]
    flipped = image[..., ::-1].copy()
    j = joints[list(FLIP_PERMUTATION)].copy()
    j[:, 0] = (w - 1) - j[:, 0]
    return flipped, j


def augment_sample(image: np.ndarray, joints: np.ndarray, rng: np.random.Generator, cfg: TrainConfig,
                   tries: int = 10):
    """Random scale, rotation, flip and additive noise of one (1, S, S) image.

    Parameters are redrawn while any joint would leave the image; after
    ``tries`` failures the geometry is left unchanged.
    """
    size = image.shape[-1]
    c = np.array([(size - 1) / 2, (size - 1) / 2])
    for _ in range(tries):
        s = rng.uniform(1 - cfg.scale_jitter, 1 + cfg.scale_jitter)
        a = np.deg2rad(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
        flip = rng.random() < 0.5
        A = s * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])  # acts on (x, y)
        new_joints = (joints - c) @ A.T + c
        if np.all((new_joints >= 0) & (new_joints <= size - 1)):
            break
    else:
        A = np.eye(2)
        new_joints = joints.copy()
        flip = False
    # ndimage works in (row, col) = (y, x); map output coords back to input
    inv = np.linalg.inv(A)
    M = inv[::-1, ::-1]
    cyx = c[::-1]
    offset = cyx - M @ cyx
    out = ndimage.affine_transform(image[0].astype(np.float64), M, offset=offset, order=1,
                                   mode="constant", cval=0.0)[None]
    if flip:
        out, new_joints = flip_sample(out, new_joints)
    if cfg.noise_std > 0:
        out = out + rng.normal(0.0, cfg.noise_std, size=out.shape)
    return out.astype(np.float32), new_joints


def _sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


def bbox_normalizer(joints_hm: np.ndarray, visible=None) -> float:
    """Diagonal of the bounding box of the (visible) joints."""
    j = joints_hm if visible is None else joints_hm[np.asarray(visible, dtype=bool)]
    span = j.max(axis=0) - j.min(axis=0)
    return float(max(np.hypot(*span), 1e-6))


# ---------------------------------------------------------------------------
# evaluation


def predict(graph: Graph, params, state, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Last-stack score maps in eval mode."""
    outs = []
    for i in range(0, len(images), batch_size):
        o, _ = forward(graph, params, [images[i:i + batch_size]], train=False, state=state)
        outs.append(o[-1])
    return np.concatenate(outs)


def evaluate(graph: Graph, params, state, data: Dataset, threshold: float = 0.2,
             batch_size: int = 32):
    """(per-joint PCK, mean PCK) with the bounding-box-diagonal normalizer."""
    heat = predict(graph, params, state, data.images, batch_size)
    preds = decode_keypoints(heat)
    gts = [data[i][1] for i in range(len(data))]
    norms = [bbox_normalizer(g.joints, g.visible) for g in gts]
    return pck(preds, gts, threshold, norms)


# ---------------------------------------------------------------------------
# training


METRIC_COLUMNS_BASE = ["epoch", "lr"]


def metric_columns(stacks: int, joints: Sequence[str]) -> list[str]:
    return (METRIC_COLUMNS_BASE + [f"loss_stack{s}" for s in range(stacks)]
            + [f"val_pck_{j}" for j in joints] + ["val_pck_mean"])


METRIC_COLUMNS = metric_columns


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class TrainResult:
    graph: Graph
    params: dict
    state: dict
    history: list[dict]
    seconds: float

    @property
    def final_pck(self) -> float:
        return self.history[-1]["val_pck_mean"]


def train(model: HourglassConfig, train_data: Dataset, val_data: Dataset | None, cfg: TrainConfig,
          init: InitScheme = InitScheme(), *, out_dir=None, joint_names=None, progress=None) -> TrainResult:
    """RMSProp on the summed per-stack squared error with per-epoch validation.

    Writes ``metrics.csv`` and a checkpoint to ``out_dir`` when given.  On a
    non-finite loss the last good parameters are checkpointed and
    :class:`TrainingDiverged` is raised.
    """
    if len(train_data) == 0:
        raise ValueError("training set is empty")
    size = train_data.images.shape[-1]
    model.check_input(size, size)
    graph = build_hourglass(model)
    params = apply_init(graph, init, seed=derive_seed(cfg.seed, "init"))
    state = graph.init_state()
    opt_state: dict = {}
    hm = size // model.stride
    joint_names = list(joint_names or [f"j{k}" for k in range(model.joints)])
    columns = metric_columns(model.stacks, joint_names)
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
    shuffle_seed = derive_seed(cfg.seed, "shuffle")
    augment_seed = derive_seed(cfg.seed, "augment")
    history = []
    t0 = time.perf_counter()
    n = len(train_data)
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(cfg, epoch)
            order = np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch])).permutation(n)
            stack_loss = np.zeros(model.stacks)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                imgs, kps = [], []
                for i in idx:
                    img, jts = train_data.images[i], train_data.joints[i]
                    if cfg.augment:
                        img, jts = augment_sample(img, jts, _sample_rng(augment_seed, epoch, i), cfg)
                    imgs.append(img)
                    kps.append(KeypointSet(image_to_heatmap(jts, model.stride), train_data.visible[i]))
                x = np.stack(imgs)
                target = make_targets(kps, hm, hm, cfg.sigma)
                outs, cache = forward(graph, params, [x], train=True, state=state)
                total, losses, grads = mse_loss(outs, target)
                if not math.isfinite(total):
                    raise TrainingDiverged(f"loss became {total} at epoch {epoch}")
                stack_loss += losses
                pgrads, _ = backward(graph, params, cache, grads, input_grads=False)
                rmsprop_step(params, pgrads, opt_state, lr, cfg.rms_decay, cfg.rms_eps)
            row = {"epoch": epoch, "lr": lr}
            for s in range(model.stacks):
                row[f"loss_stack{s}"] = stack_loss[s] / n
            if val_data is not None:
                per_joint, mean = evaluate(graph, params, state, val_data, cfg.pck_threshold)
            else:
                per_joint, mean = np.full(model.joints, np.nan), float("nan")
            for name, v in zip(joint_names, per_joint):
                row[f"val_pck_{name}"] = v
            row["val_pck_mean"] = mean
            history.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[c]) for c in columns])
                fh.flush()
            log.info("epoch %d lr %.2g loss %s val PCK %.4f", epoch, lr,
                     " ".join(f"{l / n:.3f}" for l in stack_loss), mean)
            if progress is not None:
                progress(row)
    except TrainingDiverged:
        if out_dir is not None:
            save_checkpoint(out_dir, graph, params, state, {"model": model.to_dict(), "diverged": True})
        raise
    finally:
        if writer is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir, graph, params, state, {"model": model.to_dict()})
    return TrainResult(graph, params, state, history, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + weights.f32 (raw little-endian float32)


def save_checkpoint(path, graph: Graph, params: Mapping, state: Mapping | None = None,
                    meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks = [], []
    offset = 0

    def put(name, kind, arr):
        nonlocal offset
        a = np.asarray(arr, dtype="<f4").reshape(-1)
        entries.append({"name": name, "kind": kind, "shape": list(np.shape(arr)), "offset": offset,
                        "count": int(a.size)})
        chunks.append(a)
        offset += a.size

    for name in graph.params:
        put(name, "param", params[name])
    for bn, stats in (state or {}).items():
        for key in ("mean", "var"):
            put(f"{bn}:{key}", "state", stats[key])
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
    blob.tofile(path / "weights.f32")
    manifest = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "blob": "weights.f32",
                "blob_floats": int(blob.size), "tensors": entries, "graph": graph.to_dict(),
                "meta": dict(meta or {})}
    (path / "manifest.json").write_text(json.dumps(manifest))
    return path


def load_checkpoint(path):
    """Returns (graph, params, state, meta); rejects blobs whose length disagrees with the manifest."""
    path = Path(path)
    mfile = path / "manifest.json"
    if not mfile.is_file():
        raise CheckpointError(f"no checkpoint manifest at {mfile}")
    manifest = json.loads(mfile.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{mfile} is not a {CHECKPOINT_FORMAT} manifest")
    blob_path = path / manifest["blob"]
    if not blob_path.is_file():
        raise CheckpointError(f"missing weight blob {blob_path}")
    raw = np.fromfile(blob_path, dtype="<f4")
    if raw.size != manifest["blob_floats"]:
        raise CheckpointError(
            f"weight blob {blob_path.name} holds {raw.size} floats, manifest expects {manifest['blob_floats']}"
        )
    graph = Graph.from_dict(manifest["graph"])
    params, state = {}, {}
    for e in manifest["tensors"]:
        arr = raw[e["offset"]:e["offset"] + e["count"]].astype(np.float32).reshape(e["shape"])
        if e["kind"] == "param":
            params[e["name"]] = arr
        else:
            bn, key = e["name"].rsplit(":", 1)
            state.setdefault(bn, {})[key] = arr.astype(np.float64)
    missing = set(graph.params) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)[:3]}")
    for name, spec in graph.params.items():
        if tuple(params[name].shape) != spec.shape:
            raise CheckpointError(f"parameter {name!r} has shape {params[name].shape}, graph expects {spec.shape}")
    return graph, params, state, manifest.get("meta", {})

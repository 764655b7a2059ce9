"""Synthetic stick figures with per-limb foreshortening.

Each figure has a torso, a head and four limbs ending in the five labelled
joints (head, left/right hand, left/right foot).  Limb lengths are scaled by
an independent foreshortening factor, so the apparent scale of body parts
varies inside one image.  "Left" and "right" are from the viewer's side:
left limbs point into the left half-plane of the torso.

Coordinates are (x, y) in image pixels with pixel centers at integers.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "JOINT_NAMES",
    "FLIP_PERMUTATION",
    "FigureSpec",
    "Dataset",
    "render_figure",
    "sample_pose",
    "generate",
    "save_dataset",
    "load_dataset",
    "image_to_heatmap",
]

JOINT_NAMES = ("head", "left_hand", "right_hand", "left_foot", "right_foot")
FLIP_PERMUTATION = (0, 2, 1, 4, 3)
LIMBS = ("left_arm", "right_arm", "left_leg", "right_leg")

INDEX_FORMAT = "pyranet-synth"
INDEX_VERSION = 1


@dataclass(frozen=True)
class FigureSpec:
    """Skeleton, pose ranges (degrees, counter-clockwise from +x) and render settings."""

    image_size: int = 64
    torso_half: float = 5.0
    head_offset: float = 5.0
    arm_length: float = 14.0
    leg_length: float = 15.0
    center_jitter: float = 3.0
    torso_tilt: tuple[float, float] = (-15.0, 15.0)
    left_arm: tuple[float, float] = (100.0, 230.0)
    left_leg: tuple[float, float] = (200.0, 260.0)
    foreshortening: tuple[float, float] = (0.4, 1.0)
    limb_width: float = 1.0
    limb_intensity: float = 0.5
    joint_sigma: float = 1.2
    joint_intensity: float = 1.0

    def __post_init__(self):
        lo, hi = self.foreshortening
        if not 0.4 <= lo <= hi <= 1.0:
            raise ValueError(f"foreshortening range must lie in [0.4, 1.0], got {self.foreshortening}")
        if self.limb_intensity >= self.joint_intensity:
            raise ValueError("joint blobs must be brighter than limbs")

    @property
    def right_arm(self) -> tuple[float, float]:
        return (180.0 - self.left_arm[1], 180.0 - self.left_arm[0])

    @property
    def right_leg(self) -> tuple[float, float]:
        return (540.0 - self.left_leg[1], 540.0 - self.left_leg[0])

    def angle_range(self, limb: str) -> tuple[float, float]:
        return getattr(self, limb)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FigureSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _direction(deg):
    r = np.deg2rad(deg)
    return np.array([np.cos(r), -np.sin(r)])  # image y points down


def sample_pose(rng: np.random.Generator, spec: FigureSpec) -> dict:
    """Draw pose parameters; every range is sampled uniformly."""
    pose = {
        "center": (spec.image_size - 1) / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter, size=2),
        "tilt": rng.uniform(*spec.torso_tilt),
    }
    for limb in LIMBS:
        pose[f"{limb}_angle"] = rng.uniform(*spec.angle_range(limb))
        pose[f"{limb}_foreshortening"] = rng.uniform(*spec.foreshortening)
    pose["center"] = [float(v) for v in pose["center"]]
    return {k: (float(v) if not isinstance(v, list) else v) for k, v in pose.items()}


def skeleton(pose: dict, spec: FigureSpec) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Joint coordinates (K, 2) and the limb segments of a pose."""
    c = np.asarray(pose["center"], dtype=np.float64)
    up = _direction(90.0 + pose["tilt"])
    neck = c + spec.torso_half * up
    pelvis = c - spec.torso_half * up
    head = neck + spec.head_offset * up

    def end(origin, limb, length):
        return origin + length * pose[f"{limb}_foreshortening"] * _direction(pose[f"{limb}_angle"] + pose["tilt"])

    lh = end(neck, "left_arm", spec.arm_length)
    rh = end(neck, "right_arm", spec.arm_length)
    lf = end(pelvis, "left_leg", spec.leg_length)
    rf = end(pelvis, "right_leg", spec.leg_length)
    joints = np.stack([head, lh, rh, lf, rf])
    segments = [(pelvis, neck), (neck, head), (neck, lh), (neck, rh), (pelvis, lf), (pelvis, rf)]
    return joints, segments


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros_like(px) if denom == 0 else np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0, 1)
    dx = px - (a[0] + t * ab[0])
    dy = py - (a[1] + t * ab[1])
    return np.sqrt(dx * dx + dy * dy)


def render_figure(joints, segments, spec: FigureSpec, *, blobs: bool = True) -> np.ndarray:
    """Grayscale (H, W) rendering: anti-aliased limb lines, Gaussian joint blobs.

    Limbs and blobs are combined by maximum so blob cores stay the brightest pixels.
    """
    n = spec.image_size
    py, px = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.zeros((n, n))
    for a, b in segments:
        d = _segment_distance(px, py, a, b)
        cover = np.clip(spec.limb_width + 0.5 - d, 0, 1)
        img = np.maximum(img, spec.limb_intensity * cover)
    if blobs:
        for j in joints:
            d2 = (px - j[0]) ** 2 + (py - j[1]) ** 2
            img = np.maximum(img, spec.joint_intensity * np.exp(-d2 / (2 * spec.joint_sigma ** 2)))
    return img


def image_to_heatmap(joints, stride: int = 4):
    """Map image-pixel coordinates to heatmap pixels of a ``stride``-downsampled map."""
    return (np.asarray(joints, dtype=np.float64) - (stride - 1) / 2) / stride


@dataclass
class Dataset:
    """Images (N, 1, S, S) float32, joints (N, K, 2) in image pixels, per-sample poses."""

    images: np.ndarray
    joints: np.ndarray
    visible: np.ndarray
    poses: list = field(default_factory=list)
    spec: FigureSpec = field(default_factory=FigureSpec)
    seed: int = 0

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        from .hourglass import KeypointSet

        return self.images[i], KeypointSet(image_to_heatmap(self.joints[i]), self.visible[i])


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    # per-sample streams keep generation order-independent
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate(count: int, spec: FigureSpec = FigureSpec(), seed: int = 0, start: int = 0) -> Dataset:
    """``count`` figures from sample indices start..start+count-1 of ``seed``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    n = spec.image_size
    images = np.zeros((count, 1, n, n), dtype=np.float32)
    joints = np.zeros((count, len(JOINT_NAMES), 2))
    poses = []
    for i in range(count):
        rng = _sample_rng(seed, start + i)
        while True:
            pose = sample_pose(rng, spec)
            jts, segs = skeleton(pose, spec)
            if np.all((jts >= 0) & (jts <= n - 1)):
                break
        images[i, 0] = render_figure(jts, segs, spec)
        joints[i] = jts
        poses.append(pose)
    visible = np.ones(joints.shape[:2], dtype=bool)
    return Dataset(images, joints, visible, poses, spec, seed)


# ---------------------------------------------------------------------------
# on-disk layout: <dir>/index.json + <dir>/<split>.f32 (raw little-endian float32)


def save_dataset(path, splits: dict[str, Dataset]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {"format": INDEX_FORMAT, "version": INDEX_VERSION, "joint_names": list(JOINT_NAMES),
             "splits": {}}
    for name, ds in splits.items():
        blob = f"{name}.f32"
        ds.images.astype("<f4").tofile(path / blob)
        index["splits"][name] = {
            "blob": blob,
            "shape": list(ds.images.shape),
            "seed": ds.seed,
            "spec": ds.spec.to_dict(),
            "samples": [
                {"id": i, "joints": ds.joints[i].round(6).tolist(),
                 "visible": ds.visible[i].tolist(), "pose": ds.poses[i]}
                for i in range(len(ds))
            ],
        }
    (path / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return path


def load_dataset(path) -> dict[str, Dataset]:
    path = Path(path)
    idx_file = path / "index.json"
    if not idx_file.is_file():
        raise FileNotFoundError(f"no dataset index at {idx_file}")
    index = json.loads(idx_file.read_text())
    if index.get("format") != INDEX_FORMAT:
        raise ValueError(f"{idx_file} is not a {INDEX_FORMAT} index")
    out = {}
    for name, meta in index["splits"].items():
        shape = tuple(meta["shape"])
        raw = np.fromfile(path / meta["blob"], dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise ValueError(f"{meta['blob']}: expected {int(np.prod(shape))} floats, found {raw.size}")
        samples = meta["samples"]
        out[name] = Dataset(
            raw.reshape(shape).astype(np.float32),
            np.array([s["joints"] for s in samples], dtype=np.float64),
            np.array([s["visible"] for s in samples], dtype=bool),
            [s["pose"] for s in samples],
            FigureSpec.from_dict(meta["spec"]),
            meta["seed"],
        )
    return out

"""Stacked hourglass assembly, score-map targets, loss, decoding and PCK."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .graph import Graph, GraphBuilder, GraphError
from .prm import PRMConfig, prm_unit, residual_unit

__all__ = [
    "HourglassConfig",
    "KeypointSet",
    "build_hourglass",
    "make_target",
    "make_targets",
    "mse_loss",
    "decode_keypoints",
    "pck",
]


@dataclass(frozen=True)
class HourglassConfig:
    """Stacked hourglass geometry.

    ``block`` is ``None`` for plain residual units or a :class:`PRMConfig`
    whose channel fields are overridden by ``channels``.  ``variance_fix``
    swaps the identity skip of the upper residual unit at every skip-sum for
    BN-ReLU-conv1x1.
    """

    stacks: int = 2
    depth: int = 3
    channels: int = 32
    joints: int = 5
    in_channels: int = 1
    block: PRMConfig | None = None
    variance_fix: bool = False

    def __post_init__(self):
        if self.stacks < 1 or self.depth < 1 or self.channels < 2 or self.joints < 1:
            raise GraphError("stacks, depth, joints must be >= 1 and channels >= 2")

    @property
    def stride(self) -> int:
        """Image-to-heatmap downsampling of the stem."""
        return 4

    def check_input(self, h: int, w: int):
        need = self.stride * 2 ** self.depth
        if h % need or w % need:
            raise GraphError(f"input {h}x{w} must be divisible by {need} (stem x4, depth {self.depth})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block"] = None if self.block is None else asdict(self.block)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HourglassConfig":
        d = dict(d)
        if d.get("block") is not None:
            d["block"] = PRMConfig(**d["block"])
        return cls(**d)


@dataclass
class KeypointSet:
    """K joint locations (x, y) in heatmap pixels plus visibility flags."""

    joints: np.ndarray
    visible: np.ndarray = None

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 2)
        if self.visible is None:
            self.visible = np.ones(len(self.joints), dtype=bool)
        self.visible = np.asarray(self.visible, dtype=bool)

    def __len__(self):
        return len(self.joints)


def _block(b: GraphBuilder, x: int, cfg: HourglassConfig, skip: str = "identity") -> int:
    c = cfg.channels
    if cfg.block is None:
        return residual_unit(b, x, c, skip=skip)
    return prm_unit(b, x, cfg.block.with_channels(b.channels(x), c), skip=skip)


def _hourglass(b: GraphBuilder, x: int, n: int, cfg: HourglassConfig) -> int:
    with b.scope("up1"):
        up1 = _block(b, x, cfg, skip="bnreluconv" if cfg.variance_fix else "identity")
    low = b.pool(x, "max", 2)
    with b.scope("low1"):
        low = _block(b, low, cfg)
    if n > 1:
        with b.scope(f"inner{n - 1}"):
            low = _hourglass(b, low, n - 1, cfg)
    else:
        with b.scope("low2"):
            low = _block(b, low, cfg)
    with b.scope("low3"):
        low = _block(b, low, cfg)
    up2 = b.resize(low, like=up1, name="up2")
    return b.add(up1, up2, name="skipsum")


def build_hourglass(cfg: HourglassConfig) -> Graph:
    """n stacked hourglasses, one K-channel score-map output per stack."""
    c = cfg.channels
    b = GraphBuilder()
    x = b.input(cfg.in_channels, name="image")
    with b.scope("stem"):
        t = b.relu(b.bn(b.conv(x, c, k=7, stride=2, padding=3)))
        with b.scope("res1"):
            t = residual_unit(b, t, c)
        t = b.pool(t, "max", 2)
        with b.scope("res2"):
            t = residual_unit(b, t, c)
        with b.scope("res3"):
            t = residual_unit(b, t, c)
    inter = t
    for s in range(cfg.stacks):
        with b.scope(f"hg{s}"):
            with b.scope("hourglass"):
                h = _hourglass(b, inter, cfg.depth, cfg)
            with b.scope("post"):
                ll = _block(b, h, cfg)
            ll = b.relu(b.bn(b.conv(ll, c, k=1, name="lin")))
            heat = b.conv(ll, cfg.joints, k=1, name="score")
            b.output(heat)
            if s < cfg.stacks - 1:
                inter = b.add(inter, b.conv(ll, c, k=1, name="ll_"), b.conv(heat, c, k=1, name="score_"),
                              name="next")
    return b.build()


def skip_sum_nodes(graph: Graph) -> list[int]:
    return [n.id for n in graph.nodes if n.name.endswith("skipsum")]


# ---------------------------------------------------------------------------
# targets, loss, decoding


def make_target(joints: KeypointSet, H: int, W: int, sigma: float = 1.0) -> np.ndarray:
    """K x H x W Gaussian score maps with peak 1 at the nearest grid point.

    Invisible joints produce all-zero maps.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    K = len(joints)
    out = np.zeros((K, H, W))
    ys = np.arange(H)[:, None]
    xs = np.arange(W)[None, :]
    for k in range(K):
        if not joints.visible[k]:
            continue
        cx, cy = np.floor(joints.joints[k] + 0.5)
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        out[k] = np.exp(-d2 / (2 * sigma * sigma))
    return out


def make_targets(batch: Sequence[KeypointSet], H: int, W: int, sigma: float = 1.0, dtype=np.float32):
    return np.stack([make_target(k, H, W, sigma) for k in batch]).astype(dtype)


def mse_loss(preds, target, visible=None):
    """Half squared error summed over samples, joints and pixels, and over stacks.

    ``preds`` is one (N, K, H, W) array or a list of them (one per stack).
    Returns ``(total, per_stack_losses, per_stack_grads)``; each gradient is
    pred - target.
    """
    if isinstance(preds, np.ndarray):
        preds = [preds]
    losses, grads = [], []
    for p in preds:
        if p.shape != target.shape:
            raise ValueError(f"prediction shape {p.shape} does not match target {target.shape}")
        d = p - target
        losses.append(0.5 * float(np.sum(d.astype(np.float64) ** 2)))
        grads.append(d)
    return sum(losses), losses, grads


def decode_keypoints(pred) -> KeypointSet | list[KeypointSet]:
    """Argmax location per joint; ties go to the smallest row-major index.

    Accepts (K, H, W) -> KeypointSet, or (N, K, H, W) -> list.
    """
    pred = np.asarray(pred)
    if pred.ndim == 4:
        return [decode_keypoints(p) for p in pred]
    K, H, W = pred.shape
    idx = np.argmax(pred.reshape(K, -1), axis=1)  # first maximum in row-major order
    ys, xs = np.divmod(idx, W)
    return KeypointSet(np.stack([xs, ys], axis=1).astype(np.float64))


def pck(pred: Sequence[KeypointSet], gt: Sequence[KeypointSet], threshold: float, normalizer):
    """Percentage of correct keypoints.

    A visible joint is correct iff its distance to ground truth is at most
    ``threshold * normalizer`` (closed boundary).  Returns
    ``(per_joint, mean)``; the mean is taken over joints with any visible
    sample, unweighted.
    """
    if len(pred) != len(gt):
        raise ValueError("pred and gt must have the same length")
    normalizer = np.broadcast_to(np.asarray(normalizer, dtype=np.float64), (len(gt),))
    if np.any(normalizer <= 0):
        raise ValueError("normalizer must be positive")
    K = len(gt[0])
    hits = np.zeros(K)
    counts = np.zeros(K)
    for p, g, norm in zip(pred, gt, normalizer):
        d = np.linalg.norm(p.joints - g.joints, axis=1)
        ok = d <= threshold * norm
        counts += g.visible
        hits += ok & g.visible
    per_joint = np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)
    valid = counts > 0
    mean = float(per_joint[valid].mean()) if valid.any() else float("nan")
    return per_joint, mean

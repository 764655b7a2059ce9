"""Residual units, pyramid residual modules and their cost accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .graph import Graph, GraphBuilder, GraphError

__all__ = [
    "VARIANTS",
    "PRMConfig",
    "ResidualUnitConfig",
    "pyramid_scales",
    "dilation_rates",
    "residual_unit",
    "prm_unit",
    "build_residual_unit",
    "build_prm",
    "param_count",
    "infer_shapes",
    "flop_count",
]

VARIANTS = ("A", "B", "Bstar", "C", "D")
SKIP_KINDS = ("identity", "conv", "bnreluconv")


@dataclass(frozen=True)
class ResidualUnitConfig:
    in_channels: int = 256
    out_channels: int = 256
    bottleneck: int = 128
    preact: bool = True


@dataclass(frozen=True)
class PRMConfig:
    """Pyramid residual module settings.

    ``levels`` counts the extra pyramid levels c = 1..C (the full-resolution
    bottleneck is always present).  ``bottleneck`` defaults to half of
    ``out_channels``.
    """

    variant: str = "B"
    levels: int = 4
    decay: int = 1
    branch_channels: int = 28
    in_channels: int = 256
    out_channels: int = 256
    weight_shared: bool = False
    bottleneck: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise GraphError(f"invalid PRM variant {self.variant!r}; expected one of {VARIANTS}")
        if self.levels < 1 or self.decay < 1 or self.branch_channels < 1:
            raise GraphError("levels, decay and branch_channels must all be >= 1")
        if self.variant == "Bstar":
            object.__setattr__(self, "weight_shared", True)

    @property
    def mid(self) -> int:
        return self.bottleneck or self.out_channels // 2

    def with_channels(self, in_ch: int, out_ch: int) -> "PRMConfig":
        return replace(self, in_channels=in_ch, out_channels=out_ch)


def pyramid_scales(M: int, C: int) -> list[float]:
    """Relative resolutions 2^(-M c / C) for c = 0..C."""
    if M < 1 or C < 1:
        raise ValueError(f"need M >= 1 and C >= 1, got M={M}, C={C}")
    return [2.0 ** (-M * c / C) for c in range(C + 1)]


def dilation_rates(M: int, C: int) -> list[int]:
    """Dilation standing in for resampling at levels c = 1..C: round(1/s_c)."""
    return [int(math.floor(1 / s + 0.5)) for s in pyramid_scales(M, C)[1:]]


def _preact(b: GraphBuilder, x: int) -> int:
    return b.relu(b.bn(x))


def _bottleneck(b: GraphBuilder, a: int, mid: int, out_ch: int) -> int:
    """1x1 -> 3x3 -> 1x1 on an already pre-activated input."""
    t = b.conv(a, mid, k=1, name="conv1")
    t = b.conv(_preact(b, t), mid, k=3, name="conv2")
    return b.conv(_preact(b, t), out_ch, k=1, name="conv3")


def _skip(b: GraphBuilder, x: int, out_ch: int, kind: str) -> int:
    if kind == "identity":
        if b.channels(x) != out_ch:
            kind = "conv"
        else:
            return x
    if kind == "conv":
        return b.conv(x, out_ch, k=1, name="skip")
    if kind == "bnreluconv":
        with b.scope("skip"):
            return b.conv(_preact(b, x), out_ch, k=1, name="conv")
    raise GraphError(f"unknown skip kind {kind!r}")


def residual_unit(b: GraphBuilder, x: int, out_ch: int | None = None, mid: int | None = None,
                  skip: str = "identity") -> int:
    """Pre-activation bottleneck unit: x + conv1x1(conv3x3(conv1x1(relu(bn(x))))).

    A channel change turns the identity skip into a 1x1 convolution;
    ``skip="bnreluconv"`` replaces it with BN-ReLU-conv1x1 regardless.
    """
    out_ch = out_ch or b.channels(x)
    mid = mid or out_ch // 2
    a = _preact(b, x)
    f = _bottleneck(b, a, mid, out_ch)
    return b.add(_skip(b, x, out_ch, skip), f, name="sum")


def prm_unit(b: GraphBuilder, x: int, cfg: PRMConfig, skip: str = "identity") -> int:
    """x + g(sum_c f_c(x)) + f_0(x), with f_0 the standard bottleneck.

    Levels c >= 1 run on ``branch_channels`` features.  A/B/Bstar/C resample
    by fractional subsampling and bilinear upsampling; D uses dilated 3x3
    convolutions at full resolution instead.  C concatenates the levels.
    """
    out_ch = cfg.out_channels
    k = cfg.branch_channels
    a = _preact(b, x)
    with b.scope("f0"):
        f0 = _bottleneck(b, a, cfg.mid, out_ch)
    scales = pyramid_scales(cfg.decay, cfg.levels)[1:]
    rates = dilation_rates(cfg.decay, cfg.levels)
    levels = []
    with b.scope("pyramid"):
        if cfg.variant != "A":
            shared_in = _preact(b, b.conv(a, k, k=1, name="reduce"))
        shared_w = None
        for c, (s, rate) in enumerate(zip(scales, rates), start=1):
            with b.scope(f"level{c}"):
                if cfg.variant == "A":
                    r = _preact(b, b.conv(a, k, k=1, name="reduce"))
                else:
                    r = shared_in
                if cfg.variant == "D":
                    conv = y = b.conv(r, k, k=3, dilation=rate, weight=shared_w)
                else:
                    conv = b.conv(b.subsample(r, s), k, k=3, weight=shared_w)
                    y = b.resize(conv, like=r)
                if cfg.weight_shared and shared_w is None:
                    shared_w = b.weight_of(conv)
                levels.append(y)
        if len(levels) == 1:
            merged = levels[0]
        elif cfg.variant == "C":
            merged = b.concat(*levels)
        else:
            merged = b.add(*levels, name="merge")
        g = b.conv(_preact(b, merged), out_ch, k=1, name="g")
    return b.add(_skip(b, x, out_ch, skip), g, f0, name="sum")


def build_residual_unit(cfg: ResidualUnitConfig = ResidualUnitConfig()) -> Graph:
    if not cfg.preact:
        raise GraphError("only pre-activation residual units are supported")
    b = GraphBuilder()
    x = b.input(cfg.in_channels)
    b.output(residual_unit(b, x, cfg.out_channels, cfg.bottleneck))
    return b.build()


def build_prm(cfg: PRMConfig) -> Graph:
    b = GraphBuilder()
    x = b.input(cfg.in_channels)
    b.output(prm_unit(b, x, cfg))
    return b.build()


def param_count(fragment: Graph) -> int:
    """Learnable scalars; a shared weight is counted once."""
    return sum(spec.size for spec in fragment.params.values())


def infer_shapes(graph: Graph, input_shapes) -> list[tuple[int, int, int, int]]:
    """Static NCHW shape of every node for the given input shape(s)."""
    if isinstance(input_shapes, tuple) and isinstance(input_shapes[0], int):
        input_shapes = [input_shapes]
    feeds = dict(zip(graph.inputs, [tuple(s) for s in input_shapes]))
    shapes: list = [None] * len(graph.nodes)
    for n in graph.nodes:
        if n.op == "input":
            shapes[n.id] = feeds[n.id]
            continue
        s = shapes[n.inputs[0]]
        a = n.attrs
        if n.op == "conv":
            oh, ow = T.ConvSpec(a["kernel"], a["stride"], a["padding"], a["dilation"]).output_hw(*s[2:])
            shapes[n.id] = (s[0], n.channels, oh, ow)
        elif n.op == "linear":
            shapes[n.id] = (s[0], n.channels, 1, 1)
        elif n.op == "pool":
            (kh, kw), (sh, sw), (ph, pw) = a["window"], a["stride"], a["padding"]
            shapes[n.id] = (s[0], s[1], (s[2] + 2 * ph - kh) // sh + 1, (s[3] + 2 * pw - kw) // sw + 1)
        elif n.op == "subsample":
            shapes[n.id] = (s[0], s[1], T.scaled_size(s[2], a["ratio"]), T.scaled_size(s[3], a["ratio"]))
        elif n.op == "resize":
            ref = shapes[a["like"]]
            shapes[n.id] = (s[0], s[1], ref[2], ref[3])
        elif n.op == "concat":
            shapes[n.id] = (s[0], n.channels, s[2], s[3])
        else:
            shapes[n.id] = (s[0], n.channels, s[2], s[3])
    return shapes


def flop_count(fragment: Graph, input_shape) -> int:
    """Multiply-accumulates of one forward pass.

    Convolution/linear nodes cost output elements x (in_ch kH kW); resampling
    costs 4 MACs per output element; everything else is free.
    """
    shapes = infer_shapes(fragment, input_shape)
    total = 0
    for n in fragment.nodes:
        out = shapes[n.id]
        if n.op == "conv":
            _, c, kh, kw = n.attrs["kernel"]
            total += int(np.prod(out)) * c * kh * kw
        elif n.op == "linear":
            total += out[0] * n.channels * n.attrs["in_features"]
        elif n.op in ("subsample", "resize"):
            total += 4 * int(np.prod(out))
    return total

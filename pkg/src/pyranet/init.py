"""Weight initialization, including the branch-aware Gaussian scheme.

Layer fans come from :func:`pyranet.graph.layer_fans`: ``C_i``/``C_o`` are
the numbers of summed input branches and output consumers, ``n_i``/``n_o``
the element fan-in/fan-out of the layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .graph import Graph, layer_fans

__all__ = ["InitScheme", "init_std", "apply_init", "KINDS", "COMPROMISES"]

KINDS = ("gaussian_fixed", "xavier", "msr", "branch_aware")
COMPROMISES = ("paper_eq15", "balanced", "forward", "backward")

# CLI spellings
KIND_ALIASES = {"fixed": "gaussian_fixed", "branch": "branch_aware"}
COMPROMISE_ALIASES = {"paper": "paper_eq15"}


@dataclass(frozen=True)
class InitScheme:
    """Initialization rule.

    ``alpha`` is E[f'(y)] of the activation: 0.5 for ReLU, 1 for tanh/sigmoid.
    ``compromise`` selects how branch_aware reconciles the forward condition
    1/(alpha C_i n_i) with the backward condition 1/(alpha C_o n_o):

    * ``paper_eq15``: 1 / (alpha^2 (C_i n_i + C_o n_o))
    * ``balanced``:  2 / (alpha (C_i n_i + C_o n_o))
    * ``forward`` / ``backward``: the one-sided conditions themselves.
    """

    kind: str = "branch_aware"
    alpha: float = 0.5
    fixed_std: float = 0.01
    compromise: str = "paper_eq15"
    allow_any_alpha: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", KIND_ALIASES.get(self.kind, self.kind))
        object.__setattr__(self, "compromise", COMPROMISE_ALIASES.get(self.compromise, self.compromise))
        if self.kind not in KINDS:
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.compromise not in COMPROMISES:
            raise ValueError(f"unknown compromise rule {self.compromise!r}")
        if not self.allow_any_alpha and self.alpha not in (0.5, 1.0):
            raise ValueError(f"alpha must be 0.5 or 1.0 (got {self.alpha}); set allow_any_alpha to override")
        if self.alpha <= 0 or self.fixed_std < 0:
            raise ValueError("alpha must be positive and fixed_std non-negative")


def init_std(scheme: InitScheme, C_i: int, n_i: int, C_o: int, n_o: int) -> float:
    """Standard deviation of the zero-mean Gaussian for one weight layer."""
    if min(C_i, n_i, C_o, n_o) < 1:
        raise ValueError(f"branch and fan counts must be >= 1, got {(C_i, n_i, C_o, n_o)}")
    a = scheme.alpha
    if scheme.kind == "gaussian_fixed":
        return scheme.fixed_std
    if scheme.kind == "xavier":
        return math.sqrt(2 / (n_i + n_o))
    if scheme.kind == "msr":
        return math.sqrt(1 / (a * n_i))
    fwd = C_i * n_i
    bwd = C_o * n_o
    if scheme.compromise == "paper_eq15":
        var = 1 / (a * a * (fwd + bwd))
    elif scheme.compromise == "balanced":
        var = 2 / (a * (fwd + bwd))
    elif scheme.compromise == "forward":
        var = 1 / (a * fwd)
    else:
        var = 1 / (a * bwd)
    return math.sqrt(var)


def layer_stds(graph: Graph, scheme: InitScheme) -> dict[str, float]:
    """Requested std for every weight parameter, keyed by parameter name.

    A weight shared by several layers takes the std of the first layer using it.
    """
    fans = layer_fans(graph)
    out = {}
    for nid, (ci, ni, co, no) in fans.items():
        wname = graph.nodes[nid].params[0]
        if wname not in out:
            out[wname] = init_std(scheme, ci, ni, co, no)
    return out


def apply_init(graph: Graph, scheme: InitScheme, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameters: Gaussian weights, zero biases/betas, unit gammas.

    Draws use ``numpy.random.default_rng(seed)`` (PCG64, Gaussian by the
    ziggurat method) in parameter-declaration order, so a seed fixes every value.
    """
    rng = np.random.default_rng(seed)
    stds = layer_stds(graph, scheme)
    params: dict[str, np.ndarray] = {}
    for name, spec in graph.params.items():
        if spec.role == "weight":
            params[name] = (rng.standard_normal(spec.shape) * stds[name]).astype(dtype)
        elif spec.role == "gamma":
            params[name] = np.ones(spec.shape, dtype=dtype)
        else:
            params[name] = np.zeros(spec.shape, dtype=dtype)
    return params


def copy_params(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}

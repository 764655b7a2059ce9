"""Monte-Carlo measurement of forward and backward response variance.

Every probe re-initializes the graph per trial, feeds standard-normal
inputs (or output gradients) and pools the moments of each node's values
over batch, channels, space and trials jointly.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .graph import Graph, GraphBuilder, backward, forward
from .hourglass import HourglassConfig, build_hourglass, skip_sum_nodes
from .init import InitScheme, apply_init
from .prm import residual_unit

__all__ = [
    "VarianceRecord",
    "VarianceTrace",
    "trial_seed",
    "node_depths",
    "probe_forward_variance",
    "probe_backward_variance",
    "build_branch_chain",
    "build_linear_chain",
    "build_fanout",
    "build_residual_chain",
    "simulate_residual_chain",
    "summation_doubling",
    "hourglass_skipsum_variance",
    "report",
    "parse_report",
    "CSV_COLUMNS",
]

CSV_COLUMNS = ("node_id", "depth", "kind", "mean", "variance")
KINDS = ("activation", "gradient")


@dataclass(frozen=True)
class VarianceRecord:
    node_id: int
    depth: int
    kind: str
    mean: float
    variance: float
    samples: int = 0
    name: str = ""


@dataclass
class VarianceTrace:
    """Per-node moments plus the trial count and seed that produced them.

    ``relu_alpha`` maps each ReLU node id to the measured fraction of
    positive inputs, the empirical E[f'(y)].
    """

    records: list[VarianceRecord]
    trials: int
    seed: int
    relu_alpha: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("a variance trace needs at least one trial")
        for r in self.records:
            if r.kind not in KINDS:
                raise ValueError(f"record kind must be one of {KINDS}, got {r.kind!r}")
            if not r.variance >= 0:
                raise ValueError(f"negative or undefined variance for node {r.node_id}")

    def get(self, node_id: int, kind: str = "activation") -> VarianceRecord:
        for r in self.records:
            if r.node_id == node_id and r.kind == kind:
                return r
        raise KeyError((node_id, kind))

    def variance(self, node_id: int, kind: str = "activation") -> float:
        return self.get(node_id, kind).variance

    def select(self, node_ids: Sequence[int], kind: str = "activation", depths=None) -> "VarianceTrace":
        """Sub-trace of the given nodes in the given order, optionally relabelling depths."""
        recs = [self.get(i, kind) for i in node_ids]
        if depths is not None:
            recs = [VarianceRecord(r.node_id, int(d), r.kind, r.mean, r.variance, r.samples, r.name)
                    for r, d in zip(recs, depths)]
        return VarianceTrace(recs, self.trials, self.seed, dict(self.relu_alpha))

    @property
    def mean_relu_alpha(self) -> float:
        return float(np.mean(list(self.relu_alpha.values()))) if self.relu_alpha else float("nan")


class _Moments:
    """Streaming count/mean/M2, merged batch-wise (Chan et al.)."""

    __slots__ = ("n", "mean", "m2")

    def __init__(self):
        self.n, self.mean, self.m2 = 0, 0.0, 0.0

    def update(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64).ravel()
        nb = x.size
        if nb == 0:
            return
        mb = float(x.mean())
        m2b = float(np.sum((x - mb) ** 2))
        n = self.n + nb
        d = mb - self.mean
        self.mean += d * nb / n
        self.m2 += m2b + d * d * self.n * nb / n
        self.n = n

    @property
    def variance(self) -> float:
        return self.m2 / self.n if self.n else float("nan")


def trial_seed(seed: int, trial: int, stream: int = 0) -> int:
    """Seed of one trial, derived by hashing (seed, trial, stream)."""
    return int(np.random.SeedSequence([int(seed), int(trial), int(stream)]).generate_state(1, np.uint64)[0])


def node_depths(graph: Graph) -> list[int]:
    """Longest path from an input, counted in weight layers (conv/linear)."""
    depth = [0] * len(graph.nodes)
    for n in graph.nodes:
        if n.inputs:
            depth[n.id] = max(depth[i] for i in n.inputs) + (n.op in ("conv", "linear"))
    return depth


def _inputs(graph: Graph, rng: np.random.Generator, batch: int, spatial) -> list[np.ndarray]:
    h, w = spatial
    return [rng.standard_normal((batch, graph.nodes[i].channels, h, w)) for i in graph.inputs]


def _trace(graph: Graph, moments: dict[int, _Moments], kind: str, trials: int, seed: int,
           alpha: dict[int, _Moments]) -> VarianceTrace:
    depth = node_depths(graph)
    recs = [VarianceRecord(i, depth[i], kind, m.mean, max(m.variance, 0.0), m.n, graph.nodes[i].name)
            for i, m in sorted(moments.items())]
    return VarianceTrace(recs, trials, seed, {i: m.mean for i, m in alpha.items()})


def _probe(graph: Graph, scheme: InitScheme, trials: int, seed: int, batch: int, spatial,
           nodes, grads: bool) -> VarianceTrace:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    nodes = list(range(len(graph.nodes))) if nodes is None else list(nodes)
    moments = {i: _Moments() for i in nodes}
    relus = [n.id for n in graph.nodes if n.op == "relu"]
    alpha = {i: _Moments() for i in relus}
    for t in range(trials):
        params = apply_init(graph, scheme, trial_seed(seed, t, 0), dtype=np.float64)
        rng = np.random.default_rng(trial_seed(seed, t, 1))
        outs, cache = forward(graph, params, _inputs(graph, rng, batch, spatial), train=True)
        for i in relus:
            alpha[i].update(cache.values[graph.nodes[i].inputs[0]] > 0)
        if grads:
            ograds = [rng.standard_normal(o.shape) for o in outs]
            record: dict[int, np.ndarray] = {}
            backward(graph, params, cache, ograds, input_grads=True, node_grads=record)
            for i in nodes:
                if i in record:
                    moments[i].update(record[i])
        else:
            for i in nodes:
                moments[i].update(cache.values[i])
    moments = {i: m for i, m in moments.items() if m.n}
    return _trace(graph, moments, "gradient" if grads else "activation", trials, seed, alpha)


def probe_forward_variance(graph: Graph, scheme: InitScheme, trials: int = 100, seed: int = 0, *,
                           batch: int = 16, spatial=(1, 1), nodes: Iterable[int] | None = None) -> VarianceTrace:
    """Activation variance of every node (or ``nodes``) under standard-normal inputs.

    Batch normalization runs in training mode on each trial's batch.
    """
    return _probe(graph, scheme, trials, seed, batch, spatial, nodes, grads=False)


def probe_backward_variance(graph: Graph, scheme: InitScheme, trials: int = 100, seed: int = 0, *,
                            batch: int = 16, spatial=(1, 1), nodes: Iterable[int] | None = None) -> VarianceTrace:
    """Variance of the gradient reaching each node from unit-variance output gradients."""
    return _probe(graph, scheme, trials, seed, batch, spatial, nodes, grads=True)


# ---------------------------------------------------------------------------
# probe graphs


def build_branch_chain(layers: int = 16, width: int = 64, branches: int = 2) -> Graph:
    """s_l = sum_b W_{l,b} relu(s_{l-1}), s_0 = input; every sum is named ``layer{l}.sum``."""
    if layers < 1 or branches < 1:
        raise ValueError("layers and branches must be >= 1")
    b = GraphBuilder()
    h = b.input(width)
    s = None
    for l in range(1, layers + 1):
        with b.scope(f"layer{l}"):
            if s is not None:
                h = b.relu(s)
            ys = [b.linear(h, width, bias=False, name=f"branch{k}") for k in range(branches)]
            s = b.add(*ys, name="sum") if branches > 1 else b.identity(ys[0], name="sum")
    b.output(s)
    return b.build()


def build_linear_chain(layers: int = 16, width: int = 64, activation: str | None = None) -> Graph:
    """Plain chain of bias-free linear layers, optional relu/tanh in between."""
    b = GraphBuilder()
    h = b.input(width)
    for l in range(1, layers + 1):
        if l > 1 and activation == "relu":
            h = b.relu(h)
        elif l > 1 and activation == "tanh":
            h = b.tanh(h)
        h = b.linear(h, width, bias=False, name=f"layer{l}")
    b.output(h)
    return b.build()


def build_fanout(width: int = 64, consumers: int = 4) -> Graph:
    """One linear layer whose output feeds ``consumers`` linear heads (all graph outputs)."""
    b = GraphBuilder()
    x = b.input(width)
    y = b.linear(x, width, bias=False, name="trunk")
    for k in range(consumers):
        b.output(b.linear(y, width, bias=False, name=f"head{k}"))
    return b.build()


def build_residual_chain(L: int, channels: int = 16, reset_at: Iterable[int] = ()) -> tuple[Graph, list[int]]:
    """L pre-activation bottleneck units; returns the graph and the unit-output node ids.

    At the 1-based unit positions in ``reset_at`` the identity skip becomes
    BN-ReLU-conv1x1.
    """
    if L < 2:
        raise ValueError("a residual chain needs L >= 2")
    reset_at = set(int(r) for r in reset_at)
    bad = [r for r in reset_at if not 1 <= r <= L]
    if bad:
        raise ValueError(f"reset positions {bad} outside 1..{L}")
    b = GraphBuilder()
    x = b.input(channels)
    units = []
    for l in range(1, L + 1):
        with b.scope(f"unit{l}"):
            x = residual_unit(b, x, channels, skip="bnreluconv" if l in reset_at else "identity")
        units.append(x)
    b.output(x)
    return b.build(), units


def simulate_residual_chain(L: int, reset_at: Iterable[int] = (), trials: int = 100, seed: int = 0, *,
                            channels: int = 16, spatial=(8, 8), batch: int = 4,
                            scheme: InitScheme = InitScheme("msr")) -> VarianceTrace:
    """Output variance after each of the L units; depth is the 1-based unit index."""
    graph, units = build_residual_chain(L, channels, reset_at)
    tr = probe_forward_variance(graph, scheme, trials, seed, batch=batch, spatial=spatial, nodes=units)
    return tr.select(units, depths=range(1, L + 1))


def summation_doubling(trials: int = 100, seed: int = 0, *, channels: int = 16, spatial=(8, 8),
                       batch: int = 4, scheme: InitScheme = InitScheme("msr")) -> tuple[float, VarianceTrace]:
    """Variance of the sum of two independently initialized residual units over that of one unit.

    The units see independent standard-normal inputs; the single-unit
    variance is the average of the two units.
    """
    b = GraphBuilder()
    xa, xb = b.input(channels, "a"), b.input(channels, "b")
    with b.scope("unitA"):
        ua = residual_unit(b, xa, channels)
    with b.scope("unitB"):
        ub = residual_unit(b, xb, channels)
    s = b.add(ua, ub, name="sum")
    b.output(s)
    g = b.build()
    tr = probe_forward_variance(g, scheme, trials, seed, batch=batch, spatial=spatial, nodes=[ua, ub, s])
    single = 0.5 * (tr.variance(ua) + tr.variance(ub))
    return tr.variance(s) / single, tr.select([ua, ub, s], depths=[1, 1, 2])


def hourglass_skipsum_variance(cfg: HourglassConfig, trials: int = 100, seed: int = 0, *,
                               scheme: InitScheme = InitScheme("msr"), batch: int = 2,
                               image_size: int = 64) -> VarianceTrace:
    """Activation variance at every skip-sum of the stacked hourglass; depth numbers them in order."""
    graph = build_hourglass(cfg)
    sums = skip_sum_nodes(graph)
    tr = probe_forward_variance(graph, scheme, trials, seed, batch=batch, spatial=(image_size, image_size),
                                nodes=sums)
    return tr.select(sums, depths=range(len(sums)))


# ---------------------------------------------------------------------------
# reports


def report(trace: VarianceTrace, fmt: str = "csv") -> str:
    """CSV with columns node_id, depth, kind, mean, variance; or a full JSON document."""
    if trace.trials < 1 or not trace.records:
        raise ValueError("cannot report an empty trace")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in trace.records:
            w.writerow([r.node_id, r.depth, r.kind, repr(float(r.mean)), repr(float(r.variance))])
        return buf.getvalue()
    if fmt == "json":
        return json.dumps({
            "trials": trace.trials,
            "seed": trace.seed,
            "columns": list(CSV_COLUMNS),
            "records": [asdict(r) for r in trace.records],
            "relu_alpha": {str(k): v for k, v in trace.relu_alpha.items()},
            "mean_relu_alpha": None if not trace.relu_alpha else trace.mean_relu_alpha,
        }, indent=1)
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(text: str, fmt: str = "csv", *, trials: int = 1, seed: int = 0) -> VarianceTrace:
    """Inverse of :func:`report`.  CSV carries no trial count or seed; pass them in."""
    if fmt == "csv":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_COLUMNS:
            raise ValueError(f"CSV header must be {','.join(CSV_COLUMNS)}")
        recs = [VarianceRecord(int(r[0]), int(r[1]), r[2], float(r[3]), float(r[4])) for r in rows[1:]]
        return VarianceTrace(recs, trials, seed)
    if fmt == "json":
        d = json.loads(text)
        recs = [VarianceRecord(**r) for r in d["records"]]
        return VarianceTrace(recs, d["trials"], d["seed"], {int(k): v for k, v in d["relu_alpha"].items()})
    raise ValueError(f"unknown report format {fmt!r}")

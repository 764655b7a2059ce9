"""Static computation graphs with reverse-mode differentiation.

A :class:`Graph` is an immutable list of :class:`Node` records in insertion
order, which is also a valid topological order because a node may only refer
to nodes created before it.  Parameters are named leaves described by
:class:`ParamSpec`; their values live outside the graph in a plain
``dict[str, ndarray]`` so several parameter sets (trials, optimizer copies)
can share one graph.

Typical use::

    b = GraphBuilder()
    x = b.input(3)
    y = b.relu(b.conv(x, 8, k=3))
    b.output(y)
    g = b.build()
    outs, cache = forward(g, params, {"x": batch})
    pgrads, igrads = backward(g, params, cache, [np.ones_like(outs[0])])
"""
from __future__ import annotations

import contextlib
import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import tensor as T

__all__ = [
    "GraphError",
    "Node",
    "ParamSpec",
    "Graph",
    "GraphBuilder",
    "ForwardCache",
    "forward",
    "backward",
    "branch_degrees",
    "layer_fans",
    "grad_check",
    "check_graph_gradients",
    "GradCheckResult",
    "WEIGHT_OPS",
]

GRAPH_FORMAT = "pyranet-graph"
GRAPH_VERSION = 1

WEIGHT_OPS = frozenset({"conv", "linear"})
# ops a branch count is traced through when looking for the sum feeding a layer
_TRANSPARENT = frozenset({"bn", "relu", "tanh", "pool", "subsample", "resize", "identity"})


class GraphError(ValueError):
    """Invalid graph structure, bindings or cache."""


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    name: str
    channels: int
    attrs: Mapping[str, Any] = field(default_factory=dict)
    params: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "op": self.op,
            "name": self.name,
            "inputs": list(self.inputs),
            "channels": self.channels,
            "attrs": _jsonable(dict(self.attrs)),
            "params": list(self.params),
        }


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    role: str  # weight | bias | gamma | beta
    layer: int  # id of the first node that uses this parameter

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _jsonable(attrs: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in attrs.items()}


class Graph:
    """Immutable DAG of nodes plus parameter descriptions."""

    def __init__(self, nodes: Sequence[Node], params: Mapping[str, ParamSpec],
                 inputs: Sequence[int], outputs: Sequence[int]):
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self.params: Mapping[str, ParamSpec] = MappingProxyType(dict(params))
        self.inputs: tuple[int, ...] = tuple(inputs)
        self.outputs: tuple[int, ...] = tuple(outputs)
        self._validate()
        cons: list[list[int]] = [[] for _ in self.nodes]
        for n in self.nodes:
            for i in n.inputs:
                cons[i].append(n.id)
        self._consumers = tuple(tuple(c) for c in cons)
        self._by_name = {n.name: n.id for n in self.nodes}

    def _validate(self):
        for idx, n in enumerate(self.nodes):
            if n.id != idx:
                raise GraphError(f"node {n.name!r} has id {n.id}, expected {idx}")
            for i in n.inputs:
                if not 0 <= i < idx:
                    raise GraphError(f"node {n.name!r} refers to {i}, which is not an earlier node")
            like = n.attrs.get("like")
            if like is not None and not 0 <= like < idx:
                raise GraphError(f"node {n.name!r} resizes like {like}, which is not an earlier node")
            for p in n.params:
                if p not in self.params:
                    raise GraphError(f"node {n.name!r} uses unknown parameter {p!r}")
        for i in self.inputs:
            if self.nodes[i].op != "input":
                raise GraphError(f"graph input {i} is not an input node")
        if not self.outputs:
            raise GraphError("graph has no outputs")
        used = {p for n in self.nodes for p in n.params}
        for p in self.params:
            if p not in used:
                raise GraphError(f"parameter {p!r} is not used by any node")
        reach = self.ancestors(self.outputs)
        for p in self.params:
            if self.params[p].layer not in reach and not any(
                p in self.nodes[i].params for i in reach
            ):
                raise GraphError(f"parameter {p!r} is not reachable from any output")

    def ancestors(self, ids: Sequence[int]) -> set[int]:
        seen: set[int] = set()
        stack = list(ids)
        while stack:
            i = stack.pop()
            if i in seen:
                continue
            seen.add(i)
            stack.extend(self.nodes[i].inputs)
            like = self.nodes[i].attrs.get("like")
            if like is not None:
                stack.append(like)
        return seen

    def consumers(self, node_id: int) -> tuple[int, ...]:
        """Ids of nodes that take ``node_id`` as a data input (one per edge)."""
        return self._consumers[node_id]

    def fan_out(self, node_id: int) -> int:
        return len(self._consumers[node_id])

    def node(self, key: int | str) -> Node:
        if isinstance(key, str):
            return self.nodes[self._by_name[key]]
        return self.nodes[key]

    @property
    def input_names(self) -> list[str]:
        return [self.nodes[i].name for i in self.inputs]

    def bn_nodes(self) -> list[Node]:
        return [n for n in self.nodes if n.op == "bn"]

    def init_state(self) -> dict[str, dict[str, np.ndarray]]:
        """Fresh running statistics for every batch-norm node."""
        return {
            n.name: {"mean": np.zeros(n.channels), "var": np.ones(n.channels)}
            for n in self.bn_nodes()
        }

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "nodes": [n.to_dict() for n in self.nodes],
            "params": {
                k: {"shape": list(v.shape), "role": v.role, "layer": v.layer}
                for k, v in self.params.items()
            },
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Graph":
        if d.get("format") != GRAPH_FORMAT:
            raise GraphError(f"not a {GRAPH_FORMAT} document")
        if d.get("version") != GRAPH_VERSION:
            raise GraphError(f"unsupported graph version {d.get('version')}")
        nodes = []
        for nd in d["nodes"]:
            attrs = {k: tuple(v) if isinstance(v, list) else v for k, v in nd["attrs"].items()}
            if nd["op"] not in _OPS:
                raise GraphError(f"unknown op {nd['op']!r} at node {nd['name']!r}")
            nodes.append(Node(nd["id"], nd["op"], tuple(nd["inputs"]), nd["name"],
                              nd["channels"], attrs, tuple(nd["params"])))
        params = {k: ParamSpec(k, tuple(v["shape"]), v["role"], v["layer"])
                  for k, v in d["params"].items()}
        return cls(nodes, params, d["inputs"], d["outputs"])

    @classmethod
    def from_json(cls, text: str) -> "Graph":
        return cls.from_dict(json.loads(text))

    def __len__(self):
        return len(self.nodes)

    def __repr__(self):
        return f"Graph({len(self.nodes)} nodes, {len(self.params)} params)"


class GraphBuilder:
    """Incremental, append-only graph construction.

    Every method returns the id of the node it created.  ``scope`` prefixes
    node and parameter names, which keeps checkpoints readable.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._params: dict[str, ParamSpec] = {}
        self._inputs: list[int] = []
        self._outputs: list[int] = []
        self._scope: list[str] = []
        self._counts: dict[str, int] = {}

    @contextlib.contextmanager
    def scope(self, name: str):
        self._scope.append(name)
        try:
            yield self
        finally:
            self._scope.pop()

    def _name(self, base: str) -> str:
        prefix = ".".join(self._scope)
        stem = f"{prefix}.{base}" if prefix else base
        k = self._counts.get(stem, 0)
        self._counts[stem] = k + 1
        return stem if k == 0 else f"{stem}_{k}"

    def channels(self, node_id: int) -> int:
        return self._nodes[node_id].channels

    def weight_of(self, node_id: int) -> str:
        """Name of the weight parameter of a conv/linear node (for sharing)."""
        return self._nodes[node_id].params[0]

    def _add(self, op, inputs, channels, attrs=None, params=(), name=None) -> int:
        nid = len(self._nodes)
        for i in inputs:
            if not 0 <= i < nid:
                raise GraphError(f"input {i} does not exist")
        self._nodes.append(Node(nid, op, tuple(inputs), self._name(name or op), int(channels),
                                dict(attrs or {}), tuple(params)))
        return nid

    def _param(self, base: str, shape, role: str, layer: int) -> str:
        name = self._name(base)
        self._params[name] = ParamSpec(name, tuple(int(s) for s in shape), role, layer)
        return name

    def input(self, channels: int, name: str = "x") -> int:
        nid = self._add("input", (), channels, name=name)
        self._inputs.append(nid)
        return nid

    def conv(self, x: int, out_ch: int, k: int = 1, stride: int = 1, padding: int | None = None,
             dilation: int = 1, bias: bool = True, weight: str | None = None,
             name: str = "conv") -> int:
        """Square convolution; ``padding=None`` keeps the spatial size at stride 1.

        Passing ``weight`` reuses an existing parameter (weight sharing).
        """
        in_ch = self.channels(x)
        if padding is None:
            padding = dilation * (k - 1) // 2
        nid = len(self._nodes)
        shape = (out_ch, in_ch, k, k)
        if weight is None:
            wname = self._param(f"{name}.weight", shape, "weight", nid)
        else:
            if self._params[weight].shape != shape:
                raise GraphError(f"shared weight {weight!r} has shape {self._params[weight].shape}, need {shape}")
            wname = weight
        params = [wname]
        if bias:
            params.append(self._param(f"{name}.bias", (out_ch,), "bias", nid))
        attrs = {"kernel": shape, "stride": (stride, stride), "padding": (padding, padding),
                 "dilation": (dilation, dilation), "bias": bool(bias)}
        return self._add("conv", (x,), out_ch, attrs, params, name)

    def linear(self, x: int, out_features: int, bias: bool = True, in_features: int | None = None,
               name: str = "linear") -> int:
        """Affine map of the flattened (C*H*W) input; output is (N, out, 1, 1)."""
        in_features = in_features or self.channels(x)
        nid = len(self._nodes)
        params = [self._param(f"{name}.weight", (in_features, out_features), "weight", nid)]
        if bias:
            params.append(self._param(f"{name}.bias", (out_features,), "bias", nid))
        attrs = {"in_features": in_features, "bias": bool(bias)}
        return self._add("linear", (x,), out_features, attrs, params, name)

    def bn(self, x: int, eps: float = 1e-5, momentum: float = 0.1, name: str = "bn") -> int:
        c = self.channels(x)
        nid = len(self._nodes)
        g = self._param(f"{name}.gamma", (c,), "gamma", nid)
        b = self._param(f"{name}.beta", (c,), "beta", nid)
        return self._add("bn", (x,), c, {"eps": eps, "momentum": momentum}, (g, b), name)

    def relu(self, x: int, name: str = "relu") -> int:
        return self._add("relu", (x,), self.channels(x), name=name)

    def tanh(self, x: int, name: str = "tanh") -> int:
        return self._add("tanh", (x,), self.channels(x), name=name)

    def identity(self, x: int, name: str = "identity") -> int:
        return self._add("identity", (x,), self.channels(x), name=name)

    def add(self, *xs: int, name: str = "add") -> int:
        if len(xs) < 2:
            raise GraphError("add needs at least two addends")
        chans = {self.channels(x) for x in xs}
        if len(chans) != 1:
            raise GraphError(f"add of mismatched channel counts {sorted(chans)}")
        return self._add("add", xs, chans.pop(), name=name)

    def concat(self, *xs: int, name: str = "concat") -> int:
        return self._add("concat", xs, sum(self.channels(x) for x in xs), name=name)

    def pool(self, x: int, kind: str = "max", window: int = 2, stride: int | None = None,
             padding: int = 0, name: str = "pool") -> int:
        if kind not in ("max", "avg"):
            raise GraphError(f"unknown pool kind {kind!r}")
        stride = window if stride is None else stride
        attrs = {"kind": kind, "window": (window, window), "stride": (stride, stride),
                 "padding": (padding, padding)}
        return self._add("pool", (x,), self.channels(x), attrs, name=name)

    def subsample(self, x: int, ratio: float, name: str = "subsample") -> int:
        if not 0 < ratio <= 1:
            raise GraphError(f"subsample ratio must be in (0, 1], got {ratio}")
        return self._add("subsample", (x,), self.channels(x), {"ratio": float(ratio)}, name=name)

    def resize(self, x: int, like: int, name: str = "resize") -> int:
        """Bilinear resize of ``x`` to the spatial size of node ``like`` (shape only)."""
        return self._add("resize", (x,), self.channels(x), {"like": int(like)}, name=name)

    def output(self, x: int) -> int:
        self._outputs.append(x)
        return x

    def build(self) -> Graph:
        return Graph(self._nodes, self._params, self._inputs, self._outputs)


# ---------------------------------------------------------------------------
# op kernels: forward(node, xs, ps, ctx) -> (y, saved);
#             backward(node, g, xs, ps, saved, need) -> (input grads, param grads)


def _conv_spec(node: Node) -> T.ConvSpec:
    a = node.attrs
    return T.ConvSpec(a["kernel"], a["stride"], a["padding"], a["dilation"])


def _conv_fwd(node, xs, ps, ctx):
    spec = _conv_spec(node)
    y, cols = T.conv2d(xs[0], spec, ps[0], ps[1] if len(ps) > 1 else None, return_cols=True)
    return y, (cols, spec)


def _conv_bwd(node, g, xs, ps, saved, need):
    cols, spec = saved
    gx, gw, gb = T.conv2d_backward(g, xs[0].shape, spec, ps[0], cols, has_bias=len(ps) > 1)
    return [gx], [gw] + ([gb] if len(ps) > 1 else [])


def _linear_fwd(node, xs, ps, ctx):
    x = xs[0]
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != node.attrs["in_features"]:
        raise T.ShapeError(f"linear expects {node.attrs['in_features']} features, got input {x.shape}")
    y = T.linear(flat, ps[0], ps[1] if len(ps) > 1 else None)
    return y.reshape(y.shape[0], y.shape[1], 1, 1), flat


def _linear_bwd(node, g, xs, ps, flat, need):
    g2 = g.reshape(g.shape[0], -1)
    gx, gw, gb = T.linear_backward(g2, flat, ps[0])
    return [gx.reshape(xs[0].shape)], [gw] + ([gb] if len(ps) > 1 else [])


def _bn_fwd(node, xs, ps, ctx):
    mode = "train" if ctx["train"] else "eval"
    state = ctx["state"]
    rs = state.get(node.name) if state is not None else None
    if mode == "train" and not ctx["update_stats"]:
        rs = None
    y, saved = T.batch_norm(xs[0], ps[0], ps[1], node.attrs["eps"], mode, rs, node.attrs["momentum"])
    return y, saved


def _bn_bwd(node, g, xs, ps, saved, need):
    gx, gg, gb = T.batch_norm_backward(g, ps[0], saved)
    return [gx], [gg, gb]


def _relu_fwd(node, xs, ps, ctx):
    return T.relu(xs[0]), None


def _relu_bwd(node, g, xs, ps, saved, need):
    return [T.relu_backward(g, xs[0])], []


def _tanh_fwd(node, xs, ps, ctx):
    y = np.tanh(xs[0])
    return y, y


def _tanh_bwd(node, g, xs, ps, y, need):
    return [g * (1 - y * y)], []


def _identity_fwd(node, xs, ps, ctx):
    return xs[0], None


def _identity_bwd(node, g, xs, ps, saved, need):
    return [g], []


def _add_fwd(node, xs, ps, ctx):
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise T.ShapeError(f"add of mismatched shapes {sorted(shapes)}")
    y = xs[0] + xs[1]
    for x in xs[2:]:
        y += x
    return y, None


def _add_bwd(node, g, xs, ps, saved, need):
    return [g] * len(xs), []


def _concat_fwd(node, xs, ps, ctx):
    return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]


def _concat_bwd(node, g, xs, ps, sizes, need):
    return list(np.split(g, np.cumsum(sizes)[:-1], axis=1)), []


def _pool_fwd(node, xs, ps, ctx):
    a = node.attrs
    y, idx = T.pool(xs[0], a["kind"], a["window"], a["stride"], a["padding"], return_index=True)
    return y, idx


def _pool_bwd(node, g, xs, ps, idx, need):
    a = node.attrs
    return [T.pool_backward(g, xs[0].shape, a["kind"], a["window"], a["stride"], a["padding"], idx)], []


def _subsample_fwd(node, xs, ps, ctx):
    return T.fractional_subsample(xs[0], node.attrs["ratio"]), None


def _resize_fwd(node, xs, ps, ctx):
    h, w = ctx["values"][node.attrs["like"]].shape[2:]
    return T.resize_bilinear(xs[0], h, w), None


def _resample_bwd(node, g, xs, ps, saved, need):
    h, w = xs[0].shape[2:]
    return [T.resize_bilinear_backward(g, h, w)], []


_OPS: dict[str, tuple[Callable, Callable]] = {
    "input": (None, None),
    "conv": (_conv_fwd, _conv_bwd),
    "linear": (_linear_fwd, _linear_bwd),
    "bn": (_bn_fwd, _bn_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "tanh": (_tanh_fwd, _tanh_bwd),
    "identity": (_identity_fwd, _identity_bwd),
    "add": (_add_fwd, _add_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "pool": (_pool_fwd, _pool_bwd),
    "subsample": (_subsample_fwd, _resample_bwd),
    "resize": (_resize_fwd, _resample_bwd),
}


@dataclass
class ForwardCache:
    graph: Graph
    values: list
    saved: list
    train: bool


def _bind_feeds(graph: Graph, feeds) -> dict[int, np.ndarray]:
    if isinstance(feeds, Mapping):
        bound = {}
        for i in graph.inputs:
            name = graph.nodes[i].name
            if name not in feeds:
                raise GraphError(f"graph input {name!r} is not bound")
            bound[i] = feeds[name]
        return bound
    if isinstance(feeds, np.ndarray):
        feeds = [feeds]
    feeds = list(feeds)
    if len(feeds) != len(graph.inputs):
        raise GraphError(f"graph has {len(graph.inputs)} inputs, got {len(feeds)} feeds")
    return dict(zip(graph.inputs, feeds))


def forward(graph: Graph, params: Mapping[str, np.ndarray], feeds, *, train: bool = True,
            state: dict | None = None, update_stats: bool = True):
    """Evaluate every node once in topological order.

    ``state`` holds batch-norm running statistics (see :meth:`Graph.init_state`);
    in train mode they are updated unless ``update_stats`` is false.  Returns
    ``(outputs, cache)``; the cache belongs to this call only.
    """
    bound = _bind_feeds(graph, feeds)
    values: list = [None] * len(graph.nodes)
    saved: list = [None] * len(graph.nodes)
    ctx = {"train": train, "state": state, "update_stats": update_stats, "values": values}
    for node in graph.nodes:
        if node.op == "input":
            x = T.as_tensor(bound[node.id])
            if x.shape[1] != node.channels:
                raise T.ShapeError(f"input {node.name!r} expects {node.channels} channels, got {x.shape}")
            values[node.id] = x
            continue
        xs = [values[i] for i in node.inputs]
        try:
            ps = [params[p] for p in node.params]
        except KeyError as e:
            raise GraphError(f"node {node.name!r}: missing parameter {e.args[0]!r}") from None
        try:
            values[node.id], saved[node.id] = _OPS[node.op][0](node, xs, ps, ctx)
        except T.ShapeError as e:
            raise T.ShapeError(f"node {node.name!r} ({node.op}): {e}") from None
    return [values[i] for i in graph.outputs], ForwardCache(graph, values, saved, train)


def backward(graph: Graph, params: Mapping[str, np.ndarray], cache: ForwardCache | None,
             out_grads, *, input_grads: bool = True, node_grads: dict | None = None):
    """Reverse sweep; returns ``(param_grads, input_grads)`` keyed by name.

    ``out_grads`` aligns with ``graph.outputs``; ``None`` entries detach an
    output.  Gradients reaching a node from several consumers are summed.
    When ``node_grads`` is a dict it receives the gradient of every node
    output that one was computed for, keyed by node id.
    """
    if cache is None or cache.graph is not graph:
        raise GraphError("backward needs the forward cache of the same graph")
    if len(out_grads) != len(graph.outputs):
        raise GraphError(f"expected {len(graph.outputs)} output gradients, got {len(out_grads)}")
    grads: list = [None] * len(graph.nodes)
    for oid, g in zip(graph.outputs, out_grads):
        if g is None:
            continue
        g = np.asarray(g, dtype=cache.values[oid].dtype)
        grads[oid] = g if grads[oid] is None else grads[oid] + g
    needs = _needs_grad(graph, input_grads)
    pgrads: dict[str, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads[node.id]
        if node_grads is not None and g is not None:
            node_grads[node.id] = g
        if g is None or node.op == "input":
            continue
        xs = [cache.values[i] for i in node.inputs]
        ps = [params[p] for p in node.params]
        gin, gpar = _OPS[node.op][1](node, g, xs, ps, cache.saved[node.id], needs)
        for pname, gp in zip(node.params, gpar):
            if pname in pgrads:
                pgrads[pname] = pgrads[pname] + gp
            else:
                pgrads[pname] = gp
        for i, gi in zip(node.inputs, gin):
            if not needs[i]:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi
        grads[node.id] = None if node.id not in graph.outputs else grads[node.id]
    for p in graph.params:
        if p not in pgrads:
            pgrads[p] = np.zeros(graph.params[p].shape, dtype=params[p].dtype)
    igrads = {}
    if input_grads:
        for i in graph.inputs:
            g = grads[i]
            igrads[graph.nodes[i].name] = g if g is not None else np.zeros_like(cache.values[i])
    return pgrads, igrads


def _needs_grad(graph: Graph, input_grads: bool) -> list[bool]:
    """Which node outputs need a gradient: those downstream of a parameter (or input)."""
    needs = [False] * len(graph.nodes)
    for n in graph.nodes:
        if n.op == "input":
            needs[n.id] = input_grads
        elif n.params:
            needs[n.id] = True
        else:
            needs[n.id] = any(needs[i] for i in n.inputs)
    return needs


# ---------------------------------------------------------------------------
# branch bookkeeping


def branch_degrees(graph: Graph) -> dict[int, tuple[int, int]]:
    """Per-node (C_i, C_o): summed input branches and output consumers.

    C_i counts the addends of the elementwise sum that feeds the node, traced
    back through unary elementwise/resampling ops (bn, relu, pooling, resize);
    concatenation does not raise it.  C_o counts the consumers of the node's
    output, traced forward through single-consumer unary ops and sums until the
    signal forks.  Graph outputs count as one consumer.
    """
    out = {}
    for n in graph.nodes:
        out[n.id] = (_count_in(graph, n), _count_out(graph, n))
    return out


def _count_in(graph: Graph, node: Node) -> int:
    if not node.inputs:
        return 1
    if node.op == "add":
        return len(node.inputs)
    cur = graph.nodes[node.inputs[0]]
    while cur.op in _TRANSPARENT:
        cur = graph.nodes[cur.inputs[0]]
    return len(cur.inputs) if cur.op == "add" else 1


def _count_out(graph: Graph, node: Node) -> int:
    cur = node.id
    while True:
        cons = graph.consumers(cur)
        if len(cons) != 1:
            break
        nxt = graph.nodes[cons[0]]
        if nxt.op in _TRANSPARENT or nxt.op == "add":
            cur = nxt.id
        else:
            break
    n = len(graph.consumers(cur))
    if cur in graph.outputs:
        n += 1
    return max(1, n)


def layer_fans(graph: Graph) -> dict[int, tuple[int, int, int, int]]:
    """(C_i, n_i, C_o, n_o) for every weight layer.

    n_i = in_ch*kH*kW and n_o = out_ch*kH*kW for convolutions; in/out
    features for linear layers.
    """
    deg = branch_degrees(graph)
    fans = {}
    for n in graph.nodes:
        if n.op == "conv":
            o, c, kh, kw = n.attrs["kernel"]
            ni, no = c * kh * kw, o * kh * kw
        elif n.op == "linear":
            ni, no = n.attrs["in_features"], n.channels
        else:
            continue
        ci, co = deg[n.id]
        fans[n.id] = (ci, ni, co, no)
    return fans


# ---------------------------------------------------------------------------
# finite-difference checks


def _loss_and_grads(graph, params, feeds, weights, train):
    outs, cache = forward(graph, params, feeds, train=train, state=None, update_stats=False)
    loss = sum(float(np.sum(o * w)) for o, w in zip(outs, weights))
    return loss, cache


def _activity(graph: Graph, cache: ForwardCache) -> list[np.ndarray]:
    """Which piece of every piecewise-linear op (relu sign, max-pool argmax) is active."""
    acts = []
    for n in graph.nodes:
        if n.op == "relu":
            acts.append(cache.values[n.inputs[0]] > 0)
        elif n.op == "pool" and n.attrs["kind"] == "max":
            acts.append(cache.saved[n.id])
    return acts


def _same_activity(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckResult:
    """Worst relative error over the probed coordinates, plus bookkeeping."""

    max_error: float
    checked: int
    skipped: int

    def __float__(self):
        return float(self.max_error)


def check_graph_gradients(graph: Graph, params: Mapping[str, np.ndarray], feeds, *,
                          step: float = 1e-5, train: bool = True, seed: int = 0,
                          max_coords: int | None = None, skip_kinks: bool = False) -> GradCheckResult:
    """Max relative error between backward() and central differences.

    The scalar loss is a fixed random projection of all outputs.  Relative
    error is |analytic - numeric| / max(1, |analytic|).  ``max_coords`` caps
    the number of coordinates probed per tensor (chosen at random).  With
    ``skip_kinks`` a coordinate is skipped when the two stencil evaluations
    fall on different pieces of a relu or max-pool, where a central
    difference does not estimate the derivative; the skip count is reported.
    """
    rng = np.random.default_rng(seed)
    bound = _bind_feeds(graph, feeds)
    feeds = {graph.nodes[i].name: np.array(v, dtype=np.float64) for i, v in bound.items()}
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    outs, _ = forward(graph, params, feeds, train=train, update_stats=False)
    weights = [rng.standard_normal(o.shape) for o in outs]
    _, cache = _loss_and_grads(graph, params, feeds, weights, train)
    pgrads, igrads = backward(graph, params, cache, weights)
    for v in list(pgrads.values()) + list(igrads.values()):
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite analytic gradient")
    worst, checked, skipped = 0.0, 0, 0
    targets = [(params, k, pgrads[k]) for k in params] + [(feeds, k, igrads[k]) for k in feeds]
    for store, key, analytic in targets:
        arr = store[key]
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = analytic.reshape(-1)
        for j in idx:
            old = flat[j]
            flat[j] = old + step
            lp, cp = _loss_and_grads(graph, params, feeds, weights, train)
            flat[j] = old - step
            lm, cm = _loss_and_grads(graph, params, feeds, weights, train)
            flat[j] = old
            if skip_kinks and not _same_activity(_activity(graph, cp), _activity(graph, cm)):
                skipped += 1
                continue
            num = (lp - lm) / (2 * step)
            if not np.isfinite(num):
                raise FloatingPointError(f"non-finite numeric gradient for {key}")
            err = abs(a_flat[j] - num) / max(1.0, abs(a_flat[j]))
            worst = max(worst, err)
            checked += 1
    return GradCheckResult(worst, checked, skipped)


def _single_op_graph(opkind: str, shape, rng):
    """Tiny graph exercising one op, plus matching double-precision params."""
    n, c, h, w = shape
    b = GraphBuilder()
    x = b.input(c)
    if opkind == "conv":
        y = b.conv(x, c + 1, k=3, padding=1)
    elif opkind == "conv_strided":
        y = b.conv(x, c + 1, k=3, stride=2, padding=1)
    elif opkind == "conv_dilated":
        y = b.conv(x, c + 1, k=3, dilation=2)
    elif opkind == "linear":
        y = b.linear(x, 5, in_features=c * h * w)
    elif opkind == "bn":
        y = b.bn(x)
    elif opkind == "relu":
        y = b.relu(x)
    elif opkind == "tanh":
        y = b.tanh(x)
    elif opkind == "add":
        y = b.add(x, b.identity(x), b.relu(x))
    elif opkind == "concat":
        y = b.concat(x, b.relu(x))
    elif opkind in ("maxpool", "avgpool"):
        y = b.pool(x, opkind[:3], window=3, stride=2, padding=1)
    elif opkind == "subsample":
        y = b.subsample(x, 2 ** -0.5)
    elif opkind == "resize":
        y = b.resize(b.subsample(x, 0.5), like=x)
    elif opkind == "conv_bn":
        y = b.bn(b.conv(x, c + 1, k=3, padding=1))
    else:
        raise GraphError(f"no gradient harness for op {opkind!r}")
    b.output(y)
    g = b.build()
    params = {}
    for name, spec in g.params.items():
        if spec.role == "gamma":
            params[name] = 1.0 + 0.1 * rng.standard_normal(spec.shape)
        else:
            params[name] = rng.standard_normal(spec.shape)
    return g, params


GRAD_CHECK_OPS = ("conv", "conv_strided", "conv_dilated", "linear", "bn", "relu", "tanh", "add",
                  "concat", "maxpool", "avgpool", "subsample", "resize", "conv_bn")


def grad_check(opkind: str, point=None, step: float = 1e-5, *, seed: int = 0,
               shape=(2, 3, 6, 6), skip_kinks: bool = False) -> float:
    """Finite-difference check of a single op at ``point`` (random if None).

    For relu the point is pushed away from the kink (|x| > 0.1).
    """
    rng = np.random.default_rng(seed)
    if point is None:
        point = rng.standard_normal(shape)
    point = np.array(point, dtype=np.float64)
    if point.ndim != 4:
        raise T.ShapeError(f"grad_check point must be NCHW, got {point.shape}")
    if not np.all(np.isfinite(point)):
        raise FloatingPointError("grad_check point has non-finite values")
    if opkind in ("relu", "add", "concat"):
        point = np.where(np.abs(point) < 0.1, np.sign(point + 1e-300) * 0.1 + point, point)
    g, params = _single_op_graph(opkind, point.shape, rng)
    return check_graph_gradients(g, params, {"x": point}, step=step, seed=seed, skip_kinks=skip_kinks).max_error

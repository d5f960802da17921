"""Minimal reverse-mode tape over dense float arrays.

A `Graph` is a computation description: a parameter layout plus a builder
that wires tape variables into a (usually scalar) output.  `evaluate` runs
the forward pass, `backward` the exact reverse-mode sweep, and `jvp`
propagates a forward tangent in the same pass — all deterministic, with a
fixed sequential accumulation order.

Shapes are explicit everywhere; the only implicit broadcast is the bias add
inside `affine`.  This keeps the op set small enough to audit against the
finite-difference oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import GraphError, ShapeError
from .params import GradientRecord, ParamVector

__all__ = [
    "Tape", "Var", "Graph",
    "evaluate", "backward", "per_example_gradients", "jvp",
    "affine", "sigmoid", "tanh", "relu", "softplus", "softmax",
    "log_clamped", "pick", "square_sum", "concat", "add_n", "scale",
]


class Var:
    __slots__ = ("tape", "idx", "val", "tan")

    def __init__(self, tape: "Tape", idx: int, val: np.ndarray, tan):
        self.tape = tape
        self.idx = idx
        self.val = val
        self.tan = tan

    def __add__(self, other):
        return _binary("add", self, other, lambda a, b: a + b,
                       lambda g, a, b: (g, g),
                       lambda ta, tb, a, b: ta + tb)

    def __sub__(self, other):
        return _binary("sub", self, other, lambda a, b: a - b,
                       lambda g, a, b: (g, -g),
                       lambda ta, tb, a, b: ta - tb)

    def __mul__(self, other):
        return _binary("mul", self, other, lambda a, b: a * b,
                       lambda g, a, b: (g * b, g * a),
                       lambda ta, tb, a, b: ta * b + a * tb)

    def __neg__(self):
        return _unary("neg", self, lambda a: -a, lambda g, a, y: -g, lambda t, a, y: -t)


class Tape:
    """Records (parents, vjp) per node; replayed in reverse for gradients."""

    def __init__(self):
        self.vars: list[Var] = []
        self.nodes: list[tuple[tuple[int, ...], Callable] | None] = []

    def leaf(self, value, tan=None) -> Var:
        value = np.asarray(value, dtype=np.float64)
        v = Var(self, len(self.vars), value, None if tan is None else np.asarray(tan, dtype=np.float64))
        self.vars.append(v)
        self.nodes.append(None)
        return v

    def record(self, parents: Sequence[Var], value: np.ndarray, vjp: Callable, tan) -> Var:
        v = Var(self, len(self.vars), value, tan)
        self.vars.append(v)
        self.nodes.append((tuple(p.idx for p in parents), vjp))
        return v

    def grads(self, out: Var) -> list:
        """Adjoints of every variable w.r.t. scalar `out`, in creation order."""
        if out.val.shape != ():
            raise GraphError(f"backward requires a scalar loss node, got shape {out.val.shape}")
        adj: list = [None] * len(self.vars)
        adj[out.idx] = np.ones((), dtype=np.float64)
        for idx in range(out.idx, -1, -1):
            g = adj[idx]
            node = self.nodes[idx]
            if g is None or node is None:
                continue
            parents, vjp = node
            for p_idx, contrib in zip(parents, vjp(g)):
                if contrib is None:
                    continue
                if adj[p_idx] is None:
                    adj[p_idx] = np.array(contrib, dtype=np.float64, copy=True)
                else:
                    adj[p_idx] += contrib
        return adj


def _tape_of(*vs: Var) -> Tape:
    return vs[0].tape


def _unary(name, a: Var, fwd, vjp_a, tanfn) -> Var:
    val = fwd(a.val)
    tan = None if a.tan is None else tanfn(a.tan, a.val, val)
    return _tape_of(a).record([a], val, lambda g, a=a, val=val: (vjp_a(g, a.val, val),), tan)


def _binary(name, a: Var, b: Var, fwd, vjp_ab, tanfn) -> Var:
    if a.val.shape != b.val.shape:
        raise ShapeError(name, f"operands {a.val.shape} vs {b.val.shape}")
    val = fwd(a.val, b.val)
    ta = a.tan if a.tan is not None else (None if b.tan is None else np.zeros_like(a.val))
    tb = b.tan if b.tan is not None else (None if a.tan is None else np.zeros_like(b.val))
    tan = None if ta is None else tanfn(ta, tb, a.val, b.val)
    return _tape_of(a, b).record([a, b], val, lambda g, a=a, b=b: vjp_ab(g, a.val, b.val), tan)


def scale(a: Var, c: float) -> Var:
    """Multiply by a python constant."""
    c = float(c)
    return _unary("scale", a, lambda x: c * x, lambda g, x, y: c * g, lambda t, x, y: c * t)


def affine(x: Var, w: Var, b: Var) -> Var:
    """y = x @ w.T + b with x: (n,), w: (m, n), b: (m,)."""
    if x.val.ndim != 1 or w.val.ndim != 2 or b.val.ndim != 1:
        raise ShapeError("affine", f"expected vector/matrix/vector, got {x.val.shape}/{w.val.shape}/{b.val.shape}")
    if w.val.shape[1] != x.val.shape[0] or w.val.shape[0] != b.val.shape[0]:
        raise ShapeError("affine", f"x {x.val.shape} incompatible with w {w.val.shape}, b {b.val.shape}")
    val = w.val @ x.val + b.val

    def vjp(g, x=x, w=w):
        return (g @ w.val, np.outer(g, x.val), g)

    tan = None
    if x.tan is not None or w.tan is not None or b.tan is not None:
        tan = np.zeros_like(val)
        if x.tan is not None:
            tan = tan + w.val @ x.tan
        if w.tan is not None:
            tan = tan + w.tan @ x.val
        if b.tan is not None:
            tan = tan + b.tan
    return _tape_of(x, w, b).record([x, w, b], val, vjp, tan)


def sigmoid(a: Var) -> Var:
    return _unary("sigmoid", a, _sigmoid_np,
                  lambda g, x, y: g * y * (1.0 - y),
                  lambda t, x, y: t * y * (1.0 - y))


def tanh(a: Var) -> Var:
    return _unary("tanh", a, np.tanh,
                  lambda g, x, y: g * (1.0 - y * y),
                  lambda t, x, y: t * (1.0 - y * y))


def relu(a: Var) -> Var:
    return _unary("relu", a, lambda x: np.maximum(x, 0.0),
                  lambda g, x, y: g * (x > 0.0),
                  lambda t, x, y: t * (x > 0.0))


def softplus(a: Var) -> Var:
    return _unary("softplus", a, _softplus_np,
                  lambda g, x, y: g * _sigmoid_np(x),
                  lambda t, x, y: t * _sigmoid_np(x))


def softmax(a: Var) -> Var:
    """Row softmax of a 1-D vector."""
    if a.val.ndim != 1:
        raise ShapeError("softmax", f"expected vector, got {a.val.shape}")
    val = _softmax_np(a.val)

    def vjp(g, val=val):
        return (val * (g - np.dot(g, val)),)

    tan = None if a.tan is None else val * (a.tan - np.dot(val, a.tan))
    return _tape_of(a).record([a], val, vjp, tan)


def log_clamped(a: Var, floor: float = 1e-12) -> Var:
    """log(max(x, floor)); gradient is zero below the floor."""
    clamped = np.maximum(a.val, floor)
    live = a.val >= floor

    def vjp(g, clamped=clamped, live=live):
        return (g * live / clamped,)

    tan = None if a.tan is None else a.tan * live / clamped
    return _tape_of(a).record([a], np.log(clamped), vjp, tan)


def pick(a: Var, index: int) -> Var:
    """Scalar element a[index]."""
    index = int(index)
    if not (0 <= index < a.val.shape[0]):
        raise ShapeError("pick", f"index {index} out of range for shape {a.val.shape}")

    def vjp(g, a=a, index=index):
        out = np.zeros_like(a.val)
        out[index] = g
        return (out,)

    tan = None if a.tan is None else a.tan[index]
    return _tape_of(a).record([a], a.val[index], vjp, tan)


def square_sum(a: Var) -> Var:
    """Scalar sum of squares."""
    val = np.asarray(np.dot(a.val.ravel(), a.val.ravel()))

    def vjp(g, a=a):
        return (2.0 * g * a.val,)

    tan = None if a.tan is None else np.asarray(2.0 * np.dot(a.val.ravel(), a.tan.ravel()))
    return _tape_of(a).record([a], val, vjp, tan)


def concat(a: Var, b: Var) -> Var:
    if a.val.ndim != 1 or b.val.ndim != 1:
        raise ShapeError("concat", f"expected vectors, got {a.val.shape}/{b.val.shape}")
    n = a.val.shape[0]
    val = np.concatenate([a.val, b.val])

    def vjp(g, n=n):
        return (g[:n], g[n:])

    tan = None
    if a.tan is not None or b.tan is not None:
        ta = a.tan if a.tan is not None else np.zeros_like(a.val)
        tb = b.tan if b.tan is not None else np.zeros_like(b.val)
        tan = np.concatenate([ta, tb])
    return _tape_of(a, b).record([a, b], val, vjp, tan)


def add_n(vs: Sequence[Var]) -> Var:
    """Sequential sum of variables (fixed accumulation order)."""
    if not vs:
        raise GraphError("add_n of empty sequence")
    out = vs[0]
    for v in vs[1:]:
        out = out + v
    return out


def _sigmoid_np(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus_np(x):
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _softmax_np(x):
    shifted = x - np.max(x)
    e = np.exp(shifted)
    return e / np.sum(e)


@dataclass
class Graph:
    """Computation description: parameter shapes + a builder callable.

    `build(pvars, inputs)` receives one Var per named parameter segment and
    one Var per input array, and returns the output Var.
    """

    param_shapes: dict[str, tuple[int, ...]]
    build: Callable[[dict[str, Var], list[Var]], Var]
    n_inputs: int = 1


def _run(graph: Graph, params: ParamVector, inputs: Sequence[np.ndarray], tangent=None):
    if len(inputs) != graph.n_inputs:
        raise GraphError(f"graph expects {graph.n_inputs} inputs, got {len(inputs)}")
    tape = Tape()
    pvars = {}
    for name, shape in graph.param_shapes.items():
        seg = params.view(name).astype(np.float64, copy=False)
        if tuple(seg.shape) != tuple(shape):
            raise ShapeError("graph", f"param {name}: expected {shape}, got {seg.shape}")
        tan = None
        if tangent is not None:
            offset, _ = params.layout[name]
            tan = np.asarray(tangent[offset : offset + seg.size], dtype=np.float64).reshape(seg.shape)
        pvars[name] = tape.leaf(seg, tan)
    ivars = [tape.leaf(np.asarray(x, dtype=np.float64)) for x in inputs]
    out = graph.build(pvars, ivars)
    return tape, pvars, out


def evaluate(graph: Graph, params: ParamVector, *inputs) -> np.ndarray:
    """Forward value of the graph; deterministic for identical arguments."""
    _, _, out = _run(graph, params, inputs)
    return out.val


def backward(graph: Graph, params: ParamVector, *inputs) -> GradientRecord:
    """Exact reverse-mode gradient of the scalar output w.r.t. all parameters."""
    tape, pvars, out = _run(graph, params, inputs)
    adj = tape.grads(out)
    segments = {}
    for name, var in pvars.items():
        g = adj[var.idx]
        segments[name] = np.zeros(graph.param_shapes[name]) if g is None else np.asarray(g)
    return GradientRecord(float(out.val), params.flatten_segments(segments))


def per_example_gradients(graph: Graph, params: ParamVector, batch: Sequence) -> list[GradientRecord]:
    """One GradientRecord per example; record i equals `backward` on example i alone."""
    if len(batch) == 0:
        raise GraphError("per_example_gradients: empty batch")
    records = []
    for example in batch:
        example = example if isinstance(example, (tuple, list)) else (example,)
        records.append(backward(graph, params, *example))
    return records


def jvp(graph: Graph, params: ParamVector, inputs: Sequence[np.ndarray], tangent: np.ndarray):
    """Forward-mode derivative of the output along `tangent` (flat, layout order)."""
    tangent = np.asarray(tangent, dtype=np.float64)
    if tangent.shape != (params.size,):
        raise ShapeError("jvp", f"tangent shape {tangent.shape} vs params ({params.size},)")
    _, _, out = _run(graph, params, inputs, tangent=tangent)
    tan = out.tan if out.tan is not None else np.zeros_like(out.val)
    return out.val, tan

"""Small define-by-run reverse-mode autodiff over numpy float64 arrays.

Operations run eagerly. When a :class:`Graph` is active (``with Graph() as g``)
and at least one input requires a gradient, the op is appended to the graph's
tape; ``g.backward(out, params)`` then walks the tape in reverse.
Outside a graph every op is a plain numpy computation, which is what the
sampler uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LN_EPS = 1e-5
ZERO_VAR = 1e-12

OP_KINDS = (
    "matmul", "add", "mul", "concat", "relu", "softmax", "log_softmax",
    "layer_norm", "embedding_gather", "scale", "reduce_sum", "log", "exp",
    "transpose", "reshape",
)


class DimensionError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)


def _not_scalar(t: Tensor):
    raise GraphError(f"expected a scalar tensor, got shape {t.shape}")


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def const(data) -> Tensor:
    return Tensor(data)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


_ACTIVE: list["Graph"] = []


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def backward(self, out: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of the scalar ``out`` w.r.t. each of ``params``.

        Leaves not reachable from ``out`` get a zero array.
        """
        if out.data.size != 1:
            raise GraphError(f"backward needs a scalar output, got shape {out.shape}")
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out_grads = []
        for p in params:
            g = grads.get(id(p))
            out_grads.append(np.zeros_like(p.data) if g is None else g.reshape(p.shape))
        return out_grads


def backward(graph: Graph, out: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    return graph.backward(out, params)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, bwd) -> Tensor:
    needs = False
    for t in inputs:
        if t.requires_grad:
            needs = True
            break
    out = Tensor(out_data, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].nodes.append(Node(op, inputs, out, bwd))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.ndim > len(shape):
        g = g.reshape((-1,) + g.shape[g.ndim - len(shape):]).sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- ops -------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    if A.ndim > 2 and B.ndim == 2:
        # fold leading dims into one GEMM
        A2 = A.reshape(-1, A.shape[-1])

        def bwd2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ B.T).reshape(A.shape) if a.requires_grad else None
            gb = A2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record("matmul", (a, b), (A2 @ B).reshape(A.shape[:-1] + (B.shape[1],)), bwd2)

    def bwd(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(A, -1, -2) @ g if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, A.shape)
        if gb is not None:
            gb = _unbroadcast(gb, B.shape)
        return ga, gb

    return _record("matmul", (a, b), A @ B, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _binary("add", np.add, a, b)
    sa, sb = a.data.shape, b.data.shape
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                              _unbroadcast(g, sb) if b.requires_grad else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = _binary("mul", np.multiply, a, b)
    A, B = a.data, b.data
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * B, A.shape) if a.requires_grad else None,
                              _unbroadcast(g * A, B.shape) if b.requires_grad else None))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(_as_tensor(x) for x in xs)
    nd = xs[0].data.ndim
    ax = axis % nd
    for x in xs:
        if x.data.ndim != nd or any(x.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _record("concat", xs, np.concatenate([x.data for x in xs], axis=ax), bwd)


# When a list is installed here, relu appends the packed sign pattern of every
# call. grad_check uses it to spot finite differences that straddle a kink.
_KINK_TRACE: list | None = None


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    if _KINK_TRACE is not None:
        _KINK_TRACE.append(np.packbits(mask).tobytes())
    return _record("relu", (a,), a.data * mask, lambda g: (g * mask,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (a,), p, bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (a,), out, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalise over the last axis, then ``gain * xhat + bias``.

    Rows with variance below 1e-12 normalise to exactly zero.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.data.sum(axis=-1, keepdims=True) * (1.0 / d)
    xc = x.data - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * (1.0 / d)
    live = var >= ZERO_VAR
    inv = np.where(live, 1.0 / np.sqrt(var + LN_EPS), 0.0)
    xhat = xc * inv
    G = gain.data

    def bwd(g):
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.sum(axis=-1, keepdims=True) * (1.0 / d)
                        - xhat * ((gh * xhat).sum(axis=-1, keepdims=True) * (1.0 / d)))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", (x, gain, bias), xhat * G + bias.data, bwd)


def embedding_gather(table: Tensor, idx) -> Tensor:
    """Rows of ``table`` picked by an integer index array of any shape."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    n = table.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"embedding_gather: index out of range for table {table.shape}")
    shape = table.shape

    def bwd(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("embedding_gather", (table,), table.data[idx], bwd)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        return _record("reduce_sum", (a,), np.asarray(a.data.sum()),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.data.ndim
    return _record("reduce_sum", (a,), a.data.sum(axis=ax),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    return _record("log", (a,), np.log(A), lambda g: (g / A,))


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    e = np.exp(a.data)
    return _record("exp", (a,), e, lambda g: (g * e,))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.data.ndim < 2:
        raise DimensionError(f"transpose: need >= 2 dims, got {a.shape}")
    return _record("transpose", (a,), np.swapaxes(a.data, -1, -2),
                   lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} to {shape}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(old),))


_DISPATCH = {
    "matmul": matmul, "add": add, "mul": mul, "concat": lambda *xs, axis=-1: concat(xs, axis),
    "relu": relu, "softmax": softmax, "log_softmax": log_softmax, "layer_norm": layer_norm,
    "embedding_gather": embedding_gather, "scale": scale, "reduce_sum": reduce_sum,
    "log": log, "exp": exp, "transpose": transpose, "reshape": reshape,
}


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _DISPATCH[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# --- gradient checking -----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float
    shrunk: int = 0          # coordinates re-checked with a smaller step after a kink
    unresolved: int = 0      # coordinates still straddling a kink at the smallest step

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol and self.unresolved == 0


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _traced(loss_fn) -> tuple[float, list]:
    global _KINK_TRACE
    _KINK_TRACE = []
    try:
        v = loss_fn().item()
        return v, _KINK_TRACE
    finally:
        _KINK_TRACE = None


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               tol: float = 1e-4, max_coords: int | None = None,
               rng: np.random.Generator | None = None, floor: float = 1e-6,
               kink_retries: int = 3) -> GradCheckReport:
    """Compare backward() against central differences of ``loss_fn``.

    ``loss_fn`` must rebuild its computation from the current parameter values
    on every call. With ``max_coords`` only that many randomly chosen
    coordinates per parameter are perturbed.

    Two properties of finite differences are accounted for:

    * If the relu sign patterns at ``x + h`` and ``x - h`` differ, the
      difference quotient spans a kink and says nothing about the derivative.
      The step is divided by 10 (up to ``kink_retries`` times) until it no
      longer does; coordinates that never clear are counted as unresolved.
    * A difference quotient cannot resolve derivatives below its rounding
      noise, about ``eps * |f| / h``. The relative-error denominator is
      therefore at least ``4 * eps * max(|f|, 1) / (h * tol)`` (and ``floor``),
      an absolute tolerance in the sense of ``numpy.allclose``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    with Graph() as g:
        out = loss_fn()
    analytic = g.backward(out, params)
    fscale = max(abs(out.item()), 1.0)
    eps = np.finfo(np.float64).eps
    rng = rng or np.random.default_rng(0)
    report: dict[str, float] = {}
    shrunk = unresolved = 0
    for i, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            step = h
            for attempt in range(kink_retries + 1):
                flat[c] = orig + step
                fp, tp = _traced(loss_fn)
                flat[c] = orig - step
                fm, tm = _traced(loss_fn)
                flat[c] = orig
                if tp == tm:
                    break
                step /= 10.0
            else:
                unresolved += 1
                continue
            shrunk += attempt > 0
            num = (fp - fm) / (2 * step)
            fl = max(floor, 4 * eps * fscale / (step * tol))
            worst = max(worst, float(rel_error(ga.reshape(-1)[c], num, fl)))
        report[p.name or f"param{i}"] = worst
    return GradCheckReport(report, tol, shrunk, unresolved)

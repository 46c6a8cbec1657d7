"""Reverse-mode automatic differentiation over numpy arrays.

Every op builds a node that records its parents and a closure computing the
parent gradients from the output gradient. Closures only capture what the
backward formula needs; the saved activations are listed per op.

Broadcasting is deliberately absent: binary elementwise ops demand equal
shapes, and the only trailing-axis ops are ``add_row`` and ``mul_row``.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_DTYPES = {"f64": np.float64, "f32": np.float32}
_dtype = np.float64
_counter = itertools.count()


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    prev = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = prev


class Tensor:
    """An immutable array node in the tape.

    ``data`` is a numpy array in the active precision. Leaves created with
    ``requires_grad=True`` receive ``grad`` after :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self._parents = _parents
        self._backward = _backward
        self._id = next(_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_const(self, -other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# Every op name passed to _make; the gradient test suite checks it covers all of them.
OPS = frozenset({
    "add", "add_const", "add_row", "concat_cols", "concat_rows", "div", "exp", "gather_rows", "gelu", "layer_norm",
    "matmul", "mean", "mul", "mul_const", "mul_row", "neg", "reshape", "scale", "silu", "slice_cols", "slice_rows",
    "softmax_rows", "sqrt", "square", "sub", "sum", "sum_last", "tanh", "transpose",
})


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by op {op!r}")
    if op not in OPS:
        raise ContractError(f"op {op!r} is not registered")
    dtypes = {p.data.dtype for p in parents}
    if len(dtypes) > 1:
        raise ContractError(f"mixed precision inputs to {op!r}: {sorted(str(d) for d in dtypes)}")
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    # saves: both inputs
    _same_shape(a, b, "mul")
    x, y = a.data, b.data
    return _make(x * y, (a, b), lambda g: (g * y, g * x), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    # saves: denominator and quotient
    _same_shape(a, b, "div")
    y = b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / y
    return _make(out, (a, b), lambda g: (g / y, -g * out / y), "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_const(a: Tensor, c) -> Tensor:
    """Add a non-differentiable constant (scalar or same-shape array)."""
    c = np.asarray(c, dtype=a.data.dtype)
    if c.ndim and c.shape != a.shape:
        raise DimensionError(f"add_const: shape mismatch {a.shape} vs {c.shape}")
    return _make(a.data + c, (a,), lambda g: (g,), "add_const")


def mul_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=a.data.dtype)
    if c.ndim and c.shape != a.shape:
        raise DimensionError(f"mul_const: shape mismatch {a.shape} vs {c.shape}")
    return _make(a.data * c, (a,), lambda g: (g * c,), "mul_const")


def square(a: Tensor) -> Tensor:
    # saves: input
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def sqrt(a: Tensor) -> Tensor:
    # saves: output
    if np.any(a.data < 0):
        raise NumericError("sqrt of negative value")
    out = np.sqrt(a.data)
    safe = np.where(out > 0, out, 1.0)

    def back(g):
        # zero subgradient at 0 keeps all-zero rows from poisoning the tape
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _make(out, (a,), back, "sqrt")


def exp(a: Tensor) -> Tensor:
    # saves: output
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def tanh(a: Tensor) -> Tensor:
    # saves: output
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def silu(a: Tensor) -> Tensor:
    # saves: input and sigmoid
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    return _make(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU. Saves: input and inner tanh."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _make(out, (a,), backward, "gelu")


# ---------------------------------------------------------------- reductions

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, g, dtype=a.data.dtype),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(
        np.asarray(a.data.sum() / n), (a,), lambda g: (np.full(shape, g / n, dtype=a.data.dtype),), "mean"
    )


def sum_last(a: Tensor) -> Tensor:
    """Sum over the trailing axis."""
    d = a.shape[-1]
    return _make(a.data.sum(axis=-1), (a,), lambda g: (np.repeat(g[..., None], d, axis=-1),), "sum_last")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    # saves: both inputs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return _make(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects 2-D input, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    if math.prod(shape) != a.data.size:
        raise DimensionError(f"reshape: cannot view {old} as {shape}")
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast along the trailing axis."""
    if b.shape != x.shape[-1:]:
        raise DimensionError(f"add_row: trailing extent {x.shape} vs {b.shape}")
    axes = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_row")


def mul_row(x: Tensor, s: Tensor) -> Tensor:
    """x * s with s broadcast along the trailing axis. Saves: both inputs."""
    if s.shape != x.shape[-1:]:
        raise DimensionError(f"mul_row: trailing extent {x.shape} vs {s.shape}")
    axes = tuple(range(x.ndim - 1))
    xd, sd = x.data, s.data
    return _make(xd * sd, (x, s), lambda g: (g * sd, (g * xd).sum(axis=axes)), "mul_row")


# ---------------------------------------------------------------- structure

def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [p for p in parts]
    if not parts:
        raise DimensionError("concat_rows of empty list")
    width = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != width:
            raise DimensionError(f"concat_rows: width mismatch {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=0)
    return _make(out, tuple(parts), lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))), "concat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat_cols of empty list")
    rows = parts[0].shape[0]
    for p in parts:
        if p.ndim != 2 or p.shape[0] != rows:
            raise DimensionError(f"concat_cols: row mismatch {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)
    return _make(out, tuple(parts), lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))), "concat_cols")


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape
    if not 0 <= start <= stop <= shape[0]:
        raise DimensionError(f"slice_rows [{start}:{stop}] out of range for {shape}")

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), backward, "slice_rows")


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape
    if a.ndim != 2 or not 0 <= start <= stop <= shape[1]:
        raise DimensionError(f"slice_cols [{start}:{stop}] out of range for {shape}")

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop], (a,), backward, "slice_cols")


def gather_rows(table: Tensor, index: Sequence[int]) -> Tensor:
    """Row lookup ``table[index]``; gradient scatter-adds back. Saves: index."""
    idx = np.asarray(index, dtype=np.int64)
    shape = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= shape[0]):
        raise DimensionError(f"gather_rows index out of range for table {shape}")

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), backward, "gather_rows")


# ---------------------------------------------------------------- normalizers

def softmax_rows(x: Tensor, key_mask=None) -> Tensor:
    """Row-wise softmax over the last axis with max subtraction.

    ``key_mask`` (bool, length = columns) excludes columns: they get weight
    exactly 0 and their values never enter the max or the normalizer, so any
    finite content in masked columns leaves the output bitwise unchanged.
    Saves: output.
    """
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects 2-D input, got {x.shape}")
    if x.shape[1] == 0:
        raise DimensionError("softmax_rows: empty row dimension")
    z = x.data
    if key_mask is None:
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
    else:
        km = np.asarray(key_mask, dtype=bool)
        if km.shape != (x.shape[1],):
            raise DimensionError(f"softmax_rows: mask length {km.shape} vs {x.shape[1]} columns")
        if not km.any():
            raise ContractError("softmax_rows: every key is masked")
        m = np.where(km, z, -np.inf).max(axis=1, keepdims=True)
        e = np.where(km, np.exp(np.where(km, z, m) - m), 0.0)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax_rows")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing axis, then optional elementwise affine.

    Saves: normalized input and inverse std.
    """
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    for name, p in (("gamma", gamma), ("beta", beta)):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm: {name} shape {p.shape} does not match trailing extent {d}")
    z = x.data
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _make(xhat, (x,), backward, "layer_norm")
    if gamma is not None:
        out = mul_row(out, gamma)
    if beta is not None:
        out = add_row(out, beta)
    return out


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) for every node reachable from ``loss``.

    Nodes are visited in reverse creation order, which is a valid
    topological order and makes accumulation order deterministic.
    Returns a map of node id to gradient; leaves also get ``.grad`` set.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        n = stack.pop()
        if n._id in nodes or not n.requires_grad:
            continue
        nodes[n._id] = n
        stack.extend(n._parents)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        n = nodes[nid]
        g = grads.get(nid)
        if g is None or n._backward is None:
            continue
        for p, pg in zip(n._parents, n._backward(g)):
            if not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = np.asarray(pg, dtype=p.data.dtype)
    for nid, n in nodes.items():
        if n._backward is None:
            n.grad = grads.get(nid, np.zeros_like(n.data))
    return grads


def grad_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"grad_check step h={h} outside [1e-7, 1e-3]")
    x = np.asarray(x, dtype=_dtype)
    leaf = Tensor(x.copy(), requires_grad=True)
    out = f(leaf)
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: f returned a non-finite value")
    if out.requires_grad:
        backward(out)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    else:
        analytic = np.zeros_like(x)
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError("grad_check: f returned a non-finite value")
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def grad_check_params(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    names: Iterable[str] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """grad_check over a dict of parameter arrays.

    ``max_coords`` subsamples coordinates per parameter (with ``rng``) to keep
    large models tractable.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"grad_check step h={h} outside [1e-7, 1e-3]")
    names = list(names) if names is not None else list(params)
    leaves = {k: Tensor(v, requires_grad=k in names) for k, v in params.items()}
    out = f(leaves)
    backward(out)
    worst = 0.0
    for name in names:
        base = np.asarray(params[name], dtype=_dtype)
        analytic = leaves[name].grad
        if analytic is None:  # unused by f
            analytic = np.zeros_like(base)
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(base.size, max_coords, replace=False)
        for i in coords:
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy().reshape(-1)
                pert[i] += sign * h
                trial = {k: Tensor(v) for k, v in params.items()}
                trial[name] = Tensor(pert.reshape(base.shape))
                v = f(trial).item()
                if not math.isfinite(v):
                    raise NumericError("grad_check: f returned a non-finite value")
                vals.append(v)
            num = (vals[0] - vals[1]) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    return worst


def dump(t: Tensor | np.ndarray) -> str:
    """Text dump: shape line, then row-major values at 17 significant digits."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    lines = [" ".join(str(s) for s in arr.shape)]
    lines.extend(f"{v:.17g}" for v in arr.reshape(-1))
    return "\n".join(lines) + "\n"


def load_dump(text: str) -> np.ndarray:
    lines = text.strip().splitlines()
    shape = tuple(int(s) for s in lines[0].split()) if lines[0].strip() else ()
    return np.array([float(v) for v in lines[1:]], dtype=np.float64).reshape(shape)

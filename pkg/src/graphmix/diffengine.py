"""Reverse-mode automatic differentiation over dense numpy arrays.

A minimal tape-based engine: every operation materializes its output and,
when gradients are required, records a backward closure. Backward walks
nodes in strict reverse creation order, so no explicit topological sort is
needed. Two precisions share one code path: float32 for training, float64
for verification.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)

_node_counter = itertools.count()
_grad_enabled = True
_strict_finite = False


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's shape rule."""


@contextmanager
def no_grad():
    """Disable tape recording inside the block (rollouts, target networks)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextmanager
def strict_mode():
    """Reject non-finite op inputs inside the block (verification runs)."""
    global _strict_finite
    prev = _strict_finite
    _strict_finite = True
    try:
        yield
    finally:
        _strict_finite = prev


class Tensor:
    """A dense array node. Leaf tensors with ``requires_grad`` receive
    gradients; interior nodes carry backward closures."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_backward", "_parents", "_nid")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._nid = next(_node_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}{tag})"

    # Arithmetic sugar; constants are wrapped at the tensor's own dtype.
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(values, name: str, dtype=np.float32) -> Tensor:
    """A named leaf tensor participating in differentiation and checkpoints."""
    t = Tensor(np.array(values, dtype=dtype), requires_grad=True, name=name)
    return t


def const(values, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype))


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.values.dtype))


def _check_finite(kind: str, *arrays: np.ndarray) -> None:
    if _strict_finite:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"{kind}: non-finite input in strict mode")


def _make(kind: str, values: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast")
    if a.dtype != b.dtype:
        raise ShapeError(f"{kind}: mixed dtypes {a.dtype} and {b.dtype}")


# ---------------------------------------------------------------------------
# op kinds
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    _check_finite("add", a.values, b.values)
    out_v = a.values + b.values

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make("add", out_v, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    _check_finite("sub", a.values, b.values)
    out_v = a.values - b.values

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make("sub", out_v, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    _check_finite("mul", a.values, b.values)
    out_v = a.values * b.values
    av, bv = a.values, b.values

    def bw(g):
        _accum(a, _unbroadcast(g * bv, a.shape))
        _accum(b, _unbroadcast(g * av, b.shape))

    return _make("mul", out_v, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.values.dtype.type(c)
    out_v = a.values * c

    def bw(g):
        _accum(a, g * c)

    return _make("scale", out_v, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supported layouts: 2D@2D, stacked ND@ND with equal
    leading dims, and ND@2D (a linear map applied over leading axes)."""
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2D, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ, {av.shape} @ {bv.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul: mixed dtypes {a.dtype} and {b.dtype}")
    _check_finite("matmul", av, bv)
    out_v = av @ bv

    if bv.ndim == 2:
        def bw(g):
            _accum(a, g @ bv.T)
            k, m = bv.shape
            _accum(b, av.reshape(-1, k).T @ g.reshape(-1, m))
    else:
        def bw(g):
            _accum(a, g @ bv.swapaxes(-1, -2))
            _accum(b, av.swapaxes(-1, -2) @ g)

    return _make("matmul", out_v, (a, b), bw)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out_v = a.values.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, shape).copy())

    return _make("sum", out_v, (a,), bw)


def mean_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.values.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    shapes = [t.shape for t in tensors]
    base = list(shapes[0])
    for s in shapes[1:]:
        trimmed_a, trimmed_b = list(s), list(base)
        trimmed_a[axis] = trimmed_b[axis] = 0
        if trimmed_a != trimmed_b:
            raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}")
    out_v = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make("concat", out_v, tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out_v = np.stack([t.values for t in tensors], axis=axis)

    def bw(g):
        for i, t in enumerate(tensors):
            _accum(t, np.take(g, i, axis=axis))

    return _make("stack", out_v, tuple(tensors), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    sl = [slice(None)] * a.values.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_v = a.values[sl].copy()
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[sl] = g
        _accum(a, full)

    return _make("narrow", out_v, (a,), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate in backward."""
    idx = np.asarray(idx)
    out_v = a.values[idx]
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make("gather_rows", out_v, (a,), bw)


def take_along(a: Tensor, idx, axis: int = -1) -> Tensor:
    """Gather one entry per lane along ``axis`` (e.g. chosen-action values).
    ``idx`` has the same ndim as ``a`` with size 1 on ``axis``."""
    idx = np.asarray(idx)
    if idx.ndim != a.values.ndim:
        raise ShapeError(f"take_along: idx ndim {idx.ndim} != input ndim {a.values.ndim}")
    out_v = np.take_along_axis(a.values, idx, axis=axis)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        grids = list(np.indices(idx.shape, sparse=False))
        grids[axis] = idx
        np.add.at(full, tuple(grids), g)
        _accum(a, full)

    return _make("take_along", out_v, (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_v = a.values.reshape(shape)
    old = a.shape

    def bw(g):
        _accum(a, g.reshape(old))

    return _make("reshape", out_v, (a,), bw)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out_v = a.values.swapaxes(ax1, ax2).copy()

    def bw(g):
        _accum(a, g.swapaxes(ax1, ax2))

    return _make("swapaxes", out_v, (a,), bw)


def relu(a: Tensor) -> Tensor:
    _check_finite("relu", a.values)
    out_v = np.maximum(a.values, 0)
    pos = a.values > 0  # subgradient at 0 is 0

    def bw(g):
        _accum(a, g * pos)

    return _make("relu", out_v, (a,), bw)


def elu(a: Tensor) -> Tensor:
    _check_finite("elu", a.values)
    av = a.values
    out_v = np.where(av > 0, av, np.expm1(av)).astype(av.dtype)
    slope = np.where(av > 0, av.dtype.type(1), np.exp(av)).astype(av.dtype)

    def bw(g):
        _accum(a, g * slope)

    return _make("elu", out_v, (a,), bw)


def tanh_(a: Tensor) -> Tensor:
    _check_finite("tanh", a.values)
    out_v = np.tanh(a.values)

    def bw(g):
        _accum(a, g * (1.0 - out_v * out_v))

    return _make("tanh", out_v, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    _check_finite("sigmoid", a.values)
    av = a.values
    out_v = np.where(av >= 0, 1.0 / (1.0 + np.exp(-av)),
                     np.exp(av) / (1.0 + np.exp(av))).astype(av.dtype)

    def bw(g):
        _accum(a, g * out_v * (1.0 - out_v))

    return _make("sigmoid", out_v, (a,), bw)


def abs_(a: Tensor) -> Tensor:
    _check_finite("abs", a.values)
    out_v = np.abs(a.values)
    sign = np.sign(a.values)  # subgradient at 0 is 0

    def bw(g):
        _accum(a, g * sign)

    return _make("abs", out_v, (a,), bw)


def exp_(a: Tensor) -> Tensor:
    _check_finite("exp", a.values)
    out_v = np.exp(a.values)

    def bw(g):
        _accum(a, g * out_v)

    return _make("exp", out_v, (a,), bw)


def masked_softmax(a: Tensor, mask, axis: int = -1) -> Tensor:
    """Softmax over the unmasked entries of ``axis``; masked entries are
    exactly 0. Fully-masked lanes output all zeros (callers must guard).
    ``mask`` is a constant, broadcastable to ``a``."""
    _check_finite("masked_softmax", a.values)
    av = a.values
    mask_b = np.broadcast_to(np.asarray(mask, dtype=bool), av.shape)
    neg_inf = np.array(-np.inf, dtype=av.dtype)
    masked_vals = np.where(mask_b, av, neg_inf)
    mx = masked_vals.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, av.dtype.type(0))
    with np.errstate(invalid="ignore"):
        e = np.exp(np.where(mask_b, av - mx, neg_inf))
    denom = e.sum(axis=axis, keepdims=True)
    denom = np.where(denom > 0, denom, av.dtype.type(1))
    out_v = (e / denom).astype(av.dtype)

    def bw(g):
        inner = (g * out_v).sum(axis=axis, keepdims=True)
        _accum(a, out_v * (g - inner))

    return _make("masked_softmax", out_v, (a,), bw)


def sqdiff(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise squared difference (a - b)**2."""
    _broadcast_shape("sqdiff", a, b)
    _check_finite("sqdiff", a.values, b.values)
    diff = a.values - b.values
    out_v = diff * diff

    def bw(g):
        _accum(a, _unbroadcast(2.0 * diff * g, a.shape))
        _accum(b, _unbroadcast(-2.0 * diff * g, b.shape))

    return _make("sqdiff", out_v, (a, b), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(seed: Tensor, params: Mapping[str, Tensor] | None = None):
    """Backpropagate from a scalar seed.

    Gradients accumulate on every reachable tensor with ``requires_grad``.
    When ``params`` is given, returns a name -> gradient array map covering
    every entry (zeros for parameters unreachable from the seed).
    """
    if seed.values.size != 1:
        raise ValueError(f"backward: seed must be scalar, got shape {seed.shape}")
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [seed]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._nid, reverse=True)
    for t in nodes:
        t.grad = None
    seed.grad = np.ones_like(seed.values)
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
    if params is None:
        return None
    out = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if id(p) in seen and p.grad is not None:
            out[name] = p.grad
        else:
            out[name] = np.zeros_like(p.values)
    return out


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------

GRU_SUFFIXES = ("w_xr", "w_hr", "b_r", "w_xz", "w_hz", "b_z", "w_xn", "w_hn", "b_n")


def init_gru_params(input_dim: int, hidden_dim: int, rng: np.random.Generator,
                    prefix: str, dtype=np.float32) -> dict[str, Tensor]:
    """Uniform +-1/sqrt(fan_in) init for the three gates' weights and biases."""
    params: dict[str, Tensor] = {}

    def uni(fan_in, shape, name):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = parameter(rng.uniform(-bound, bound, size=shape), name, dtype=dtype)

    for gate in ("r", "z", "n"):
        uni(input_dim, (input_dim, hidden_dim), f"{prefix}/w_x{gate}")
        uni(hidden_dim, (hidden_dim, hidden_dim), f"{prefix}/w_h{gate}")
        uni(hidden_dim, (hidden_dim,), f"{prefix}/b_{gate}")
    return params


def gru_cell(x: Tensor, h: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Standard GRU update: reset gate, update gate, candidate, convex mix.

    h' = z * h + (1 - z) * n, so a saturated update gate carries h through.
    Composed from primitive ops, so backward works through time.
    """
    if x.shape[-1] != params[f"{prefix}/w_xr"].shape[0]:
        raise ShapeError(f"gru_cell: input dim {x.shape[-1]} does not match "
                         f"{params[f'{prefix}/w_xr'].shape[0]}")
    if h.shape[-1] != params[f"{prefix}/w_hr"].shape[0]:
        raise ShapeError(f"gru_cell: hidden dim {h.shape[-1]} does not match "
                         f"{params[f'{prefix}/w_hr'].shape[0]}")
    p = lambda k: params[f"{prefix}/{k}"]
    r = sigmoid(add(add(matmul(x, p("w_xr")), matmul(h, p("w_hr"))), p("b_r")))
    z = sigmoid(add(add(matmul(x, p("w_xz")), matmul(h, p("w_hz"))), p("b_z")))
    n = tanh_(add(add(matmul(x, p("w_xn")), mul(r, matmul(h, p("w_hn")))), p("b_n")))
    return add(mul(z, h), mul(sub(Tensor(np.ones((), dtype=x.dtype)), z), n))


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def finite_diff_check(fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                      eps: float = 1e-5, atol: float = 1e-7) -> float:
    """Max relative error between analytic gradients of ``fn()`` and central
    finite differences, over every element of every parameter.

    ``fn`` must be deterministic and rebuild its graph from the current
    parameter values; 64-bit parameters required. Elements where both
    gradients sit below ``atol`` count as agreeing: central differences
    cannot resolve slopes below ulp(f)/(2*eps), so the comparison carries
    no information there.
    """
    if not eps > 0:
        raise ValueError("finite_diff_check: eps must be positive")
    for name, p in params.items():
        if p.values.dtype != np.float64:
            raise ValueError(f"finite_diff_check: parameter {name} is not 64-bit")
    out = fn()
    if out.values.dtype != np.float64:
        raise ValueError("finite_diff_check: function output is not 64-bit")
    grads = backward(out, params)
    max_rel = 0.0
    for name, p in params.items():
        flat = p.values.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = float(fn().values)
            flat[i] = orig - eps
            with no_grad():
                f_minus = float(fn().values)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            if not (np.isfinite(fd) and np.isfinite(g[i])):
                raise FloatingPointError(f"finite_diff_check: non-finite value at {name}[{i}]")
            if abs(g[i]) < atol and abs(fd) < atol:
                continue
            rel = abs(g[i] - fd) / (abs(g[i]) + abs(fd) + 1e-12)
            max_rel = max(max_rel, rel)
    return max_rel


def cast_params(params: Mapping[str, Tensor], dtype) -> dict[str, Tensor]:
    """Copy a parameter set at another precision (training <-> verification)."""
    out = {}
    for name, p in params.items():
        q = parameter(p.values.astype(dtype), name, dtype=dtype)
        q.requires_grad = p.requires_grad
        out[name] = q
    return out


def freeze_params(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Deep copy with gradients disabled (target networks)."""
    out = {}
    for name, p in params.items():
        q = Tensor(p.values.copy(), requires_grad=False, name=name)
        out[name] = q
    return out


def sync_params(dst: Mapping[str, Tensor], src: Mapping[str, Tensor]) -> None:
    """Byte-identical copy of values from src into dst."""
    for name, p in dst.items():
        np.copyto(p.values, src[name].values)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))

"""Dense tensors with tape-based reverse-mode automatic differentiation.

Everything the network needs is built from the primitives in this module:
elementwise arithmetic, matmul, shape ops, reductions, and the handful of
nonlinearities (tanh, erf/gelu, elu, softmax) with hand-derived backward
rules. Forward evaluation records a graph; calling ``backward()`` on a
scalar root walks it once in reverse topological order and accumulates
gradients into every reachable node. Gradients of parameters that are not
reachable from the root stay ``None``.

Precision is a process-wide switch: float32 by default, float64 for
finite-difference verification (``set_dtype(64)`` or the ``precision``
context manager).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _np_erf

__all__ = [
    "Tensor",
    "ShapeError",
    "AutodiffError",
    "NonFiniteError",
    "set_dtype",
    "get_dtype",
    "precision",
    "no_grad",
    "grad_enabled",
    "set_debug",
    "debug_enabled",
    "set_gelu_mode",
    "get_gelu_mode",
    "concat",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "erf",
    "maximum",
    "softmax",
    "elu",
    "gelu",
    "primitive_forward",
    "PRIMITIVE_KINDS",
    "grad_check",
    "sweep_grad_check",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class AutodiffError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar root, re-used tape, ...)."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf while debug checks were on."""


_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG = False
_GELU_TANH = False


def set_dtype(bits) -> None:
    """Select global float precision: 32 (default) or 64."""
    global _DTYPE
    table = {32: np.float32, 64: np.float64, "32": np.float32, "64": np.float64,
             "float32": np.float32, "float64": np.float64,
             np.float32: np.float32, np.float64: np.float64}
    if bits not in table:
        raise ValueError(f"unsupported precision {bits!r}; use 32 or 64")
    _DTYPE = table[bits]


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(bits):
    """Temporarily switch global float precision."""
    prev = _DTYPE
    set_dtype(bits)
    try:
        yield
    finally:
        set_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug(flag: bool) -> None:
    """Toggle per-op finite-value checks (slow; for debugging only)."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


def set_gelu_mode(mode: str) -> None:
    """Choose the GELU realization globally: "erf" (exact) or "tanh"."""
    global _GELU_TANH
    if mode not in ("erf", "tanh"):
        raise ValueError(f"unknown gelu mode {mode!r}")
    _GELU_TANH = mode == "tanh"


def get_gelu_mode() -> str:
    return "tanh" if _GELU_TANH else "erf"


def _check_finite(kind: str, data: np.ndarray) -> None:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{kind} produced non-finite values")


class Tensor:
    """A dense nd-array that participates in the autodiff graph.

    ``data`` is a numpy array in the active global precision. ``grad`` is
    filled in by ``backward()`` and has the same shape as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_spent")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._bwd: Callable[[], None] | None = None
        self._spent = False

    # -- construction used by ops: keeps computed dtype, links the graph --
    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple, bwd) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._spent = False
        tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        if tracked:
            out._parents = parents
            out._bwd = bwd
        else:
            out._parents = ()
            out._bwd = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={'set' if self.grad is not None else 'none'})"

    # ------------------------------------------------------------------
    # backward pass
    # ------------------------------------------------------------------
    def backward(self) -> None:
        """Backpropagate from this scalar root through the recorded graph.

        Populates ``grad`` on every reachable node. A graph can be walked
        once; re-running requires a fresh forward pass.
        """
        if self.data.size != 1:
            raise AutodiffError(
                f"backward requires a scalar root, got shape {self.data.shape}")
        if not self._parents and self._bwd is None:
            raise AutodiffError(
                "no graph recorded for this root (was it computed under no_grad?)")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._spent:
                raise AutodiffError(
                    "graph already backpropagated; rerun the forward pass")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd()
                node._spent = True
                node._bwd = None  # release saved activations

    # ------------------------------------------------------------------
    # operator sugar
    # ------------------------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    # never accumulate in place: grads may alias downstream grad buffers
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    out_data = a.data + b.data
    _check_finite("add", out_data)

    def bwd():
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))

    out = Tensor._result(out_data, (a, b), bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    out_data = a.data - b.data
    _check_finite("sub", out_data)

    def bwd():
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(-out.grad, b.shape))

    out = Tensor._result(out_data, (a, b), bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    out_data = a.data * b.data
    _check_finite("mul", out_data)

    def bwd():
        _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.shape))

    out = Tensor._result(out_data, (a, b), bwd)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("div", a, b)
    out_data = a.data / b.data
    _check_finite("div", out_data)

    def bwd():
        _accum(a, _unbroadcast(out.grad / b.data, a.shape))
        _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    out = Tensor._result(out_data, (a, b), bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (broadcast-scale)."""
    s = float(s)
    out_data = a.data * s
    _check_finite("broadcast-scale", out_data)

    def bwd():
        _accum(a, out.grad * s)

    out = Tensor._result(out_data, (a,), bwd)
    return out


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; gradient follows the winning operand (ties split)."""
    b = _as_tensor(b)
    _broadcast_shape("max", a, b)
    out_data = np.maximum(a.data, b.data)

    def bwd():
        wa = (a.data > b.data).astype(out.grad.dtype)
        tie = (a.data == b.data)
        wa = np.where(tie, 0.5, wa)
        _accum(a, _unbroadcast(out.grad * wa, a.shape))
        _accum(b, _unbroadcast(out.grad * (1.0 - wa), b.shape))

    out = Tensor._result(out_data, (a, b), bwd)
    return out


# ----------------------------------------------------------------------
# transcendental ops
# ----------------------------------------------------------------------
def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    _check_finite("exp", out_data)

    def bwd():
        _accum(a, out.grad * out_data)

    out = Tensor._result(out_data, (a,), bwd)
    return out


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)
    _check_finite("log", out_data)

    def bwd():
        _accum(a, out.grad / a.data)

    out = Tensor._result(out_data, (a,), bwd)
    return out


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    _check_finite("sqrt", out_data)

    def bwd():
        _accum(a, out.grad * (0.5 / out_data))

    out = Tensor._result(out_data, (a,), bwd)
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd():
        _accum(a, out.grad * (1.0 - out_data * out_data))

    out = Tensor._result(out_data, (a,), bwd)
    return out


_INV_SQRT_PI = 1.0 / np.sqrt(np.pi)


def erf(a: Tensor) -> Tensor:
    out_data = _np_erf(a.data)

    def bwd():
        _accum(a, out.grad * (2.0 * _INV_SQRT_PI) * np.exp(-a.data * a.data))

    out = Tensor._result(out_data, (a,), bwd)
    return out


# ----------------------------------------------------------------------
# shape ops
# ----------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd():
        _accum(a, out.grad.reshape(a.shape))

    out = Tensor._result(out_data, (a,), bwd)
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd():
        _accum(a, np.transpose(out.grad, inv))

    out = Tensor._result(out_data, (a,), bwd)
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
                o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis % len(base)):
            raise ShapeError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bwd():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, out.grad[tuple(idx)])

    out = Tensor._result(out_data, tuple(tensors), bwd)
    return out


def take(a: Tensor, idx) -> Tensor:
    """Slice / fancy-index; gradient scatters back into place."""
    out_data = a.data[idx]

    def bwd():
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        _accum(a, g)

    out = Tensor._result(out_data, (a,), bwd)
    return out


def pad_time(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis (the convolution 'same' padding helper)."""
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out_data = np.pad(a.data, widths)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(before, before + a.shape[axis])
    sl = tuple(sl)

    def bwd():
        _accum(a, out.grad[sl])

    out = Tensor._result(out_data, (a,), bwd)
    return out


# ----------------------------------------------------------------------
# reductions
# ----------------------------------------------------------------------
def _reduced_shape(shape, axis):
    if axis is None:
        return tuple(1 for _ in shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd():
        g = out.grad.reshape(_reduced_shape(a.shape, axis))
        _accum(a, np.broadcast_to(g, a.shape))

    out = Tensor._result(out_data, (a,), bwd)
    return out


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out_data.size, 1)

    def bwd():
        g = out.grad.reshape(_reduced_shape(a.shape, axis)) / n
        _accum(a, np.broadcast_to(g, a.shape))

    out = Tensor._result(out_data, (a,), bwd)
    return out


def reduce_max(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def bwd():
        expanded = out_data.reshape(_reduced_shape(a.shape, axis))
        mask = (a.data == expanded)
        counts = mask.sum(axis=axis, keepdims=True)
        g = out.grad.reshape(_reduced_shape(a.shape, axis))
        _accum(a, mask * (g / counts))

    out = Tensor._result(out_data, (a,), bwd)
    return out


# ----------------------------------------------------------------------
# matmul
# ----------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not contract")
    out_data = np.matmul(a.data, b.data)
    _check_finite("matmul", out_data)

    def bwd():
        ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
        _accum(a, _unbroadcast(ga, a.shape))
        _accum(b, _unbroadcast(gb, b.shape))

    out = Tensor._result(out_data, (a, b), bwd)
    return out


# ----------------------------------------------------------------------
# nonlinearities with closed-form backward rules
# ----------------------------------------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to one."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd():
        dot = (out.grad * out_data).sum(axis=axis, keepdims=True)
        _accum(a, (out.grad - dot) * out_data)

    out = Tensor._result(out_data, (a,), bwd)
    return out


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    neg = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
    out_data = np.where(a.data > 0, a.data, neg)

    def bwd():
        local = np.where(a.data > 0, 1.0, neg + alpha)
        _accum(a, out.grad * local)

    out = Tensor._result(out_data, (a,), bwd)
    return out


_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_INV_SQRT_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU via the erf definition, or the tanh approximation when selected."""
    x = a.data
    if _GELU_TANH:
        inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out_data = 0.5 * x * (1.0 + t)

        def bwd():
            dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            _accum(a, out.grad * local)
    else:
        c = _np_erf(x * _INV_SQRT_2)
        out_data = 0.5 * x * (1.0 + c)

        def bwd():
            local = 0.5 * (1.0 + c) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)
            _accum(a, out.grad * local)

    out = Tensor._result(out_data, (a,), bwd)
    return out


# ----------------------------------------------------------------------
# primitive dispatcher (uniform surface for the property-test suite)
# ----------------------------------------------------------------------
PRIMITIVE_KINDS = (
    "add", "mul", "matmul", "concat", "slice", "reshape", "transpose",
    "reduce-mean", "reduce-sum", "exp", "log", "tanh", "erf", "max",
    "broadcast-scale",
)


def primitive_forward(kind: str, *inputs, **hyper) -> Tensor:
    """Apply one named primitive; the table mirrors ``PRIMITIVE_KINDS``."""
    table = {
        "add": lambda a, b: add(a, b),
        "mul": lambda a, b: mul(a, b),
        "matmul": lambda a, b: matmul(a, b),
        "concat": lambda *ts: concat(ts, hyper.get("axis", 0)),
        "slice": lambda a: take(a, hyper["index"]),
        "reshape": lambda a: reshape(a, hyper["shape"]),
        "transpose": lambda a: transpose(a, hyper["axes"]),
        "reduce-mean": lambda a: reduce_mean(a, hyper.get("axis"), hyper.get("keepdims", False)),
        "reduce-sum": lambda a: reduce_sum(a, hyper.get("axis"), hyper.get("keepdims", False)),
        "exp": exp,
        "log": log,
        "tanh": tanh,
        "erf": erf,
        "max": lambda a, b: maximum(a, b),
        "broadcast-scale": lambda a: scale(a, hyper["factor"]),
    }
    if kind not in table:
        raise ValueError(f"unknown primitive kind {kind!r}")
    return table[kind](*inputs)


# ----------------------------------------------------------------------
# finite-difference verification
# ----------------------------------------------------------------------
def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-5) -> float:
    """Compare the analytic gradient of ``f`` at ``x`` against central differences.

    ``f`` must map a tensor to a scalar and be deterministic (two identical
    calls are compared bit-for-bit before checking). Returns the max over
    elements of ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    with no_grad():
        y1 = f(Tensor(x.data.copy()))
        y2 = f(Tensor(x.data.copy()))
    if y1.data.tobytes() != y2.data.tobytes():
        raise AutodiffError("grad_check requires a deterministic function "
                            "(two identical calls differed)")

    xt = Tensor(x.data.copy(), requires_grad=True)
    out = f(xt)
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(xt.data)

    probe = Tensor(x.data.copy())
    flat = probe.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(f(probe).data.reshape(-1)[0])
            flat[i] = orig - epsilon
            fm = float(f(probe).data.reshape(-1)[0])
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * epsilon)
            ana = float(analytic.reshape(-1)[i])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst


def sweep_grad_check(loss_fn: Callable[[], Tensor],
                     tensors: Iterable[Tensor],
                     epsilon: float = 1e-5,
                     max_elems: int | None = None,
                     rng: np.random.Generator | None = None,
                     denom_floor: float = 1e-12) -> float:
    """Finite-difference check of ``loss_fn`` against many tensors at once.

    ``loss_fn`` re-evaluates the full forward pass and must close over the
    given tensors (their ``data`` is perturbed in place). With ``max_elems``
    set, that many elements per tensor are sampled instead of sweeping all.

    ``denom_floor`` bounds the relative-error denominator from below. Central
    differences at 64-bit cannot resolve gradients smaller than roughly
    ``|loss| * macheps / epsilon`` (about 1e-11 for unit-scale losses), so
    checks that sweep parameters with near-zero true gradients should raise
    the floor (1e-4 turns a 1e-6 relative criterion into a 1e-10 absolute
    criterion for such elements, far above the noise but far below any real
    gradient defect).
    """
    tensors = list(tensors)
    for t in tensors:
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t, ana in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            if max_elems is not None and flat.size > max_elems:
                idxs = rng.choice(flat.size, size=max_elems, replace=False)
            else:
                idxs = np.arange(flat.size)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + epsilon
                fp = float(loss_fn().data.reshape(-1)[0])
                flat[i] = orig - epsilon
                fm = float(loss_fn().data.reshape(-1)[0])
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * epsilon)
                a = float(ana.reshape(-1)[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
                worst = max(worst, rel)
    return worst

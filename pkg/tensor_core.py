"""
Minimal dense tensors with reverse-mode differentiation.

Values live in immutable ``Tensor`` objects backed by numpy arrays. ``Variable``
adds a gradient buffer. Operations on Variables that require gradients are
recorded on the active ``Tape``; ``backward`` replays that record in reverse.
Round and clip use straight-through estimators.
"""

import contextlib
import math
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ArgumentError, DimensionError

GELU_C = math.sqrt(2.0 / math.pi)


class _Settings(threading.local):
    def __init__(self):
        self.dtype = np.float32
        self.round_identity = False
        self.tapes: List["Tape"] = []


_settings = _Settings()

# Incremented every time a Variable's value is replaced.
PARAMETER_WRITES = 0


def default_dtype():
    return _settings.dtype


@contextlib.contextmanager
def gradcheck_mode():
    """
    Switches the current thread to 64-bit arithmetic and identity rounding.

    Used by finite-difference gradient checks: round is replaced by its STE
    surrogate so the taped gradient is the true derivative of the forward.
    """
    saved = (_settings.dtype, _settings.round_identity)
    _settings.dtype = np.float64
    _settings.round_identity = True
    try:
        yield
    finally:
        _settings.dtype, _settings.round_identity = saved


class Tensor:
    """Immutable dense array with a shape; the value carrier for every module."""

    __slots__ = ("_data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=default_dtype())
        if arr.flags.writeable:
            arr = arr.copy() if arr.base is not None else arr
            arr.setflags(write=False)
        t._data = arr
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        return float(self._data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={self._data!r})"

    def __len__(self):
        return self.shape[0]


class Variable:
    """A Tensor value plus an accumulated gradient of the same shape."""

    __slots__ = ("value", "_grad", "requires_grad", "name", "_tape", "__weakref__")

    def __init__(self, value, requires_grad: bool = True, name: str = ""):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.requires_grad = requires_grad
        self.name = name
        self._grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> Tensor:
        return Tensor._wrap(self.grad_array.copy())

    @property
    def grad_array(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros(self.value.shape, dtype=self.value.data.dtype)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def assign(self, new_value):
        """Replaces the value in place of an optimizer update; shape is fixed."""
        global PARAMETER_WRITES
        arr = np.asarray(new_value, dtype=self.value.data.dtype)
        if arr.shape != self.shape:
            raise DimensionError("assign changes shape", self.shape, arr.shape)
        self.value = Tensor(arr, dtype=arr.dtype)
        PARAMETER_WRITES += 1

    def __repr__(self):
        label = f"{self.name}: " if self.name else ""
        return f"Variable({label}shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Variable
    inputs: Tuple[object, ...]
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
    Ordered record of taped operations for one calibration context.

    Use as a context manager to make it the active tape of the current thread;
    outside any ``with`` block a per-thread default tape is used.
    """

    def __init__(self):
        self._nodes: List[_Node] = []

    def __enter__(self):
        _settings.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _settings.tapes.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, node: _Node):
        self._nodes.append(node)
        node.out._tape = self

    def reset(self):
        """Drops all recorded operations."""
        self._nodes = []

    @property
    def nodes(self) -> List[_Node]:
        return self._nodes


_default_tapes = threading.local()


def current_tape() -> Tape:
    if _settings.tapes:
        return _settings.tapes[-1]
    tape = getattr(_default_tapes, "tape", None)
    if tape is None:
        tape = _default_tapes.tape = Tape()
    return tape


ArrayLike = Union[Tensor, Variable, np.ndarray, float, int]


def _arr(x: ArrayLike) -> np.ndarray:
    if isinstance(x, (Tensor, Variable)):
        return x.data
    return np.asarray(x, dtype=default_dtype())


def _tracked(*xs) -> bool:
    return any(isinstance(x, Variable) and x.requires_grad for x in xs)


def _result(out: np.ndarray, inputs: Tuple[object, ...], backward) -> Union[Tensor, Variable]:
    """Wraps an op result, recording a tape node when any input needs gradients."""
    value = Tensor._wrap(out)
    if _tracked(*inputs):
        var = Variable(value, requires_grad=True)
        current_tape().record(_Node(var, inputs, backward))
        return var
    if any(isinstance(x, Variable) for x in inputs):
        return Variable(value, requires_grad=False)
    return value


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _same_shape(name: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise DimensionError(f"{name} requires equal shapes", a.shape, b.shape)


# ----------------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike):
    av, bv = _arr(a), _arr(b)
    out = av + bv
    return _result(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a: ArrayLike, b: ArrayLike):
    av, bv = _arr(a), _arr(b)
    out = av - bv
    return _result(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a: ArrayLike, b: ArrayLike):
    av, bv = _arr(a), _arr(b)
    out = av * bv
    return _result(
        out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a: ArrayLike, b: ArrayLike):
    av, bv = _arr(a), _arr(b)
    out = av / bv

    def backward(g):
        ga = _unbroadcast(g / bv, av.shape)
        gb = _unbroadcast(-g * av / (bv * bv), bv.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def scale(x: ArrayLike, factor: float):
    """Multiplies by a Python constant."""
    xv = _arr(x)
    out = xv * factor
    return _result(out, (x,), lambda g: (g * factor,))


def sum_all(x: ArrayLike):
    xv = _arr(x)
    out = np.asarray(xv.sum())
    return _result(out, (x,), lambda g: (np.broadcast_to(g, xv.shape).copy(),))


def mean_all(x: ArrayLike):
    xv = _arr(x)
    n = xv.size
    out = np.asarray(xv.mean())
    return _result(out, (x,), lambda g: (np.broadcast_to(g / n, xv.shape).copy(),))


def max_all(x: ArrayLike):
    """Global maximum; the gradient flows to the first maximal element."""
    xv = _arr(x)
    idx = int(np.argmax(xv))

    def backward(g):
        gx = np.zeros_like(xv)
        gx.reshape(-1)[idx] = g.reshape(-1)[0]
        return (gx,)

    return _result(np.asarray(xv.reshape(-1)[idx]), (x,), backward)


def min_all(x: ArrayLike):
    """Global minimum; the gradient flows to the first minimal element."""
    xv = _arr(x)
    idx = int(np.argmin(xv))

    def backward(g):
        gx = np.zeros_like(xv)
        gx.reshape(-1)[idx] = g.reshape(-1)[0]
        return (gx,)

    return _result(np.asarray(xv.reshape(-1)[idx]), (x,), backward)


# ----------------------------------------------------------------------------
# Shape manipulation
# ----------------------------------------------------------------------------


def reshape(x: ArrayLike, shape: Sequence[int]):
    xv = _arr(x)
    out = xv.reshape(tuple(shape))
    return _result(out, (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x: ArrayLike, axes: Optional[Sequence[int]] = None):
    xv = _arr(x)
    if axes is None:
        axes = tuple(reversed(range(xv.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(xv, axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inverse),))


def narrow(x: ArrayLike, axis: int, start: int, length: int):
    """Slices ``length`` entries along ``axis`` beginning at ``start``."""
    xv = _arr(x)
    axis = axis % xv.ndim
    if start < 0 or length < 0 or start + length > xv.shape[axis]:
        raise ArgumentError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of size {xv.shape[axis]}"
        )
    index = [slice(None)] * xv.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = xv[index]

    def backward(g):
        gx = np.zeros_like(xv)
        gx[index] = g
        return (gx,)

    return _result(out, (x,), backward)


# ----------------------------------------------------------------------------
# Linear algebra and nonlinearities
# ----------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike):
    """
    Matrix product with numpy batching rules.

    Args:
        a: Tensor [..., m, k]
        b: Tensor [..., k, n]

    Returns:
        Tensor [..., m, n], differentiable with respect to both operands
    """
    av, bv = _arr(a), _arr(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise DimensionError("matmul inner dimensions differ", av.shape, bv.shape)
    out = np.matmul(av, bv)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if bv.ndim == 2 and av.ndim > 2:
            k, n = bv.shape
            gb = av.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return _result(out, (a, b), backward)


def softmax(x: ArrayLike, axis: int = -1):
    xv = _arr(x)
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def layer_norm(x: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5):
    """Normalizes over the last axis; ``gamma`` and ``beta`` are frozen constants."""
    xv, gv, bv = _arr(x), _arr(gamma), _arr(beta)
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gv + bv

    def backward(g):
        gh = g * gv
        dx = inv_std * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx,)

    return _result(out, (x,), backward)


def gelu(x: ArrayLike):
    """Tanh approximation of GELU."""
    xv = _arr(x)
    inner = GELU_C * (xv + 0.044715 * xv ** 3)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def backward(g):
        d_inner = GELU_C * (1.0 + 3 * 0.044715 * xv * xv)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * d_inner),)

    return _result(out, (x,), backward)


# ----------------------------------------------------------------------------
# Straight-through estimators
# ----------------------------------------------------------------------------


def round_ste(x: ArrayLike):
    """
    Rounds half to even; the backward pass is the identity.

    Args:
        x: Finite input

    Returns:
        Rounded values (identity when gradcheck_mode is active)
    """
    xv = _arr(x)
    out = xv.copy() if _settings.round_identity else np.rint(xv)
    return _result(out, (x,), lambda g: (g,))


def clip_ste(x: ArrayLike, lo: float, hi: float):
    """
    Clamps to [lo, hi]; gradient 1 inside the closed interval, 0 outside.

    Args:
        x: Input values
        lo: Lower bound
        hi: Upper bound

    Returns:
        Clamped values
    """
    if lo > hi:
        raise ArgumentError(f"clip bounds reversed: lo={lo} > hi={hi}")
    xv = _arr(x)
    out = np.clip(xv, lo, hi)
    mask = ((xv >= lo) & (xv <= hi)).astype(xv.dtype)
    return _result(out, (x,), lambda g: (g * mask,))


# ----------------------------------------------------------------------------
# Losses and statistics
# ----------------------------------------------------------------------------


def mae(a: ArrayLike, b: ArrayLike):
    """Mean absolute error; the subgradient at equality is 0."""
    av, bv = _arr(a), _arr(b)
    _same_shape("mae", av, bv)
    diff = av - bv
    n = diff.size
    out = np.asarray(np.abs(diff).mean())

    def backward(g):
        ga = np.sign(diff) * (g / n)
        return ga, -ga

    return _result(out, (a, b), backward)


def mse(a: ArrayLike, b: ArrayLike):
    av, bv = _arr(a), _arr(b)
    _same_shape("mse", av, bv)
    diff = av - bv
    n = diff.size
    out = np.asarray((diff * diff).mean())

    def backward(g):
        ga = diff * (2.0 * g / n)
        return ga, -ga

    return _result(out, (a, b), backward)


def cosine_sim_rows(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Per-row cosine similarity of two [t x d] feature maps.

    A row with zero norm on either side has similarity 0.
    """
    av, bv = _arr(a), _arr(b)
    _same_shape("cosine_sim_rows", av, bv)
    if av.ndim != 2:
        raise DimensionError("cosine_sim_rows expects 2-D inputs", av.shape)
    a64, b64 = av.astype(np.float64), bv.astype(np.float64)
    dots = (a64 * b64).sum(axis=1)
    norms = np.linalg.norm(a64, axis=1) * np.linalg.norm(b64, axis=1)
    sims = np.zeros_like(dots)
    nonzero = norms > 0
    sims[nonzero] = dots[nonzero] / norms[nonzero]
    return Tensor._wrap(np.clip(sims, -1.0, 1.0))


def ks_statistic(a: ArrayLike, b: ArrayLike) -> float:
    """Two-sample Kolmogorov-Smirnov statistic: sup |F_a - F_b|."""
    av = np.sort(_arr(a).reshape(-1).astype(np.float64))
    bv = np.sort(_arr(b).reshape(-1).astype(np.float64))
    if av.size == 0 or bv.size == 0:
        raise ArgumentError("ks_statistic needs two nonempty samples")
    points = np.concatenate([av, bv])
    cdf_a = np.searchsorted(av, points, side="right") / av.size
    cdf_b = np.searchsorted(bv, points, side="right") / bv.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


# ----------------------------------------------------------------------------
# Reverse pass
# ----------------------------------------------------------------------------


def backward(loss: Variable):
    """
    Accumulates dLoss/dVar into every upstream Variable that requires gradients.

    Args:
        loss: Scalar-shaped Variable produced by taped operations

    Raises:
        ArgumentError: if the loss is not scalar or was never taped
    """
    if not isinstance(loss, Variable) or loss.value.size != 1:
        shape = loss.shape if isinstance(loss, (Tensor, Variable)) else type(loss).__name__
        raise ArgumentError(f"backward needs a scalar Variable loss, got shape {shape}")
    if not loss.requires_grad:
        raise ArgumentError("loss does not depend on any Variable that requires gradients")

    seed = np.ones(loss.shape, dtype=loss.data.dtype)
    tape = loss._tape
    if tape is None:
        loss.grad_array[...] += seed
        return

    grads: Dict[int, Tuple[Variable, np.ndarray]] = {id(loss): (loss, seed)}
    nodes = tape.nodes
    end = next((i for i in range(len(nodes) - 1, -1, -1) if nodes[i].out is loss), None)
    if end is None:
        raise ArgumentError("loss is not on its tape; was the tape reset?")
    for node in reversed(nodes[: end + 1]):
        entry = grads.get(id(node.out))
        if entry is None:
            continue
        input_grads = node.backward(entry[1])
        for inp, g in zip(node.inputs, input_grads):
            if g is None or not (isinstance(inp, Variable) and inp.requires_grad):
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = (inp, g if prev is None else prev[1] + g)

    # Only leaves (Variables not produced by a taped op) keep gradients.
    for var, g in grads.values():
        if var._tape is None:
            buf = var.grad_array
            buf += g.astype(buf.dtype, copy=False)


def zero_grads(variables: Iterable[Variable]):
    for v in variables:
        v.zero_grad()


# ----------------------------------------------------------------------------
# Gradient checking
# ----------------------------------------------------------------------------


def check_gradients(
    fn: Callable[[], Variable],
    variables: Sequence[Variable],
    h: float = 1e-3,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compares taped gradients with central finite differences.

    Call inside ``gradcheck_mode()`` with Variables created there.

    Args:
        fn: Builds the scalar loss from the current Variable values
        variables: Variables to perturb
        h: Finite-difference step
        max_entries: Optional cap on checked entries per Variable
        rng: Generator used to pick entries when capped

    Returns:
        Largest relative error over all checked entries
    """
    with Tape():
        zero_grads(variables)
        loss = fn()
        backward(loss)
    analytic = [v.grad_array.copy() for v in variables]

    worst = 0.0
    for var, grad in zip(variables, analytic):
        base = var.data.copy()
        flat_idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            chooser = rng or np.random.default_rng(0)
            flat_idx = np.sort(chooser.choice(base.size, size=max_entries, replace=False))
        for i in flat_idx:
            values = []
            for sign in (1.0, -1.0):
                bumped = base.copy()
                bumped.reshape(-1)[i] += sign * h
                var.value = Tensor(bumped, dtype=bumped.dtype)
                with Tape():
                    values.append(_arr(fn()).reshape(-1)[0])
            var.value = Tensor(base, dtype=base.dtype)
            numeric = (values[0] - values[1]) / (2 * h)
            exact = grad.reshape(-1)[i]
            denom = max(abs(numeric), abs(exact), 1e-4)
            worst = max(worst, abs(numeric - exact) / denom)
    zero_grads(variables)
    return float(worst)

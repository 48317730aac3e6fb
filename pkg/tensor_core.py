"""
tensor_core.py — n-dimensional tensors with reverse-mode differentiation.

Everything numeric in the repo is built on this module. A `Tensor` wraps a
numpy array; operations are `Function` subclasses whose `apply()` records a
producer link on the output when any input requires a gradient. `backward()`
walks that graph once in reverse topological order and returns a
`GradientMap` for the leaf tensors (the parameters).

Public API:
  Tensor(data, requires_grad=False, name=None)
  as_tensor(x)                        wrap scalars / arrays (no grad)
  elementwise(kind, a, b=None, slope=0.2)
      kind in {add, sub, mul, div, neg, relu, leaky_relu, sigmoid, tanh,
               abs, sqrt, square}
  reduce(kind, a, axes=None, keepdims=False)   kind in {sum, mean, max}
  reshape / transpose / pad / concat / clamp_min / detach
  backward(root) -> GradientMap
  grad_check(f, x, eps, tol) -> GradCheckReport

Precision is a run-level setting: `set_precision("float64")` (tests and
gradient checks) or `"float32"` (training speed). New tensors built from
Python data take the current precision; op outputs keep the dtype numpy
produces from their inputs, so one graph never mixes precisions as long as
the run does not switch mid-way.

Randomness: `make_rng(seed)` returns a numpy Generator on the counter-based
Philox bit generator. Nothing downstream calls the global numpy RNG.

The graph is confined to one thread. Tensors without producer links are
safe to share read-only.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class AxisError(ValueError):
    """Raised when a reduction axis is out of range for the tensor."""


class NonScalarRootError(ValueError):
    """Raised when backward() is called on a tensor with more than one element."""


# ---------------------------------------------------------------------------
# Precision + RNG
# ---------------------------------------------------------------------------

_PRECISIONS = {"float64": np.float64, "float32": np.float32}
_dtype = np.float64


def set_precision(name: str) -> None:
    """Set the floating dtype used for new tensors ("float64" or "float32")."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r} (expected one of {sorted(_PRECISIONS)})")
    _dtype = _PRECISIONS[name]


def get_precision() -> str:
    return "float64" if _dtype is np.float64 else "float32"


def get_dtype() -> type:
    return _dtype


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the run precision."""
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator on the counter-based Philox bit generator."""
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(seed: int, *keys: int) -> int:
    """Stable child seed for (seed, key...), used to give every object,
    layer and run its own independent stream."""
    state = np.random.SeedSequence([int(seed), *(int(k) for k in keys)]).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# Tensor + Function
# ---------------------------------------------------------------------------

class Tensor:
    """An array that may participate in a differentiation graph."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 name: Optional[str] = None, *, dtype=None,
                 _ctx: Optional["Function"] = None):
        if isinstance(data, Tensor):
            data = data.data
        if _ctx is None or not isinstance(data, np.ndarray):
            arr = np.asarray(data)
            if dtype is not None:
                arr = arr.astype(dtype, copy=False)
            elif not np.issubdtype(arr.dtype, np.floating) or arr.dtype != _dtype:
                arr = arr.astype(_dtype)
            data = arr
        if data.ndim == 0:
            data = data.reshape(())
        self.data: np.ndarray = data
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._ctx = _ctx if self.requires_grad else None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, no producer link, no gradient."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other): return Add.apply(self, other)
    def __radd__(self, other): return Add.apply(other, self)
    def __sub__(self, other): return Sub.apply(self, other)
    def __rsub__(self, other): return Sub.apply(other, self)
    def __mul__(self, other): return Mul.apply(self, other)
    def __rmul__(self, other): return Mul.apply(other, self)
    def __truediv__(self, other): return Div.apply(self, other)
    def __rtruediv__(self, other): return Div.apply(other, self)
    def __neg__(self): return Neg.apply(self)

    def __getitem__(self, index) -> "Tensor":
        return Slice.apply(self, index=index)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axes, keepdims)

    def max(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axes, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """A differentiable operation.

    Subclasses implement `forward(*arrays, **kwargs) -> ndarray` and
    `backward(grad) -> tuple` (one entry per input, None where no gradient
    flows). `apply()` runs forward on the raw arrays and links the output
    to this instance only when an input requires a gradient.
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(np.asarray(out), requires_grad=requires_grad, _ctx=fn if requires_grad else None)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcast to reach it from `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return unbroadcast(grad_a, self.a.shape), unbroadcast(grad_b, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class ReLU(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


class LeakyReLU(Function):
    def forward(self, a, slope: float = 0.2):
        self.factor = np.where(a > 0, 1.0, slope).astype(a.dtype, copy=False)
        return a * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class Sigmoid(Function):
    def forward(self, a):
        # split by sign so exp() never overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Abs(Function):
    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Square(Function):
    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, grad):
        return (grad * 2.0 * self.a,)


class ClampMin(Function):
    def forward(self, a, floor: float = 0.0):
        self.mask = a >= floor
        return np.where(self.mask, a, floor).astype(a.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


_UNARY = {
    "neg": Neg,
    "relu": ReLU,
    "sigmoid": Sigmoid,
    "tanh": Tanh,
    "abs": Abs,
    "sqrt": Sqrt,
    "square": Square,
}
_BINARY = {"add": Add, "sub": Sub, "mul": Mul, "div": Div}


def elementwise(kind: str, a: ArrayLike, b: Optional[ArrayLike] = None, *, slope: float = 0.2) -> Tensor:
    """Apply an elementwise op by name. Binary ops broadcast right-aligned."""
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        return _BINARY[kind].apply(a, b)
    if kind == "leaky_relu":
        return LeakyReLU.apply(a, slope=slope)
    if kind in _UNARY:
        return _UNARY[kind].apply(a)
    raise ValueError(f"unknown elementwise op {kind!r}")


def relu(a: ArrayLike) -> Tensor:
    return ReLU.apply(a)


def leaky_relu(a: ArrayLike, slope: float = 0.2) -> Tensor:
    return LeakyReLU.apply(a, slope=slope)


def sigmoid(a: ArrayLike) -> Tensor:
    return Sigmoid.apply(a)


def tanh(a: ArrayLike) -> Tensor:
    return Tanh.apply(a)


def absolute(a: ArrayLike) -> Tensor:
    return Abs.apply(a)


def sqrt(a: ArrayLike) -> Tensor:
    return Sqrt.apply(a)


def square(a: ArrayLike) -> Tensor:
    return Square.apply(a)


def clamp_min(a: ArrayLike, floor: float) -> Tensor:
    return ClampMin.apply(a, floor=floor)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < max(ndim, 1):
            raise AxisError(f"axis {ax} is out of range for a {ndim}-d tensor")
        out.append(ax % ndim if ndim else 0)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def _expand_reduced(grad: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            grad = np.expand_dims(grad, ax)
    return np.broadcast_to(grad, shape)


class Sum(Function):
    def forward(self, a, axes=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axes, a.ndim)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        return (np.array(_expand_reduced(grad, self.shape, self.axes, self.keepdims)),)


class Mean(Function):
    def forward(self, a, axes=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axes, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[ax] for ax in self.axes])) if self.axes else 1
        return np.sum(a, axis=self.axes, keepdims=keepdims) / self.count

    def backward(self, grad):
        return (_expand_reduced(grad, self.shape, self.axes, self.keepdims) / self.count,)


class Max(Function):
    def forward(self, a, axes=None, keepdims=False):
        self.shape = a.shape
        self.axes = _normalize_axes(axes, a.ndim)
        self.keepdims = keepdims
        out = np.max(a, axis=self.axes, keepdims=True)
        # ties share the gradient equally
        mask = (a == out).astype(a.dtype)
        self.weights = mask / mask.sum(axis=self.axes, keepdims=True)
        return out if keepdims else np.squeeze(out, axis=self.axes)

    def backward(self, grad):
        return (_expand_reduced(grad, self.shape, self.axes, self.keepdims) * self.weights,)


_REDUCE = {"sum": Sum, "mean": Mean, "max": Max}


def reduce(kind: str, a: ArrayLike, axes=None, keepdims: bool = False) -> Tensor:
    """Reduce over `axes` (all axes when None). mean = sum / count."""
    if kind not in _REDUCE:
        raise ValueError(f"unknown reduction {kind!r}")
    return _REDUCE[kind].apply(a, axes=axes, keepdims=keepdims)


# ---------------------------------------------------------------------------
# Layout ops
# ---------------------------------------------------------------------------

class Reshape(Function):
    def forward(self, a, shape=()):
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes=()):
        if sorted(axes) != list(range(a.ndim)):
            raise AxisError(f"{tuple(axes)} is not a permutation of {a.ndim} axes")
        self.inverse = tuple(np.argsort(axes))
        return np.transpose(a, axes)

    def backward(self, grad):
        return (np.transpose(grad, self.inverse),)


class Pad(Function):
    """Zero padding; `widths` is one (before, after) pair per axis."""

    def forward(self, a, widths=()):
        self.slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
        return np.pad(a, widths, mode="constant")

    def backward(self, grad):
        return (grad[self.slices],)


class Slice(Function):
    def forward(self, a, index=None):
        self.shape = a.shape
        self.index = index
        return np.array(a[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.bounds = np.cumsum([0] + [arr.shape[axis] for arr in arrays])
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(
            np.take(grad, np.arange(lo, hi), axis=self.axis)
            for lo, hi in zip(self.bounds[:-1], self.bounds[1:])
        )


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: ArrayLike, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(a, axes=tuple(axes))


def pad(a: ArrayLike, widths: Sequence[tuple[int, int]]) -> Tensor:
    return Pad.apply(a, widths=tuple(tuple(w) for w in widths))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

class GradientMap:
    """Gradients keyed by parameter identity. Absent entries mean zero."""

    def __init__(self) -> None:
        self._entries: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _accumulate(self, param: Tensor, grad: np.ndarray) -> None:
        key = id(param)
        if key in self._entries:
            self._entries[key] = (param, self._entries[key][1] + grad)
        else:
            self._entries[key] = (param, np.array(grad, dtype=param.data.dtype))

    def array(self, param: Tensor) -> np.ndarray:
        entry = self._entries.get(id(param))
        if entry is None:
            return np.zeros_like(param.data)
        return entry[1]

    def __getitem__(self, param: Tensor) -> Tensor:
        return Tensor(self.array(param), dtype=param.data.dtype)

    def __contains__(self, param: Tensor) -> bool:
        return id(param) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def params(self) -> list[Tensor]:
        return [param for param, _ in self._entries.values()]


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> GradientMap:
    """d(root)/d(leaf) for every requires_grad leaf reachable from root.

    Each node's gradient is complete before it is propagated (reverse
    topological order), so shared subexpressions accumulate additively.
    """
    if root.data.size != 1:
        raise NonScalarRootError(f"backward() needs a scalar root, got shape {root.shape}")
    result = GradientMap()
    if not root.requires_grad:
        return result
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._ctx is None:
            result._accumulate(node, grad)
            continue
        for parent, parent_grad in zip(node._ctx.inputs, node._ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    return result


# ---------------------------------------------------------------------------
# Finite-difference gradient checker
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               tol: float = 1e-4, *, max_elements: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """Compare backward() against central differences of `f` at `x`.

    `f(x)` must return a scalar Tensor and be deterministic. Elements of
    `x.data` are perturbed in place and restored, so `f` may also close
    over `x` instead of using its argument. With `max_elements` a seeded
    random subset of elements is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not x.requires_grad:
        raise ValueError("grad_check needs x.requires_grad=True")

    if not x.data.flags.c_contiguous or not x.data.flags.writeable:
        x.data = np.array(x.data, order="C")
    analytic = backward(f(x)).array(x).reshape(-1)
    flat = x.data.reshape(-1)
    indices: Iterable[int] = range(flat.size)
    if max_elements is not None and flat.size > max_elements:
        indices = sorted(make_rng(seed).choice(flat.size, size=max_elements, replace=False))

    worst = 0.0
    checked = 0
    for i in indices:
        original = flat[i]
        flat[i] = original + eps
        plus = float(f(x).data.reshape(-1)[0])
        flat[i] = original - eps
        minus = float(f(x).data.reshape(-1)[0])
        flat[i] = original
        numeric = (plus - minus) / (2.0 * eps)
        a = float(analytic[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
        checked += 1
    logger.debug("grad_check: %d elements, max_rel_err=%.3e", checked, worst)
    return GradCheckReport(max_rel_err=worst, passed=worst <= tol, checked=checked)

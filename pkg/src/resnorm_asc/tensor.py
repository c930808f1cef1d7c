"""Minimal taped reverse-mode autodiff over numpy arrays.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` on raw arrays and a ``backward`` that maps the output gradient to
one gradient per input. Calling :meth:`Function.apply` records the node on the
output tensor; :func:`backward` walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class MissingAdjointError(RuntimeError):
    """Raised when backward reaches an op that has no registered adjoint."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense array plus optional autodiff bookkeeping.

    Canonical activations are 4-D ``(N, C, F, T)``; parameters and logits use
    whatever rank they need.
    """

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
        name: str = "",
    ) -> None:
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not isinstance(data, np.ndarray) or not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Tuple["Function", Tuple["Tensor", ...]]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; heavy ops live in resnorm_asc.ops
    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        return Add.apply(self, Scale.apply(_as_tensor(other, self.dtype), factor=-1.0))

    def __rsub__(self, other: Any) -> "Tensor":
        return Add.apply(_as_tensor(other, self.dtype), Scale.apply(self, factor=-1.0))

    def __neg__(self) -> "Tensor":
        return Scale.apply(self, factor=-1.0)

    def __mul__(self, other: Any) -> "Tensor":
        if np.isscalar(other):
            return Scale.apply(self, factor=float(other))
        return Mul.apply(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> "Tensor":
        if not np.isscalar(other):
            raise TypeError("Tensor division is only defined for scalar divisors")
        return Scale.apply(self, factor=1.0 / float(other))

    def sum(self, axes: Optional[Sequence[int]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axes=_norm_axes(axes, self.ndim), keepdims=keepdims)

    def mean(self, axes: Optional[Sequence[int]] = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axes=_norm_axes(axes, self.ndim), keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(self)


def _as_tensor(value: Any, dtype: np.dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _norm_axes(axes: Optional[Sequence[int]], ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Function:
    """Base class of recorded operations.

    Subclasses implement ``forward(*arrays, **kwargs)`` and
    ``backward(grad) -> tuple`` (one entry per input, ``None`` allowed for
    inputs that need no gradient). A subclass that leaves ``backward``
    unimplemented can still run forward, but :func:`backward` refuses any
    graph that contains it.
    """

    differentiable = True

    def __init__(self) -> None:
        self.needs: Tuple[bool, ...] = ()

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise MissingAdjointError(f"no adjoint registered for op '{type(self).__name__}'")

    @classmethod
    def has_adjoint(cls) -> bool:
        return cls.differentiable and cls.backward is not Function.backward

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls()
        fn.needs = tuple(t.requires_grad for t in inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        track = _grad_enabled and any(fn.needs)
        result = Tensor(out, requires_grad=track, dtype=out.dtype)
        if track:
            result._ctx = (fn, inputs)
        return result


def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx[1]:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Reverse-mode accumulation from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` receive their gradient in ``.grad``
    (accumulated if already set) and the mapping leaf -> gradient is returned.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")
    order = _topo_order(loss)
    for node in order:
        if node._ctx is not None and not type(node._ctx[0]).has_adjoint():
            raise MissingAdjointError(
                f"no adjoint registered for op '{type(node._ctx[0]).__name__}'"
            )
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    store: Dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g if node.grad is None else node.grad + g
            store[node] = node.grad
            continue
        fn, parents = node._ctx
        parent_grads = fn.backward(g)
        for parent, pg in zip(parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return store


def grad_check(
    fn: Callable[..., Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` maps ``params`` to a scalar tensor. Params must be float64. When
    ``max_entries`` is given, each parameter is probed at that many random
    positions instead of every element.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires float64 parameters")
        p.requires_grad = True
        p.grad = None
    loss = fn(*params)
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            scale = max(1.0, float(np.abs(ga).max()))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = float(fn(*params).data)
                flat[i] = orig - h
                down = float(fn(*params).data)
                flat[i] = orig
                num = (up - down) / (2.0 * h)
                ana = float(ga.reshape(-1)[i])
                err = abs(num - ana) / max(abs(num), abs(ana), 1e-3 * scale)
                worst = max(worst, err)
    return worst


class Add(Function):
    def forward(self, a, b):
        self.sa, self.sb = a.shape, b.shape
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.sa), unbroadcast(grad, self.sb)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = unbroadcast(grad * self.b, self.a.shape) if self.needs[0] else None
        gb = unbroadcast(grad * self.a, self.b.shape) if self.needs[1] else None
        return ga, gb


class Scale(Function):
    def forward(self, a, factor=1.0):
        self.factor = factor
        return a * np.asarray(factor, dtype=a.dtype)

    def backward(self, grad):
        return (grad * np.asarray(self.factor, dtype=grad.dtype),)


class Sum(Function):
    def forward(self, a, axes=(), keepdims=False):
        self.shape, self.axes, self.keepdims = a.shape, axes, keepdims
        return np.asarray(a.sum(axis=axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, a, axes=(), keepdims=False):
        self.shape, self.axes, self.keepdims = a.shape, axes, keepdims
        self.count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
        if self.count == 0:
            raise ValueError("reduce_mean over an empty extent")
        return np.asarray(a.mean(axis=axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        g = np.broadcast_to(grad / np.asarray(self.count, dtype=grad.dtype), self.shape)
        return (g.copy(),)


class Reshape(Function):
    def forward(self, a, shape=()):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)

"""Reverse-mode automatic differentiation on dense numpy arrays.

A Tensor wraps an ndarray and, when gradients are enabled, remembers the
operation that produced it (parents + a backward rule).  The graph is
rebuilt on every forward pass (define-by-run), which keeps autoregressive
decoding with data-dependent length trivially correct.  backward() walks
the graph once in reverse topological order and accumulates gradients
additively, so shared subexpressions (fan-out) are handled by summation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..errors import ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense n-dimensional real array, optionally part of the autodiff graph.

    data is immutable by convention after construction; only the grad
    buffer is mutated (by backward).  Leaf tensors carry parameters and
    inputs; interior tensors carry a backward rule.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Optional[Callable[[np.ndarray], None]] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar (delegates to ops) ------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, _as_tensor(other, self))

    def __radd__(self, other):
        from . import ops
        return ops.add(_as_tensor(other, self), self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        from . import ops
        return ops.mul(_as_tensor(other, self), self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, axes=None):
        from . import ops
        return ops.transpose(self, axes)


def _scalar_err(t):
    raise ShapeError(f"item() requires a scalar tensor, got shape {t.shape}")


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def make_node(data: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result; records the graph edge only when grads are on."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add g into t.grad (fan-out sums per-path gradients).

    Always copies on first accumulation: backward rules may pass the
    child's own grad buffer (e.g. through a shape-preserving add), and
    sharing it between tensors would let later += corrupt earlier sums.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def trace(root: Tensor) -> list[Tensor]:
    """Topologically ordered operation records reachable from root.

    Every node's inputs precede it; a backward pass visits each node
    exactly once by walking the returned list in reverse.
    """
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
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate grads of everything reachable from a scalar loss."""
    if loss.size != 1:
        raise ShapeError(f"backward() requires a scalar loss, got shape {loss.shape}")
    order = trace(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        node.backward_fn(node.grad)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None

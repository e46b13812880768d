"""Reverse-mode autodiff over dense numpy arrays.

A ``Tensor`` is an immutable node in a define-by-run computation graph:
leaf tensors carry constants, ``Parameter`` leaves additionally accumulate
gradients, and interior nodes remember their parents plus a vector-Jacobian
callback. ``backward`` walks the graph once in reverse topological order
with a fixed (construction-order) accumulation sequence, so repeated runs
on identical inputs produce bit-identical gradients.

Only float32 and float64 values are supported; float64 is the dtype used
by the finite-difference verification in :mod:`geodeformer.diffcore.fdcheck`.
"""

from __future__ import annotations

import numpy as np

REAL32 = np.dtype(np.float32)
REAL64 = np.dtype(np.float64)
_REAL_DTYPES = (REAL32, REAL64)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform; names the offending axes."""


_grad_enabled = True


class no_grad:
    """Context manager that drops graph construction (forward values only)."""

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
    """Immutable dense real array, optionally part of a differentiation graph."""

    __slots__ = ("data", "_parents", "_vjp")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _REAL_DTYPES:
            arr = arr.astype(REAL64)
        if not arr.flags.c_contiguous:
            # ascontiguousarray would do, but it silently promotes 0-d to 1-d
            arr = np.array(arr, order="C")
        self.data = arr
        self._parents = ()
        self._vjp = None

    # -- structural properties ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # -- operator sugar (delegates to the primitive set) ----------------------

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)


class Parameter(Tensor):
    """Leaf tensor with a persistent, zero-initialized gradient buffer."""

    __slots__ = ("grad", "trainable")

    def __init__(self, data, dtype=None, trainable=True):
        super().__init__(data, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.trainable = bool(trainable)

    def zero_grad(self):
        self.grad[...] = 0.0

    def assign(self, data):
        """Replace the value in place, keeping shape and the gradient buffer."""
        arr = np.asarray(data, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeError(
                f"assign shape {arr.shape} != parameter shape {self.data.shape}"
            )
        self.data[...] = arr

    def __repr__(self):
        return f"Parameter(shape={self.shape}, dtype={self.data.dtype.name})"


def from_op(data: np.ndarray, parents, vjp) -> Tensor:
    """Create a graph node from a forward value and its vector-Jacobian map.

    ``vjp(grad)`` must return one cotangent per parent (``None`` to skip),
    each already shaped like the parent. When gradients are globally
    disabled, or no parent participates in a graph, the node is a constant.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data)
    if _grad_enabled and any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _tracks(t: Tensor) -> bool:
    return isinstance(t, Parameter) or t._vjp is not None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(parameter) into every reachable Parameter's grad.

    The loss must be scalar. Unreachable parameters are left untouched
    (their gradient buffers stay whatever they were, zero after a reset).
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")

    # Iterative post-order DFS; recursion would overflow on deep graphs.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g.reshape(node.grad.shape)
        if node._vjp is None:
            continue
        contribs = node._vjp(g)
        for parent, contrib in zip(node._parents, contribs):
            if contrib is None or not _tracks(parent):
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = contrib if acc is None else acc + contrib


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)

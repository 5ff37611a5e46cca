"""A minimal reverse-mode tape over numpy arrays.

Every differentiable value is a :class:`Tensor`. Operations that involve at
least one tensor with ``requires_grad`` record their parents and a backward
rule; :func:`backward` walks the recorded graph from a scalar loss and returns
the gradient of every requested leaf.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: BackwardFn | None = None,
        name: str | None = None,
    ):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; the real rules live in functional.py
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not a recorded primitive")
        from . import functional as F
        return F.mul(self, 1.0 / other)


def tensor(data, dtype=np.float64, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Build a tensor from external input, rejecting non-finite values."""
    arr = np.array(data, dtype=dtype)
    if arr.ndim > 0 and 0 in arr.shape:
        raise ShapeError("tensor extents must be positive")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data contains NaN or Inf")
    return Tensor(arr, requires_grad=requires_grad, name=name)


def parameter(data, dtype=np.float64, name: str | None = None) -> Tensor:
    return tensor(data, dtype=dtype, requires_grad=True, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap constants as non-differentiable tensors matching ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def make(out: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    """Record an op result. Parents that carry no gradient are not kept on the tape."""
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(out, requires_grad=True, parents=parents, backward=backward)
    return Tensor(out)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a map from parameter to gradient. When ``params`` is given, every
    listed parameter appears in the result, with a zero gradient if the loss
    does not depend on it. Each parameter's ``grad`` slot is also populated.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad:
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                grads[id(node)] = g
                leaves[id(node)] = node
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"gradient shape {pg.shape} != value shape {parent.shape}")
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    result: dict[Tensor, np.ndarray] = {}
    targets = params if params is not None else list(leaves.values())
    for p in targets:
        g = grads.get(id(p)) if id(p) in leaves else None
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = g
        result[p] = g
    return result

"""Tensor node and the reverse-mode tape walk."""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ConfigError, NumericError

DEFAULT_DTYPE = np.float32


class Tensor:
    """Dense array plus the bookkeeping needed to differentiate through it.

    ``parents`` and ``backward_fn`` form the tape: ``backward_fn(grad)``
    returns one gradient (or ``None``) per parent.
    """

    __slots__ = ("data", "parents", "backward_fn", "op", "name", "requires_grad")

    def __init__(
        self,
        data,
        *,
        requires_grad: bool = False,
        name: str | None = None,
        dtype=None,
        _parents: Sequence["Tensor"] = (),
        _backward: Callable | None = None,
        _op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.parents = tuple(_parents)
        self.backward_fn = _backward
        self.op = _op
        self.name = name
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def label(self) -> str:
        return f"{self.op}:{self.name}" if self.name else self.op

    def __repr__(self) -> str:
        return f"Tensor(op={self.label()}, shape={self.shape}, dtype={self.dtype})"

    # arithmetic sugar; implementations live in ops
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Create an op output, failing fast on non-finite values."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"op '{op}' produced non-finite values")
    if not any(p.requires_grad for p in parents):
        return Tensor(data, _op=op)
    return Tensor(data, _parents=parents, _backward=backward, _op=op)


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors not reachable from ``loss`` get zero gradients.
    """
    wrt = list(wrt)
    keep = {id(t) for t in wrt}
    if loss.data.size != 1:
        raise ConfigError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError(
                        f"non-finite gradient produced by node '{node.label()}' for '{parent.label()}'"
                    )
                if pg.shape != parent.shape:
                    raise ConfigError(
                        f"gradient shape {pg.shape} from '{node.label()}' does not match {parent.shape}"
                    )
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=parent.dtype)
    out = []
    for t in wrt:
        g = grads.get(id(t))
        out.append(np.zeros_like(t.data) if g is None else g)
    return out

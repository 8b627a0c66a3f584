"""Reverse-mode autodiff node.

A :class:`Tensor` wraps a numpy array.  Operations in :mod:`radiomap.engine.ops`
create new tensors that remember their parents and a backward closure mapping the
upstream gradient to one gradient per parent.  Feature maps are rank-4
``(N, C, H, W)``; parameters may have any rank and losses are rank-0.
"""

from __future__ import annotations

import contextlib

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, frozen evaluation)."""
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
    """Array plus gradient bookkeeping.

    ``grad`` is allocated lazily: reading it before any gradient arrived returns
    zeros of the right shape.  Leaf gradients accumulate across ``backward``
    calls on *different* graphs; call :meth:`zero_grad` between optimizer steps.
    """

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self._data = arr
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._released = False

    # -- data access -------------------------------------------------------
    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value):
        arr = np.asarray(value, dtype=self._data.dtype)
        if arr.shape != self._data.shape:
            raise ValueError(f"cannot change shape of {self._label()} from {self._data.shape} to {arr.shape}")
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self._data)
        return self._grad

    @grad.setter
    def grad(self, value):
        if value is None:
            self._grad = None
            return
        arr = np.asarray(value, dtype=self._data.dtype)
        if arr.shape != self._data.shape:
            raise ValueError(f"grad shape {arr.shape} does not match {self._data.shape}")
        self._grad = arr

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self):
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data)

    def detach(self) -> "Tensor":
        return Tensor(self._data, requires_grad=False, name=self.name)

    def _label(self) -> str:
        return self.name or f"Tensor{self.shape}"

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- reverse pass ------------------------------------------------------
    def backward(self):
        """Backpropagate from this scalar through the recorded graph.

        The graph is released afterwards; calling ``backward`` on it again raises.
        """
        if self._data.size != 1 or self._data.ndim > 1:
            raise RuntimeError(f"backward() needs a scalar, got shape {self.shape}")
        if self._released:
            raise RuntimeError("graph already released; rebuild it (and zero_grad) before calling backward again")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self._data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None and node.requires_grad:
                    node._grad = g if node._grad is None else node._grad + g
                continue
            if g is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._parents = ()
            node._released = True


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Create an op output; records the graph only if some parent needs grad."""
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)

"""Dense float tensors with reverse-mode automatic differentiation.

Activations are laid out N x H x W x C; convolution kernels kH x kW x Cin x Cout.
Storage is float32 in production; the gradient-check harness runs the same ops
on float64 tensors.

Graph recording: every op output remembers its parent tensors and a backward
closure, tagged with a global creation sequence number. ``backward(loss)``
walks the reachable nodes in reverse creation order, which is a valid reverse
topological order because parents are always created before their consumers;
each node is visited exactly once and gradient contributions from multiple
consumers add up. Gradient buffers are only ever replaced, never mutated in
place, so backward closures are free to hand out array views.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import ShapeError

_SEQ = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (forward-only execution)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class Tensor:
    """A dense n-dimensional float array, optionally tracked for autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = None
        self._parents = ()
        self._backward = None
        self._seq = next(_SEQ)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        head = f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}"
        if self.name:
            head += f", name={self.name!r}"
        return head + (", requires_grad)" if self.requires_grad else ")")


class Parameter(Tensor):
    """Trainable tensor with a persistent identity; named at network assembly."""

    def __init__(self, data, name: str | None = None, dtype=np.float32):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


def record_op(data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result, attaching the backward closure if recording is on."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add one gradient contribution; k consumers of a tensor contribute k terms."""
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from a scalar loss."""
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq, reverse=True)
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in nodes:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

"""Dense tensor container with reverse-mode gradient recording.

A :class:`Tensor` wraps a NumPy array plus an optional gradient buffer. Ops
(see :mod:`ulsam.ops`) are pure functions: they read input ``.data``, produce a
new Tensor, and attach a closure that routes upstream gradients back to the
inputs. ``backward()`` replays those closures in reverse topological order.

Convolutional code treats tensors as rank-4 ``(batch, channels, height,
width)``; the container itself is rank-agnostic so scalars (losses) and
matrices (fully-connected weights) ride the same tape. Elements are float64 by
default, which every gradient check relies on; float32 is selectable for
training throughput.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .errors import ConfigurationError

Array = np.ndarray


class Tensor:
    """An n-d array, an optional grad buffer of the same shape, and tape links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Iterable["Tensor"] = (),
        backward: Optional[Callable[[Array], None]] = None,
        name: str = "",
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=data.dtype if isinstance(data, np.ndarray) else np.float64)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad: Optional[Array] = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ConfigurationError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    # -- gradient plumbing ---------------------------------------------------

    def accumulate_grad(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self, upstream: Optional[Array] = None) -> None:
        """Propagate gradients from this tensor to every reachable input.

        ``upstream`` defaults to 1.0 and must match this tensor's shape; a
        non-scalar output therefore needs an explicit seed.
        """
        if upstream is None:
            if self.data.size != 1:
                raise ConfigurationError(
                    f"backward() on non-scalar output of shape {self.shape} needs an explicit upstream gradient"
                )
            upstream = np.ones_like(self.data)
        upstream = np.asarray(upstream, dtype=self.data.dtype)
        if upstream.shape != self.data.shape:
            raise ConfigurationError(
                f"upstream gradient shape {upstream.shape} does not match output shape {self.shape}"
            )

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.accumulate_grad(upstream)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- minimal arithmetic used by model composition -------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        if not isinstance(other, Tensor):
            raise TypeError("Tensor addition expects another Tensor")
        if self.shape != other.shape:
            raise ConfigurationError(f"add: shape mismatch {self.shape} vs {other.shape}")
        out = Tensor(
            self.data + other.data,
            requires_grad=self.requires_grad or other.requires_grad,
            parents=(self, other),
        )

        def _bwd(g: Array, a=self, b=other) -> None:
            if a.requires_grad or a._parents:
                a.accumulate_grad(g)
            if b.requires_grad or b._parents:
                b.accumulate_grad(g)

        out._backward = _bwd
        return out


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap arrays/lists into a leaf Tensor without recording gradients."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def parameter(data, name: str = "", dtype=None) -> Tensor:
    """A leaf tensor that wants gradients (model weights)."""
    arr = np.asarray(data, dtype=dtype if dtype is not None else np.asarray(data).dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    t = Tensor(arr, requires_grad=True, name=name)
    return t


def needs_tape(*tensors: Tensor) -> bool:
    """True when an op's output must carry a backward closure."""
    return any(t.requires_grad or t._parents for t in tensors)

"""Dense 2-D tensors with hand-written reverse-mode gradients.

Every op records its parents and a backward closure on the output tensor.
``backward`` walks the recorded graph in reverse topological order, so one
forward pass forms a tape that is replayed once. Gradients accumulate; call
``zero_grad`` on leaves between steps.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from afsrl.errors import DegenerateEmbeddingError, DimensionError, EmptyGraphError

NORM_FLOOR = 1e-12


class Tensor:
    """A float64 matrix with an attached gradient buffer."""

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, _parents: Sequence["Tensor"] = (), op: str = "", requires_grad: bool = True):
        if _parents and isinstance(data, np.ndarray) and data.dtype == np.float64:
            arr = data  # fresh op output, no copy needed
        else:
            arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self._grad = None
        if _parents:
            requires_grad = any(p.requires_grad for p in _parents)
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward: Callable[[], None] | None = None
        self.op = op

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        """Propagate d(self)/d(leaf) into every reachable ``.grad``.

        Interior gradients are reset before the sweep so one forward graph
        may be backpropagated more than once without double counting.
        """
        order = _topological(self)
        for t in order:
            if t._parents:
                t._grad = None
        if seed is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            self.grad = self.grad + 1.0
        else:
            self.grad = self.grad + np.broadcast_to(np.asarray(seed, dtype=np.float64), self.shape)
        for t in reversed(order):
            if t._backward is not None and t.requires_grad:
                t._backward()

    def __repr__(self) -> str:
        return f"Tensor({self.rows}x{self.cols}, op={self.op or 'leaf'})"


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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A leaf that never receives gradient."""
    return Tensor(x, requires_grad=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, (a, b), "matmul")

    def _backward():
        if a.requires_grad:
            a.grad += out.grad @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ out.grad

    out._backward = _backward
    return out


def sparse_matmul(m, b: Tensor) -> Tensor:
    """Constant sparse (scipy) matrix times tensor; gradient flows into ``b`` only."""
    if m.shape[1] != b.rows:
        raise DimensionError(f"matmul shape mismatch: {m.shape} x {b.shape}")
    out = Tensor(np.asarray(m @ b.data), (b,), "sparse_matmul")
    mt = m.T.tocsr()

    def _backward():
        b.grad += mt @ out.grad

    out._backward = _backward
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data, (a, b), "add")

    def _backward():
        if a.requires_grad:
            a.grad += out.grad
        if b.requires_grad:
            b.grad += out.grad

    out._backward = _backward
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c, (a,), "scale")

    def _backward():
        a.grad += c * out.grad

    out._backward = _backward
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(a.data * mask, (a,), "relu")

    def _backward():
        a.grad += out.grad * mask

    out._backward = _backward
    return out


def row_l2_normalize(a: Tensor) -> Tensor:
    norms = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))[:, None]
    if np.any(norms < NORM_FLOOR):
        bad = int(np.argmin(norms[:, 0]))
        raise DegenerateEmbeddingError(
            f"row {bad} has norm {norms[bad, 0]:.3e} < {NORM_FLOOR:g}; representation collapsed"
        )
    unit = a.data / norms
    out = Tensor(unit, (a,), "row_l2_normalize")

    def _backward():
        # d(x/|x|) = (I - u u^T) / |x|
        g = out.grad
        proj = np.einsum("ij,ij->i", g, unit)[:, None]
        a.grad += (g - proj * unit) / norms

    out._backward = _backward
    return out


def mean_rows(a: Tensor) -> Tensor:
    if a.rows == 0:
        raise EmptyGraphError("mean_rows on a tensor with zero rows")
    n = a.rows
    out = Tensor(a.data.mean(axis=0, keepdims=True), (a,), "mean_rows")

    def _backward():
        a.grad += np.broadcast_to(out.grad / n, a.shape)

    out._backward = _backward
    return out


def max_rows(a: Tensor) -> Tensor:
    """Column-wise max over rows; ties route the gradient to the first argmax."""
    if a.rows == 0:
        raise EmptyGraphError("max_rows on a tensor with zero rows")
    idx = np.argmax(a.data, axis=0)
    cols = np.arange(a.cols)
    out = Tensor(a.data[idx, cols][None, :], (a,), "max_rows")

    def _backward():
        np.add.at(a.grad, (idx, cols), out.grad[0])

    out._backward = _backward
    return out


def segment_mean(a: Tensor, sizes: Sequence[int]) -> Tensor:
    """Mean over consecutive row blocks of the given sizes -> len(sizes) x cols."""
    sizes = np.asarray(sizes, dtype=np.int64)
    if sizes.sum() != a.rows:
        raise DimensionError(f"segment sizes sum to {sizes.sum()}, tensor has {a.rows} rows")
    if np.any(sizes < 1):
        raise EmptyGraphError("segment_mean with an empty segment")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    out = Tensor(np.add.reduceat(a.data, starts, axis=0) / sizes[:, None], (a,), "segment_mean")

    def _backward():
        a.grad += np.repeat(out.grad / sizes[:, None], sizes, axis=0)

    out._backward = _backward
    return out


def segment_max(a: Tensor, sizes: Sequence[int]) -> Tensor:
    """Column-wise max within consecutive row blocks; ties route to the first argmax."""
    sizes = np.asarray(sizes, dtype=np.int64)
    if sizes.sum() != a.rows:
        raise DimensionError(f"segment sizes sum to {sizes.sum()}, tensor has {a.rows} rows")
    if np.any(sizes < 1):
        raise EmptyGraphError("segment_max with an empty segment")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    idx = np.stack([s + np.argmax(a.data[s : s + n], axis=0) for s, n in zip(starts, sizes)])
    cols = np.broadcast_to(np.arange(a.cols), idx.shape)
    out = Tensor(a.data[idx, cols], (a,), "segment_max")

    def _backward():
        np.add.at(a.grad, (idx, cols), out.grad)

    out._backward = _backward
    return out


def vstack(parts: Iterable[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("vstack of an empty list")
    widths = {p.cols for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"vstack column mismatch: {sorted(widths)}")
    offsets = np.cumsum([0] + [p.rows for p in parts])
    out = Tensor(np.vstack([p.data for p in parts]), parts, "vstack")

    def _backward():
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += out.grad[lo:hi]

    out._backward = _backward
    return out


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """sum_i w_i * t_i for same-shape tensors."""
    if len(terms) != len(weights) or not terms:
        raise DimensionError("weighted_sum needs matching, nonempty terms and weights")
    shape = terms[0].shape
    if any(t.shape != shape for t in terms):
        raise DimensionError(f"weighted_sum shape mismatch: {[t.shape for t in terms]}")
    w = [float(x) for x in weights]
    out = Tensor(sum(wi * t.data for wi, t in zip(w, terms)), terms, "weighted_sum")

    def _backward():
        for wi, t in zip(w, terms):
            t.grad += wi * out.grad

    out._backward = _backward
    return out

"""Central finite-difference gradient checks against the analytic backward pass."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from afsrl.numerics import Tensor, _topological


def numeric_grad(f: Callable[[], float], t: Tensor, h: float = 1e-6) -> np.ndarray:
    """d f / d t by central differences, perturbing ``t.data`` in place."""
    g = np.zeros_like(t.data)
    it = np.nditer(t.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = t.data[idx]
        t.data[idx] = orig + h
        fp = f()
        t.data[idx] = orig - h
        fm = f()
        t.data[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    diff = np.linalg.norm(analytic - numeric)
    return float(diff / max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor))


class KinkCrossed(ArithmeticError):
    """A finite-difference probe flipped a ReLU on or off, so the difference quotient is meaningless."""


def relu_pattern(root: Tensor) -> bytes:
    """On/off state of every ReLU on the tape below ``root``."""
    bits = [np.packbits(n._parents[0].data > 0) for n in _topological(root) if n.op == "relu"]
    return b"".join(b.tobytes() for b in bits)


def check(build: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6,
          smooth_only: bool = False) -> float:
    """Max relative error over ``inputs`` for the scalar produced by ``build``.

    With ``smooth_only`` every probe must keep the ReLU on/off pattern of the
    unperturbed point; otherwise ``KinkCrossed`` is raised.
    """
    for t in inputs:
        t.zero_grad()
    root = build()
    root.backward()
    pattern = relu_pattern(root) if smooth_only else None
    analytic = [t.grad.copy() for t in inputs]

    def f():
        out = build()
        if pattern is not None and relu_pattern(out) != pattern:
            raise KinkCrossed("finite-difference step crossed a ReLU kink")
        return out.item()

    worst = 0.0
    for t, a in zip(inputs, analytic):
        n = numeric_grad(f, t, h)
        worst = max(worst, relative_error(a, n))
    for t in inputs:
        t.zero_grad()
    return worst


def sum_of(t: Tensor, weights: np.ndarray | None = None) -> Tensor:
    """Scalar readout sum(w * t) built from tape ops, for checking non-scalar ops."""
    from afsrl.numerics import constant, matmul

    w = np.ones(t.shape) if weights is None else weights
    # sum_ij w_ij t_ij as a (1 x mn) @ (mn x 1) product
    flat_w = constant(w.reshape(1, -1))
    flat_t = _flatten(t)
    return matmul(flat_w, flat_t)


def _flatten(t: Tensor) -> Tensor:
    out = Tensor(t.data.reshape(-1, 1).copy(), (t,), "flatten")

    def _backward():
        t.grad += out.grad.reshape(t.shape)

    out._backward = _backward
    return out

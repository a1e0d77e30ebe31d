"""NT-Xent contrastive losses for the two augmentation branches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from afsrl.errors import DegenerateEmbeddingError, DimensionError
from afsrl.numerics import NORM_FLOOR, Tensor, row_l2_normalize, weighted_sum


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.alpha + self.beta <= 0:
            raise ValueError("alpha + beta must be > 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise DegenerateEmbeddingError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _logsumexp_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-sum-exp over finite entries (-inf masks) and the softmax weights."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    return (m + np.log(s))[:, 0], e / s


def _nt_xent_normalized(a: Tensor, o: Tensor, tau: float) -> Tensor:
    """Mean over anchors n of

        -log exp(a_n.o_n/tau) / (sum_{k!=n} exp(a_n.a_k/tau) + sum_k exp(a_n.o_k/tau))

    for unit rows ``a`` (anchor view) and ``o`` (other view). The positive
    pair stays in the cross-view sum of the denominator.
    """
    n = a.rows
    s_aa = a.data @ a.data.T / tau
    s_ao = a.data @ o.data.T / tau
    np.fill_diagonal(s_aa, -np.inf)
    logits = np.concatenate([s_aa, s_ao], axis=1)
    lse, p = _logsumexp_rows(logits)
    per_anchor = lse - np.diag(s_ao)
    out = Tensor(per_anchor.mean(), (a, o), "nt_xent")

    def _backward():
        g = out.grad[0, 0] / n
        g_aa = p[:, :n] * g  # zero on the diagonal
        g_ao = p[:, n:] * g
        g_ao[np.diag_indices(n)] -= g
        if a.requires_grad:
            a.grad += ((g_aa + g_aa.T) @ a.data + g_ao @ o.data) / tau
        if o.requires_grad:
            o.grad += (g_ao.T @ a.data) / tau

    out._backward = _backward
    return out


def nt_xent(anchor: Tensor, other: Tensor, tau: float) -> Tensor:
    """Directional NT-Xent of ``anchor`` against ``other``, averaged over the batch."""
    if anchor.shape != other.shape:
        raise DimensionError(f"batch shape mismatch: {anchor.shape} vs {other.shape}")
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    return _nt_xent_normalized(row_l2_normalize(anchor), row_l2_normalize(other), tau)


def symmetric_nt_xent(x: Tensor, y: Tensor, tau: float) -> Tensor:
    """(1/2N) sum_n [l(n, x, y) + l(n, y, x)]."""
    return weighted_sum([nt_xent(x, y, tau), nt_xent(y, x, tau)], [0.5, 0.5])


def loss_da(zu: Tensor, zv: Tensor, tau: float) -> Tensor:
    """Contrast the two data-augmented views."""
    return symmetric_nt_xent(zu, zv, tau)


def loss_fa(z: Tensor, h: Tensor, tau: float) -> Tensor:
    """Contrast clean-encoder projections against perturbed-encoder projections."""
    return symmetric_nt_xent(z, h, tau)


def total_loss(l_da: Tensor, l_fa: Tensor, weights: LossWeights) -> Tensor:
    return weighted_sum([l_da, l_fa], [weights.alpha, weights.beta])


def nt_xent_reference(anchor: np.ndarray, other: np.ndarray, tau: float) -> float:
    """Unvectorized double-loop evaluation of the directional loss, for testing."""
    anchor = np.asarray(anchor, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    n = anchor.shape[0]
    total = 0.0
    for i in range(n):
        pos = np.exp(cosine_sim(anchor[i], other[i]) / tau)
        denom = 0.0
        for k in range(n):
            if k != i:
                denom += np.exp(cosine_sim(anchor[i], anchor[k]) / tau)
        for k in range(n):
            denom += np.exp(cosine_sim(anchor[i], other[k]) / tau)
        total += -np.log(pos / denom)
    return total / n

"""Sinkhorn-Knopp projection of square matrices toward the Birkhoff polytope."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CLAMP = 30.0  # logits are clipped to [-CLAMP*tau, CLAMP*tau] before exp


@dataclass
class DoublyStochasticBatch:
    matrices: np.ndarray | ad.Var  # (B, n, n), or (n, n) for a single input
    iterations: int
    deviation: float  # max |row sum - 1| or |col sum - 1|

    @property
    def values(self) -> np.ndarray:
        m = self.matrices
        return m.value if isinstance(m, ad.Var) else m


def stochastic_deviation(m: np.ndarray) -> float:
    m = np.asarray(m)
    if m.size == 0:
        return 0.0
    rows = np.abs(m.sum(axis=-1) - 1.0).max()
    cols = np.abs(m.sum(axis=-2) - 1.0).max()
    return float(max(rows, cols))


def sinkhorn_project(h_hat, T: int = 10, tau: float = 0.1,
                     stopgrad: bool = False) -> DoublyStochasticBatch:
    """Alternate row then column normalisation of ``exp(h_hat / tau)``, T times.

    Accepts an ndarray or a ``Var`` of shape (n, n) or (B, n, n).  With a Var
    the iterations are recorded on its tape, so gradients flow through the
    unrolled loop (unless ``stopgrad``).  The last step is a column
    normalisation: column sums are exact and row sums carry the residual.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if T < 1:
        raise ValueError("need at least one iteration")
    shape = h_hat.shape
    if len(shape) < 2 or shape[-1] != shape[-2]:
        raise ValueError(f"Sinkhorn needs square matrices, got shape {shape}")

    wrap = not isinstance(h_hat, ad.Var)
    x = ad.Tape().const(h_hat) if wrap else h_hat
    if stopgrad:
        x = ad.stop_gradient(x)
    m = ad.exp(ad.clip(x, -CLAMP * tau, CLAMP * tau) / tau)
    for _ in range(T):
        m = m / ad.sum(m, axis=-1, keepdims=True)
        m = m / ad.sum(m, axis=-2, keepdims=True)
    dev = stochastic_deviation(m.value)
    return DoublyStochasticBatch(m.value if wrap else m, T, dev)


def identity_deviation(b: DoublyStochasticBatch | np.ndarray) -> np.ndarray:
    """Frobenius distance ``||H - I||_F`` for every matrix in the batch."""
    m = b.values if isinstance(b, DoublyStochasticBatch) else np.asarray(b)
    n = m.shape[-1]
    return np.sqrt(np.sum((m - np.eye(n)) ** 2, axis=(-2, -1)))


def product_closure_check(a, b) -> float:
    """How far ``a @ b`` is from doubly stochastic (max row/col sum error)."""
    return stochastic_deviation(np.asarray(a) @ np.asarray(b))


def stream_variance(x: np.ndarray) -> np.ndarray:
    """Mean squared distance of the n stream rows from their mean (per leading index)."""
    x = np.asarray(x)
    centred = x - x.mean(axis=-2, keepdims=True)
    return np.mean(np.sum(centred * centred, axis=-1), axis=-1)

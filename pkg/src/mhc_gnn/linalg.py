"""Dense float64 arithmetic, deterministic RNG and spectral helpers.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 (rank 1 to 3).
Everything here is pure: inputs are never modified.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

Tensor = np.ndarray


class NonFiniteError(FloatingPointError):
    """Raised when a public operation would return NaN or Inf."""


def as_tensor(x, *, copy: bool = False) -> Tensor:
    a = np.array(x, dtype=np.float64, copy=copy) if copy else np.asarray(x, dtype=np.float64)
    if a.ndim > 3:
        raise ValueError(f"tensors are rank <= 3, got shape {a.shape}")
    return a


def check_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return check_finite(out, "matmul result")


def rms_norm(x, eps: float = 1e-8) -> Tensor:
    """Divide each row (last axis) by ``sqrt(mean(row**2) + eps)``; no gain."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ValueError("rms_norm needs at least one column")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return check_finite(out, "rms_norm result")


def sigmoid(x) -> Tensor:
    return expit(as_tensor(x))


def relu(x) -> Tensor:
    return np.maximum(as_tensor(x), 0.0)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


class Rng:
    """Seeded counter-based generator (Philox).

    ``child(*keys)`` derives an independent stream from the same seed, so a
    run can hand out streams for dropout, splits and initialisation without
    the order of requests affecting each other.
    """

    def __init__(self, seed: int, *stream: int):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.stream])
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.stream, *keys)

    def normal(self, size, scale: float = 1.0) -> Tensor:
        return self.gen.normal(0.0, scale, size=size)

    def uniform(self, size, low: float = 0.0, high: float = 1.0) -> Tensor:
        return self.gen.uniform(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def random(self, size=None):
        return self.gen.random(size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


@dataclass
class EigenResult:
    lambda1: float
    lambda2: float
    vectors: np.ndarray  # (dim, 2)
    residuals: tuple[float, float]
    iterations: int
    converged: bool
    notes: list[str] = field(default_factory=list)

    @property
    def spectral_gap(self) -> float:
        return 1.0 - self.lambda2


def _operator(a):
    if hasattr(a, "matrix"):
        a = a.matrix
    return a


def dominant_eigenpair(a, k: int = 2, iters: int = 20000, tol: float = 1e-9,
                       seed: int = 0) -> EigenResult:
    """Top two eigenvalues of a symmetric operator with spectrum in [-1, 1].

    Power iteration on the shifted operator ``A + I`` (so the algebraically
    largest eigenvalues dominate), with deflation of the first eigenvector.
    Each eigenvalue is a Rayleigh quotient; the returned residual
    ``||A v - lambda v||`` bounds its distance to a true eigenvalue.
    """
    if k != 2:
        raise ValueError("only the top-two pair is supported")
    A = _operator(a)
    dim = A.shape[0]
    if dim < 2 or A.shape[1] != dim:
        raise ValueError(f"need a square operator of dimension >= 2, got {A.shape}")

    def apply(v):
        return np.asarray(A @ v).reshape(-1)

    rng = Rng(seed)
    vecs, vals, res = [], [], []
    total = 0
    converged = True
    for _ in range(2):
        v = rng.normal(dim)
        for u in vecs:
            v -= (u @ v) * u
        v /= np.linalg.norm(v)
        lam, r = 0.0, np.inf
        for it in range(iters):
            w = apply(v) + v
            for u in vecs:
                w -= (u @ w) * u
            nrm = np.linalg.norm(w)
            if nrm == 0.0:
                break
            v = w / nrm
            av = apply(v)
            lam = float(v @ av)
            r = float(np.linalg.norm(av - lam * v))
            if r < tol:
                break
        total += it + 1
        if r >= tol:
            converged = False
        vecs.append(v)
        vals.append(lam)
        res.append(r)
    notes = [] if converged else [f"residuals {res} above tol {tol} after {iters} iterations"]
    return EigenResult(vals[0], vals[1], np.stack(vecs, axis=1), (res[0], res[1]),
                       total, converged, notes)

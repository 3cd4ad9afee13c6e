"""Deterministic full SVD and the orthogonal projection used by the merger.

The projector removes from an incoming update every component that could
interfere with the current merged update ``dW_merged = U diag(S) V^T``.
Writing the incoming update in the singular basis, ``M = U^T dW V``, the
projection keeps ``M[i, j]`` only when both ``i`` and ``j`` lie at or past
the threshold rank ``r`` and ``i != j``; everything else is zeroed and the
result is mapped back with ``U M V^T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import NonFiniteValue, ShapeMismatch

DEFAULT_ZERO_THRESHOLD = 1e-12


class SvdFactors(NamedTuple):
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray


@dataclass(frozen=True)
class ProjectionSpec:
    alpha: float = 0.5
    zero_threshold: float = DEFAULT_ZERO_THRESHOLD
    inclusive_lower_bound: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.zero_threshold < 0:
            raise ValueError("zero_threshold must be nonnegative")


def _as_matrix(W, name="W") -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise NonFiniteValue(f"{name} contains NaN or Inf")
    return W


def full_svd(W) -> SvdFactors:
    """Full SVD ``W = U[:, :k] diag(S) V[:, :k]^T`` with square orthonormal U, V.

    Backed by LAPACK through :func:`numpy.linalg.svd`, which is deterministic
    for identical input bytes. Signs are canonicalised so that the largest
    magnitude entry of each left singular vector is nonnegative (first such
    row wins ties); the matching right vector is flipped with it.
    """
    W = _as_matrix(W)
    m, n = W.shape
    U, S, Vt = np.linalg.svd(W, full_matrices=True)
    V = Vt.T.copy()
    if m and n:
        lead = np.argmax(np.abs(U), axis=0)
        signs = np.where(U[lead, np.arange(m)] < 0, -1.0, 1.0)
        U *= signs
        k = min(m, n)
        V[:, :k] *= signs[:k]
        if n > k:
            # columns with no partner in U follow the same rule on their own
            tail = V[:, k:]
            lead = np.argmax(np.abs(tail), axis=0)
            tail *= np.where(tail[lead, np.arange(n - k)] < 0, -1.0, 1.0)
    return SvdFactors(np.ascontiguousarray(U), S, V)


def rank_alpha(S, alpha: float, zero_threshold: float = DEFAULT_ZERO_THRESHOLD):
    """Smallest ``r >= 1`` whose leading singular values hold ``alpha`` of the total.

    Returns ``(r, degenerate)``; ``degenerate`` is True when every singular
    value is at most ``zero_threshold``, in which case ``r`` is 1.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.size == 0 or np.all(S <= zero_threshold):
        return 1, True
    total = alpha * float(np.sum(S))
    csum = np.cumsum(S)
    r = int(np.searchsorted(csum, total, side="left")) + 1
    # searchsorted can overshoot by rounding in the last place
    return min(max(r, 1), S.size), False


def frob_inner(A, B) -> float:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ShapeMismatch(f"shapes differ: {A.shape} vs {B.shape}")
    return float(np.dot(A.ravel(), B.ravel()))


def kept_mask(m: int, n: int, r: int, inclusive: bool = True) -> np.ndarray:
    """Boolean m x n mask of the singular-basis coefficients the projector keeps."""
    start = r - 1 if inclusive else r
    mask = np.zeros((m, n), dtype=bool)
    mask[start:, start:] = True
    k = min(m, n)
    mask[np.arange(k), np.arange(k)] = False
    return mask


def project_alpha(dW, dW_merged, spec: ProjectionSpec = ProjectionSpec()) -> np.ndarray:
    """Project ``dW`` onto the complement of ``dW_merged``'s dominant singular directions."""
    dW = _as_matrix(dW, "dW")
    dW_merged = _as_matrix(dW_merged, "dW_merged")
    if dW.shape != dW_merged.shape:
        raise ShapeMismatch(f"shapes differ: {dW.shape} vs {dW_merged.shape}")
    m, n = dW.shape
    if np.linalg.norm(dW_merged) <= spec.zero_threshold * max(m, n):
        return dW.copy()
    U, S, V = full_svd(dW_merged)
    r, _ = rank_alpha(S, spec.alpha, spec.zero_threshold)
    M = U.T @ dW @ V
    M[~kept_mask(m, n, r, spec.inclusive_lower_bound)] = 0.0
    return U @ M @ V.T

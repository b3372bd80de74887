"""Recovery and coverage scores used by the `eval` verb and by the tests."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING, NamedTuple

import numpy as np
from scipy import linalg

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.types import Array


class Coverage(NamedTuple):
    covered: int
    shares: Array


def mode_coverage(samples: ArrayLike, centers: ArrayLike, *, min_share: float = 0.05) -> Coverage:
    """Assign every sample to its nearest center and count centers receiving `min_share`."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1, np.shape(centers)[-1])
    c = np.asarray(centers, dtype=np.float64)
    distances = np.sum((x[:, None, :] - c[None]) ** 2, axis=2)
    counts = np.bincount(np.argmin(distances, axis=1), minlength=len(c))
    shares = counts / max(len(x), 1)
    return Coverage(int(np.sum(shares >= min_share)), shares)


def amari_error(unmixing: ArrayLike, mixing: ArrayLike) -> float:
    """Normalized Amari index of `unmixing @ mixing`: 0 exactly for a scaled permutation."""
    P = np.abs(np.asarray(unmixing, dtype=np.float64) @ np.asarray(mixing, dtype=np.float64))
    n = P.shape[0]
    if n < 2:
        return 0.0
    rows = np.sum(P / P.max(axis=1, keepdims=True), axis=1) - 1
    cols = np.sum(P / P.max(axis=0, keepdims=True), axis=0) - 1
    return float((rows.sum() + cols.sum()) / (2 * n * (n - 1)))


def subspace_angle_degrees(A: ArrayLike, B: ArrayLike) -> float:
    """Largest principal angle between the column spans of `A` and `B`."""
    a, b = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    angles = linalg.subspace_angles(a, b)
    return math.degrees(float(np.max(angles)))


def atom_recovery(estimate: ArrayLike, truth: ArrayLike) -> Array:
    """For every true atom (column), the best absolute cosine with an estimated atom."""
    E = np.asarray(estimate, dtype=np.float64)
    T = np.asarray(truth, dtype=np.float64)
    E = E / np.maximum(np.linalg.norm(E, axis=0, keepdims=True), 1e-300)
    T = T / np.linalg.norm(T, axis=0, keepdims=True)
    return np.max(np.abs(T.T @ E), axis=1)


def reconstruction_error(X: ArrayLike, reconstruction: ArrayLike) -> float:
    """Mean squared error per coordinate."""
    x = np.asarray(X, dtype=np.float64)
    return float(np.mean((x - np.asarray(reconstruction, dtype=np.float64)) ** 2))


def moment_match(samples: ArrayLike, mean: ArrayLike, covariance: ArrayLike) -> tuple[float, float]:
    """Relative errors of the sample mean and covariance against target moments.

    The mean error is scaled by the target's standard deviations, the covariance
    error by the target's Frobenius norm.
    """
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(len(x), -1)
    m = np.asarray(mean, dtype=np.float64).reshape(-1)
    S = np.asarray(covariance, dtype=np.float64).reshape(len(m), len(m))
    mean_error = float(np.max(np.abs(x.mean(axis=0) - m) / np.sqrt(np.diag(S))))
    sample_cov = np.cov(x, rowvar=False).reshape(S.shape)
    cov_error = float(np.linalg.norm(sample_cov - S) / np.linalg.norm(S))
    return mean_error, cov_error

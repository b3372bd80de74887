"""Linear latent-variable models `X = W h + ε`.

Data are stored one example per row, so a dataset is an `(n, p)` matrix and a
loading matrix `W` is `p×d`.
"""

from __future__ import annotations

import dataclasses
import math
from typing import TYPE_CHECKING, Literal

import numpy as np
from scipy import linalg, optimize

from modelzoo.utilities import logger, make_rng

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.types import Array, Metrics

SIGMA2_FLOOR = 1e-8


def _as_matrix(data: ArrayLike) -> Array:
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"Expected an (n, p) data matrix, got shape {X.shape}")
    return X


# Factor analysis


@dataclasses.dataclass(frozen=True)
class FactorAnalysisModel:
    """`h ~ N(0, I_d)`, `X = W h + mean + ε`, `ε ~ N(0, σ²I_p)`."""

    W: Array
    sigma2: float
    mean: Array | None = None

    def __post_init__(self) -> None:
        if self.W.ndim != 2 or self.W.shape[1] > self.W.shape[0]:
            raise ValueError(f"Loading matrix must be p×d with d <= p, got {self.W.shape}")
        if not self.sigma2 > 0:
            raise ValueError(f"Noise variance must be positive, got {self.sigma2}")

    @property
    def p(self) -> int:
        return int(self.W.shape[0])

    @property
    def d(self) -> int:
        return int(self.W.shape[1])

    @property
    def offset(self) -> Array:
        return np.zeros(self.p) if self.mean is None else self.mean

    def covariance(self) -> Array:
        return self.W @ self.W.T + self.sigma2 * np.eye(self.p)


def fa_log_likelihood(model: FactorAnalysisModel, data: ArrayLike) -> float:
    """Mean log-likelihood per example under the marginal `N(mean, WWᵀ + σ²I)`."""
    X = _as_matrix(data) - model.offset
    factor = linalg.cho_factor(model.covariance(), lower=True)
    log_det = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    mahalanobis = np.sum(X * linalg.cho_solve(factor, X.T).T, axis=1)
    return float(-0.5 * (model.p * math.log(2 * math.pi) + log_det + mahalanobis.mean()))


def fa_posterior(model: FactorAnalysisModel, X: ArrayLike) -> tuple[Array, Array]:
    """Exact Gaussian posterior of `h` given `X`: mean per example and shared covariance."""
    x = np.asarray(X, dtype=np.float64)
    if x.shape[-1] != model.p:
        raise ValueError(f"Signals have {x.shape[-1]} coordinates, model has {model.p}")
    precision = model.W.T @ model.W + model.sigma2 * np.eye(model.d)
    factor = linalg.cho_factor(precision)
    mean = linalg.cho_solve(factor, model.W.T @ (x - model.offset).T).T
    covariance = model.sigma2 * linalg.cho_solve(factor, np.eye(model.d))
    return mean, covariance


def em_step(model: FactorAnalysisModel, data: ArrayLike) -> FactorAnalysisModel:
    """One EM update of `(W, σ²)` using the exact posterior moments."""
    X = _as_matrix(data) - model.offset
    n, p = X.shape
    S = X.T @ X / n
    precision = model.W.T @ model.W + model.sigma2 * np.eye(model.d)
    m_inv = linalg.inv(precision)
    cross = S @ model.W @ m_inv
    second = model.sigma2 * m_inv + m_inv @ model.W.T @ cross
    W = linalg.solve(second, cross.T, assume_a="pos").T
    sigma2 = float(np.trace(S) - np.trace(W.T @ cross)) / p
    if sigma2 < SIGMA2_FLOOR:
        logger.warning(
            f"modelzoo factor analysis noise variance collapsed to {sigma2:.3g}, "
            f"floored at {SIGMA2_FLOOR}"
        )
        sigma2 = SIGMA2_FLOOR
    return FactorAnalysisModel(W, sigma2, model.mean)


def fit_factor_analysis(
    data: ArrayLike,
    d: int,
    *,
    iterations: int = 500,
    tol: float = 1e-10,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> FactorAnalysisModel:
    """EM for factor analysis with isotropic noise, from a random start."""
    X = _as_matrix(data)
    n, p = X.shape
    if not 0 < d <= p or n <= d:
        raise ValueError(f"Need 0 < d <= p and n > d, got n={n}, p={p}, d={d}")
    rng = make_rng(rng)
    mean = X.mean(axis=0)
    scale = math.sqrt(float(np.var(X - mean)) or 1.0)
    model = FactorAnalysisModel(
        scale * rng.standard_normal((p, d)) / math.sqrt(p), scale * scale, mean
    )
    previous = fa_log_likelihood(model, X)
    for iteration in range(iterations):
        model = em_step(model, X)
        current = fa_log_likelihood(model, X)
        if metrics is not None:
            metrics.append({"iteration": float(iteration), "log_likelihood": current})
        if current < previous - tol * max(1.0, abs(previous)):
            logger.warning(
                f"modelzoo factor analysis log-likelihood decreased at iteration {iteration}: "
                f"{previous!r} -> {current!r}"
            )
        if abs(current - previous) < tol * max(1.0, abs(previous)):
            break
        previous = current
    logger.info(f"modelzoo fit_factor_analysis log-likelihood {current:.6g} per example")
    return model


# Sparse coding


@dataclasses.dataclass(frozen=True)
class SparseCoder:
    """Dictionary with unit-norm columns and ℓ1 weight `lam`."""

    W: Array
    lam: float

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError(f"The l1 weight must be nonnegative, got {self.lam}")
        norms = np.linalg.norm(self.W, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-8):
            raise ValueError("Dictionary columns must have unit norm")

    def objective(self, X: ArrayLike, h: ArrayLike) -> Array:
        """`‖X - W h‖² + λ‖h‖₁` per example."""
        x = np.atleast_2d(np.asarray(X, dtype=np.float64))
        codes = np.atleast_2d(np.asarray(h, dtype=np.float64))
        residual = x - codes @ self.W.T
        return np.sum(residual * residual, axis=1) + self.lam * np.abs(codes).sum(axis=1)


def soft_threshold(x: Array, threshold: float) -> Array:
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def sparse_infer(
    coder: SparseCoder, X: ArrayLike, iters: int = 500, *, tol: float = 1e-12
) -> Array:
    """Iterative shrinkage-thresholding from `h = 0`.
    ---

    With `L` the largest squared singular value of `W`, each step moves along the
    gradient of the squared error with step `1/(2L)` and shrinks by `λ/(2L)`, so
    the objective never increases. The best iterate seen is returned. Accepts
    one signal or a batch of rows.
    """
    x = np.asarray(X, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    lipschitz = float(np.linalg.norm(coder.W, 2) ** 2)
    if lipschitz == 0:
        return np.zeros(coder.W.shape[1]) if single else np.zeros((len(x2), coder.W.shape[1]))
    step = 1.0 / (2 * lipschitz)
    h = np.zeros((len(x2), coder.W.shape[1]))
    best, best_value = h.copy(), coder.objective(x2, h)
    for _ in range(iters):
        residual = x2 - h @ coder.W.T
        updated = soft_threshold(h + 2 * step * residual @ coder.W, step * coder.lam)
        value = coder.objective(x2, updated)
        better = value < best_value
        best[better], best_value[better] = updated[better], value[better]
        if np.max(np.abs(updated - h)) < tol:
            h = updated
            break
        h = updated
    return best[0] if single else best


def _normalize_columns(W: Array) -> Array:
    return W / np.linalg.norm(W, axis=0, keepdims=True)


def fit_sparse_coding(
    data: ArrayLike,
    d: int,
    lam: float,
    *,
    iterations: int = 50,
    infer_iters: int = 300,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> SparseCoder:
    """Alternate sparse inference with a least-squares dictionary update.

    Columns whose code is zero for every example are dead; they are reset to a
    random normalized data point.
    """
    X = _as_matrix(data)
    rng = make_rng(rng)
    nonzero = X[np.linalg.norm(X, axis=1) > 0]
    if not len(nonzero):
        raise ValueError("Sparse coding needs at least one nonzero example")
    start = nonzero[rng.choice(len(nonzero), size=d, replace=len(nonzero) < d)]
    W = _normalize_columns(start.T + 1e-3 * rng.standard_normal((X.shape[1], d)))
    coder = SparseCoder(W, lam)
    for iteration in range(iterations):
        H = sparse_infer(coder, X, infer_iters)
        active = np.flatnonzero(np.any(H != 0, axis=0))
        W = coder.W.copy()
        if len(active):
            solution = np.linalg.lstsq(H[:, active], X, rcond=None)[0]
            W[:, active] = solution.T
        dead = np.setdiff1d(np.arange(d), active)
        if len(dead):
            logger.warning(
                f"modelzoo sparse coding reinitialized {len(dead)} dead columns "
                f"at iteration {iteration}"
            )
            W[:, dead] = nonzero[rng.choice(len(nonzero), size=len(dead))].T
        norms = np.linalg.norm(W, axis=0)
        W[:, norms == 0] = rng.standard_normal((X.shape[1], int(np.sum(norms == 0))))
        coder = SparseCoder(_normalize_columns(W), lam)
        objective = float(coder.objective(X, sparse_infer(coder, X, infer_iters)).mean())
        if metrics is not None:
            metrics.append({"iteration": float(iteration), "objective": objective})
        logger.debug(f"modelzoo fit_sparse_coding iteration {iteration}: objective={objective:.6g}")
    return coder


# Independent component analysis


@dataclasses.dataclass(frozen=True)
class IcaModel:
    """Unmixing matrix `A = W⁻¹`; sources are `s = A x` with logistic densities."""

    A: Array

    @property
    def W(self) -> Array:
        return np.linalg.inv(self.A)

    def sources(self, X: ArrayLike) -> Array:
        return np.asarray(X, dtype=np.float64) @ self.A.T


def _logistic_log_density(s: Array) -> Array:
    return -s - 2.0 * np.logaddexp(0.0, -s)


def ica_log_likelihood(A: Array, X: Array) -> float:
    """Mean of `log P(A x) + log |det A|` with independent logistic sources."""
    sign, log_det = np.linalg.slogdet(A)
    if sign == 0:
        return -math.inf
    return float(_logistic_log_density(X @ A.T).sum(axis=1).mean() + log_det)


def fit_ica(
    data: ArrayLike,
    *,
    iterations: int = 500,
    learning_rate: float = 0.1,
    tol: float = 1e-10,
    metrics: Metrics | None = None,
) -> IcaModel:
    """Maximum likelihood ICA by natural-gradient ascent on the unmixing matrix.

    Steps that lower the likelihood or leave `|det A| < 1e-12` are rejected and
    the step size halved.
    """
    X = _as_matrix(data)
    A = np.eye(X.shape[1])
    value = ica_log_likelihood(A, X)
    rate = learning_rate
    for iteration in range(iterations):
        s = X @ A.T
        score = -np.tanh(s / 2.0)
        direction = (np.eye(len(A)) + score.T @ s / len(X)) @ A
        while rate > 1e-12:
            candidate = A + rate * direction
            if abs(np.linalg.det(candidate)) >= 1e-12:
                candidate_value = ica_log_likelihood(candidate, X)
                if candidate_value >= value:
                    break
            rate /= 2
        else:
            break
        improvement = candidate_value - value
        A, value = candidate, candidate_value
        rate = min(rate * 1.5, learning_rate)
        if metrics is not None:
            metrics.append({"iteration": float(iteration), "log_likelihood": value})
        if improvement < tol:
            break
    return IcaModel(A)


# Nonnegative and masked matrix factorization


@dataclasses.dataclass(frozen=True)
class FactorizationModel:
    """`X ≈ H Wᵀ`: row codes `H` (n×d) and loadings `W` (p×d)."""

    W: Array
    H: Array

    def reconstruct(self) -> Array:
        return self.H @ self.W.T


def fit_nmf(
    data: ArrayLike,
    d: int,
    *,
    iterations: int = 100,
    tol: float = 1e-12,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> FactorizationModel:
    """Alternating nonnegative least squares; the squared error never increases."""
    X = _as_matrix(data)
    if np.any(X < 0):
        raise ValueError("NMF needs nonnegative data")
    rng = make_rng(rng)
    n, p = X.shape
    W = rng.random((p, d)) * math.sqrt(float(X.mean()) / d + 1e-12)
    H = np.zeros((n, d))
    previous = math.inf
    for iteration in range(iterations):
        H = np.stack([optimize.nnls(W, row)[0] for row in X])
        W = np.stack([optimize.nnls(H, column)[0] for column in X.T])
        error = float(np.sum((X - H @ W.T) ** 2))
        if metrics is not None:
            metrics.append({"iteration": float(iteration), "squared_error": error})
        if previous - error < tol * max(1.0, previous):
            break
        previous = error
    return FactorizationModel(W, H)


def fit_masked_mf(
    data: ArrayLike,
    mask: ArrayLike,
    d: int,
    *,
    iterations: int = 100,
    ridge: float = 1e-6,
    tol: float = 1e-12,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> FactorizationModel:
    """Alternating least squares on the observed entries only.

    `mask` is true where an entry is observed. The ridge term keeps every
    subproblem well posed; the masked objective never increases.
    """
    X = _as_matrix(data)
    observed = np.asarray(mask, dtype=bool)
    if observed.shape != X.shape:
        raise ValueError(f"Mask shape {observed.shape} does not match data {X.shape}")
    rng = make_rng(rng)
    n, p = X.shape
    W = rng.standard_normal((p, d)) / math.sqrt(d)
    H = np.zeros((n, d))
    eye = ridge * np.eye(d)

    def solve_rows(target: Array, seen: Array, basis: Array) -> Array:
        rows = np.zeros((len(target), d))
        for i in range(len(target)):
            B = basis[seen[i]]
            rows[i] = linalg.solve(B.T @ B + eye, B.T @ target[i, seen[i]], assume_a="pos")
        return rows

    previous = math.inf
    for iteration in range(iterations):
        H = solve_rows(X, observed, W)
        W = solve_rows(X.T, observed.T, H)
        residual = np.where(observed, X - H @ W.T, 0.0)
        error = float(np.sum(residual**2) + ridge * (np.sum(H**2) + np.sum(W**2)))
        if metrics is not None:
            metrics.append({"iteration": float(iteration), "masked_error": error})
        if previous - error < tol * max(1.0, previous):
            break
        previous = error
    return FactorizationModel(W, H)


def fit_linear_variant(
    data: ArrayLike,
    variant: Literal["ica", "nmf", "mf-masked"],
    d: int | None = None,
    *,
    mask: ArrayLike | None = None,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> IcaModel | FactorizationModel:
    if variant == "ica":
        X = _as_matrix(data)
        if d is not None and d != X.shape[1]:
            raise ValueError("ICA needs a square mixing matrix (d = p)")
        return fit_ica(X, metrics=metrics)
    if d is None:
        raise ValueError(f"{variant} needs a latent dimension d")
    if variant == "nmf":
        return fit_nmf(data, d, rng=rng, metrics=metrics)
    if variant == "mf-masked":
        if mask is None:
            raise ValueError("Masked matrix factorization needs an observation mask")
        return fit_masked_mf(data, mask, d, rng=rng, metrics=metrics)
    raise ValueError(f"Unknown linear variant {variant!r}; expected ica, nmf or mf-masked")


# Principal component analysis


@dataclasses.dataclass(frozen=True)
class PcaModel:
    mean: Array
    components: Array

    def encode(self, X: ArrayLike) -> Array:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components

    def decode(self, h: ArrayLike) -> Array:
        return np.asarray(h, dtype=np.float64) @ self.components.T + self.mean

    def reconstruct(self, X: ArrayLike) -> Array:
        return self.decode(self.encode(X))


def fit_pca(data: ArrayLike, d: int) -> PcaModel:
    X = _as_matrix(data)
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
    return PcaModel(mean, vt[:d].T)

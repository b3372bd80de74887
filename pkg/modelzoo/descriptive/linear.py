"""The linear exponential family `p_θ(X) = exp(h(X)ᵀθ) p₀(X) / Z(θ)`."""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Sequence
from typing import TYPE_CHECKING, Literal, NamedTuple

import numpy as np
from scipy import special

from modelzoo.descriptive.features import FeatureMap, ProjectionHistogramFeatures, feature_stats
from modelzoo.mcmc import ChainPool, LangevinConfig, run_chains_with_restart
from modelzoo.optim import TrainConfig
from modelzoo.oracle import Domain, brute_force_logz
from modelzoo.utilities import logger, make_rng

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.types import Array, Metrics


MOMENT_TOLERANCE = 1e-6


class BoundaryInfeasibleError(ValueError):
    """The data moments sit on the boundary of what the model can reach."""

    def __init__(self, coordinate: int, value: float) -> None:
        super().__init__(
            f"Feature {coordinate} has empirical mean {value}, on the boundary of the "
            "achievable moments; the maximum likelihood estimate does not exist"
        )
        self.coordinate = coordinate
        self.value = value


class MomentMismatchError(RuntimeError):
    """The exact fit stopped before the model moments matched the data moments."""

    def __init__(self, gap: float, iterations: int) -> None:
        super().__init__(
            f"Fitted moments differ from the data moments by {gap:.3g} after {iterations} "
            "iterations; raise max_iter or check the features for near-collinearity"
        )
        self.gap = gap
        self.iterations = iterations


@dataclasses.dataclass(frozen=True)
class Reference:
    """Reference density `p₀`: `N(0, σ²I)`, or uniform on the box `[low, high]^p`."""

    kind: Literal["gaussian", "uniform"] = "gaussian"
    sigma2: float = 1.0
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "uniform"):
            raise ValueError(f"Unknown reference {self.kind!r}")
        if self.sigma2 <= 0 or self.high <= self.low:
            raise ValueError("Reference needs sigma2 > 0 and high > low")

    @classmethod
    def gaussian(cls, sigma2: float = 1.0) -> Reference:
        return cls("gaussian", sigma2=sigma2)

    @classmethod
    def uniform(cls, low: float = -1.0, high: float = 1.0) -> Reference:
        return cls("uniform", low=low, high=high)

    def log_density(self, X: ArrayLike) -> Array:
        x = np.asarray(X, dtype=np.float64)
        flat = x.reshape(len(x), -1)
        p = flat.shape[1]
        if self.kind == "gaussian":
            return -np.sum(flat * flat, axis=1) / (2 * self.sigma2) - 0.5 * p * math.log(
                2 * math.pi * self.sigma2
            )
        inside = np.all((flat >= self.low) & (flat <= self.high), axis=1)
        return np.where(inside, -p * math.log(self.high - self.low), -np.inf)

    def grad(self, X: ArrayLike) -> Array:
        """Gradient of `log p₀`."""
        x = np.asarray(X, dtype=np.float64)
        return -x / self.sigma2 if self.kind == "gaussian" else np.zeros_like(x)

    def sample(
        self, n: int, shape: Sequence[int], rng: np.random.Generator
    ) -> Array:
        if self.kind == "gaussian":
            return math.sqrt(self.sigma2) * rng.standard_normal((n, *shape))
        return rng.uniform(self.low, self.high, size=(n, *shape))


@dataclasses.dataclass(frozen=True)
class LinearDescriptiveModel:
    theta: Array
    feature_map: FeatureMap
    reference: Reference = dataclasses.field(default_factory=Reference)
    log_z: float | None = None

    def __post_init__(self) -> None:
        if self.theta.shape != (self.feature_map.dim,):
            raise ValueError(
                f"theta has shape {self.theta.shape}, features have dimension "
                f"{self.feature_map.dim}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta must be finite")

    def unnormalized_log_density(self, X: ArrayLike) -> Array:
        x = np.asarray(X, dtype=np.float64)
        return self.feature_map(x) @ self.theta + self.reference.log_density(x)

    def log_density(self, X: ArrayLike) -> Array:
        if self.log_z is None:
            raise ValueError("log Z is unknown; fit on a domain or call with_log_z")
        return self.unnormalized_log_density(X) - self.log_z

    def with_log_z(self, domain: Domain) -> LinearDescriptiveModel:
        return dataclasses.replace(
            self, log_z=brute_force_logz(self.unnormalized_log_density, domain)
        )

    def energy_and_grad(self, X: Array) -> tuple[Array, Array]:
        """`U(X) = -h(X)ᵀθ - log p₀(X)` and its gradient, for Langevin sampling."""
        energy = -self.unnormalized_log_density(X)
        grad = -self.feature_map.vjp(X, self.theta) - self.reference.grad(X)
        return energy, grad


class MomentMatch(NamedTuple):
    theta: Array
    log_z: float
    iterations: int
    log_likelihoods: list[float]
    gap: float = 0.0


def check_feasible(H: Array, hbar: Array, tol: float = 1e-12) -> None:
    """Reject moments on the boundary of the per-coordinate range of `h` over the domain."""
    low, high = H.min(axis=0), H.max(axis=0)
    for k in range(H.shape[1]):
        if high[k] - low[k] <= tol:
            if abs(hbar[k] - low[k]) > tol:
                raise BoundaryInfeasibleError(k, float(hbar[k]))
        elif hbar[k] <= low[k] + tol or hbar[k] >= high[k] - tol:
            raise BoundaryInfeasibleError(k, float(hbar[k]))


def solve_moment_matching(
    H: Array,
    base_log: Array,
    hbar: Array,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> MomentMatch:
    """Maximize `θᵀh̄ - log Σ exp(base_log + Hθ)` by damped Newton ascent.
    ---

    Steps follow the Newton direction with Armijo backtracking, falling back to
    the gradient when the direction is not an ascent direction, so the exact
    log-likelihood never decreases between iterations.
    """
    theta = np.zeros(H.shape[1])

    def objective(t: Array) -> tuple[float, float]:
        log_z = float(special.logsumexp(base_log + H @ t))
        return float(t @ hbar) - log_z, log_z

    value, log_z = objective(theta)
    history = [value]
    iteration = 0
    for iteration in range(1, max_iter + 1):
        log_p = base_log + H @ theta - log_z
        p = np.exp(log_p)
        mean = p @ H
        grad = hbar - mean
        if np.max(np.abs(grad)) < tol:
            break
        centered = H - mean
        cov = centered.T @ (p[:, None] * centered)
        direction = np.linalg.lstsq(cov, grad, rcond=None)[0]
        slope = float(grad @ direction)
        if not slope > 0:
            direction, slope = grad, float(grad @ grad)
        step = 1.0
        for _ in range(60):
            candidate, candidate_log_z = objective(theta + step * direction)
            if candidate >= value + 1e-4 * step * slope:
                break
            step /= 2
        else:
            break
        theta = theta + step * direction
        value, log_z = candidate, candidate_log_z
        history.append(value)
    p = np.exp(base_log + H @ theta - log_z)
    gap = float(np.max(np.abs(hbar - p @ H), initial=0.0))
    return MomentMatch(theta, log_z, iteration, history, gap)


def fit_linear_exact(
    data: Sequence[ArrayLike] | Array,
    feature_map: FeatureMap,
    domain: Domain,
    *,
    reference: Reference | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
    metrics: Metrics | None = None,
) -> LinearDescriptiveModel:
    """Exact maximum likelihood on an enumerated or quadrature domain.

    Expectations are exact sums over the domain. A fit whose model moments still
    differ from the data moments by `MOMENT_TOLERANCE` or more when the solver
    stops raises `MomentMismatchError`.
    """
    reference = reference or Reference.gaussian()
    hbar = feature_stats(data, feature_map)
    H = feature_map(domain.states)
    check_feasible(H, hbar)
    base_log = reference.log_density(domain.states) + np.log(domain.weights)
    support = base_log > -np.inf
    match = solve_moment_matching(H[support], base_log[support], hbar, tol=tol, max_iter=max_iter)
    if metrics is not None:
        metrics.extend(
            {"iteration": float(i), "log_likelihood": value}
            for i, value in enumerate(match.log_likelihoods)
        )
    if not match.gap < max(tol, MOMENT_TOLERANCE):
        raise MomentMismatchError(match.gap, match.iterations)
    logger.info(
        f"modelzoo fit_linear_exact converged in {match.iterations} iterations, "
        f"moment gap {match.gap:.3g}, log-likelihood {match.log_likelihoods[-1]:.6g}"
    )
    model = LinearDescriptiveModel(match.theta, feature_map, reference)
    return model.with_log_z(domain)


def _langevin_mle(
    data: Array,
    feature_map: FeatureMap,
    lang_cfg: LangevinConfig,
    train_cfg: TrainConfig,
    reference: Reference,
    rng: np.random.Generator,
    theta: Array,
    metrics: Metrics | None,
) -> tuple[Array, Array]:
    hbar = feature_stats(data, feature_map)
    shape = data.shape[1:]

    def cold(n: int, r: np.random.Generator) -> Array:
        return reference.sample(n, shape, r)

    pool = ChainPool("persistent", cold)
    average = np.zeros_like(theta)
    averaged = 0
    synth = cold(train_cfg.n_chains, rng)
    for iteration in range(train_cfg.epochs):
        model = LinearDescriptiveModel(theta, feature_map, reference)
        inits = pool.draw(train_cfg.n_chains, rng)
        run = run_chains_with_restart(inits, model.energy_and_grad, lang_cfg, rng, cold)
        pool.update(run.points)
        synth = run.points
        difference = hbar - feature_map(synth).mean(axis=0)
        discrepancy = float(np.linalg.norm(difference))
        theta = theta + train_cfg.rate(iteration) * difference
        if iteration >= train_cfg.epochs // 2:
            average += theta
            averaged += 1
        if metrics is not None:
            metrics.append({"iteration": float(iteration), "discrepancy": discrepancy})
        if iteration % train_cfg.log_every == 0:
            logger.info(
                f"modelzoo fit_linear_langevin iteration {iteration}: "
                f"discrepancy={discrepancy:.4g}"
            )
    return average / max(averaged, 1), synth


def fit_linear_langevin(
    data: Sequence[ArrayLike] | Array,
    feature_map: FeatureMap,
    lang_cfg: LangevinConfig,
    train_cfg: TrainConfig,
    *,
    reference: Reference | None = None,
    rng: np.random.Generator | None = None,
    theta: ArrayLike | None = None,
    metrics: Metrics | None = None,
) -> LinearDescriptiveModel:
    """Stochastic maximum likelihood: `θ ← θ + η_t (h̄ - mean h(X̃))`.
    ---

    Synthesized examples `X̃` come from persistent Langevin chains on the
    current model. The returned weights are the average of the iterates over
    the second half of training.
    """
    reference = reference or Reference.gaussian()
    X = np.stack([np.asarray(x, dtype=np.float64) for x in data])
    start = np.zeros(feature_map.dim) if theta is None else np.asarray(theta, dtype=np.float64)
    fitted, _ = _langevin_mle(
        X,
        feature_map,
        lang_cfg,
        train_cfg,
        reference,
        make_rng(lang_cfg.rng_seed) if rng is None else rng,
        start,
        metrics,
    )
    return LinearDescriptiveModel(fitted, feature_map, reference)


class Projection(NamedTuple):
    direction: Array
    discrepancy: float
    converged: bool
    discrepancies: Array


def default_candidates(
    p: int, count: int = 64, rng: np.random.Generator | None = None
) -> Array:
    """Unit directions: evenly spaced on the half circle in 2D, uniform on the sphere above."""
    if p < 2:
        raise ValueError("Projection pursuit needs at least two dimensions")
    if p == 2:
        angles = np.pi * np.arange(count) / count
        return np.stack([np.cos(angles), np.sin(angles)], axis=1)
    draws = make_rng(rng).standard_normal((count, p))
    return draws / np.linalg.norm(draws, axis=1, keepdims=True)


def histogram_distance(a: Array, b: Array, bins: int = 32) -> float:
    """L1 distance between normalized equal-width histograms over the pooled range."""
    low, high = float(min(a.min(), b.min())), float(max(a.max(), b.max()))
    if high - low <= 1e-12:
        return 0.0
    edges = np.linspace(low, high, bins + 1)
    ha = np.histogram(a, edges)[0] / len(a)
    hb = np.histogram(b, edges)[0] / len(b)
    return float(np.abs(ha - hb).sum())


def pursue_projection(
    data: ArrayLike,
    synth: ArrayLike,
    candidates: ArrayLike,
    *,
    bins: int = 32,
) -> Projection:
    """The candidate direction whose marginal histograms differ the most."""
    X = np.asarray(data, dtype=np.float64)
    Y = np.asarray(synth, dtype=np.float64)
    C = np.asarray(candidates, dtype=np.float64)
    if not len(X) or not len(Y):
        raise ValueError("Projection pursuit needs nonempty data and synthesized sets")
    X, Y = X.reshape(len(X), -1), Y.reshape(len(Y), -1)
    if X.shape[1] < 2 or C.ndim != 2 or C.shape[1] != X.shape[1]:
        raise ValueError(f"Candidates {C.shape} do not match {X.shape[1]}-dimensional points")
    discrepancies = np.array([histogram_distance(X @ c, Y @ c, bins) for c in C])
    best = int(np.argmax(discrepancies))
    return Projection(
        C[best], float(discrepancies[best]), bool(discrepancies[best] <= 1e-12), discrepancies
    )


class PursuitResult(NamedTuple):
    model: LinearDescriptiveModel | None
    discrepancies: list[float]


def fit_projection_pursuit(
    data: ArrayLike,
    rounds: int,
    lang_cfg: LangevinConfig,
    train_cfg: TrainConfig,
    *,
    reference: Reference | None = None,
    candidates: ArrayLike | None = None,
    bins: int = 32,
    edges: ArrayLike | None = None,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> PursuitResult:
    """Grow the projection matrix one row per round, refitting by Langevin MLE.

    Each round picks the candidate direction that best separates the data from
    the current model's samples, adds its soft binned marginal to the features
    and refits. Stops early once every candidate ties at zero discrepancy.
    """
    reference = reference or Reference.gaussian()
    rng = make_rng(lang_cfg.rng_seed) if rng is None else rng
    X = np.asarray(data, dtype=np.float64)
    C = default_candidates(X.shape[1], rng=rng) if candidates is None else np.asarray(candidates)
    if edges is None:
        radius = 1.5 * float(np.max(np.linalg.norm(X, axis=1)))
        edges = np.linspace(-radius, radius, bins + 1)
    synth = reference.sample(train_cfg.n_chains, X.shape[1:], rng)
    feature_map: ProjectionHistogramFeatures | None = None
    model: LinearDescriptiveModel | None = None
    discrepancies: list[float] = []
    for round_ in range(rounds):
        projection = pursue_projection(X, synth, C, bins=bins)
        discrepancies.append(projection.discrepancy)
        if metrics is not None:
            metrics.append({"round": float(round_), "discrepancy": projection.discrepancy})
        logger.info(
            f"modelzoo fit_projection_pursuit round {round_}: "
            f"direction={projection.direction.round(4).tolist()} "
            f"discrepancy={projection.discrepancy:.4g}"
        )
        if projection.converged:
            break
        if feature_map is None:
            feature_map = ProjectionHistogramFeatures(projection.direction[None], edges)
        else:
            feature_map = feature_map.with_projection(projection.direction)
        start = np.zeros(feature_map.dim)
        if model is not None:
            start[: len(model.theta)] = model.theta
        theta, synth = _langevin_mle(
            X, feature_map, lang_cfg, train_cfg, reference, rng, start, None
        )
        model = LinearDescriptiveModel(theta, feature_map, reference)
    return PursuitResult(model, discrepancies)

"""Ground truth at toy scale: exact normalizers, exact KL divergences and
finite-difference gradient checks. Every fit that claims exactness is tested
against these functions.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Callable, Sequence
from typing import TYPE_CHECKING, Literal, NamedTuple

import numpy as np

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.types import Array, LogDensity

MAX_STATES = 2**20
MAX_NODES = 10**4


class DomainTooLargeError(ValueError):
    def __init__(self, size: int, bound: int) -> None:
        super().__init__(f"Domain has {size} points, above the bound of {bound}")
        self.size = size
        self.bound = bound


@dataclasses.dataclass(frozen=True)
class Domain:
    """A finite stand-in for the signal space.
    ---

    `states` holds one point per row. Enumerated domains weight every state
    by 1, so sums over the domain are plain sums. Quadrature domains carry
    trapezoidal weights on a product grid, so sums approximate integrals and
    the weights add up to the volume of the grid's bounding box.
    """

    kind: Literal["enumerated", "quadrature"]
    states: Array
    weights: Array

    def __post_init__(self) -> None:
        if self.states.ndim != 2 or self.weights.shape != (self.states.shape[0],):
            raise ValueError(
                f"Expected (N, dim) states and N weights, got "
                f"{self.states.shape} and {self.weights.shape}"
            )
        bound = MAX_STATES if self.kind == "enumerated" else MAX_NODES
        if len(self) > bound:
            raise DomainTooLargeError(len(self), bound)
        if np.any(self.weights <= 0):
            raise ValueError("Domain weights must be positive")

    def __len__(self) -> int:
        return int(self.states.shape[0])

    @property
    def dim(self) -> int:
        return int(self.states.shape[1])

    @classmethod
    def enumerated(cls, states: ArrayLike) -> Domain:
        points = np.array(states, dtype=np.float64, ndmin=2)
        if points.shape[0] > MAX_STATES:
            raise DomainTooLargeError(points.shape[0], MAX_STATES)
        if len(np.unique(points, axis=0)) != len(points):
            raise ValueError("Enumerated states must be distinct")
        return cls("enumerated", points, np.ones(len(points)))

    @classmethod
    def binary(cls, p: int) -> Domain:
        """All `2**p` vectors in `{0, 1}^p`, in lexicographic order."""
        if p < 1:
            raise ValueError(f"Need at least one binary coordinate, got {p}")
        if 2**p > MAX_STATES:
            raise DomainTooLargeError(2**p, MAX_STATES)
        codes = np.arange(2**p)[:, None] >> np.arange(p - 1, -1, -1)
        return cls("enumerated", (codes & 1).astype(np.float64), np.ones(2**p))

    @classmethod
    def quadrature(cls, axes: Sequence[ArrayLike]) -> Domain:
        """Trapezoidal product grid over sorted, uniformly spaced axis nodes."""
        grids = [np.asarray(axis, dtype=np.float64) for axis in axes]
        size = math.prod(len(axis) for axis in grids)
        if size > MAX_NODES:
            raise DomainTooLargeError(size, MAX_NODES)
        axis_weights = []
        for axis in grids:
            if axis.ndim != 1 or len(axis) < 2 or np.any(np.diff(axis) <= 0):
                raise ValueError("Quadrature axes need at least two increasing nodes")
            w = np.full(len(axis), float(axis[1] - axis[0]))
            w[[0, -1]] /= 2
            axis_weights.append(w)
        mesh = np.meshgrid(*grids, indexing="ij")
        states = np.stack([m.reshape(-1) for m in mesh], axis=1)
        weights = np.ones(1)
        for w in axis_weights:
            weights = np.multiply.outer(weights, w).reshape(-1)
        return cls("quadrature", states, weights)

    @classmethod
    def interval(cls, low: float, high: float, nodes: int) -> Domain:
        return cls.quadrature([np.linspace(low, high, nodes)])


def _evaluate(logdensity: LogDensity, domain: Domain) -> Array:
    values = np.asarray(logdensity(domain.states), dtype=np.float64).reshape(-1)
    if values.shape != (len(domain),):
        raise ValueError(
            f"Log-density returned {values.shape[0]} values for {len(domain)} states"
        )
    if np.any(np.isnan(values)) or np.any(values == np.inf):
        raise ValueError("Log-density must be finite or -inf on the domain")
    return values


def _logsumexp(values: Array, weights: Array) -> float:
    peak = float(np.max(values))
    if peak == -np.inf:
        return -math.inf
    return peak + math.log(math.fsum(weights * np.exp(values - peak)))


def brute_force_logz(logdensity: LogDensity, domain: Domain) -> float:
    """Log normalizer by stabilized, compensated summation over the domain."""
    return _logsumexp(_evaluate(logdensity, domain), domain.weights)


def log_probabilities(logdensity: LogDensity, domain: Domain) -> Array:
    """Normalized log-mass of every domain point, quadrature weight included."""
    values = _evaluate(logdensity, domain)
    return values + np.log(domain.weights) - _logsumexp(values, domain.weights)


def expectation(
    logdensity: LogDensity, domain: Domain, fn: Callable[[Array], Array]
) -> Array:
    """Exact expectation of a vector-valued `fn` under the normalized density."""
    mass = np.exp(log_probabilities(logdensity, domain))
    values = np.asarray(fn(domain.states), dtype=np.float64).reshape(len(domain), -1)
    return np.array(
        [math.fsum(mass * values[:, j]) for j in range(values.shape[1])]
    )


def exact_kl(p: LogDensity, q: LogDensity, domain: Domain) -> float:
    """KL divergence from `p` to `q`, both normalized on the domain first.

    Returns `math.inf` when `q` vanishes where `p` has mass.
    """
    log_p = log_probabilities(p, domain)
    log_q = log_probabilities(q, domain)
    support = log_p > -np.inf
    if np.any(log_q[support] == -np.inf):
        return math.inf
    mass = np.exp(log_p[support])
    kl = math.fsum(mass * (log_p[support] - log_q[support]))
    return max(kl, 0.0)


class FiniteDiffResult(NamedTuple):
    error: float
    index: int


def finite_diff_check(
    fn: Callable[[Array], float],
    point: ArrayLike,
    analytic_grad: ArrayLike,
    eps: float = 1e-5,
    *,
    floor: float = 1.0,
) -> FiniteDiffResult:
    """Compare an analytic gradient with central differences, coordinate by coordinate.
    ---

    The relative error at coordinate `j` is `|a_j - n_j| / max(|a_j|, |n_j|, floor)`.
    Returns the worst error and its flat index.
    """
    x = np.array(point, dtype=np.float64)
    grad = np.asarray(analytic_grad, dtype=np.float64).reshape(-1)
    if grad.shape != (x.size,):
        raise ValueError(f"Gradient has {grad.size} entries, point has {x.size}")
    flat = x.reshape(-1)
    worst = FiniteDiffResult(0.0, 0)
    for j in range(flat.size):
        original = flat[j]
        flat[j] = original + eps
        upper = float(fn(x))
        flat[j] = original - eps
        lower = float(fn(x))
        flat[j] = original
        if not (math.isfinite(upper) and math.isfinite(lower)):
            raise FloatingPointError(f"Non-finite evaluation near coordinate {j}")
        numeric = (upper - lower) / (2 * eps)
        scale = max(abs(grad[j]), abs(numeric), floor)
        error = abs(grad[j] - numeric) / scale
        if error > worst.error:
            worst = FiniteDiffResult(error, j)
    return worst

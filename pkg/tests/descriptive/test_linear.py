from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np
import pytest

import modelzoo.descriptive.linear
from modelzoo.descriptive.features import (
    IndicatorFeatures,
    MomentFeatures,
    ProjectionHistogramFeatures,
    feature_stats,
)
from modelzoo.descriptive.linear import (
    BoundaryInfeasibleError,
    LinearDescriptiveModel,
    MomentMismatchError,
    Reference,
    fit_linear_exact,
    fit_linear_langevin,
    pursue_projection,
    solve_moment_matching,
)
from modelzoo.mcmc import LangevinConfig
from modelzoo.optim import TrainConfig
from modelzoo.oracle import Domain, exact_kl, expectation, finite_diff_check

if TYPE_CHECKING:
    from pytest_mock import MockerFixture

    from modelzoo.types import Array, Metrics


def sample_states(domain: Domain, n: int, rng: np.random.Generator) -> Array:
    """Draws from a random distribution with full support on the domain."""
    logits = 0.5 * rng.standard_normal(len(domain))
    probabilities = np.exp(logits) / np.exp(logits).sum()
    return domain.states[rng.choice(len(domain), size=n, p=probabilities)]


def bimodal(n: int, rng: np.random.Generator) -> Array:
    """Two clusters at `x = ±2` with a standard normal second coordinate."""
    x = 2.0 * rng.choice([-1.0, 1.0], size=n) + 0.1 * rng.standard_normal(n)
    return np.stack([x, rng.standard_normal(n)], axis=1)


class TestReference:
    """Test `class Reference`."""

    def test_gaussian(self) -> None:
        """Assert that the Gaussian reference is normalized at the origin."""
        reference = Reference.gaussian(2.0)
        assert reference.log_density([[0.0]])[0] == pytest.approx(-0.5 * math.log(4 * math.pi))
        assert reference.grad([[4.0]]).tolist() == [[-2.0]]

    def test_uniform(self, rng: np.random.Generator) -> None:
        """Assert that the uniform reference vanishes outside its box."""
        reference = Reference.uniform(0.0, 2.0)
        assert reference.log_density([[1.0, 1.0], [1.0, 3.0]]).tolist() == [
            -2 * math.log(2.0),
            -math.inf,
        ]
        samples = reference.sample(100, (2,), rng)
        assert samples.shape == (100, 2)
        assert np.all((samples >= 0.0) & (samples <= 2.0))

    def test_rejects(self) -> None:
        """Assert that unknown kinds and degenerate parameters are rejected."""
        with pytest.raises(ValueError, match="Unknown reference"):
            Reference("laplace")  # type: ignore[arg-type]
        with pytest.raises(ValueError, match="sigma2"):
            Reference.gaussian(0.0)
        with pytest.raises(ValueError, match="high > low"):
            Reference.uniform(1.0, 1.0)


class TestLinearDescriptiveModel:
    """Test `class LinearDescriptiveModel`."""

    def test_rejects_theta(self) -> None:
        """Assert that weights must match the feature dimension and be finite."""
        with pytest.raises(ValueError, match="dimension"):
            LinearDescriptiveModel(np.zeros(3), MomentFeatures.raw_moments(1))
        with pytest.raises(ValueError, match="finite"):
            LinearDescriptiveModel(np.array([np.nan, 0.0]), MomentFeatures.raw_moments(1))

    def test_log_density(self) -> None:
        """Assert that the log-density needs a normalizer and is normalized once given one."""
        model = LinearDescriptiveModel(np.array([0.5, 0.2]), MomentFeatures.raw_moments(1))
        with pytest.raises(ValueError, match="log Z is unknown"):
            model.log_density([[0.0]])
        domain = Domain.interval(-10.0, 10.0, 2001)
        normalized = model.with_log_z(domain)
        mass = np.exp(normalized.log_density(domain.states)) @ domain.weights
        assert mass == pytest.approx(1.0, abs=1e-9)

    def test_energy_gradient(self, rng: np.random.Generator) -> None:
        """Assert that the energy gradient matches finite differences."""
        model = LinearDescriptiveModel(
            rng.standard_normal(4), MomentFeatures.pairwise(2, pin_constant=True)
        )
        X = rng.standard_normal((3, 2))
        _, grad = model.energy_and_grad(X)

        def total(x: Array) -> float:
            return float(model.energy_and_grad(x)[0].sum())

        assert finite_diff_check(total, X, grad, floor=1e-3).error < 1e-6


class TestExactFit:
    """Test `def fit_linear_exact` on enumerated and quadrature domains."""

    def test_moments_match(self, rng: np.random.Generator) -> None:
        """Assert that the fitted model reproduces the data moments."""
        domain = Domain.binary(3)
        feature_map = MomentFeatures.pairwise(3)
        data = sample_states(domain, 2000, rng)
        metrics: Metrics = []
        model = fit_linear_exact(data, feature_map, domain, metrics=metrics)
        fitted = expectation(model.log_density, domain, feature_map)
        assert np.max(np.abs(fitted - feature_stats(data, feature_map))) < 1e-6
        likelihoods = [row["log_likelihood"] for row in metrics]
        assert np.all(np.diff(likelihoods) >= -1e-12)
        assert model.log_z is not None

    def test_pythagorean_identity(self, rng: np.random.Generator) -> None:
        """Assert that the fit is the information projection of the data onto the family."""
        domain = Domain.binary(3)
        feature_map = MomentFeatures.pairwise(3)
        data = sample_states(domain, 2000, rng)
        counts = IndicatorFeatures(domain.states)(data).sum(axis=0)
        with np.errstate(divide="ignore"):
            log_counts = np.log(counts)

        def empirical(X: Array) -> Array:
            index = np.argmax(IndicatorFeatures(domain.states)(X), axis=1)
            return log_counts[index]

        fitted = fit_linear_exact(data, feature_map, domain)
        other = LinearDescriptiveModel(rng.standard_normal(6), feature_map)
        reference = LinearDescriptiveModel(np.zeros(6), feature_map)
        to_fit = exact_kl(empirical, fitted.log_density, domain)
        for model in (other, reference):
            total = exact_kl(empirical, model.unnormalized_log_density, domain)
            rest = exact_kl(fitted.log_density, model.unnormalized_log_density, domain)
            assert total == pytest.approx(to_fit + rest, abs=1e-8)
        # among moment-matching distributions the fit is the closest to the reference
        assert exact_kl(fitted.log_density, reference.unnormalized_log_density, domain) <= (
            exact_kl(empirical, reference.unnormalized_log_density, domain) + 1e-8
        )

    def test_maximum_entropy(self, rng: np.random.Generator) -> None:
        """Assert that among distributions with the data moments the fit is closest to p₀."""
        domain = Domain.binary(3)
        feature_map = MomentFeatures.pairwise(3)
        data = sample_states(domain, 2000, rng)
        hbar = feature_stats(data, feature_map)
        fitted = fit_linear_exact(data, feature_map, domain)
        reference = LinearDescriptiveModel(np.zeros(6), feature_map)
        H = feature_map(domain.states)
        base_log = reference.unnormalized_log_density(domain.states)
        best = exact_kl(fitted.log_density, reference.unnormalized_log_density, domain)
        for _ in range(100):
            tilted = base_log + 2.0 * rng.standard_normal(len(domain))
            match = solve_moment_matching(H, tilted, hbar)
            log_p = tilted + H @ match.theta - match.log_z
            assert np.max(np.abs(np.exp(log_p) @ H - hbar)) < 1e-8

            def other(X: Array, log_p: Array = log_p) -> Array:
                return log_p[np.argmax(IndicatorFeatures(domain.states)(X), axis=1)]

            assert best <= exact_kl(other, reference.unnormalized_log_density, domain) + 1e-8

    def test_moment_mismatch(self, mocker: MockerFixture, rng: np.random.Generator) -> None:
        """Assert that a fit stopped short of the data moments raises instead of converging."""
        logger = mocker.patch.object(modelzoo.descriptive.linear, "logger", autospec=True)
        domain = Domain.binary(3)
        feature_map = MomentFeatures.pairwise(3)
        data = np.concatenate([np.ones((900, 3)), domain.states[rng.integers(0, 8, size=100)]])
        with pytest.raises(MomentMismatchError) as info:
            fit_linear_exact(data, feature_map, domain, max_iter=1)
        assert info.value.iterations == 1
        assert info.value.gap >= modelzoo.descriptive.linear.MOMENT_TOLERANCE
        logger.info.assert_not_called()
        fit_linear_exact(data, feature_map, domain)
        assert "converged" in logger.info.call_args.args[0]

    def test_boundary_infeasible(self) -> None:
        """Assert that moments on the boundary of the achievable set are rejected."""
        data = np.array([[1.0, 0.0], [1.0, 1.0]])
        with pytest.raises(BoundaryInfeasibleError) as info:
            fit_linear_exact(data, MomentFeatures.pairwise(2), Domain.binary(2))
        assert info.value.coordinate == 0
        assert info.value.value == 1.0

    def test_gaussian_on_quadrature(self, rng: np.random.Generator) -> None:
        """Assert that first and second moments fit a Gaussian in closed form."""
        data = 1.0 + math.sqrt(0.5) * rng.standard_normal((5000, 1))
        domain = Domain.interval(-6.0, 8.0, 2001)
        model = fit_linear_exact(data, MomentFeatures.raw_moments(1), domain)
        mean, var = float(data.mean()), float(data.var())
        # exp(θ₁x + θ₂x² - x²/2) is N(mean, var) exactly when these hold
        assert model.theta[0] == pytest.approx(mean / var, rel=1e-4)
        assert model.theta[1] == pytest.approx(0.5 - 0.5 / var, abs=1e-4)


class TestLangevinFit:
    """Test `def fit_linear_langevin`."""

    def test_agrees_with_exact_fit(self, rng: np.random.Generator) -> None:
        """Assert that stochastic maximum likelihood lands near the exact optimum."""
        data = 1.0 + math.sqrt(0.5) * rng.standard_normal((2000, 1))
        feature_map = MomentFeatures.raw_moments(1)
        exact = fit_linear_exact(data, feature_map, Domain.interval(-6.0, 8.0, 2001))
        metrics: Metrics = []
        model = fit_linear_langevin(
            data,
            feature_map,
            LangevinConfig(step_size=0.5, steps=20, mh_correct=True),
            TrainConfig(epochs=200, learning_rate=0.5, n_chains=200),
            rng=rng,
            metrics=metrics,
        )
        error = np.linalg.norm(model.theta - exact.theta) / np.linalg.norm(exact.theta)
        assert error < 0.1
        assert len(metrics) == 200
        assert metrics[-1]["discrepancy"] < metrics[0]["discrepancy"]

    def test_starting_weights(self, rng: np.random.Generator) -> None:
        """Assert that training can resume from given weights."""
        data = rng.standard_normal((50, 1))
        model = fit_linear_langevin(
            data,
            MomentFeatures.raw_moments(1, order=1),
            LangevinConfig(steps=2),
            TrainConfig(epochs=2, learning_rate=1e-6, n_chains=10),
            rng=rng,
            theta=[0.25],
        )
        assert model.theta[0] == pytest.approx(0.25, abs=1e-4)


class TestProjectionPursuit:
    """Test direction search and the pursuit loop."""

    def test_default_candidates(self, rng: np.random.Generator) -> None:
        """Assert that candidates are unit directions, evenly spaced in 2D."""
        planar = modelzoo.descriptive.linear.default_candidates(2, 4)
        assert np.allclose(planar[2], [0.0, 1.0])
        spherical = modelzoo.descriptive.linear.default_candidates(5, 10, rng)
        assert np.allclose(np.linalg.norm(spherical, axis=1), 1.0)
        with pytest.raises(ValueError, match="two dimensions"):
            modelzoo.descriptive.linear.default_candidates(1)

    def test_histogram_distance(self) -> None:
        """Assert that the distance is zero for identical sets and two for disjoint ones."""
        distance = modelzoo.descriptive.linear.histogram_distance
        assert distance(np.zeros(3), np.zeros(5)) == 0.0
        assert distance(np.zeros(2), np.ones(2)) == pytest.approx(2.0)

    def test_finds_bimodal_direction(self, rng: np.random.Generator) -> None:
        """Assert that the most separating candidate is the bimodal axis."""
        candidates = [[1.0, 0.0], [0.0, 1.0], [math.sqrt(0.5), math.sqrt(0.5)]]
        projection = pursue_projection(
            bimodal(1000, rng), rng.standard_normal((1000, 2)), candidates
        )
        assert projection.direction.tolist() == [1.0, 0.0]
        assert int(np.argmax(projection.discrepancies)) == 0
        assert not projection.converged

    def test_identical_sets_converge(self, rng: np.random.Generator) -> None:
        """Assert that pursuit reports convergence when nothing separates the sets."""
        X = rng.standard_normal((100, 2))
        projection = pursue_projection(X, X, [[1.0, 0.0], [0.0, 1.0]])
        assert projection.converged
        assert projection.discrepancy == 0.0

    def test_rejects(self, rng: np.random.Generator) -> None:
        """Assert that candidates must match the data dimension."""
        X = rng.standard_normal((10, 2))
        with pytest.raises(ValueError, match="do not match"):
            pursue_projection(X, X, [[1.0, 0.0, 0.0]])
        with pytest.raises(ValueError, match="nonempty"):
            pursue_projection(X, X[:0], [[1.0, 0.0]])

    def test_pursuit(self, rng: np.random.Generator) -> None:
        """Assert that every round adds a projection and logs its discrepancy."""
        metrics: Metrics = []
        result = modelzoo.descriptive.linear.fit_projection_pursuit(
            bimodal(200, rng),
            2,
            LangevinConfig(step_size=0.3, steps=10),
            TrainConfig(epochs=10, learning_rate=0.1, n_chains=100),
            candidates=[[1.0, 0.0], [0.0, 1.0]],
            rng=rng,
            metrics=metrics,
        )
        assert result.model is not None
        assert isinstance(result.model.feature_map, ProjectionHistogramFeatures)
        assert result.model.feature_map.projections[0].tolist() == [1.0, 0.0]
        assert len(result.model.feature_map.projections) == len(result.discrepancies)
        assert [row["round"] for row in metrics] == [0.0, 1.0]

from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np
import pytest

from modelzoo.bridges.introspective import (
    Tilt,
    TiltedModel,
    empirical_log_density,
    introspective_fit,
)
from modelzoo.descriptive.features import IndicatorFeatures, MomentFeatures
from modelzoo.descriptive.linear import Reference
from modelzoo.discriminative import Classifier
from modelzoo.mcmc import LangevinConfig
from modelzoo.oracle import Domain, finite_diff_check

if TYPE_CHECKING:
    from modelzoo.types import Array, Metrics


def skewed_binary(rng: np.random.Generator, p: int, n: int) -> Array:
    """Every state of `{0, 1}^p` at least once, then draws biased toward ones."""
    states = Domain.binary(p).states
    extra = (rng.random((n - len(states), p)) < 0.7).astype(np.float64)
    return np.concatenate([states, extra])


class TestTiltedModel:
    """Test `class Tilt` and `class TiltedModel`."""

    def test_two_categories(self) -> None:
        """Assert that tilts are two-category discriminators."""
        clf = Classifier.linear(np.ones((2, 1)), [0.0, 0.0, 0.0])
        with pytest.raises(ValueError, match="two-category"):
            Tilt(clf)

    def test_log_density(self) -> None:
        """Assert that each tilt adds its score and bias to the base log density."""
        features = MomentFeatures.raw_moments(1)
        tilt = Tilt(Classifier.linear([[1.0, -0.5]], [0.0, 0.25], features))
        model = TiltedModel(Reference.gaussian()).with_tilt(tilt).with_tilt(tilt)
        X = np.array([[0.0], [2.0]])
        assert model.tilt_terms(X).tolist() == [[0.25, 0.25], [0.25, 0.25]]
        expected = Reference.gaussian().log_density(X) + 0.5
        assert np.allclose(model.unnormalized_log_density(X), expected)

    def test_energy_gradient(self, rng: np.random.Generator) -> None:
        """Assert that the tilted energy gradient matches finite differences."""
        features = MomentFeatures.raw_moments(2)
        clf = Classifier.linear([rng.standard_normal(features.dim)], [0.0, 0.3], features)
        model = TiltedModel(Reference.gaussian(2.0), (Tilt(clf),))
        X = rng.standard_normal((4, 2))
        _, grad = model.energy_and_grad(X)

        def total(x: Array) -> float:
            return float(model.energy_and_grad(x)[0].sum())

        assert finite_diff_check(total, X, grad, floor=1e-3).error < 1e-6


class TestEmpiricalLogDensity:
    """Test `def empirical_log_density`."""

    def test_frequencies(self) -> None:
        """Assert that the empirical density is the log frequency of each state."""
        domain = Domain.binary(1)
        log_density = empirical_log_density([[0.0], [1.0], [1.0], [1.0]], domain)
        assert np.allclose(log_density(domain.states), [math.log(0.25), math.log(0.75)])

    def test_rejects(self) -> None:
        """Assert that only examples on an enumerated domain are accepted."""
        with pytest.raises(ValueError, match="enumerated domain"):
            empirical_log_density([[0.5]], Domain.interval(0.0, 1.0, 3))
        with pytest.raises(ValueError, match="not states"):
            empirical_log_density([[0.5]], Domain.binary(1))


class TestIntrospectiveFit:
    """Test `def introspective_fit`."""

    def test_indicators_converge_in_one_tilt(self, rng: np.random.Generator) -> None:
        """Assert that one saturated discriminator turns the reference into the data."""
        domain = Domain.binary(3)
        data = skewed_binary(rng, 3, 400)
        metrics: Metrics = []
        model = introspective_fit(
            data, 5, IndicatorFeatures(domain.states), domain=domain, metrics=metrics
        )
        assert len(model.tilts) == 1
        assert [row["round"] for row in metrics] == [0.0, 1.0]
        assert metrics[0]["kl"] > 0.01
        assert metrics[1]["kl"] < 1e-6
        assert metrics[1]["log_loss"] == pytest.approx(math.log(2), abs=1e-6)

    def test_pairwise_tilts_reduce_kl(self, rng: np.random.Generator) -> None:
        """Assert that pairwise discriminators bring the model closer to the data."""
        domain = Domain.binary(3)
        metrics: Metrics = []
        introspective_fit(
            skewed_binary(rng, 3, 400),
            6,
            MomentFeatures.pairwise(3),
            domain=domain,
            metrics=metrics,
        )
        kls = [row["kl"] for row in metrics]
        assert all(math.isfinite(kl) for kl in kls)
        assert kls[-1] < kls[0]

    def test_langevin(self, rng: np.random.Generator) -> None:
        """Assert that sampled negatives drive the same loop without exact KL."""
        data = 1.0 + rng.standard_normal((200, 1))
        metrics: Metrics = []
        model = introspective_fit(
            data,
            2,
            MomentFeatures.raw_moments(1),
            mode="langevin",
            lang_cfg=LangevinConfig(step_size=0.3, steps=20),
            ridge=1e-4,
            rng=rng,
            metrics=metrics,
        )
        assert 1 <= len(model.tilts) <= 2
        assert all(set(row) == {"round", "log_loss"} for row in metrics)
        assert metrics[0]["log_loss"] < math.log(2)

    def test_rejects(self) -> None:
        """Assert that the mode is known and exact mode has a domain."""
        features = MomentFeatures.raw_moments(1)
        with pytest.raises(ValueError, match="enumerable domain"):
            introspective_fit(np.zeros((3, 1)), 1, features)
        with pytest.raises(ValueError, match="Unknown introspective mode"):
            introspective_fit(np.zeros((3, 1)), 1, features, mode="gibbs")  # type: ignore[arg-type]

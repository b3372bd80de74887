from __future__ import annotations

import math
from typing import TYPE_CHECKING

import numpy as np
import pytest

import modelzoo.discriminative
import modelzoo.nets
from modelzoo.descriptive.deep import DeepEnergyModel
from modelzoo.descriptive.features import MomentFeatures
from modelzoo.descriptive.linear import LinearDescriptiveModel
from modelzoo.discriminative import (
    Classifier,
    SeparableDataError,
    bayes_posterior,
    classifier_from_descriptive,
    classifier_predict,
    descriptive_from_classifier,
    fit_logistic,
    fit_softmax_net,
    logistic_log_loss,
    softmax_classifier,
)
from modelzoo.optim import TrainConfig
from modelzoo.oracle import Domain

if TYPE_CHECKING:
    from pytest_mock import MockerFixture

    from modelzoo.types import Array, Metrics

PRIORS = [0.2, 0.3, 0.5]


def ring_labels(data: Array) -> Array:
    """Index of the nearest of the four ring centers."""
    angles = np.arctan2(data[:, 1], data[:, 0])
    return np.round(angles / (np.pi / 2)).astype(np.int64) % 4


class TestLogistic:
    """Test `def fit_logistic` and `def logistic_log_loss`."""

    def test_gaussian_classes(self, rng: np.random.Generator) -> None:
        """Assert that unit Gaussians at ±1 have log-odds `2x`."""
        positives = 1.0 + rng.standard_normal(4000)
        negatives = -1.0 + rng.standard_normal(4000)
        features = np.concatenate([positives, negatives])
        labels = np.concatenate([np.ones(4000), np.zeros(4000)])
        fit = fit_logistic(features, labels)
        assert fit.theta.item() == pytest.approx(2.0, abs=0.2)
        assert fit.bias == pytest.approx(0.0, abs=0.15)
        loss = logistic_log_loss(fit.theta, fit.bias, features[:, None], labels)
        assert fit.log_likelihood == pytest.approx(-loss)

    def test_weights(self) -> None:
        """Assert that weights act as repeated examples."""
        features = np.array([[0.0], [1.0], [1.0], [2.0]])
        labels = np.array([-1.0, -1.0, 1.0, 1.0])
        counts = [1, 2, 1, 2]
        repeated = fit_logistic(np.repeat(features, counts, axis=0), np.repeat(labels, counts))
        weighted = fit_logistic(features, labels, weights=[1.0, 2.0, 1.0, 2.0])
        assert np.allclose(weighted.theta, repeated.theta, atol=1e-5)
        assert weighted.bias == pytest.approx(repeated.bias, abs=1e-5)

    def test_rejects(self) -> None:
        """Assert that inputs need matching rows, valid weights and both classes."""
        with pytest.raises(ValueError, match="feature rows"):
            fit_logistic(np.zeros((3, 1)), [1, -1])
        with pytest.raises(ValueError, match="positive total"):
            fit_logistic(np.zeros((2, 1)), [1, -1], weights=[-1.0, 2.0])
        with pytest.raises(ValueError, match="both classes"):
            fit_logistic(np.zeros((2, 1)), [1, -1], weights=[1.0, 0.0])

    def test_separable(self) -> None:
        """Assert that separable classes raise unless a ridge penalty is given."""
        features = np.array([[-2.0], [-1.0], [1.0], [2.0]])
        labels = [-1, -1, 1, 1]
        with pytest.raises(SeparableDataError, match="ridge"):
            fit_logistic(features, labels)
        fit = fit_logistic(features, labels, ridge=1e-4)
        assert math.isfinite(fit.theta.item()) and fit.theta.item() > 0

    def test_not_converged(self, mocker: MockerFixture, rng: np.random.Generator) -> None:
        """Assert that a fit stopped before the gradient vanishes is flagged and warned about."""
        logger = mocker.patch.object(modelzoo.discriminative, "logger", autospec=True)
        features = np.concatenate([1.0 + rng.standard_normal(500), -1.0 + rng.standard_normal(500)])
        labels = np.concatenate([np.ones(500), -np.ones(500)])
        stopped = fit_logistic(features, labels, max_iter=1)
        assert stopped.converged is False
        assert stopped.iterations == 1
        logger.warning.assert_called_once()
        assert "fit_logistic stopped after 1 iterations" in logger.warning.call_args.args[0]
        fit = fit_logistic(features, labels)
        assert fit.converged is True
        logger.warning.assert_called_once()


class TestClassifier:
    """Test `class Classifier` and soft-max prediction."""

    def test_rejects(self) -> None:
        """Assert that classifiers have two categories, a zero base bias and bound parameters."""
        with pytest.raises(ValueError, match="at least two"):
            Classifier.linear([[1.0]], [0.0])
        with pytest.raises(ValueError, match="fixed at 0"):
            Classifier.linear([[1.0]], [1.0, 0.0])
        tape, _ = modelzoo.nets.linear_net([[1.0]])
        with pytest.raises(ValueError, match="not bound"):
            Classifier(tape, {}, np.zeros(2))

    def test_scores(self) -> None:
        """Assert that category 0 scores zero and the others add their bias."""
        clf = Classifier.linear([[1.0, 0.0], [0.0, 2.0]], [0.0, 0.5, -1.0])
        assert clf.K == 3
        assert clf.scores([[1.0, 1.0]]).tolist() == [[0.0, 1.5, 1.0]]

    def test_predict(self, rng: np.random.Generator) -> None:
        """Assert that predictions are probability vectors."""
        clf = softmax_classifier(3, 4, [5], rng)
        probs = classifier_predict(clf, rng.standard_normal((10, 3)))
        assert probs.shape == (10, 4)
        assert np.all(probs > 0)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_from_logistic(self) -> None:
        """Assert that a logistic fit is a two-category classifier for the positive class."""
        fit = modelzoo.discriminative.LogisticFit(np.array([2.0]), -1.0, 0.0, 1)
        probs = classifier_predict(Classifier.from_logistic(fit), [[1.0]])
        assert probs[0, 1] == pytest.approx(1 / (1 + math.exp(-1.0)))


class TestFitSoftmaxNet:
    """Test `def fit_softmax_net`."""

    def test_ring(self, ring_data: Array, rng: np.random.Generator) -> None:
        """Assert that four separated clusters are classified."""
        labels = ring_labels(ring_data)
        metrics: Metrics = []
        clf = fit_softmax_net(
            ring_data,
            labels,
            softmax_classifier(2, 4, [], rng),
            TrainConfig(epochs=30, batch_size=50, learning_rate=0.5),
            rng=rng,
            metrics=metrics,
        )
        assert len(metrics) == 30
        assert set(metrics[0]) == {"epoch", "log_likelihood", "accuracy"}
        assert metrics[-1]["accuracy"] > 0.95
        assert metrics[-1]["log_likelihood"] > metrics[0]["log_likelihood"]
        assert clf.biases[0] == 0.0

    def test_rejects_labels(self, rng: np.random.Generator) -> None:
        """Assert that labels must index the categories."""
        clf = softmax_classifier(2, 3, [], rng)
        with pytest.raises(ValueError, match="Labels must lie in 0..2"):
            fit_softmax_net(np.zeros((2, 2)), [0, 3], clf, TrainConfig(epochs=1))


class TestBayesBridge:
    """Test the exact link between class densities and classifiers."""

    @pytest.fixture
    def domain(self) -> Domain:
        return Domain.binary(2)

    @pytest.fixture
    def linear_models(
        self, rng: np.random.Generator, domain: Domain
    ) -> list[LinearDescriptiveModel]:
        features = MomentFeatures.pairwise(2)
        return [
            LinearDescriptiveModel(rng.standard_normal(3), features).with_log_z(domain)
            for _ in PRIORS
        ]

    def test_posterior_round_trip(
        self, linear_models: list[LinearDescriptiveModel], domain: Domain
    ) -> None:
        """Assert that the Bayes classifier reproduces the class posteriors."""
        posterior = bayes_posterior(linear_models, PRIORS, domain.states)
        clf = classifier_from_descriptive(linear_models, PRIORS)
        assert np.max(np.abs(classifier_predict(clf, domain.states) - posterior)) < 1e-10
        recovered = descriptive_from_classifier(clf, linear_models[0], PRIORS)
        for original, model in zip(linear_models, recovered):
            assert np.allclose(
                model.log_density(domain.states), original.log_density(domain.states), atol=1e-10
            )

    def test_domain_log_z(
        self, linear_models: list[LinearDescriptiveModel], domain: Domain
    ) -> None:
        """Assert that missing log partition functions are computed on a given domain."""
        unknown = [LinearDescriptiveModel(m.theta, m.feature_map) for m in linear_models]
        computed = classifier_from_descriptive(unknown, PRIORS, domain=domain)
        stored = classifier_from_descriptive(linear_models, PRIORS)
        assert np.allclose(computed.biases, stored.biases)

    def test_unknown_log_z(
        self, mocker: MockerFixture, linear_models: list[LinearDescriptiveModel]
    ) -> None:
        """Assert that unknown log partition functions leave only the prior odds."""
        logger = mocker.patch.object(modelzoo.discriminative, "logger", autospec=True)
        unknown = [LinearDescriptiveModel(m.theta, m.feature_map) for m in linear_models]
        clf = classifier_from_descriptive(unknown, PRIORS)
        assert np.allclose(clf.biases, np.log(np.array(PRIORS) / PRIORS[0]))
        logger.warning.assert_called_once()
        with pytest.raises(ValueError, match="log partition"):
            bayes_posterior(unknown, PRIORS, np.zeros((1, 2)))

    def test_shared_feature_map(self, linear_models: list[LinearDescriptiveModel]) -> None:
        """Assert that linear class models must share their features."""
        other = LinearDescriptiveModel(np.zeros(3), MomentFeatures.pairwise(2), log_z=0.0)
        with pytest.raises(ValueError, match="share one feature map"):
            classifier_from_descriptive([linear_models[0], other], [0.5, 0.5])

    @pytest.mark.parametrize(
        ("priors", "message"),
        (([0.5, 0.5], "Need 3 class priors"), ([0.5, 0.6, -0.1], "positive and sum to 1")),
    )
    def test_priors(
        self, linear_models: list[LinearDescriptiveModel], priors: list[float], message: str
    ) -> None:
        """Assert that priors are one positive probability per class."""
        with pytest.raises(ValueError, match=message):
            bayes_posterior(linear_models, priors, np.zeros((1, 2)))

    def test_deep_round_trip(self, rng: np.random.Generator) -> None:
        """Assert that network scores give the same posteriors and class densities."""
        models = []
        for log_z in (0.5, -1.0, 2.0):
            tape, theta = modelzoo.nets.mlp([2, 4, 1], rng, activation="tanh", squeeze=True)
            models.append(DeepEnergyModel(tape, theta, log_z=log_z))
        X = rng.standard_normal((6, 2))
        clf = classifier_from_descriptive(models, PRIORS)
        posterior = bayes_posterior(models, PRIORS, X)
        assert np.max(np.abs(classifier_predict(clf, X) - posterior)) < 1e-10
        recovered = descriptive_from_classifier(clf, models[0], PRIORS)
        for original, model in zip(models, recovered):
            assert isinstance(model, DeepEnergyModel)
            assert model.log_z == pytest.approx(original.log_z)
            assert np.allclose(model.energy(X), original.energy(X))

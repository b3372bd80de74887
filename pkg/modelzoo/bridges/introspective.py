"""Introspective learning: tilt a density by logistic discriminators against its own samples.

Each round draws negatives from the current model `p_t`, fits a logistic
regression with the observed examples as positives, and multiplies the model by
the exponentiated score, `p_{t+1}(X) ∝ exp(f(X) + b) p_t(X)`. With equal class
sizes the fitted intercept estimates `-log Z` of the tilt.
"""

from __future__ import annotations

import dataclasses
import math
from typing import TYPE_CHECKING, Literal, Union

import numpy as np

from modelzoo.descriptive.linear import LinearDescriptiveModel, Reference
from modelzoo.discriminative import Classifier, fit_logistic
from modelzoo.mcmc import LangevinConfig, run_chains_with_restart
from modelzoo.nets import backprop
from modelzoo.oracle import Domain, exact_kl, log_probabilities
from modelzoo.utilities import logger, make_rng

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.descriptive.features import FeatureMap
    from modelzoo.types import Array, LogDensity, Metrics

Base = Union[Reference, LinearDescriptiveModel]


@dataclasses.dataclass(frozen=True)
class Tilt:
    """One accepted discriminator, a two-category classifier whose category 1 is the data."""

    classifier: Classifier

    def __post_init__(self) -> None:
        if self.classifier.K != 2:
            raise ValueError("A tilt is a two-category discriminator")

    def log_factor(self, X: Array) -> Array:
        """`f(X) + b`."""
        return self.classifier.head_scores(X)[:, 0] + self.classifier.biases[1]

    def grad(self, X: Array) -> Array:
        clf = self.classifier
        inputs = clf.inputs(X)
        _, grad_inputs, _ = backprop(
            clf.tape, clf.params, inputs, np.ones((len(X), 1)), input_name=clf.input_name
        )
        if clf.feature_map is None:
            return grad_inputs
        return clf.feature_map.vjp(X, grad_inputs)


@dataclasses.dataclass(frozen=True)
class TiltedModel:
    """`log p(X) = log p_base(X) + Σ_t (f_t(X) + b_t)`, up to normalization."""

    base: Base
    tilts: tuple[Tilt, ...] = ()

    def base_log_density(self, X: Array) -> Array:
        if isinstance(self.base, Reference):
            return self.base.log_density(X)
        return self.base.unnormalized_log_density(X)

    def tilt_terms(self, X: ArrayLike) -> Array:
        """Every tilt's log factor, one column per round."""
        x = np.asarray(X, dtype=np.float64)
        if not self.tilts:
            return np.zeros((len(x), 0))
        return np.stack([tilt.log_factor(x) for tilt in self.tilts], axis=1)

    def unnormalized_log_density(self, X: ArrayLike) -> Array:
        x = np.asarray(X, dtype=np.float64)
        return self.base_log_density(x) + self.tilt_terms(x).sum(axis=1)

    def with_tilt(self, tilt: Tilt) -> TiltedModel:
        return dataclasses.replace(self, tilts=(*self.tilts, tilt))

    def energy_and_grad(self, X: Array) -> tuple[Array, Array]:
        if isinstance(self.base, Reference):
            grad = -self.base.grad(X)
        else:
            grad = self.base.energy_and_grad(X)[1]
        for tilt in self.tilts:
            grad = grad - tilt.grad(X)
        return -self.unnormalized_log_density(X), grad


def empirical_log_density(data: ArrayLike, domain: Domain) -> LogDensity:
    """Log of the empirical distribution of `data` over the states of an enumerated domain."""
    if domain.kind != "enumerated":
        raise ValueError("Empirical distributions need an enumerated domain")
    X = np.asarray(data, dtype=np.float64).reshape(-1, domain.dim)
    matches = np.all(np.isclose(X[:, None, :], domain.states[None]), axis=2)
    if not np.all(matches.any(axis=1)):
        raise ValueError("Some examples are not states of the domain")
    with np.errstate(divide="ignore"):
        log_mass = np.log(matches.sum(axis=0) / len(X))

    def log_density(states: Array) -> Array:
        found = np.all(np.isclose(states[:, None, :], domain.states[None]), axis=2)
        return np.where(found.any(axis=1), log_mass[np.argmax(found, axis=1)], -np.inf)

    return log_density


def introspective_fit(
    data: ArrayLike,
    rounds: int,
    feature_map: FeatureMap,
    *,
    mode: Literal["exact", "langevin"] = "exact",
    domain: Domain | None = None,
    base: Base | None = None,
    lang_cfg: LangevinConfig | None = None,
    ridge: float = 0.0,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> TiltedModel:
    """Grow a `TiltedModel` one logistic discriminator per round.
    ---

    In `exact` mode the negatives are the domain states weighted by `p_t` and
    the positives the same states weighted by the empirical distribution, each
    class carrying half the total weight, so the logistic fit is the population
    fit. The exact KL from the data to `p_t` is logged every round.

    In `langevin` mode the negatives are as many Langevin samples of `p_t` as
    there are observed examples, started from the base density.

    Training stops early once the discriminator's log-loss reaches `ln 2`,
    meaning it can no longer tell the data from the model. Metrics rows carry
    `round`, `log_loss` and, in exact mode, `kl`.
    """
    X = np.asarray(data, dtype=np.float64)
    model = TiltedModel(base or Reference.gaussian())
    rng = make_rng(rng)
    if mode == "exact":
        if domain is None:
            raise ValueError("Exact introspective learning needs an enumerable domain")
        data_log = empirical_log_density(X, domain)
        data_mass = np.exp(log_probabilities(data_log, domain))
        H = feature_map(domain.states)
        features = np.concatenate([H, H])
        labels = np.concatenate([np.ones(len(H)), -np.ones(len(H))])
    elif mode == "langevin":
        lang_cfg = lang_cfg or LangevinConfig()
        features = labels = np.zeros(0)
    else:
        raise ValueError(f"Unknown introspective mode {mode!r}; expected exact or langevin")
    for t in range(rounds):
        row = {"round": float(t)}
        if mode == "exact":
            assert domain is not None
            kl = exact_kl(data_log, model.unnormalized_log_density, domain)
            model_mass = np.exp(log_probabilities(model.unnormalized_log_density, domain))
            weights = np.concatenate([data_mass, model_mass]) / 2
            row["kl"] = kl
            logger.info(f"modelzoo introspective_fit round {t}: kl={kl:.6g}")
        else:
            assert lang_cfg is not None
            shape = X.shape[1:]

            def cold(n: int, r: np.random.Generator) -> Array:
                if isinstance(model.base, Reference):
                    return model.base.sample(n, shape, r)
                return model.base.reference.sample(n, shape, r)

            negatives = run_chains_with_restart(
                cold(len(X), rng), model.energy_and_grad, lang_cfg, rng, cold
            ).points
            features = np.concatenate([feature_map(X), feature_map(negatives)])
            labels = np.concatenate([np.ones(len(X)), -np.ones(len(negatives))])
            weights = np.ones(len(labels))
        fit = fit_logistic(features, labels, weights=weights, ridge=ridge)
        log_loss = -fit.log_likelihood
        row["log_loss"] = log_loss
        if metrics is not None:
            metrics.append(row)
        if log_loss > math.log(2) - 1e-6:
            logger.info(
                f"modelzoo introspective_fit converged at round {t}: the discriminator "
                f"is at chance (log_loss={log_loss:.6g})"
            )
            break
        model = model.with_tilt(Tilt(Classifier.from_logistic(fit, feature_map)))
    return model

"""Logistic and soft-max classifiers, and their exact Bayes-rule link to descriptive models.

A `Classifier` scores `K` categories as `f_k(X) + b_k`, with category 0 fixed
at `f_0 = 0` and `b_0 = 0`. Given per-class densities `p_k(X) = exp(f_k(X)) p_0(X) / Z_k`
and priors `ρ_k`, the posterior over categories is exactly such a classifier with
`b_k = log(ρ_k/ρ_0) - log Z_k + log Z_0`.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Sequence
from typing import TYPE_CHECKING, NamedTuple, Union

import numpy as np
from scipy import special

from modelzoo.descriptive.deep import DeepEnergyModel
from modelzoo.descriptive.linear import LinearDescriptiveModel
from modelzoo.nets import backprop, evaluate, is_affine, linear_net, mlp
from modelzoo.optim import TrainConfig, all_finite, make_optimizer
from modelzoo.tape import Tape, TapeBuilder, select_output, stack_outputs
from modelzoo.utilities import logger, make_rng

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.descriptive.features import FeatureMap
    from modelzoo.oracle import Domain
    from modelzoo.types import Activation, Array, Metrics, Params

ClassModel = Union[LinearDescriptiveModel, DeepEnergyModel]

SEPARABLE_BOUND = 1e3


class SeparableDataError(ValueError):
    """The classes are separable, so the logistic likelihood has no maximizer."""

    def __init__(self, norm: float) -> None:
        super().__init__(
            f"Logistic weights diverge (‖θ‖ = {norm:.4g}); the data are separable. "
            "Add a ridge penalty such as 1e-4 to obtain a finite fit"
        )
        self.norm = norm


class LogisticFit(NamedTuple):
    theta: Array
    bias: float
    log_likelihood: float
    iterations: int
    converged: bool = True


def _signed_labels(labels: ArrayLike) -> Array:
    y = np.asarray(labels, dtype=np.float64).ravel()
    return np.where(y > 0, 1.0, -1.0)


def logistic_log_loss(
    theta: ArrayLike,
    bias: float,
    features: ArrayLike,
    labels: ArrayLike,
    weights: ArrayLike | None = None,
) -> float:
    """Weighted mean of `log(1 + exp(-y (θᵀx + b)))` over the examples."""
    H = np.asarray(features, dtype=np.float64)
    y = _signed_labels(labels)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64)
    margins = y * (H @ np.asarray(theta, dtype=np.float64) + bias)
    return float(w @ np.logaddexp(0.0, -margins) / w.sum())


def fit_logistic(
    features: ArrayLike,
    labels: ArrayLike,
    *,
    weights: ArrayLike | None = None,
    ridge: float = 0.0,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> LogisticFit:
    """Maximum likelihood logistic regression `Pr(y = +1 | x) = sigmoid(θᵀx + b)`.
    ---

    Labels are `±1` (any positive value counts as `+1`). `weights` turn the
    sample average into a weighted one, which gives exact population fits on
    enumerated domains. `ridge` penalizes `‖θ‖²/2` but never the intercept.

    The concave objective is maximized by Newton steps with Armijo backtracking,
    so it never decreases between iterations. Separable data, where every
    example is classified correctly and the weights would grow without bound,
    raise `SeparableDataError` unless a ridge penalty is given. A fit that stops
    with the gradient still at or above `tol` logs a warning and comes back with
    `converged=False`.
    """
    H = np.asarray(features, dtype=np.float64)
    if H.ndim == 1:
        H = H[:, None]
    y = _signed_labels(labels)
    if len(H) != len(y):
        raise ValueError(f"{len(H)} feature rows but {len(y)} labels")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("Example weights must be nonnegative with a positive total")
    active = w > 0
    if np.all(y[active] > 0) or np.all(y[active] < 0):
        raise ValueError("Logistic regression needs examples of both classes")
    w = w / w.sum()
    Z = np.concatenate([H, np.ones((len(H), 1))], axis=1)
    penalty = np.full(Z.shape[1], ridge)
    penalty[-1] = 0.0

    def objective(params: Array) -> float:
        margins = y * (Z @ params)
        return float(-(w @ np.logaddexp(0.0, -margins)) - 0.5 * params @ (penalty * params))

    params = np.zeros(Z.shape[1])
    value = objective(params)
    iteration = 0
    for iteration in range(1, max_iter + 1):
        margins = y * (Z @ params)
        # σ(-m) is the probability of the wrong label
        wrong = special.expit(-margins)
        grad = Z.T @ (w * y * wrong) - penalty * params
        if np.max(np.abs(grad)) < tol:
            break
        curvature = Z.T @ ((w * wrong * (1 - wrong))[:, None] * Z) + np.diag(penalty)
        direction = np.linalg.lstsq(curvature, grad, rcond=None)[0]
        slope = float(grad @ direction)
        if not slope > 0:
            direction, slope = grad, float(grad @ grad)
        step = 1.0
        for _ in range(60):
            candidate = objective(params + step * direction)
            if candidate >= value + 1e-4 * step * slope:
                break
            step /= 2
        else:
            break
        params = params + step * direction
        value = candidate
        if np.linalg.norm(params[:-1]) > SEPARABLE_BOUND:
            raise SeparableDataError(float(np.linalg.norm(params[:-1])))
    if ridge == 0 and np.all(y[active] * (Z[active] @ params) > 0):
        raise SeparableDataError(float(np.linalg.norm(params[:-1])))
    grad = Z.T @ (w * y * special.expit(-y * (Z @ params))) - penalty * params
    gap = float(np.max(np.abs(grad)))
    if not gap < tol:
        logger.warning(
            f"modelzoo fit_logistic stopped after {iteration} iterations "
            f"with gradient {gap:.3g}, above the tolerance {tol:.3g}"
        )
        return LogisticFit(params[:-1], float(params[-1]), value, iteration, converged=False)
    logger.debug(f"modelzoo fit_logistic finished after {iteration} iterations")
    return LogisticFit(params[:-1], float(params[-1]), value, iteration)


@dataclasses.dataclass(frozen=True)
class Classifier:
    """Soft-max classifier over `K = len(biases)` categories.
    ---

    `tape` maps the input (or `feature_map(X)` when a feature map is set) to the
    scores `(n, K - 1)` of categories `1..K-1`. Category 0 has score 0 and bias 0.
    """

    tape: Tape
    params: Params
    biases: Array
    input_name: str = "x"
    feature_map: FeatureMap | None = None

    def __post_init__(self) -> None:
        if self.biases.ndim != 1 or len(self.biases) < 2:
            raise ValueError("A classifier needs at least two categories")
        if self.biases[0] != 0:
            raise ValueError("The bias of category 0 is fixed at 0")
        missing = set(self.tape.params) - set(self.params)
        if missing:
            raise ValueError(f"Parameters {sorted(missing)} are not bound")

    @classmethod
    def linear(
        cls,
        weights: ArrayLike,
        biases: ArrayLike,
        feature_map: FeatureMap | None = None,
    ) -> Classifier:
        """Linear scores `f_k(X) = w_kᵀh(X)`, one row of `weights` per category `1..K-1`."""
        tape, params = linear_net(weights)
        return cls(tape, params, np.asarray(biases, dtype=np.float64), feature_map=feature_map)

    @classmethod
    def from_logistic(cls, fit: LogisticFit, feature_map: FeatureMap | None = None) -> Classifier:
        """Two-category classifier with category 1 the `+1` class."""
        return cls.linear(fit.theta[None], [0.0, fit.bias], feature_map)

    @property
    def K(self) -> int:
        return len(self.biases)

    def inputs(self, X: ArrayLike) -> Array:
        x = np.asarray(X, dtype=np.float64)
        return x if self.feature_map is None else self.feature_map(x)

    def head_scores(self, X: ArrayLike) -> Array:
        out = evaluate(self.tape, self.params, self.inputs(X), input_name=self.input_name)
        return out.reshape(len(out), self.K - 1)

    def scores(self, X: ArrayLike) -> Array:
        """Logits `f_k(X) + b_k` for all `K` categories."""
        heads = self.head_scores(X)
        return np.concatenate([np.zeros((len(heads), 1)), heads], axis=1) + self.biases


def classifier_predict(clf: Classifier, X: ArrayLike) -> Array:
    """Posterior probabilities `(n, K)` over categories."""
    return special.softmax(clf.scores(X), axis=1)


def softmax_classifier(
    input_dim: int,
    K: int,
    hidden: Sequence[int],
    rng: np.random.Generator,
    *,
    activation: Activation = "relu",
    feature_map: FeatureMap | None = None,
) -> Classifier:
    """Multi-layer perceptron classifier, with no hidden layers giving linear scores."""
    tape, params = mlp([input_dim, *hidden, K - 1], rng, activation=activation)
    return Classifier(tape, params, np.zeros(K), feature_map=feature_map)


def _log_posterior_grads(
    clf: Classifier, X: Array, labels: Array
) -> tuple[float, float, Params, Array]:
    """Mean log posterior of the labels, accuracy and the ascent gradients."""
    inputs = clf.inputs(X)
    raw = evaluate(clf.tape, clf.params, inputs, input_name=clf.input_name)
    heads = raw.reshape(len(raw), clf.K - 1)
    logits = np.concatenate([np.zeros((len(heads), 1)), heads], axis=1) + clf.biases
    log_probs = special.log_softmax(logits, axis=1)
    n = len(X)
    value = float(np.mean(log_probs[np.arange(n), labels]))
    accuracy = float(np.mean(np.argmax(logits, axis=1) == labels))
    residual = -np.exp(log_probs)
    residual[np.arange(n), labels] += 1.0
    residual /= n
    _, _, grads = backprop(
        clf.tape,
        clf.params,
        inputs,
        residual[:, 1:].reshape(raw.shape),
        input_name=clf.input_name,
    )
    return value, accuracy, grads, residual.sum(axis=0)


def fit_softmax_net(
    data: ArrayLike,
    labels: ArrayLike,
    clf: Classifier,
    train_cfg: TrainConfig,
    *,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> Classifier:
    """Mini-batch ascent on the mean log posterior `log Pr(label | X)`.
    ---

    A non-finite loss or gradient undoes the step, halves the learning rate and
    retries. After three such failures training aborts with `FloatingPointError`.
    Metrics rows carry `epoch`, `log_likelihood` and `accuracy` (on the whole
    training set).
    """
    X = np.asarray(data, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if np.any(y < 0) or np.any(y >= clf.K):
        raise ValueError(f"Labels must lie in 0..{clf.K - 1}")
    rng = make_rng(rng)
    optimizer = make_optimizer(train_cfg)
    scale = 1.0
    failures = 0
    iteration = 0
    previous = clf
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), train_cfg.batch_size):
            index = order[start : start + train_cfg.batch_size]
            try:
                value, _, grads, bias_grad = _log_posterior_grads(clf, X[index], y[index])
            except FloatingPointError:
                value, grads, bias_grad = math.nan, {}, np.zeros(clf.K)
            if not (math.isfinite(value) and all_finite(grads)):
                failures += 1
                if failures >= 3:
                    raise FloatingPointError(
                        f"modelzoo fit_softmax_net: non-finite loss {failures} times"
                    )
                scale /= 2
                logger.warning(
                    f"modelzoo fit_softmax_net non-finite loss at iteration {iteration}, "
                    f"halving the learning rate to {scale * train_cfg.learning_rate:.4g}"
                )
                clf = previous
                continue
            previous = clf
            direction = {**grads, "biases": bias_grad}
            current = {**clf.params, "biases": clf.biases}
            stepped = optimizer.step(current, direction, scale * train_cfg.rate(iteration))
            biases = stepped.pop("biases")
            biases[0] = 0.0
            clf = dataclasses.replace(clf, params=stepped, biases=biases)
            iteration += 1
        value, accuracy, _, _ = _log_posterior_grads(clf, X, y)
        if metrics is not None:
            metrics.append(
                {"epoch": float(epoch), "log_likelihood": value, "accuracy": accuracy}
            )
        if epoch % train_cfg.log_every == 0:
            logger.info(
                f"modelzoo fit_softmax_net epoch {epoch}: "
                f"log_likelihood={value:.4g} accuracy={accuracy:.4f}"
            )
    return clf


def _check_priors(priors: ArrayLike, K: int) -> Array:
    rho = np.asarray(priors, dtype=np.float64)
    if rho.shape != (K,):
        raise ValueError(f"Need {K} class priors, got shape {rho.shape}")
    if np.any(rho <= 0) or abs(math.fsum(rho) - 1.0) > 1e-12:
        raise ValueError(f"Class priors must be positive and sum to 1, got {rho.tolist()}")
    return rho


def _log_z(model: ClassModel, domain: Domain | None) -> float | None:
    if model.log_z is not None:
        return model.log_z
    if domain is not None and isinstance(model, LinearDescriptiveModel):
        return model.with_log_z(domain).log_z
    return None


def _log_density(model: ClassModel, X: Array) -> Array:
    if model.log_z is None:
        raise ValueError("Class posteriors need the log partition function of every class")
    if isinstance(model, LinearDescriptiveModel):
        return model.log_density(X)
    return -model.energy(X) - model.log_z


def bayes_posterior(
    models: Sequence[ClassModel], priors: ArrayLike, X: ArrayLike
) -> Array:
    """`Pr(k | X) ∝ ρ_k p_k(X)` from normalized class densities."""
    rho = _check_priors(priors, len(models))
    x = np.asarray(X, dtype=np.float64)
    logits = np.stack([_log_density(m, x) for m in models], axis=1) + np.log(rho)
    return special.softmax(logits, axis=1)


def _score_difference_tape(models: Sequence[DeepEnergyModel]) -> tuple[Tape, Params]:
    """Tape with output `(f_k - f_0)` for `k = 1..K-1`, parameters prefixed by class."""
    prefixes = [f"class{k}/" for k in range(len(models))]
    merged = stack_outputs([m.tape for m in models], prefixes=prefixes)
    builder = TapeBuilder(merged.nodes)
    base = builder.scale(builder.select(merged.output, 0), -1.0)
    heads = [
        builder.add(builder.select(merged.output, k), base) for k in range(1, len(models))
    ]
    params = {
        f"{prefix}{name}": value
        for prefix, model in zip(prefixes, models)
        for name, value in model.theta.items()
    }
    return builder.build(builder.stack(*heads)), params


def classifier_from_descriptive(
    models: Sequence[ClassModel],
    priors: ArrayLike,
    *,
    domain: Domain | None = None,
) -> Classifier:
    """The Bayes classifier of per-class descriptive models.
    ---

    Linear models must share their feature map and reference; the scores are
    `(θ_k - θ_0)ᵀh(X)`. Deep models must share their reference variance; the
    scores are `f_k - f_0`. Each bias is `log(ρ_k/ρ_0) - log Z_k + log Z_0`,
    using the stored log partition functions, or computing them on `domain`
    for linear models. Without either, the unknown `log Z` terms are left out
    and the biases only carry the prior odds.
    """
    rho = _check_priors(priors, len(models))
    log_zs = [_log_z(m, domain) for m in models]
    if any(z is None for z in log_zs):
        logger.warning(
            "modelzoo classifier_from_descriptive: log Z unknown for some classes, "
            "biases carry only the prior odds"
        )
        offsets = np.zeros(len(models))
    else:
        offsets = np.array([z for z in log_zs if z is not None])
    biases = np.log(rho / rho[0]) - offsets + offsets[0]
    first = models[0]
    if isinstance(first, LinearDescriptiveModel):
        linear = [m for m in models if isinstance(m, LinearDescriptiveModel)]
        if len(linear) != len(models) or any(
            m.feature_map is not first.feature_map or m.reference != first.reference
            for m in linear
        ):
            raise ValueError("Linear class models must share one feature map and reference")
        weights = np.stack([m.theta - first.theta for m in linear[1:]])
        return Classifier.linear(weights, biases, first.feature_map)
    deep = [m for m in models if isinstance(m, DeepEnergyModel)]
    if len(deep) != len(models) or any(
        m.sigma2 != first.sigma2 or m.input_name != first.input_name for m in deep
    ):
        raise ValueError("Deep class models must share one reference variance and input")
    tape, params = _score_difference_tape(deep)
    return Classifier(tape, params, biases, input_name=first.input_name)


def descriptive_from_classifier(
    clf: Classifier, base: ClassModel, priors: ArrayLike
) -> list[ClassModel]:
    """Per-class descriptive models implied by a classifier and the density of category 0.
    ---

    Category `k` gets `p_k(X) ∝ exp(f_k(X)) p_0(X)` with
    `log Z_k = log(ρ_k/ρ_0) - b_k + log Z_0`, which is known exactly whenever
    `base` carries its log partition function. A linear classifier on the
    base model's feature map gives linear descriptive models `θ_0 + w_k`;
    a network classifier gives deep models whose score adds head `k` to the
    base score.
    """
    rho = _check_priors(priors, clf.K)
    offsets = np.log(rho / rho[0]) - clf.biases

    def log_z(k: int) -> float | None:
        return None if base.log_z is None else float(offsets[k] + base.log_z)

    models: list[ClassModel] = [base]
    if isinstance(base, LinearDescriptiveModel):
        if clf.feature_map is None or not is_affine(clf.tape):
            raise ValueError("Linear class models need a linear classifier on designed features")
        if clf.feature_map is not base.feature_map:
            raise ValueError("The classifier and the base model must share one feature map")
        weight_name = clf.tape.params[0]
        W = clf.params[weight_name]
        if len(clf.tape.params) > 1:
            raise ValueError("Linear scores carry their offsets in the classifier biases")
        models.extend(
            dataclasses.replace(base, theta=base.theta + W[k - 1], log_z=log_z(k))
            for k in range(1, clf.K)
        )
        return models
    if clf.feature_map is not None or clf.input_name != base.input_name:
        raise ValueError("Network classifiers must read the same input as the base model")
    for k in range(1, clf.K):
        merged = stack_outputs(
            [base.tape, select_output(clf.tape, k - 1)], prefixes=("base/", "head/")
        )
        builder = TapeBuilder(merged.nodes)
        score = builder.add(builder.select(merged.output, 0), builder.select(merged.output, 1))
        params = {
            **{f"base/{name}": value for name, value in base.theta.items()},
            **{f"head/{name}": value for name, value in clf.params.items()},
        }
        models.append(
            dataclasses.replace(
                base, tape=builder.build(score), theta=params, log_z=log_z(k)
            )
        )
    return models

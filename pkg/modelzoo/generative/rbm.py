"""Restricted Boltzmann machines with exact computations in the enumerable regime.

Binary visible units use the joint `p(x, h) ∝ exp(xᵀWh + bᵀx + cᵀh)`. Gaussian
visible units use `p(x, h) ∝ exp(-‖x - b‖²/2σ² + xᵀWh/σ² + cᵀh)`, so that
`x | h ~ N(b + Wh, σ²I)`. Hidden units are always binary.
"""

from __future__ import annotations

import dataclasses
import math
from typing import TYPE_CHECKING, Literal

import numpy as np
from scipy import optimize, special

from modelzoo.oracle import Domain
from modelzoo.optim import TrainConfig
from modelzoo.utilities import logger, make_rng

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.types import Array, Metrics, Params

MAX_UNITS = 24


class RBMSizeError(ValueError):
    def __init__(self, p: int, d: int) -> None:
        super().__init__(
            f"Exact RBM computations need p + d <= {MAX_UNITS}, got p={p}, d={d}"
        )
        self.p = p
        self.d = d
        self.bound = MAX_UNITS


@dataclasses.dataclass(frozen=True)
class RBMModel:
    W: Array
    b: Array | None = None
    c: Array | None = None
    mode: Literal["binary", "gaussian"] = "binary"
    sigma2: float = 1.0

    def __post_init__(self) -> None:
        if self.W.ndim != 2 or not np.all(np.isfinite(self.W)):
            raise ValueError("RBM weights must be a finite p×d matrix")
        if self.mode not in ("binary", "gaussian"):
            raise ValueError(f"Unknown visible mode {self.mode!r}")
        if self.sigma2 <= 0:
            raise ValueError("Visible variance must be positive")

    @property
    def p(self) -> int:
        return int(self.W.shape[0])

    @property
    def d(self) -> int:
        return int(self.W.shape[1])

    @property
    def visible_bias(self) -> Array:
        return np.zeros(self.p) if self.b is None else self.b

    @property
    def hidden_bias(self) -> Array:
        return np.zeros(self.d) if self.c is None else self.c

    @property
    def _scale(self) -> float:
        return 1.0 / self.sigma2 if self.mode == "gaussian" else 1.0

    def hidden_probs(self, X: ArrayLike) -> Array:
        """`Pr(h_k = 1 | x)`: independent logistic regressions on `x`."""
        x = np.asarray(X, dtype=np.float64)
        return special.expit(self.hidden_bias + self._scale * (x @ self.W))

    def visible_mean(self, h: ArrayLike) -> Array:
        """`Pr(x_j = 1 | h)` for binary units, `E[x | h]` for Gaussian units."""
        a = self.visible_bias + np.asarray(h, dtype=np.float64) @ self.W.T
        return special.expit(a) if self.mode == "binary" else a

    def sample_hidden(self, X: ArrayLike, rng: np.random.Generator) -> Array:
        probs = self.hidden_probs(X)
        return (rng.random(probs.shape) < probs).astype(np.float64)

    def sample_visible(self, h: ArrayLike, rng: np.random.Generator) -> Array:
        mean = self.visible_mean(h)
        if self.mode == "binary":
            return (rng.random(mean.shape) < mean).astype(np.float64)
        return mean + math.sqrt(self.sigma2) * rng.standard_normal(mean.shape)

    def gibbs_step(self, X: ArrayLike, rng: np.random.Generator) -> tuple[Array, Array]:
        """One sweep `h ~ p(h | x)`, then `x ~ p(x | h)`. Returns the new `(x, h)`."""
        h = self.sample_hidden(X, rng)
        return self.sample_visible(h, rng), h

    def neg_free_energy(self, X: ArrayLike) -> Array:
        """`log Σ_h exp(-E(x, h))` for each row of `X`."""
        x = np.asarray(X, dtype=np.float64)
        hidden = np.sum(np.logaddexp(0.0, self.hidden_bias + self._scale * (x @ self.W)), axis=-1)
        if self.mode == "binary":
            return x @ self.visible_bias + hidden
        offset = x - self.visible_bias
        return -np.sum(offset * offset, axis=-1) / (2 * self.sigma2) + hidden


def _check_exact(model: RBMModel) -> None:
    if model.p + model.d > MAX_UNITS:
        raise RBMSizeError(model.p, model.d)


def _enumerate_visible(model: RBMModel) -> bool:
    return model.mode == "binary" and model.p <= model.d


def _hidden_log_weights(model: RBMModel, H: Array) -> Array:
    """`log Σ_x exp(-E(x, h))` for every hidden configuration `h` (row of `H`)."""
    b, c = model.visible_bias, model.hidden_bias
    if model.mode == "binary":
        return H @ c + np.sum(np.logaddexp(0.0, b + H @ model.W.T), axis=1)
    mean = b + H @ model.W.T
    quadratic = (np.sum(mean * mean, axis=1) - float(b @ b)) / (2 * model.sigma2)
    return H @ c + quadratic + 0.5 * model.p * math.log(2 * math.pi * model.sigma2)


def exact_logz(model: RBMModel) -> float:
    """Log partition function, summing one layer analytically and enumerating the other."""
    _check_exact(model)
    if _enumerate_visible(model):
        states = Domain.binary(model.p).states
        return float(special.logsumexp(model.neg_free_energy(states)))
    states = Domain.binary(model.d).states
    return float(special.logsumexp(_hidden_log_weights(model, states)))


def log_likelihood(model: RBMModel, data: ArrayLike) -> float:
    """Mean exact log-likelihood of the rows of `data`."""
    return float(np.mean(model.neg_free_energy(data)) - exact_logz(model))


def _model_expectations(model: RBMModel) -> tuple[Array, Array, Array]:
    """Exact `E[x hᵀ]`, `E[x]`, `E[h]` under the model."""
    _check_exact(model)
    if _enumerate_visible(model):
        X = Domain.binary(model.p).states
        weights = np.exp(model.neg_free_energy(X) - special.logsumexp(model.neg_free_energy(X)))
        h = model.hidden_probs(X)
        return (X * weights[:, None]).T @ h, weights @ X, weights @ h
    H = Domain.binary(model.d).states
    log_w = _hidden_log_weights(model, H)
    weights = np.exp(log_w - special.logsumexp(log_w))
    x = model.visible_mean(H)
    return (x * weights[:, None]).T @ H, weights @ x, weights @ H


def _data_expectations(model: RBMModel, X: Array) -> tuple[Array, Array, Array]:
    h = model.hidden_probs(X)
    n = len(X)
    return X.T @ h / n, X.mean(axis=0), h.mean(axis=0)


def _as_params(model: RBMModel, xh: Array, x: Array, h: Array) -> Params:
    scale = model._scale
    return {"W": scale * xh, "b": scale * x, "c": h}


def expectation_gap(model: RBMModel, data: ArrayLike) -> Array:
    """`E_data[x hᵀ] - E_model[x hᵀ]`, with hidden units averaged out exactly."""
    X = np.asarray(data, dtype=np.float64)
    return _data_expectations(model, X)[0] - _model_expectations(model)[0]


def exact_gradient(model: RBMModel, data: ArrayLike) -> Params:
    """Exact gradient of the mean log-likelihood with respect to `W`, `b` and `c`."""
    X = np.asarray(data, dtype=np.float64)
    data_xh, data_x, data_h = _data_expectations(model, X)
    model_xh, model_x, model_h = _model_expectations(model)
    return _as_params(model, data_xh - model_xh, data_x - model_x, data_h - model_h)


def cd_gradient(
    model: RBMModel, data: ArrayLike, k: int, rng: np.random.Generator
) -> Params:
    """Contrastive-divergence estimate: `k` Gibbs sweeps started at the data."""
    if k < 1:
        raise ValueError(f"CD needs at least one Gibbs sweep, got {k}")
    X = np.asarray(data, dtype=np.float64)
    negative = X
    for _ in range(k):
        negative, _ = model.gibbs_step(negative, rng)
    data_xh, data_x, data_h = _data_expectations(model, X)
    model_xh, model_x, model_h = _data_expectations(model, negative)
    return _as_params(model, data_xh - model_xh, data_x - model_x, data_h - model_h)


def sample_exact(model: RBMModel, n: int, rng: np.random.Generator) -> Array:
    """Independent exact draws of `x` from the model."""
    _check_exact(model)
    if model.mode == "binary" and model.p <= 20:
        X = Domain.binary(model.p).states
        log_p = model.neg_free_energy(X)
        probs = np.exp(log_p - special.logsumexp(log_p))
        return X[rng.choice(len(X), size=n, p=probs / probs.sum())]
    H = Domain.binary(model.d).states
    log_w = _hidden_log_weights(model, H)
    probs = np.exp(log_w - special.logsumexp(log_w))
    h = H[rng.choice(len(H), size=n, p=probs / probs.sum())]
    return model.sample_visible(h, rng)


def _pack(model: RBMModel) -> Array:
    return np.concatenate([model.W.ravel(), model.visible_bias, model.hidden_bias])


def _unpack(template: RBMModel, flat: Array) -> RBMModel:
    p, d = template.p, template.d
    return dataclasses.replace(
        template, W=flat[: p * d].reshape(p, d), b=flat[p * d : p * d + p], c=flat[p * d + p :]
    )


def fit_rbm(
    data: ArrayLike,
    d: int,
    *,
    method: Literal["exact", "cd"] = "exact",
    cd_k: int = 1,
    mode: Literal["binary", "gaussian"] = "binary",
    sigma2: float = 1.0,
    train_cfg: TrainConfig | None = None,
    gtol: float = 1e-10,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> RBMModel:
    """Fit an RBM by exact likelihood (L-BFGS on the exact gradient) or by CD-k ascent."""
    X = np.asarray(data, dtype=np.float64)
    rng = make_rng(rng)
    model = RBMModel(0.01 * rng.standard_normal((X.shape[1], d)), mode=mode, sigma2=sigma2)
    model = dataclasses.replace(model, b=model.visible_bias, c=model.hidden_bias)
    if method == "exact":
        _check_exact(model)

        def objective(flat: Array) -> tuple[float, Array]:
            current = _unpack(model, flat)
            grad = exact_gradient(current, X)
            packed = np.concatenate([grad["W"].ravel(), grad["b"], grad["c"]])
            return -log_likelihood(current, X), -packed

        result = optimize.minimize(
            objective,
            _pack(model),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": 5000, "gtol": gtol, "ftol": 1e-15},
        )
        model = _unpack(model, result.x)
        if metrics is not None:
            metrics.append({"iteration": float(result.nit), "log_likelihood": -float(result.fun)})
        logger.info(
            f"modelzoo fit_rbm exact finished after {result.nit} iterations: {result.message}"
        )
        return model
    if method != "cd":
        raise ValueError(f"Unknown RBM fitting method {method!r}; expected exact or cd")
    cfg = train_cfg or TrainConfig(epochs=200, batch_size=min(len(X), 100), learning_rate=0.05)
    iteration = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), cfg.batch_size):
            grad = cd_gradient(model, X[order[start : start + cfg.batch_size]], cd_k, rng)
            rate = cfg.rate(iteration)
            model = dataclasses.replace(
                model,
                W=model.W + rate * grad["W"],
                b=model.visible_bias + rate * grad["b"],
                c=model.hidden_bias + rate * grad["c"],
            )
            iteration += 1
        if metrics is not None:
            row = {"epoch": float(epoch)}
            if model.p + model.d <= MAX_UNITS:
                row["log_likelihood"] = log_likelihood(model, X)
            metrics.append(row)
    return model

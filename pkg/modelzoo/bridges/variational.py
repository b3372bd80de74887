"""Variational auto-encoders: a generator paired with a diagonal Gaussian inference network."""

from __future__ import annotations

import dataclasses
import math
from typing import TYPE_CHECKING, Literal, NamedTuple

import numpy as np
from scipy import linalg

from modelzoo.nets import backprop, evaluate, linear_net
from modelzoo.optim import TrainConfig, make_optimizer
from modelzoo.tape import ShapeError, Tape
from modelzoo.utilities import logger, make_rng

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.generative.generator import GeneratorModel
    from modelzoo.generative.linear import FactorAnalysisModel
    from modelzoo.types import Array, Metrics, Params

Estimator = Literal["analytic-kl", "joint"]

COLLAPSE_SIGMA = 1e-4


@dataclasses.dataclass(frozen=True)
class InferenceModel:
    """Encoder whose tape outputs `[μ_φ(X) | log σ²_φ(X)]`, shape `(n, 2d)`."""

    tape: Tape
    phi: Params
    latent_dim: int
    input_name: str = "x"

    def __post_init__(self) -> None:
        if self.latent_dim < 1:
            raise ValueError("Inference networks need latent_dim >= 1")
        missing = set(self.tape.params) - set(self.phi)
        if missing:
            raise ValueError(f"Parameters {sorted(missing)} are not bound")

    def with_phi(self, phi: Params) -> InferenceModel:
        return dataclasses.replace(self, phi=phi)

    def _split(self, out: Array) -> tuple[Array, Array]:
        if out.ndim != 2 or out.shape[1] != 2 * self.latent_dim:
            raise ShapeError(
                f"encoder returned {out.shape}, expected (n, {2 * self.latent_dim})",
                self.tape.output,
                self.tape.nodes[self.tape.output].op,
            )
        return out[:, : self.latent_dim], out[:, self.latent_dim :]

    def encode(self, X: ArrayLike) -> tuple[Array, Array]:
        """Posterior means and log-variances."""
        out = evaluate(self.tape, self.phi, X, input_name=self.input_name)
        return self._split(out)

    def log_density(self, h: Array, X: ArrayLike) -> Array:
        """`log ρ_φ(h_i | X_i)` for each row."""
        mu, log_var = self.encode(X)
        z = (h - mu) ** 2 / np.exp(log_var)
        return -0.5 * np.sum(z + log_var + math.log(2 * math.pi), axis=1)


def encoder_from_factor_analysis(model: FactorAnalysisModel) -> InferenceModel:
    """Linear encoder returning the exact factor-analysis posterior.

    The posterior covariance `σ²(WᵀW + σ²I)⁻¹` is diagonal only when the columns
    of `W` are orthogonal; otherwise the encoder keeps its diagonal.
    """
    precision = model.W.T @ model.W + model.sigma2 * np.eye(model.d)
    gain = linalg.solve(precision, model.W.T, assume_a="pos")
    covariance = model.sigma2 * linalg.inv(precision)
    weight = np.vstack([gain, np.zeros((model.d, model.p))])
    bias = np.concatenate([-gain @ model.offset, np.log(np.diag(covariance))])
    tape, phi = linear_net(weight, bias)
    return InferenceModel(tape, phi, model.d)


class ElboResult(NamedTuple):
    """Mean ELBO per example, its parts and its ascent gradients."""

    value: float
    reconstruction: float
    kl: float
    std_error: float
    grad_alpha: Params
    grad_phi: Params
    grad_log_sigma2: float


def vae_elbo(
    gen: GeneratorModel,
    inf: InferenceModel,
    X: ArrayLike,
    rng: np.random.Generator,
    mc_samples: int = 1,
    *,
    estimator: Estimator = "analytic-kl",
) -> ElboResult:
    """Monte Carlo ELBO with reparametrized draws `h = μ + σ ⊙ ε`.
    ---

    With `analytic-kl` the reconstruction term `E log q_α(X|h)` is sampled and
    the KL to the `N(0, I)` prior is exact. With `joint` every draw scores
    `log q_α(X, h) - log ρ_φ(h|X)`, which has zero variance when the encoder is
    the exact posterior. `kl` is reported as the sampled or exact KL accordingly.
    Gradients flow through the reparametrization by backward passes through the
    decoder and then the encoder.
    """
    if inf.latent_dim != gen.latent_dim:
        raise ShapeError(
            f"encoder has {inf.latent_dim} latent dimensions, generator has {gen.latent_dim}"
        )
    if mc_samples < 1:
        raise ValueError("Need at least one Monte Carlo sample")
    x = np.asarray(X, dtype=np.float64)
    n, d = len(x), gen.latent_dim
    p = int(np.prod(x.shape[1:]))
    axes = tuple(range(1, x.ndim))
    encoded = evaluate(inf.tape, inf.phi, x, input_name=inf.input_name)
    mu, log_var = inf._split(encoded)
    sigma = np.exp(0.5 * log_var)
    count = n * mc_samples
    grad_mu = np.zeros_like(mu)
    grad_log_var = np.zeros_like(log_var)
    grad_alpha: Params = {name: np.zeros_like(value) for name, value in gen.alpha.items()}
    grad_log_sigma2 = 0.0
    values = np.empty((mc_samples, n))
    reconstruction = 0.0
    log_norm = 0.5 * p * math.log(2 * math.pi * gen.sigma2)
    for m in range(mc_samples):
        eps = rng.standard_normal((n, d))
        h = mu + sigma * eps
        residual: list[Array] = []

        def cotangent(out: Array) -> Array:
            residual.append(x - out)
            return (x - out) / (gen.sigma2 * count)

        _, grad_h, grads = gen.pullback(h, cotangent)
        squares = np.sum(residual[0] ** 2, axis=axes)
        log_lik = -squares / (2 * gen.sigma2) - log_norm
        reconstruction += float(log_lik.sum())
        grad_log_sigma2 += float(np.sum(squares / (2 * gen.sigma2) - 0.5 * p)) / count
        for name, grad in grads.items():
            grad_alpha[name] += grad
        if estimator == "joint":
            # log q(h) - log ρ(h|X) with h = μ + σε, dropping the cancelling 2π terms
            values[m] = log_lik - 0.5 * np.sum(h * h, axis=1) + 0.5 * np.sum(
                eps * eps + log_var, axis=1
            )
            grad_h = grad_h - h / count
        else:
            values[m] = log_lik
        grad_mu += grad_h
        grad_log_var += grad_h * eps * sigma / 2
    exact_kl = 0.5 * np.sum(mu * mu + sigma * sigma - 1.0 - log_var, axis=1)
    if estimator == "joint":
        grad_log_var += 0.5 / n
        kl = float(reconstruction / count - values.mean())
    elif estimator == "analytic-kl":
        values -= exact_kl
        grad_mu -= mu / n
        grad_log_var -= 0.5 * (sigma * sigma - 1.0) / n
        kl = float(exact_kl.mean())
    else:
        raise ValueError(f"Unknown ELBO estimator {estimator!r}; expected analytic-kl or joint")
    _, _, grad_phi = backprop(
        inf.tape,
        inf.phi,
        x,
        np.concatenate([grad_mu, grad_log_var], axis=1),
        input_name=inf.input_name,
    )
    spread = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return ElboResult(
        float(values.mean()),
        reconstruction / count,
        kl,
        spread / math.sqrt(values.size),
        grad_alpha,
        grad_phi,
        grad_log_sigma2,
    )


def fit_vae(
    data: ArrayLike,
    gen: GeneratorModel,
    inf: InferenceModel,
    train_cfg: TrainConfig,
    *,
    mc_samples: int = 1,
    estimator: Estimator = "analytic-kl",
    learn_sigma2: bool = True,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> tuple[GeneratorModel, InferenceModel]:
    """Joint ascent of the ELBO over the decoder `α`, the encoder `φ` and optionally `log σ²`.
    ---

    Metrics rows carry `epoch`, `elbo`, `reconstruction`, `kl` and `sigma_mean`,
    the mean encoder standard deviation. A mean below 1e-4 is logged as a
    variance collapse.
    """
    X = np.asarray(data, dtype=np.float64)
    rng = make_rng(rng)
    optimizer = make_optimizer(train_cfg)
    iteration = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(X))
        totals = np.zeros(3)
        for start in range(0, len(X), train_cfg.batch_size):
            index = order[start : start + train_cfg.batch_size]
            result = vae_elbo(gen, inf, X[index], rng, mc_samples, estimator=estimator)
            totals += len(index) * np.array([result.value, result.reconstruction, result.kl])
            params = {
                **{f"alpha/{name}": value for name, value in gen.alpha.items()},
                **{f"phi/{name}": value for name, value in inf.phi.items()},
                "log_sigma2": np.array(math.log(gen.sigma2)),
            }
            direction = {
                **{f"alpha/{name}": grad for name, grad in result.grad_alpha.items()},
                **{f"phi/{name}": grad for name, grad in result.grad_phi.items()},
            }
            if learn_sigma2:
                direction["log_sigma2"] = np.array(result.grad_log_sigma2)
            stepped = optimizer.step(params, direction, train_cfg.rate(iteration))
            gen = dataclasses.replace(
                gen.with_alpha({name: stepped[f"alpha/{name}"] for name in gen.alpha}),
                sigma2=float(np.exp(stepped["log_sigma2"])),
            )
            inf = inf.with_phi({name: stepped[f"phi/{name}"] for name in inf.phi})
            iteration += 1
        elbo, reconstruction, kl = totals / len(X)
        _, log_var = inf.encode(X)
        sigma_mean = float(np.exp(0.5 * log_var).mean())
        if sigma_mean < COLLAPSE_SIGMA:
            logger.warning(
                f"modelzoo fit_vae encoder variance collapsed at epoch {epoch}: "
                f"mean sigma {sigma_mean:.3g}"
            )
        if metrics is not None:
            metrics.append(
                {
                    "epoch": float(epoch),
                    "elbo": float(elbo),
                    "reconstruction": float(reconstruction),
                    "kl": float(kl),
                    "sigma_mean": sigma_mean,
                }
            )
        if epoch % train_cfg.log_every == 0:
            logger.info(
                f"modelzoo fit_vae epoch {epoch}: elbo={elbo:.5g} kl={kl:.4g} "
                f"sigma_mean={sigma_mean:.3g}"
            )
    return gen, inf

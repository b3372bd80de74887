"""Adversarial contrastive divergence and the divergence triangle.
---

Three networks play: an energy-based model `p_θ(X) ∝ exp(-U_θ(X))`, a generator
`q_α(h, X) = N(h; 0, I) N(X; g_α(h), σ²I)` and an inference network `ρ_φ(h|X)`.
With the joint distributions `Q_data = P_data ρ_φ`, `Q = q_α` and `P = p_θ ρ_φ`,
the triangle objective is

    KL(Q_data ‖ Q) + KL(Q ‖ P) - KL(Q_data ‖ P)

which `θ` ascends while `α` and `φ` descend it. Every term reduces to
expectations of `U_θ`, `log q_α(X|h)` and `log ρ_φ(h|X)` plus closed-form Gaussian
entropies. `log Z(θ)` cancels between the last two terms; the entropy of the data
is constant. Both are left out of the reported values.

Adversarial contrastive divergence keeps the last two terms only: `θ` contrasts
the data with generator samples, `α` lowers the energy of its samples while the
inference network stands in for the generator's entropy, and `φ` fits the latent
codes of the generator's own samples.
"""

from __future__ import annotations

import math
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from modelzoo.bridges.variational import InferenceModel
from modelzoo.descriptive.deep import DeepEnergyModel, deep_ebm_grads
from modelzoo.generative.generator import GeneratorModel, generator_decode
from modelzoo.nets import backprop, evaluate
from modelzoo.optim import TrainConfig, all_finite, make_optimizer
from modelzoo.tape import ShapeError
from modelzoo.utilities import logger, make_rng

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.optim import Optimizer
    from modelzoo.types import Array, Metrics, Params

Triple = tuple[DeepEnergyModel, GeneratorModel, InferenceModel]


class AdversarialNoise(NamedTuple):
    """Fixed random draws that make the objective a deterministic function of the parameters."""

    data_eps: Array
    prior_h: Array
    output_eps: Array


def draw_noise(
    gen: GeneratorModel, n_data: int, n_gen: int, shape: tuple[int, ...], rng: np.random.Generator
) -> AdversarialNoise:
    d = gen.latent_dim
    return AdversarialNoise(
        rng.standard_normal((n_data, d)),
        rng.standard_normal((n_gen, d)),
        rng.standard_normal((n_gen, *shape)),
    )


class TriangleLoss(NamedTuple):
    """Values of the three KL terms (up to constants) and per-network gradients.

    `grad_theta` ascends the objective, `grad_alpha` and `grad_phi` descend it.
    """

    objective: float
    kl_data_gen: float
    kl_gen_ebm: float
    kl_data_ebm: float
    grad_theta: Params
    grad_alpha: Params
    grad_phi: Params


def _flat_sum(a: Array) -> Array:
    return np.sum(a * a, axis=tuple(range(1, a.ndim)))


def _check(ebm: DeepEnergyModel, gen: GeneratorModel, inf: InferenceModel) -> None:
    if inf.latent_dim != gen.latent_dim:
        raise ShapeError(
            f"encoder has {inf.latent_dim} latent dimensions, generator has {gen.latent_dim}"
        )


def _negate(grads: Params) -> Params:
    return {name: -grad for name, grad in grads.items()}


def _add(a: Params, b: Params) -> Params:
    return {name: a[name] + b[name] for name in a}


def _generator_side(
    ebm: DeepEnergyModel, gen: GeneratorModel, inf: InferenceModel, noise: AdversarialNoise
) -> tuple[float, float, Params, Params, Params, Array]:
    """`KL(Q ‖ P) + log Z`: `E_Q[U(X̂) - log ρ(ĥ|X̂)]` minus the entropy of `q_α(h, X)`.

    Returns the value, the mean energy of the samples, the gradients of the value
    with respect to `θ`, `α` and `φ`, and the samples.
    """
    h = noise.prior_h
    m, d = h.shape
    samples = generator_decode(gen, h) + math.sqrt(gen.sigma2) * noise.output_eps
    p = int(np.prod(samples.shape[1:]))
    energy = deep_ebm_grads(ebm, samples)
    encoded = evaluate(inf.tape, inf.phi, samples, input_name=inf.input_name)
    mu, log_var = inf._split(encoded)
    precision = np.exp(-log_var)
    diff = h - mu
    neg_log_rho = 0.5 * np.sum(diff * diff * precision + log_var + math.log(2 * math.pi), axis=1)
    entropy = 0.5 * p * math.log(2 * math.pi * math.e * gen.sigma2) + 0.5 * d * math.log(
        2 * math.pi * math.e
    )
    value = float(energy.energy.mean() + neg_log_rho.mean() - entropy)
    cotangent = np.concatenate(
        [-diff * precision, 0.5 * (1.0 - diff * diff * precision)], axis=1
    ) / m
    _, grad_samples, grad_phi = backprop(
        inf.tape, inf.phi, samples, cotangent, input_name=inf.input_name
    )
    grad_samples = grad_samples + energy.grad_x / m
    _, _, grad_alpha = gen.pullback(h, lambda o: grad_samples)
    return (
        value,
        float(energy.energy.mean()),
        _negate(energy.score_grads),
        grad_alpha,
        grad_phi,
        samples,
    )


def _data_side(
    gen: GeneratorModel, inf: InferenceModel, X: Array, noise: AdversarialNoise
) -> tuple[float, Params, Params]:
    """`KL(Q_data ‖ Q) + H(P_data)`: `E[log ρ(h|X) - log q(h, X)]` with `h ~ ρ(·|X)`."""
    n = len(X)
    p = int(np.prod(X.shape[1:]))
    encoded = evaluate(inf.tape, inf.phi, X, input_name=inf.input_name)
    mu, log_var = inf._split(encoded)
    sigma = np.exp(0.5 * log_var)
    eps = noise.data_eps
    h = mu + sigma * eps
    residual: list[Array] = []

    def cotangent(out: Array) -> Array:
        residual.append(X - out)
        return -(X - out) / (gen.sigma2 * n)

    _, grad_h, grad_alpha = gen.pullback(h, cotangent)
    value = float(
        np.mean(
            -0.5 * np.sum(eps * eps + log_var, axis=1)
            + 0.5 * np.sum(h * h, axis=1)
            + _flat_sum(residual[0]) / (2 * gen.sigma2)
        )
        + 0.5 * p * math.log(2 * math.pi * gen.sigma2)
    )
    grad_h = grad_h + h / n
    cotangent_enc = np.concatenate([grad_h, grad_h * eps * sigma / 2 - 0.5 / n], axis=1)
    _, _, grad_phi = backprop(inf.tape, inf.phi, X, cotangent_enc, input_name=inf.input_name)
    return value, grad_alpha, grad_phi


def triangle_loss(
    ebm: DeepEnergyModel,
    gen: GeneratorModel,
    inf: InferenceModel,
    batch: ArrayLike,
    noise: AdversarialNoise,
) -> TriangleLoss:
    """The triangle objective on one batch, deterministic given `noise`."""
    _check(ebm, gen, inf)
    X = np.asarray(batch, dtype=np.float64)
    kl_data_gen, alpha_data, phi_data = _data_side(gen, inf, X, noise)
    kl_gen_ebm, _, theta_gen, alpha_gen, phi_gen, _ = _generator_side(ebm, gen, inf, noise)
    observed = deep_ebm_grads(ebm, X)
    kl_data_ebm = float(observed.energy.mean())
    # d/dθ of -E_data[U] is the mean observed score gradient
    grad_theta = _add(theta_gen, observed.score_grads)
    return TriangleLoss(
        kl_data_gen + kl_gen_ebm - kl_data_ebm,
        kl_data_gen,
        kl_gen_ebm,
        kl_data_ebm,
        grad_theta,
        _add(alpha_data, alpha_gen),
        _add(phi_data, phi_gen),
    )


class AcdGradients(NamedTuple):
    """Update directions for one adversarial contrastive divergence cycle.

    `theta` ascends `E_gen[U] - E_data[U]`; `alpha` and `phi` are descent
    gradients of `E_gen[U] - E_gen[log ρ]` and `-E_gen[log ρ]`.
    """

    theta: Params
    alpha: Params
    phi: Params
    energy_gap: float
    value: float


def acd_gradients(
    ebm: DeepEnergyModel,
    gen: GeneratorModel,
    inf: InferenceModel,
    batch: ArrayLike,
    noise: AdversarialNoise | None = None,
    rng: np.random.Generator | None = None,
) -> AcdGradients:
    _check(ebm, gen, inf)
    X = np.asarray(batch, dtype=np.float64)
    if noise is None:
        noise = draw_noise(gen, len(X), len(X), X.shape[1:], make_rng(rng))
    value, gen_energy, theta_gen, alpha, phi, _ = _generator_side(ebm, gen, inf, noise)
    observed = deep_ebm_grads(ebm, X)
    gap = gen_energy - float(observed.energy.mean())
    return AcdGradients(_add(theta_gen, observed.score_grads), alpha, phi, gap, value)


class Players:
    """One optimizer per network plus a shared learning-rate scale, halved on failures."""

    __slots__ = ("theta", "alpha", "phi", "scale")

    def __init__(self, train_cfg: TrainConfig) -> None:
        self.theta: Optimizer = make_optimizer(train_cfg)
        self.alpha: Optimizer = make_optimizer(train_cfg)
        self.phi: Optimizer = make_optimizer(train_cfg)
        self.scale = 1.0

    def apply(
        self,
        triple: Triple,
        directions: tuple[Params, Params, Params],
        rate: float,
    ) -> Triple:
        ebm, gen, inf = triple
        theta, alpha, phi = directions
        if not (all_finite(theta) and all_finite(alpha) and all_finite(phi)):
            self.scale /= 2
            logger.warning(
                f"modelzoo adversarial cycle skipped on non-finite gradients, "
                f"learning rate scale now {self.scale:.4g}"
            )
            return triple
        step = self.scale * rate
        return (
            ebm.with_theta(self.theta.step(ebm.theta, theta, step)),
            gen.with_alpha(self.alpha.step(gen.alpha, _negate(alpha), step)),
            inf.with_phi(self.phi.step(inf.phi, _negate(phi), step)),
        )


def acd_step(
    ebm: DeepEnergyModel,
    gen: GeneratorModel,
    inf: InferenceModel,
    batch: ArrayLike,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    *,
    players: Players | None = None,
    iteration: int = 0,
) -> Triple:
    """One minimax cycle: a single step for each of `θ`, `α` and `φ`."""
    players = players or Players(train_cfg)
    try:
        grads = acd_gradients(ebm, gen, inf, batch, rng=rng)
    except FloatingPointError as e:
        logger.warning(f"modelzoo acd_step skipped: {e.__class__.__qualname__} {e}")
        players.scale /= 2
        return ebm, gen, inf
    return players.apply(
        (ebm, gen, inf), (grads.theta, grads.alpha, grads.phi), train_cfg.rate(iteration)
    )


def _fit(
    data: ArrayLike,
    triple: Triple,
    train_cfg: TrainConfig,
    rng: np.random.Generator | None,
    metrics: Metrics | None,
    *,
    triangle: bool,
) -> Triple:
    X = np.asarray(data, dtype=np.float64)
    rng = make_rng(rng)
    players = Players(train_cfg)
    name = "triangle_fit" if triangle else "acd_fit"
    for iteration in range(train_cfg.epochs):
        index = rng.choice(len(X), size=min(train_cfg.batch_size, len(X)), replace=False)
        batch = X[index]
        ebm, gen, inf = triple
        noise = draw_noise(gen, len(batch), len(batch), batch.shape[1:], rng)
        row = {"iteration": float(iteration)}
        try:
            if triangle:
                loss = triangle_loss(ebm, gen, inf, batch, noise)
                directions = (loss.grad_theta, loss.grad_alpha, loss.grad_phi)
                row.update(
                    objective=loss.objective,
                    kl_data_gen=loss.kl_data_gen,
                    kl_gen_ebm=loss.kl_gen_ebm,
                    kl_data_ebm=loss.kl_data_ebm,
                )
            else:
                grads = acd_gradients(ebm, gen, inf, batch, noise)
                directions = (grads.theta, grads.alpha, grads.phi)
                row.update(energy_gap=grads.energy_gap, value=grads.value)
        except FloatingPointError as e:
            logger.warning(f"modelzoo {name} skipped iteration {iteration}: {e}")
            players.scale /= 2
            continue
        triple = players.apply(triple, directions, train_cfg.rate(iteration))
        ebm, gen, inf = triple
        mu, _ = inf.encode(batch)
        row["reconstruction_error"] = float(np.mean((batch - generator_decode(gen, mu)) ** 2))
        if metrics is not None:
            metrics.append(row)
        if iteration % train_cfg.log_every == 0:
            summary = " ".join(f"{key}={value:.4g}" for key, value in row.items())
            logger.info(f"modelzoo {name} {summary}")
    return triple


def acd_fit(
    data: ArrayLike,
    ebm: DeepEnergyModel,
    gen: GeneratorModel,
    inf: InferenceModel,
    train_cfg: TrainConfig,
    *,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> Triple:
    """Adversarial contrastive divergence, one mini-batch cycle per iteration.

    Metrics rows carry `iteration`, `energy_gap`, `value` and `reconstruction_error`.
    """
    return _fit(data, (ebm, gen, inf), train_cfg, rng, metrics, triangle=False)


def triangle_fit(
    data: ArrayLike,
    ebm: DeepEnergyModel,
    gen: GeneratorModel,
    inf: InferenceModel,
    train_cfg: TrainConfig,
    *,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> Triple:
    """Divergence-triangle learning by alternating one gradient step per network.

    Metrics rows carry `iteration`, `objective`, the three KL components and
    `reconstruction_error` (encoder mean decoded, per coordinate).
    """
    return _fit(data, (ebm, gen, inf), train_cfg, rng, metrics, triangle=True)

"""Cooperative learning: the generator proposes, Langevin on the energy revises, both learn."""

from __future__ import annotations

from typing import TYPE_CHECKING, Literal

import numpy as np

from modelzoo.descriptive.deep import DeepEnergyModel, descriptive_update
from modelzoo.evaluation import mode_coverage
from modelzoo.generative.generator import (
    GeneratorModel,
    generator_decode,
    generator_gradient,
    infer_latent,
)
from modelzoo.mcmc import LangevinConfig, gaussian_sampler, run_chains_with_restart
from modelzoo.optim import TrainConfig, make_optimizer
from modelzoo.utilities import logger, make_rng

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.types import Metrics

UpdateOrder = Literal["theta-first", "alpha-first"]


def coop_fit(
    data: ArrayLike,
    ebm: DeepEnergyModel,
    gen: GeneratorModel,
    lang_cfg: LangevinConfig,
    train_cfg: TrainConfig,
    *,
    rigorous: bool = False,
    inference_cfg: LangevinConfig | None = None,
    update_order: UpdateOrder = "theta-first",
    freeze_ebm: bool = False,
    centers: ArrayLike | None = None,
    coverage_samples: int = 1000,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> tuple[DeepEnergyModel, GeneratorModel]:
    """Cooperative training of an energy-based model and a generator.
    ---

    Each iteration draws `ĥ ~ N(0, I)`, decodes `X̂ = g_α(ĥ)`, revises `X̂` into
    `X̃` by `lang_cfg.steps` Langevin steps on `U_θ`, then

    * updates `θ` by the descriptive rule with `X̃` as the synthesized examples,
    * teaches the generator by one regression step of `X̃` on `ĥ`. In
      `rigorous` mode the latents are first re-inferred from `X̃` by Langevin
      started at `ĥ`, and `X̃` is regressed on those.

    With `update_order="alpha-first"` the generator is taught before the energy
    update. Either way both updates learn from the same revised `X̃`.
    `freeze_ebm` keeps `θ` fixed, leaving pure MCMC teaching toward the
    given energy. Metrics rows carry `iteration`, `energy_gap`,
    `reconstruction_error` and, when `centers` are given, `mode_coverage`
    (centers receiving at least 5% of `coverage_samples` generator draws).
    """
    X = np.asarray(data, dtype=np.float64)
    if update_order not in ("theta-first", "alpha-first"):
        raise ValueError(f"Unknown update order {update_order!r}")
    rng = make_rng(lang_cfg.rng_seed) if rng is None else rng
    inference_cfg = inference_cfg or LangevinConfig.generator_inference()
    cold = gaussian_sampler(X.shape[1:], ebm.sigma2)
    theta_optimizer = make_optimizer(train_cfg)
    alpha_optimizer = make_optimizer(train_cfg)
    for iteration in range(train_cfg.epochs):
        index = rng.choice(len(X), size=min(train_cfg.batch_size, len(X)), replace=False)
        batch = X[index]
        h = rng.standard_normal((train_cfg.n_chains, gen.latent_dim))
        proposals = generator_decode(gen, h)
        revised = run_chains_with_restart(
            proposals, ebm.energy_and_grad, lang_cfg, rng, cold
        ).points
        rate = train_cfg.rate(iteration)

        def teach(current: GeneratorModel) -> tuple[GeneratorModel, float]:
            latents = h
            if rigorous:
                latents = infer_latent(current, revised, inference_cfg, rng, init="warm", h0=h)
            grads, residual = generator_gradient(current, revised, latents)
            taught = current.with_alpha(alpha_optimizer.step(current.alpha, grads, rate))
            return taught, float(np.mean(residual**2))

        if update_order == "alpha-first":
            gen, reconstruction = teach(gen)
        direction, value, _ = descriptive_update(ebm, batch, revised)
        if not freeze_ebm:
            ebm = ebm.with_theta(theta_optimizer.step(ebm.theta, direction, rate))
        if update_order == "theta-first":
            gen, reconstruction = teach(gen)
        row = {
            "iteration": float(iteration),
            "energy_gap": value,
            "reconstruction_error": reconstruction,
        }
        if centers is not None:
            draws = generator_decode(gen, rng.standard_normal((coverage_samples, gen.latent_dim)))
            row["mode_coverage"] = float(mode_coverage(draws, centers).covered)
        if metrics is not None:
            metrics.append(row)
        if iteration % train_cfg.log_every == 0:
            summary = " ".join(f"{key}={value:.4g}" for key, value in row.items())
            logger.info(f"modelzoo coop_fit {summary}")
    return ebm, gen

"""Deep energy-based models `U(X) = ‖X‖²/2σ² - f_θ(X)` with a network score `f_θ`."""

from __future__ import annotations

import dataclasses
from collections.abc import Callable
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from modelzoo.mcmc import ChainPool, LangevinConfig, gaussian_sampler, run_chains_with_restart
from modelzoo.nets import backprop, evaluate
from modelzoo.optim import TrainConfig, make_optimizer, norm
from modelzoo.tape import ShapeError, Tape
from modelzoo.utilities import logger, make_rng

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.types import Array, InitMode, Metrics, Params


@dataclasses.dataclass(frozen=True)
class DeepEnergyModel:
    """Energy with a Gaussian reference `N(0, σ²I)` tilted by a scalar network score."""

    tape: Tape
    theta: Params
    sigma2: float = 1.0
    input_name: str = "x"
    log_z: float | None = None

    def __post_init__(self) -> None:
        if self.sigma2 <= 0:
            raise ValueError(f"Reference variance must be positive, got {self.sigma2}")
        missing = set(self.tape.params) - set(self.theta)
        if missing:
            raise ValueError(f"Parameters {sorted(missing)} are not bound")

    def _check(self, X: Array, out: Array) -> None:
        if out.shape != (len(X),):
            raise ShapeError(
                f"score network returned {out.shape} for a batch of {len(X)}",
                self.tape.output,
                self.tape.nodes[self.tape.output].op,
            )

    def score(self, X: ArrayLike) -> Array:
        x = np.asarray(X, dtype=np.float64)
        out = evaluate(self.tape, self.theta, x, input_name=self.input_name)
        self._check(x, out)
        return out

    def energy(self, X: ArrayLike) -> Array:
        x = np.asarray(X, dtype=np.float64)
        squares = np.sum(x * x, axis=tuple(range(1, x.ndim)))
        return squares / (2 * self.sigma2) - self.score(x)

    def energy_and_grad(self, X: Array) -> tuple[Array, Array]:
        energy, grad_x, _ = deep_ebm_grads(self, X)
        return energy, grad_x

    def with_theta(self, theta: Params) -> DeepEnergyModel:
        return dataclasses.replace(self, theta=theta)


class EbmGrads(NamedTuple):
    energy: Array
    grad_x: Array
    score_grads: Params


def deep_ebm_grads(model: DeepEnergyModel, X: ArrayLike) -> EbmGrads:
    """Energies, `∂U/∂X = X/σ² - ∂f/∂X` per example and batch-averaged `∂f/∂θ`."""
    x = np.asarray(X, dtype=np.float64)
    score, grad_f, param_grads = backprop(model.tape, model.theta, x, input_name=model.input_name)
    model._check(x, score)
    squares = np.sum(x * x, axis=tuple(range(1, x.ndim)))
    n = len(x)
    return EbmGrads(
        squares / (2 * model.sigma2) - score,
        x / model.sigma2 - grad_f,
        {name: grad / n for name, grad in param_grads.items()},
    )


def _batches(n: int, size: int, rng: np.random.Generator) -> list[Array]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def descriptive_update(
    model: DeepEnergyModel, observed: Array, synthesized: Array
) -> tuple[Params, float, float]:
    """Ascent direction `mean ∂f/∂θ(observed) - mean ∂f/∂θ(synthesized)`.

    Also returns the value function `mean U(synthesized) - mean U(observed)` and
    the norm of the direction.
    """
    obs = deep_ebm_grads(model, observed)
    syn = deep_ebm_grads(model, synthesized)
    direction = {name: obs.score_grads[name] - syn.score_grads[name] for name in model.theta}
    value = float(syn.energy.mean() - obs.energy.mean())
    return direction, value, norm(direction)


def fit_deep_ebm(
    data: ArrayLike,
    model: DeepEnergyModel,
    lang_cfg: LangevinConfig,
    train_cfg: TrainConfig,
    *,
    init_mode: InitMode = "persistent",
    generator: Callable[[int, np.random.Generator], Array] | None = None,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> DeepEnergyModel:
    """Contrastive learning of the score network.
    ---

    Each iteration takes a mini-batch, starts chains according to `init_mode`,
    runs `lang_cfg.steps` Langevin steps on the current energy and moves `θ`
    along the difference between the observed and synthesized score gradients.
    Metrics rows carry `iteration`, `value` and `discrepancy`.
    """
    X = np.asarray(data, dtype=np.float64)
    rng = make_rng(lang_cfg.rng_seed) if rng is None else rng
    cold = gaussian_sampler(X.shape[1:], model.sigma2)
    pool = ChainPool(init_mode, cold, generator)
    optimizer = make_optimizer(train_cfg)
    iteration = 0
    for epoch in range(train_cfg.epochs):
        for index in _batches(len(X), train_cfg.batch_size, rng):
            batch = X[index]
            count = len(batch) if init_mode == "cd" else train_cfg.n_chains
            inits = pool.draw(count, rng, observed=batch)
            run = run_chains_with_restart(inits, model.energy_and_grad, lang_cfg, rng, cold)
            pool.update(run.points)
            direction, value, discrepancy = descriptive_update(model, batch, run.points)
            model = model.with_theta(
                optimizer.step(model.theta, direction, train_cfg.rate(iteration))
            )
            if metrics is not None:
                metrics.append(
                    {"iteration": float(iteration), "value": value, "discrepancy": discrepancy}
                )
            if iteration % train_cfg.log_every == 0:
                logger.info(
                    f"modelzoo fit_deep_ebm epoch {epoch} iteration {iteration}: "
                    f"value={value:.4g} discrepancy={discrepancy:.4g}"
                )
            iteration += 1
    return model


def sample_ebm(
    model: DeepEnergyModel,
    shape: tuple[int, ...],
    n: int,
    lang_cfg: LangevinConfig,
    rng: np.random.Generator,
    *,
    inits: Array | None = None,
) -> Array:
    """Langevin samples from reference draws, or from `inits` when given."""
    cold = gaussian_sampler(shape, model.sigma2)
    x = cold(n, rng) if inits is None else inits
    return run_chains_with_restart(x, model.energy_and_grad, lang_cfg, rng, cold).points

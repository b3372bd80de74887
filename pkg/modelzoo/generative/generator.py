"""Generator networks `X = g_α(h) + ε` and alternating back-propagation."""

from __future__ import annotations

import dataclasses
from typing import TYPE_CHECKING, Literal

import numpy as np

from modelzoo.mcmc import LangevinConfig, run_chains
from modelzoo.nets import linear_net
from modelzoo.optim import TrainConfig, make_optimizer
from modelzoo.tape import ShapeError, Tape, forward_arrays, vector_jacobian_product
from modelzoo.utilities import logger, make_rng

if TYPE_CHECKING:
    from collections.abc import Callable

    from numpy.typing import ArrayLike

    from modelzoo.types import Array, EnergyAndGrad, Metrics, Params


@dataclasses.dataclass(frozen=True)
class GeneratorModel:
    """Decoder tape from `h ∈ R^d` to signals, with isotropic output noise `σ²`."""

    tape: Tape
    alpha: Params
    latent_dim: int
    sigma2: float = 0.25
    input_name: str = "h"

    def __post_init__(self) -> None:
        if self.latent_dim < 1 or self.sigma2 <= 0:
            raise ValueError("Generators need latent_dim >= 1 and sigma2 > 0")
        missing = set(self.tape.params) - set(self.alpha)
        if missing:
            raise ValueError(f"Parameters {sorted(missing)} are not bound")

    def with_alpha(self, alpha: Params) -> GeneratorModel:
        return dataclasses.replace(self, alpha=alpha)

    def _leaves(self, h: Array) -> dict[str, Array]:
        if h.shape[-1] != self.latent_dim:
            raise ShapeError(f"latent of shape {h.shape} does not have {self.latent_dim} entries")
        return {**self.alpha, self.input_name: h}

    def pullback(
        self, h: Array, cotangent_fn: Callable[[Array], Array]
    ) -> tuple[Array, Array, Params]:
        """Decode `h`, then pull `cotangent_fn(output)` back to `h` and to `α`."""
        leaves = self._leaves(h)
        values = forward_arrays(self.tape, leaves)
        out = values[self.tape.output]
        grads = vector_jacobian_product(self.tape, leaves, cotangent_fn(out), values=values)
        grad_h = grads.pop(self.input_name)
        return out, grad_h, grads


def linear_decoder(
    W: ArrayLike, bias: ArrayLike | None = None, *, sigma2: float = 0.25
) -> GeneratorModel:
    """`g(h) = W h + bias`: factor analysis written as a generator."""
    weight = np.array(W, dtype=np.float64, ndmin=2)
    tape, params = linear_net(weight, bias, input_name="h")
    return GeneratorModel(tape, params, weight.shape[1], sigma2)


def generator_decode(
    gen: GeneratorModel, h: ArrayLike, rng: np.random.Generator | None = None
) -> Array:
    """`g_α(h)`, plus `N(0, σ²I)` noise when a stream is given."""
    latent = np.asarray(h, dtype=np.float64)
    values = forward_arrays(gen.tape, gen._leaves(latent))
    out = values[gen.tape.output]
    if rng is None:
        return out
    return out + np.sqrt(gen.sigma2) * rng.standard_normal(out.shape)


def interpolate_latents(
    gen: GeneratorModel, h1: ArrayLike, h2: ArrayLike, steps: int = 11
) -> Array:
    """Noiseless decodings of `(1 - t) h1 + t h2` for `steps` evenly spaced `t` in [0, 1]."""
    t = np.linspace(0.0, 1.0, steps)[:, None]
    start, end = np.asarray(h1, dtype=np.float64), np.asarray(h2, dtype=np.float64)
    return generator_decode(gen, (1 - t) * start + t * end)


def latent_energy(gen: GeneratorModel, X: Array) -> EnergyAndGrad:
    """Per-chain posterior energy `‖X_i - g(h_i)‖²/2σ² + ‖h_i‖²/2` and its gradient."""
    flat_axes = tuple(range(1, X.ndim))

    def energy_and_grad(H: Array) -> tuple[Array, Array]:
        residual: list[Array] = []

        def cotangent(out: Array) -> Array:
            residual.append(X - out)
            return -(X - out) / gen.sigma2

        _, grad_h, _ = gen.pullback(H, cotangent)
        r = residual[0]
        energy = np.sum(r * r, axis=flat_axes) / (2 * gen.sigma2) + 0.5 * np.sum(H * H, axis=1)
        return energy, grad_h + H

    return energy_and_grad


def infer_latent(
    gen: GeneratorModel,
    X: ArrayLike,
    lang_cfg: LangevinConfig,
    rng: np.random.Generator,
    *,
    init: Literal["prior", "warm"] = "prior",
    h0: ArrayLike | None = None,
    noise_scale: float = 1.0,
) -> Array:
    """Langevin sampling of `h` from the posterior given each row of `X`.
    ---

    The drift is the gradient of the log posterior,
    `Jᵀ(X - g_α(h)) / σ² - h`, with `J` the decoder Jacobian applied by a
    backward pass. `init="warm"` continues from `h0`; `"prior"` starts from
    fresh `N(0, I)` draws. Chains that diverge are reset to a prior draw.
    """
    x = np.asarray(X, dtype=np.float64)
    if x.ndim < 2:
        x = x[None]
    n = len(x)
    if init == "warm":
        if h0 is None:
            raise ValueError("Warm-started inference needs the current latents h0")
        start = np.array(h0, dtype=np.float64).reshape(n, gen.latent_dim)
    else:
        start = rng.standard_normal((n, gen.latent_dim))
    run = run_chains(start, latent_energy(gen, x), lang_cfg, rng, noise_scale=noise_scale)
    h = run.points
    if run.diverged.any():
        failed = np.flatnonzero(run.diverged)
        logger.warning(
            f"modelzoo latent inference reset {len(failed)} diverged chains to prior draws"
        )
        h = h.copy()
        h[failed] = rng.standard_normal((len(failed), gen.latent_dim))
    return h


def generator_gradient(gen: GeneratorModel, X: Array, H: Array) -> tuple[Params, Array]:
    """`(1/n) Σ (1/σ²) (X_i - g(h_i)) ∂g/∂α` and the residuals."""
    residual: list[Array] = []

    def cotangent(out: Array) -> Array:
        residual.append(X - out)
        return (X - out) / (gen.sigma2 * len(X))

    _, _, grads = gen.pullback(H, cotangent)
    return grads, residual[0]


def fit_generator_abp(
    data: ArrayLike,
    gen: GeneratorModel,
    lang_cfg: LangevinConfig,
    train_cfg: TrainConfig,
    *,
    latents: Array | None = None,
    restart_every: int = 50,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> GeneratorModel:
    """Alternating back-propagation.
    ---

    Every iteration warm-starts Langevin inference of each example's latent
    from its stored value, then regresses the batch on the inferred latents by
    one ascent step on `α`. Latents persist across epochs in `latents`
    (updated in place when given) and are redrawn from the prior every
    `restart_every` epochs. Metrics rows carry `epoch`, `reconstruction_error`
    (mean squared error per coordinate) and `latent_norm_mean`.
    """
    X = np.asarray(data, dtype=np.float64)
    rng = make_rng(lang_cfg.rng_seed) if rng is None else rng
    H = rng.standard_normal((len(X), gen.latent_dim)) if latents is None else latents
    optimizer = make_optimizer(train_cfg)
    iteration = 0
    for epoch in range(train_cfg.epochs):
        if epoch and restart_every and epoch % restart_every == 0:
            logger.warning(f"modelzoo fit_generator_abp redrawing latents at epoch {epoch}")
            H[:] = rng.standard_normal(H.shape)
        order = rng.permutation(len(X))
        squared = 0.0
        for start in range(0, len(X), train_cfg.batch_size):
            index = order[start : start + train_cfg.batch_size]
            H[index] = infer_latent(gen, X[index], lang_cfg, rng, init="warm", h0=H[index])
            grads, residual = generator_gradient(gen, X[index], H[index])
            squared += float(np.sum(residual * residual))
            gen = gen.with_alpha(optimizer.step(gen.alpha, grads, train_cfg.rate(iteration)))
            iteration += 1
        error = squared / X.size
        latent_norm = float(np.linalg.norm(H, axis=1).mean())
        if metrics is not None:
            metrics.append(
                {
                    "epoch": float(epoch),
                    "reconstruction_error": error,
                    "latent_norm_mean": latent_norm,
                }
            )
        if epoch % train_cfg.log_every == 0:
            logger.info(
                f"modelzoo fit_generator_abp epoch {epoch}: "
                f"reconstruction_error={error:.4g} latent_norm_mean={latent_norm:.4g}"
            )
    return gen

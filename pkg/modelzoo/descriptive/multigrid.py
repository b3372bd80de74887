from __future__ import annotations

import dataclasses
from collections.abc import Sequence
from typing import TYPE_CHECKING

import numpy as np

from modelzoo.descriptive.deep import DeepEnergyModel, descriptive_update
from modelzoo.mcmc import LangevinConfig, gaussian_sampler, run_chains_with_restart
from modelzoo.nets import convnet
from modelzoo.optim import TrainConfig, make_optimizer
from modelzoo.utilities import logger, make_rng

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.optim import Optimizer
    from modelzoo.types import Array, Metrics


def _check_grids(size: int, grids: Sequence[int]) -> list[int]:
    levels = [int(g) for g in grids]
    if not levels or any(g < 1 for g in levels):
        raise ValueError(f"Grid sizes must be positive, got {levels}")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"Grid sizes must be strictly increasing, got {levels}")
    if any(b % a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"Each grid size must divide the next, got {levels}")
    if levels[-1] != size:
        raise ValueError(f"Finest grid {levels[-1]} does not match image size {size}")
    return levels


def _block_mean(images: Array, size: int) -> Array:
    n, height, width, channels = images.shape
    f = height // size
    return images.reshape(n, size, f, size, f, channels).mean(axis=(2, 4))


def build_pyramid(image: ArrayLike, grids: Sequence[int]) -> list[Array]:
    """Block averages of a square image at every grid size, coarsest first."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[0] != x.shape[1]:
        raise ValueError(f"Expected a square H×W or H×W×C image, got shape {x.shape}")
    levels = _check_grids(x.shape[0], grids)
    return [_block_mean(x[None], g)[0] for g in levels]


def upsample_nearest(images: Array, factor: int) -> Array:
    return np.repeat(np.repeat(images, factor, axis=-3), factor, axis=-2)


@dataclasses.dataclass(frozen=True)
class GridPyramid:
    """One energy model per grid above 1×1, plus per-channel histograms of the 1×1 means."""

    grids: tuple[int, ...]
    models: tuple[DeepEnergyModel, ...]
    edges: Array
    histogram: Array

    def __post_init__(self) -> None:
        if self.grids[0] != 1:
            raise ValueError("The coarsest grid of a pyramid is 1×1")
        if len(self.models) != len(self.grids) - 1:
            raise ValueError(
                f"{len(self.grids) - 1} grids above 1×1 need as many models, "
                f"got {len(self.models)}"
            )

    @property
    def channels(self) -> int:
        return int(self.histogram.shape[0])

    def seed(self, n: int, rng: np.random.Generator) -> Array:
        """1×1 images drawn from the stored histograms, uniformly within each bin."""
        bins = self.histogram.shape[1]
        seeds = np.empty((n, 1, 1, self.channels))
        for c in range(self.channels):
            index = rng.choice(bins, size=n, p=self.histogram[c])
            low, high = self.edges[index], self.edges[index + 1]
            seeds[:, 0, 0, c] = low + (high - low) * rng.random(n)
        return seeds


def seed_histogram(coarsest: Array, bins: int = 20) -> tuple[Array, Array]:
    """Per-channel histograms of the 1×1 means, on equal bins spanning [-1, 1]."""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    values = np.clip(coarsest.reshape(len(coarsest), -1), -1.0, 1.0)
    counts = np.stack([np.histogram(values[:, c], edges)[0] for c in range(values.shape[1])])
    return edges, counts / counts.sum(axis=1, keepdims=True)


def default_grid_model(
    size: int,
    channels: int,
    rng: np.random.Generator,
    *,
    channel_divisor: int = 8,
    sigma2: float = 1.0,
) -> DeepEnergyModel:
    """Per-grid score network: deeper and strided as the grid grows."""
    base = max(64 // channel_divisor, 2)
    if size <= 4:
        layers = [(base, 3, 1), (2 * base, 3, 1)]
    elif size <= 16:
        layers = [(base, 5, 2), (2 * base, 3, 2)]
    else:
        layers = [(base, 5, 2), (2 * base, 3, 2), (2 * base, 3, 2)]
    tape, params = convnet((size, size, channels), layers, rng)
    return DeepEnergyModel(tape, params, sigma2)


def _synthesize(
    pyramid: GridPyramid, n: int, lang_cfg: LangevinConfig, rng: np.random.Generator
) -> list[Array]:
    x = pyramid.seed(n, rng)
    samples = [x]
    for (coarse, fine), model in zip(zip(pyramid.grids, pyramid.grids[1:]), pyramid.models):
        x = upsample_nearest(x, fine // coarse)
        cold = gaussian_sampler(x.shape[1:], model.sigma2)
        x = run_chains_with_restart(x, model.energy_and_grad, lang_cfg, rng, cold).points
        samples.append(x)
    return samples


def fit_multigrid(
    data: ArrayLike,
    grids: Sequence[int],
    lang_cfg: LangevinConfig,
    train_cfg: TrainConfig,
    *,
    models: Sequence[DeepEnergyModel] | None = None,
    channel_divisor: int = 8,
    rng: np.random.Generator | None = None,
    metrics: Metrics | None = None,
) -> GridPyramid:
    """Multi-grid learning over square images `(n, H, W, C)`.
    ---

    Each iteration synthesizes a batch coarse to fine: 1×1 seeds drawn from the
    histogram are upsampled by nearest-neighbor replication and refined by
    Langevin at every grid, so each grid's sample initializes the next. All grid
    models are then updated from the same iteration's observed and synthesized
    images. Metrics rows carry `iteration` and `discrepancy_<size>` per grid.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    rng = make_rng(lang_cfg.rng_seed) if rng is None else rng
    levels = [int(g) for g in grids]
    if levels[0] != 1:
        levels = [1, *levels]
    levels = _check_grids(X.shape[1], levels)
    observed = {g: _block_mean(X, g) for g in levels}
    edges, histogram = seed_histogram(observed[1])
    if models is None:
        models = [
            default_grid_model(g, X.shape[3], rng, channel_divisor=channel_divisor)
            for g in levels[1:]
        ]
    pyramid = GridPyramid(tuple(levels), tuple(models), edges, histogram)
    optimizers: list[Optimizer] = [make_optimizer(train_cfg) for _ in levels[1:]]
    for iteration in range(train_cfg.epochs):
        index = rng.choice(len(X), size=min(train_cfg.batch_size, len(X)), replace=False)
        synthesized = _synthesize(pyramid, train_cfg.n_chains, lang_cfg, rng)
        updated: list[DeepEnergyModel] = []
        row = {"iteration": float(iteration)}
        for level, (g, model, optimizer) in enumerate(
            zip(levels[1:], pyramid.models, optimizers), start=1
        ):
            direction, _, discrepancy = descriptive_update(
                model, observed[g][index], synthesized[level]
            )
            rate = train_cfg.rate(iteration)
            updated.append(model.with_theta(optimizer.step(model.theta, direction, rate)))
            row[f"discrepancy_{g}"] = discrepancy
        pyramid = dataclasses.replace(pyramid, models=tuple(updated))
        if metrics is not None:
            metrics.append(row)
        if iteration % train_cfg.log_every == 0:
            summary = " ".join(f"{key}={value:.4g}" for key, value in row.items())
            logger.info(f"modelzoo fit_multigrid {summary}")
    return pyramid


def sample_multigrid(
    pyramid: GridPyramid,
    lang_cfg: LangevinConfig,
    rng: np.random.Generator,
    n: int = 1,
) -> Array:
    """Finest-grid images `(n, H, W, C)`, sampled coarse to fine."""
    return _synthesize(pyramid, n, lang_cfg, rng)[-1]

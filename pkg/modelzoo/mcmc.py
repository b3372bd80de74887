"""Langevin dynamics and chain bookkeeping.

Energies are passed as batched callables: given points stacked along a leading
chain axis, they return the energy of every chain and its gradient with respect
to the point. Row `i` always belongs to chain `i`, so a callable may condition
chain `i` on its own observation, as latent inference does. Diverged chains are
evaluated at their last healthy point. All chains advance together, but every
chain draws its noise from its own stream, so a chain's trajectory does not
depend on how many others run beside it.
"""

from __future__ import annotations

import dataclasses
import math
import os
from collections.abc import Callable, Sequence
from typing import TYPE_CHECKING, NamedTuple

import anyio
import numpy as np

from modelzoo.artifacts import write_csv
from modelzoo.utilities import logger, make_rng, split_rng

if TYPE_CHECKING:
    from numpy.typing import ArrayLike

    from modelzoo.types import Array, EnergyAndGrad, InitMode

    Sampler = Callable[[int, np.random.Generator], Array]


class ChainDivergenceError(FloatingPointError):
    def __init__(self, chains: Sequence[int]) -> None:
        super().__init__(f"Chains {list(chains)} diverged again after a cold restart")
        self.chains = tuple(chains)


@dataclasses.dataclass(frozen=True)
class LangevinConfig:
    """Step size `s`, number of steps `l` and the optional Metropolis-Hastings correction."""

    step_size: float = 0.3
    steps: int = 30
    mh_correct: bool = False
    rng_seed: int = 0
    divergence_bound: float = 1e6

    def __post_init__(self) -> None:
        if not self.step_size > 0 or not math.isfinite(self.step_size):
            raise ValueError(f"Langevin step size must be positive, got {self.step_size}")
        if self.steps < 1:
            raise ValueError(f"Langevin needs at least one step, got {self.steps}")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be an unsigned integer")

    @classmethod
    def multigrid(cls, **overrides: object) -> LangevinConfig:
        return cls(**{"step_size": 0.3, "steps": 30, **overrides})  # type: ignore[arg-type]

    @classmethod
    def generator_inference(cls, **overrides: object) -> LangevinConfig:
        return cls(**{"step_size": 0.1, "steps": 10, **overrides})  # type: ignore[arg-type]

    @classmethod
    def cooperative(cls, **overrides: object) -> LangevinConfig:
        return cls(**{"step_size": 0.1, "steps": 10, **overrides})  # type: ignore[arg-type]

    def replace(self, **changes: object) -> LangevinConfig:
        return dataclasses.replace(self, **changes)  # type: ignore[arg-type]


@dataclasses.dataclass(frozen=True)
class ChainState:
    point: Array
    energy: float
    grad: Array
    age: int = 0
    diverged: bool = False

    @classmethod
    def start(cls, point: ArrayLike, energy_and_grad: EnergyAndGrad) -> ChainState:
        x = np.asarray(point, dtype=np.float64)
        u, g = energy_and_grad(x[None])
        return cls(x, float(u[0]), g[0], 0, not _finite(x[None], u, g, math.inf)[0])


class ChainRun(NamedTuple):
    points: Array
    energies: Array
    diverged: Array
    acceptance: Array
    trace_points: Array | None = None
    trace_energies: Array | None = None


def _finite(x: Array, u: Array, g: Array, bound: float) -> Array:
    axes = tuple(range(1, x.ndim))
    return (
        np.isfinite(u)
        & np.all(np.isfinite(g), axis=axes)
        & np.all(np.isfinite(x), axis=axes)
        & np.all(np.abs(x) <= bound, axis=axes)
    )


def _sqnorm(a: Array) -> Array:
    return np.sum(a * a, axis=tuple(range(1, a.ndim)))


def _advance(
    x: Array,
    u: Array,
    g: Array,
    active: Array,
    eps: Array,
    uniforms: Array,
    energy_and_grad: EnergyAndGrad,
    cfg: LangevinConfig,
    noise_scale: float,
) -> tuple[Array, Array, Array, Array, Array]:
    """One batched step. Returns new points, energies, gradients, acceptances and health."""
    s = cfg.step_size
    accepted = np.zeros(len(x), dtype=bool)
    healthy = active.copy()
    idx = np.flatnonzero(active)
    if not len(idx):
        return x, u, g, accepted, healthy
    xa, ga = x[idx], g[idx]
    y = xa - 0.5 * s * s * ga + noise_scale * s * eps[idx]
    full = x.copy()
    full[idx] = y
    with np.errstate(all="ignore"):
        u_full, g_full = energy_and_grad(full)
        uy, gy = u_full[idx], g_full[idx]
        ok = _finite(y, uy, gy, cfg.divergence_bound)
        accept = ok.copy()
        if cfg.mh_correct:
            backward = _sqnorm(xa - y + 0.5 * s * s * gy)
            forward = _sqnorm(noise_scale * s * eps[idx])
            log_ratio = -(uy - u[idx]) - (backward - forward) / (2 * s * s)
            accept &= np.log(uniforms[idx]) < log_ratio
    x, u, g = x.copy(), u.copy(), g.copy()
    take = idx[accept]
    x[take], u[take], g[take] = y[accept], uy[accept], gy[accept]
    accepted[take] = True
    healthy[idx[~ok]] = False
    return x, u, g, accepted, healthy


def langevin_step(
    state: ChainState,
    energy_and_grad: EnergyAndGrad,
    cfg: LangevinConfig,
    rng: np.random.Generator,
    *,
    noise_scale: float = 1.0,
) -> ChainState:
    """`X - (s²/2) ∂U/∂X + s ε`, followed by an accept/reject test when `mh_correct` is set.

    A step whose proposal has a non-finite energy or gradient, or a coordinate
    beyond `cfg.divergence_bound`, leaves the point in place and flags the chain
    as diverged. Diverged chains no longer move.
    """
    if state.diverged:
        return state
    if not np.all(np.isfinite(state.grad)):
        return dataclasses.replace(state, diverged=True)
    eps = rng.standard_normal(state.point.shape)[None]
    uniforms = np.array([rng.random() if cfg.mh_correct else 0.5])
    x, u, g, _, healthy = _advance(
        state.point[None],
        np.array([state.energy]),
        state.grad[None],
        np.ones(1, dtype=bool),
        eps,
        uniforms,
        energy_and_grad,
        cfg,
        noise_scale,
    )
    return ChainState(x[0], float(u[0]), g[0], state.age + 1, not bool(healthy[0]))


def run_chains(
    inits: Sequence[ArrayLike] | Array,
    energy_and_grad: EnergyAndGrad,
    cfg: LangevinConfig,
    rng: np.random.Generator | None = None,
    *,
    noise_scale: float = 1.0,
    trace: bool = False,
) -> ChainRun:
    """Advance every chain `cfg.steps` times.

    Chain `i` draws from the `i`-th stream split off `rng` (or off a stream
    seeded with `cfg.rng_seed`). Diverged chains are frozen at their last
    healthy point and flagged in the result.
    """
    x = np.stack([np.asarray(init, dtype=np.float64) for init in inits])
    n = len(x)
    streams = split_rng(make_rng(cfg.rng_seed) if rng is None else rng, n)
    with np.errstate(all="ignore"):
        u, g = energy_and_grad(x)
        healthy = _finite(x, u, g, cfg.divergence_bound)
    accepted = np.zeros(n)
    points: list[Array] = [x] if trace else []
    energies: list[Array] = [u] if trace else []
    for _ in range(cfg.steps):
        eps = np.stack([stream.standard_normal(x.shape[1:]) for stream in streams])
        if cfg.mh_correct:
            uniforms = np.array([stream.random() for stream in streams])
        else:
            uniforms = np.full(n, 0.5)
        x, u, g, step_accepted, healthy = _advance(
            x, u, g, healthy, eps, uniforms, energy_and_grad, cfg, noise_scale
        )
        accepted += step_accepted
        if trace:
            points.append(x)
            energies.append(u)
    diverged = ~healthy
    if diverged.any():
        logger.warning(
            f"modelzoo {int(diverged.sum())} of {n} Langevin chains diverged"
        )
    return ChainRun(
        x,
        u,
        diverged,
        accepted / cfg.steps,
        np.stack(points) if trace else None,
        np.stack(energies) if trace else None,
    )


def run_chains_with_restart(
    inits: Sequence[ArrayLike] | Array,
    energy_and_grad: EnergyAndGrad,
    cfg: LangevinConfig,
    rng: np.random.Generator,
    cold: Sampler,
) -> ChainRun:
    """Run chains, restart the diverged ones once from a cold start, then give up.

    The restart evaluates the energy on the failed chains alone, so the energy
    must treat every row alike.
    """
    run = run_chains(inits, energy_and_grad, cfg, rng)
    failed = np.flatnonzero(run.diverged)
    if not len(failed):
        return run
    logger.warning(
        f"modelzoo restarting {len(failed)} diverged chains from a cold start"
    )
    retry = run_chains(cold(len(failed), rng), energy_and_grad, cfg, rng)
    if retry.diverged.any():
        raise ChainDivergenceError(failed[retry.diverged].tolist())
    points, energies = run.points.copy(), run.energies.copy()
    acceptance = run.acceptance.copy()
    points[failed], energies[failed] = retry.points, retry.energies
    acceptance[failed] = retry.acceptance
    return ChainRun(points, energies, np.zeros(len(points), dtype=bool), acceptance)


def chain_pool(
    mode: InitMode,
    n: int,
    rng: np.random.Generator,
    *,
    cold: Sampler,
    observed: Array | None = None,
    stored: Array | None = None,
    generator: Sampler | None = None,
) -> Array:
    """Initial points for `n` chains.

    `cold` draws from the reference distribution, `cd` copies the observed
    batch, `persistent` returns the stored pool entries (or a cold start when
    the pool is still empty) and `generator-init` decodes fresh generator draws.
    """
    if mode == "cold":
        return cold(n, rng)
    if mode == "cd":
        if observed is None:
            raise ValueError("Contrastive divergence needs the observed batch")
        return np.array(observed, dtype=np.float64)
    if mode == "persistent":
        if stored is None or not len(stored):
            logger.debug("modelzoo persistent pool is empty, using a cold start")
            return cold(n, rng)
        return np.array(stored, dtype=np.float64)
    if mode == "generator-init":
        if generator is None:
            raise ValueError("Generator initialization needs a generator sampler")
        return generator(n, rng)
    raise ValueError(
        f"Unknown chain initialization {mode!r}; "
        "expected one of cold, cd, persistent, generator-init"
    )


class ChainPool:
    """Chain starts for a training loop, including the persistent sample store.

    In persistent mode, `draw` hands out pool entries in a cycle and `update`
    writes the evolved samples back into the slots that were just drawn.
    """

    __slots__ = ("mode", "cold", "generator", "_pool", "_slots")

    def __init__(
        self, mode: InitMode, cold: Sampler, generator: Sampler | None = None
    ) -> None:
        if mode not in ("cold", "cd", "persistent", "generator-init"):
            raise ValueError(f"Unknown chain initialization {mode!r}")
        self.mode = mode
        self.cold = cold
        self.generator = generator
        self._pool: Array | None = None
        self._slots = np.zeros(0, dtype=np.intp)

    def __len__(self) -> int:
        return 0 if self._pool is None else len(self._pool)

    def draw(
        self, n: int, rng: np.random.Generator, observed: Array | None = None
    ) -> Array:
        stored = None
        if self.mode == "persistent" and self._pool is not None:
            start = int(self._slots[-1]) + 1 if len(self._slots) else 0
            self._slots = (start + np.arange(n)) % len(self._pool)
            stored = self._pool[self._slots]
        return chain_pool(
            self.mode,
            n,
            rng,
            cold=self.cold,
            observed=observed,
            stored=stored,
            generator=self.generator,
        )

    def update(self, samples: Array) -> None:
        if self.mode != "persistent":
            return
        if self._pool is None:
            self._pool = np.array(samples, dtype=np.float64)
            self._slots = np.arange(len(samples))
            return
        self._pool[self._slots] = samples

    @property
    def samples(self) -> Array | None:
        return None if self._pool is None else self._pool.copy()


def gaussian_sampler(shape: Sequence[int], sigma2: float = 1.0) -> Sampler:
    """Cold-start sampler for the `N(0, σ²I)` reference."""
    scale = math.sqrt(sigma2)

    def sample(n: int, rng: np.random.Generator) -> Array:
        return scale * rng.standard_normal((n, *shape))

    return sample


def trace_rows(run: ChainRun) -> tuple[list[str], list[list[float]]]:
    """Flatten a traced run into CSV header and rows: step, chain, energy, coordinates."""
    if run.trace_points is None or run.trace_energies is None:
        raise ValueError("The run was not traced; pass trace=True to run_chains")
    steps, n = run.trace_energies.shape
    coords = run.trace_points.reshape(steps, n, -1)
    header = ["step", "chain", "energy", *(f"x{j}" for j in range(coords.shape[2]))]
    rows = [
        [float(step), float(chain), float(run.trace_energies[step, chain]), *coords[step, chain]]
        for step in range(steps)
        for chain in range(n)
    ]
    return header, rows


async def dump_trace(run: ChainRun, destination: os.PathLike[str] | str) -> anyio.Path:
    """Write a traced run as CSV with columns step, chain, energy, x0, x1, ..."""
    header, rows = trace_rows(run)
    return await write_csv(destination, header, rows)

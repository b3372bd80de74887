"""Experiment runs: build models from a config, fit them, and write the artifacts.

A run writes into its output directory:

* `metrics.csv`, one row per iteration of the fit,
* `checkpoint.bin`, the fitted parameters (see `modelzoo.checkpoint`),
* `samples.csv`, or `samples/` for images, when the model can be sampled,
* `config.txt`, the fully resolved config.

An output directory holds one run at a time, guarded by a lock file.
"""

from __future__ import annotations

import contextlib
import dataclasses
import functools
import math
import os
import time
from collections.abc import Callable
from typing import TYPE_CHECKING, NamedTuple

import anyio
import anyio.to_thread
import numpy as np

from modelzoo.artifacts import write_artifacts, write_csv
from modelzoo.bridges.adversarial import Triple, acd_fit, triangle_fit
from modelzoo.bridges.cooperative import coop_fit
from modelzoo.bridges.introspective import introspective_fit
from modelzoo.bridges.variational import InferenceModel, fit_vae
from modelzoo.checkpoint import (
    CheckpointHeader,
    dump_checkpoint,
    load_checkpoint,
    prefixed,
    unprefixed,
)
from modelzoo.config import (
    ConfigError,
    ExperimentConfig,
    format_config,
    load_config,
    resolve_threads,
)
from modelzoo.datasets import Dataset, load_dataset, make_dataset
from modelzoo.descriptive.deep import DeepEnergyModel, fit_deep_ebm, sample_ebm
from modelzoo.descriptive.features import (
    FeatureMap,
    IndicatorFeatures,
    MomentFeatures,
    ProjectionHistogramFeatures,
)
from modelzoo.descriptive.linear import (
    fit_linear_exact,
    fit_linear_langevin,
    fit_projection_pursuit,
)
from modelzoo.descriptive.multigrid import (
    GridPyramid,
    default_grid_model,
    fit_multigrid,
    sample_multigrid,
)
from modelzoo.discriminative import (
    fit_logistic,
    fit_softmax_net,
    softmax_classifier,
)
from modelzoo.evaluation import (
    atom_recovery,
    mode_coverage,
    moment_match,
    reconstruction_error,
    subspace_angle_degrees,
)
from modelzoo.generative.generator import GeneratorModel, fit_generator_abp, generator_decode
from modelzoo.generative.linear import (
    FactorAnalysisModel,
    fa_log_likelihood,
    fit_factor_analysis,
    fit_linear_variant,
    fit_pca,
    fit_sparse_coding,
)
from modelzoo.generative.rbm import RBMModel, fit_rbm, log_likelihood, sample_exact
from modelzoo.nets import mlp
from modelzoo.oracle import Domain
from modelzoo.utilities import logger, make_rng, split_rng

if TYPE_CHECKING:
    from collections.abc import AsyncIterator, Sequence

    from modelzoo.types import Array, Metrics

LOCK_NAME = ".modelzoo.lock"
QUADRATURE_NODES = {1: 201, 2: 61}


class ExperimentError(RuntimeError):
    """A module error, with the module, operation and config section it came from."""

    def __init__(self, message: str, module: str, operation: str, section: str) -> None:
        super().__init__(f"{module}.{operation} [{section}]: {message}")
        self.module = module
        self.operation = operation
        self.section = section


@dataclasses.dataclass
class Context:
    config: ExperimentConfig
    dataset: Dataset
    init_rng: np.random.Generator
    rng: np.random.Generator
    metrics: Metrics = dataclasses.field(default_factory=list)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(extent) for extent in self.dataset.data.shape[1:])


class Outcome(NamedTuple):
    tensors: dict[str, Array]
    header: dict[str, object] = {}
    samples: Array | None = None


class Fit(NamedTuple):
    module: str
    operation: str
    run: Callable[[Context], Outcome]


FITS: dict[tuple[str, str], Fit] = {}


def _register(
    family: str, variant: str, module: str, operation: str
) -> Callable[[Callable[[Context], Outcome]], Callable[[Context], Outcome]]:
    def decorator(run: Callable[[Context], Outcome]) -> Callable[[Context], Outcome]:
        FITS[(family, variant)] = Fit(module, operation, run)
        return run

    return decorator


def find_fit(config: ExperimentConfig) -> Fit:
    key = (config.model.family, config.model.variant)
    if key not in FITS:
        known = ", ".join(f"{family}/{variant}" for family, variant in FITS)
        raise ConfigError(f"unknown model {key[0]}/{key[1]}; expected one of {known}", "model")
    return FITS[key]


# Model builders. Architectures depend on the config only, so a checkpoint's
# tensors can be bound to a freshly built model.


def _tabular(shape: tuple[int, ...], what: str) -> int:
    if len(shape) != 1:
        raise ValueError(f"{what} needs tabular data, got examples of shape {shape}")
    return shape[0]


def build_energy_model(
    config: ExperimentConfig, shape: tuple[int, ...], rng: np.random.Generator
) -> DeepEnergyModel:
    arch, sigma2 = config.architecture, config.model.sigma2
    if len(shape) == 3:
        return default_grid_model(
            shape[0], shape[2], rng, channel_divisor=arch.channel_divisor, sigma2=sigma2
        )
    p = _tabular(shape, "A score network")
    tape, theta = mlp(
        [p, *arch.hidden, 1],
        rng,
        activation=arch.activation,  # type: ignore[arg-type]
        squeeze=True,
        residual=arch.residual,
    )
    return DeepEnergyModel(tape, theta, sigma2)


def build_generator(
    config: ExperimentConfig, shape: tuple[int, ...], rng: np.random.Generator
) -> GeneratorModel:
    arch, d = config.architecture, config.model.latent_dim
    p = _tabular(shape, "A generator")
    tape, alpha = mlp(
        [d, *arch.hidden, p],
        rng,
        activation=arch.activation,  # type: ignore[arg-type]
        out_activation=arch.out_activation,  # type: ignore[arg-type]
        residual=arch.residual,
        input_name="h",
    )
    return GeneratorModel(tape, alpha, d, config.model.sigma2)


def build_encoder(
    config: ExperimentConfig, shape: tuple[int, ...], rng: np.random.Generator
) -> InferenceModel:
    arch, d = config.architecture, config.model.latent_dim
    p = _tabular(shape, "An inference network")
    tape, phi = mlp(
        [p, *arch.encoder_hidden, 2 * d],
        rng,
        activation=arch.activation,  # type: ignore[arg-type]
    )
    return InferenceModel(tape, phi, d)


def build_feature_map(config: ExperimentConfig, data: Array) -> FeatureMap:
    model = config.model
    p = int(np.prod(data.shape[1:]))
    if model.features == "raw-moments":
        return MomentFeatures.raw_moments(p, model.order, pin_constant=model.pin_constant)
    if model.features == "pairwise":
        return MomentFeatures.pairwise(p, pin_constant=model.pin_constant)
    if model.features == "indicators":
        states = np.unique(data.reshape(len(data), -1), axis=0)
        return IndicatorFeatures(states, pin_constant=model.pin_constant)
    raise ValueError(
        f"Unknown features {model.features!r}; expected raw-moments, pairwise or indicators"
    )


def build_domain(data: Array) -> Domain:
    """Binary hypercube for 0/1 data, else a quadrature grid padding the data range."""
    x = data.reshape(len(data), -1)
    p = x.shape[1]
    if np.all((x == 0) | (x == 1)):
        return Domain.binary(p)
    if p not in QUADRATURE_NODES:
        raise ValueError(f"Exact fits need binary data or at most 2 dimensions, got {p}")
    pad = 0.5 * float(np.ptp(x)) + 1.0
    axes = [
        np.linspace(x[:, j].min() - pad, x[:, j].max() + pad, QUADRATURE_NODES[p])
        for j in range(p)
    ]
    return Domain.quadrature(axes)


def _labels(ctx: Context) -> Array:
    if ctx.dataset.labels is None:
        raise ValueError(f"Dataset {ctx.dataset.name} has no labels")
    return ctx.dataset.labels


# Discriminative


@_register("discriminative", "logistic", "discriminative", "fit_logistic")
def _logistic(ctx: Context) -> Outcome:
    X, y = ctx.dataset.data, _labels(ctx) > 0
    fit = fit_logistic(X, y, ridge=ctx.config.model.ridge)
    accuracy = float(np.mean((X @ fit.theta + fit.bias > 0) == y))
    ctx.metrics.append(
        {
            "iterations": float(fit.iterations),
            "log_likelihood": fit.log_likelihood,
            "accuracy": accuracy,
        }
    )
    return Outcome({"theta": fit.theta, "bias": np.array(fit.bias)}, {"K": 2})


@_register("discriminative", "softmax", "discriminative", "fit_softmax_net")
def _softmax(ctx: Context) -> Outcome:
    labels = _labels(ctx).astype(np.int64)
    K = int(labels.max()) + 1
    clf = softmax_classifier(
        _tabular(ctx.shape, "A soft-max net"),
        K,
        ctx.config.architecture.hidden,
        ctx.init_rng,
        activation=ctx.config.architecture.activation,  # type: ignore[arg-type]
    )
    clf = fit_softmax_net(
        ctx.dataset.data, labels, clf, ctx.config.train(), rng=ctx.rng, metrics=ctx.metrics
    )
    return Outcome({**prefixed(clf.params, "net/"), "biases": clf.biases}, {"K": K})


# Descriptive


@_register("descriptive", "linear-exact", "descriptive", "fit_linear_exact")
def _linear_exact(ctx: Context) -> Outcome:
    data = ctx.dataset.data
    feature_map = build_feature_map(ctx.config, data)
    model = fit_linear_exact(data, feature_map, build_domain(data), metrics=ctx.metrics)
    return Outcome(
        {"theta": model.theta}, {"FEATURES": feature_map.kind, "LOG_Z": model.log_z}
    )


@_register("descriptive", "linear-langevin", "descriptive", "fit_linear_langevin")
def _linear_langevin(ctx: Context) -> Outcome:
    data = ctx.dataset.data
    feature_map = build_feature_map(ctx.config, data)
    model = fit_linear_langevin(
        data,
        feature_map,
        ctx.config.langevin(),
        ctx.config.train(),
        rng=ctx.rng,
        metrics=ctx.metrics,
    )
    return Outcome({"theta": model.theta}, {"FEATURES": feature_map.kind})


@_register("descriptive", "projection-pursuit", "descriptive", "fit_projection_pursuit")
def _projection_pursuit(ctx: Context) -> Outcome:
    result = fit_projection_pursuit(
        ctx.dataset.data,
        ctx.config.model.rounds,
        ctx.config.langevin(),
        ctx.config.train(),
        bins=ctx.config.model.bins,
        rng=ctx.rng,
        metrics=ctx.metrics,
    )
    if result.model is None:
        return Outcome({}, {"ROUNDS": 0})
    features = result.model.feature_map
    tensors = {"theta": result.model.theta}
    if isinstance(features, ProjectionHistogramFeatures):
        tensors["projections"] = features.projections
        tensors["edges"] = features.edges
    return Outcome(tensors, {"ROUNDS": len(result.discrepancies)})


@_register("descriptive", "deep", "descriptive", "fit_deep_ebm")
def _deep(ctx: Context) -> Outcome:
    config = ctx.config
    ebm = build_energy_model(config, ctx.shape, ctx.init_rng)
    ebm = fit_deep_ebm(
        ctx.dataset.data,
        ebm,
        config.langevin(),
        config.train(),
        init_mode=config.model.init_mode,  # type: ignore[arg-type]
        rng=ctx.rng,
        metrics=ctx.metrics,
    )
    samples = sample_ebm(ebm, ctx.shape, config.run.sample_count, config.langevin(), ctx.rng)
    return Outcome(prefixed(ebm.theta, "theta/"), samples=samples)


@_register("descriptive", "multigrid", "descriptive", "fit_multigrid")
def _multigrid(ctx: Context) -> Outcome:
    config = ctx.config
    pyramid = fit_multigrid(
        ctx.dataset.data,
        config.model.grids,
        config.langevin(),
        config.train(),
        channel_divisor=config.architecture.channel_divisor,
        rng=ctx.rng,
        metrics=ctx.metrics,
    )
    tensors = {"edges": pyramid.edges, "histogram": pyramid.histogram}
    for grid, model in zip(pyramid.grids[1:], pyramid.models):
        tensors.update(prefixed(model.theta, f"grid{grid}/"))
    samples = sample_multigrid(pyramid, config.langevin(), ctx.rng, config.run.sample_count)
    header = {"GRIDS": ",".join(str(g) for g in pyramid.grids)}
    return Outcome(tensors, header, samples)


# Generative


def _ancestral(model: FactorAnalysisModel, n: int, rng: np.random.Generator) -> Array:
    h = rng.standard_normal((n, model.d))
    noise = math.sqrt(model.sigma2) * rng.standard_normal((n, model.p))
    return h @ model.W.T + model.offset + noise


@_register("generative", "factor-analysis", "generative", "fit_factor_analysis")
def _factor_analysis(ctx: Context) -> Outcome:
    model = fit_factor_analysis(
        ctx.dataset.data, ctx.config.model.latent_dim, rng=ctx.rng, metrics=ctx.metrics
    )
    samples = _ancestral(model, ctx.config.run.sample_count, ctx.rng)
    return Outcome(
        {"W": model.W, "mean": model.offset}, {"SIGMA2": repr(model.sigma2)}, samples
    )


@_register("generative", "sparse-coding", "generative", "fit_sparse_coding")
def _sparse_coding(ctx: Context) -> Outcome:
    model = ctx.config.model
    coder = fit_sparse_coding(
        ctx.dataset.data, model.latent_dim, model.lam, rng=ctx.rng, metrics=ctx.metrics
    )
    return Outcome({"W": coder.W}, {"LAM": repr(coder.lam)})


@_register("generative", "ica", "generative", "fit_ica")
def _ica(ctx: Context) -> Outcome:
    model = fit_linear_variant(ctx.dataset.data, "ica", rng=ctx.rng, metrics=ctx.metrics)
    return Outcome({"A": model.A})  # type: ignore[union-attr]


def _factorization(variant: str) -> Callable[[Context], Outcome]:
    def run(ctx: Context) -> Outcome:
        model = fit_linear_variant(
            ctx.dataset.data,
            variant,  # type: ignore[arg-type]
            ctx.config.model.latent_dim,
            mask=ctx.dataset.mask,
            rng=ctx.rng,
            metrics=ctx.metrics,
        )
        return Outcome({"W": model.W, "H": model.H})  # type: ignore[union-attr]

    return run


_register("generative", "nmf", "generative", "fit_nmf")(_factorization("nmf"))
_register("generative", "mf-masked", "generative", "fit_masked_mf")(_factorization("mf-masked"))


@_register("generative", "pca", "generative", "fit_pca")
def _pca(ctx: Context) -> Outcome:
    model = fit_pca(ctx.dataset.data, ctx.config.model.latent_dim)
    error = reconstruction_error(ctx.dataset.data, model.reconstruct(ctx.dataset.data))
    ctx.metrics.append({"d": float(ctx.config.model.latent_dim), "reconstruction_error": error})
    return Outcome({"mean": model.mean, "components": model.components})


@_register("generative", "rbm", "generative", "fit_rbm")
def _rbm(ctx: Context) -> Outcome:
    model_cfg = ctx.config.model
    model = fit_rbm(
        ctx.dataset.data,
        model_cfg.latent_dim,
        method=model_cfg.method,  # type: ignore[arg-type]
        cd_k=model_cfg.cd_k,
        train_cfg=ctx.config.train(),
        rng=ctx.rng,
        metrics=ctx.metrics,
    )
    samples = sample_exact(model, ctx.config.run.sample_count, ctx.rng)
    tensors = {"W": model.W, "b": model.visible_bias, "c": model.hidden_bias}
    return Outcome(tensors, samples=samples)


@_register("generative", "generator", "generative", "fit_generator_abp")
def _generator(ctx: Context) -> Outcome:
    config = ctx.config
    gen = build_generator(config, ctx.shape, ctx.init_rng)
    gen = fit_generator_abp(
        ctx.dataset.data,
        gen,
        config.inference_langevin(),
        config.train(),
        rng=ctx.rng,
        metrics=ctx.metrics,
    )
    return _generator_outcome(ctx, gen, prefixed(gen.alpha, "alpha/"))


def _generator_outcome(ctx: Context, gen: GeneratorModel, tensors: dict[str, Array]) -> Outcome:
    h = ctx.rng.standard_normal((ctx.config.run.sample_count, gen.latent_dim))
    return Outcome(tensors, {"SIGMA2": repr(gen.sigma2)}, generator_decode(gen, h))


# Bridges


@_register("bridges", "introspective", "bridges", "introspective_fit")
def _introspective(ctx: Context) -> Outcome:
    config, data = ctx.config, ctx.dataset.data
    mode = config.model.method
    model = introspective_fit(
        data,
        config.model.rounds,
        build_feature_map(config, data),
        mode=mode,  # type: ignore[arg-type]
        domain=build_domain(data) if mode == "exact" else None,
        lang_cfg=config.langevin(),
        ridge=config.model.ridge,
        rng=ctx.rng,
        metrics=ctx.metrics,
    )
    tensors: dict[str, Array] = {}
    for t, tilt in enumerate(model.tilts):
        tensors.update(prefixed(tilt.classifier.params, f"tilt{t}/"))
        tensors[f"tilt{t}/biases"] = tilt.classifier.biases
    return Outcome(tensors, {"TILTS": len(model.tilts)})


@_register("bridges", "vae", "bridges", "fit_vae")
def _vae(ctx: Context) -> Outcome:
    config = ctx.config
    gen = build_generator(config, ctx.shape, ctx.init_rng)
    inf = build_encoder(config, ctx.shape, ctx.init_rng)
    gen, inf = fit_vae(
        ctx.dataset.data,
        gen,
        inf,
        config.train(),
        mc_samples=config.model.mc_samples,
        estimator=config.model.estimator,  # type: ignore[arg-type]
        rng=ctx.rng,
        metrics=ctx.metrics,
    )
    tensors = {**prefixed(gen.alpha, "alpha/"), **prefixed(inf.phi, "phi/")}
    return _generator_outcome(ctx, gen, tensors)


def _adversarial(fit: Callable[..., Triple]) -> Callable[[Context], Outcome]:
    def run(ctx: Context) -> Outcome:
        config = ctx.config
        ebm = build_energy_model(config, ctx.shape, ctx.init_rng)
        gen = build_generator(config, ctx.shape, ctx.init_rng)
        inf = build_encoder(config, ctx.shape, ctx.init_rng)
        ebm, gen, inf = fit(
            ctx.dataset.data, ebm, gen, inf, config.train(), rng=ctx.rng, metrics=ctx.metrics
        )
        tensors = {
            **prefixed(ebm.theta, "theta/"),
            **prefixed(gen.alpha, "alpha/"),
            **prefixed(inf.phi, "phi/"),
        }
        return _generator_outcome(ctx, gen, tensors)

    return run


_register("bridges", "acd", "bridges", "acd_fit")(_adversarial(acd_fit))
_register("bridges", "triangle", "bridges", "triangle_fit")(_adversarial(triangle_fit))


@_register("bridges", "coop", "bridges", "coop_fit")
def _coop(ctx: Context) -> Outcome:
    config = ctx.config
    ebm = build_energy_model(config, ctx.shape, ctx.init_rng)
    gen = build_generator(config, ctx.shape, ctx.init_rng)
    centers = ctx.dataset.ground_truth.get("centers")
    ebm, gen = coop_fit(
        ctx.dataset.data,
        ebm,
        gen,
        config.langevin(),
        config.train(),
        rigorous=config.model.rigorous,
        inference_cfg=config.inference_langevin(),
        update_order=config.model.update_order,  # type: ignore[arg-type]
        freeze_ebm=config.model.freeze_ebm,
        centers=np.asarray(centers) if centers is not None else None,
        rng=ctx.rng,
        metrics=ctx.metrics,
    )
    tensors = {**prefixed(ebm.theta, "theta/"), **prefixed(gen.alpha, "alpha/")}
    return _generator_outcome(ctx, gen, tensors)


# Reloading checkpoints


def _shape(header: CheckpointHeader) -> tuple[int, ...]:
    return tuple(int(extent) for extent in header["SHAPE"].split(",") if extent)


def draw_samples(
    config: ExperimentConfig,
    header: CheckpointHeader,
    tensors: dict[str, Array],
    n: int,
    rng: np.random.Generator,
) -> Array:
    """Rebuild the checkpointed model and sample it: Langevin for energies, decoding otherwise."""
    family, variant = header["FAMILY"], header["VARIANT"]
    shape = _shape(header)
    build_rng = make_rng(0)
    if variant == "deep":
        ebm = build_energy_model(config, shape, build_rng)
        ebm = ebm.with_theta(unprefixed(tensors, "theta/"))
        return sample_ebm(ebm, shape, n, config.langevin(), rng)
    if variant == "multigrid":
        grids = tuple(int(g) for g in header["GRIDS"].split(","))
        models = [
            default_grid_model(
                g,
                shape[2],
                build_rng,
                channel_divisor=config.architecture.channel_divisor,
                sigma2=config.model.sigma2,
            )
            for g in grids[1:]
        ]
        models = [
            model.with_theta(unprefixed(tensors, f"grid{g}/"))
            for g, model in zip(grids[1:], models)
        ]
        pyramid = GridPyramid(grids, tuple(models), tensors["edges"], tensors["histogram"])
        return sample_multigrid(pyramid, config.langevin(), rng, n)
    if variant == "factor-analysis":
        model = FactorAnalysisModel(tensors["W"], header.get_float("SIGMA2"), tensors["mean"])
        return _ancestral(model, n, rng)
    if variant == "rbm":
        return sample_exact(RBMModel(tensors["W"], tensors["b"], tensors["c"]), n, rng)
    if variant in ("generator", "vae", "acd", "triangle", "coop"):
        gen = build_generator(config, shape, build_rng)
        gen = dataclasses.replace(
            gen.with_alpha(unprefixed(tensors, "alpha/")), sigma2=header.get_float("SIGMA2")
        )
        samples = generator_decode(gen, rng.standard_normal((n, gen.latent_dim)))
        if variant == "coop":
            ebm = build_energy_model(config, shape, build_rng)
            ebm = ebm.with_theta(unprefixed(tensors, "theta/"))
            samples = sample_ebm(ebm, shape, n, config.langevin(), rng, inits=samples)
        return samples
    raise ValueError(f"Sampling is not supported for {family}/{variant}")


def evaluate_outcome(
    config: ExperimentConfig,
    dataset: Dataset,
    header: CheckpointHeader,
    tensors: dict[str, Array],
    rng: np.random.Generator,
) -> dict[str, float]:
    """Recovery and fit scores for a checkpoint against its dataset's ground truth."""
    variant, X = header["VARIANT"], dataset.data
    truth = dataset.ground_truth
    scores: dict[str, float] = {}
    if variant == "factor-analysis":
        model = FactorAnalysisModel(tensors["W"], header.get_float("SIGMA2"), tensors["mean"])
        scores["log_likelihood"] = fa_log_likelihood(model, X)
        if "W" in truth:
            truth_W = np.asarray(truth["W"])
            scores["subspace_angle_degrees"] = subspace_angle_degrees(model.W, truth_W)
    elif variant == "sparse-coding" and "dictionary" in truth:
        recovery = atom_recovery(tensors["W"], np.asarray(truth["dictionary"]))
        scores["min_atom_cosine"] = float(recovery.min())
    elif variant == "pca":
        reconstruction = (X - tensors["mean"]) @ tensors["components"] @ tensors["components"].T
        scores["reconstruction_error"] = reconstruction_error(X, reconstruction + tensors["mean"])
    elif variant == "rbm":
        model = RBMModel(tensors["W"], tensors["b"], tensors["c"])
        scores["log_likelihood"] = log_likelihood(model, X)
    elif variant == "logistic" and dataset.labels is not None:
        hits = (X @ tensors["theta"] + float(tensors["bias"]) > 0) == (dataset.labels > 0)
        scores["accuracy"] = float(np.mean(hits))
    if variant in ("deep", "generator", "vae", "acd", "triangle", "coop", "factor-analysis"):
        samples = draw_samples(config, header, tensors, config.run.sample_count, rng)
        flat = X.reshape(len(X), -1)
        mean_error, cov_error = moment_match(samples, flat.mean(axis=0), np.cov(flat, rowvar=False))
        scores["mean_error"] = mean_error
        scores["covariance_error"] = cov_error
        if "centers" in truth:
            coverage = mode_coverage(samples, np.asarray(truth["centers"]))
            scores["mode_coverage"] = float(coverage.covered)
    if not scores:
        raise ValueError(f"No evaluation is defined for {header['FAMILY']}/{variant}")
    return scores


# Runs


@contextlib.asynccontextmanager
async def output_lock(directory: anyio.Path) -> AsyncIterator[anyio.Path]:
    """Hold the directory's lock file for the duration of a run."""
    await directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        handle = await lock.open("x")
    except FileExistsError:
        raise FileExistsError(f"{directory} is in use by another run ({lock} exists)") from None
    async with handle:
        await handle.write(f"{os.getpid()}\n")
    try:
        yield lock
    finally:
        await lock.unlink(missing_ok=True)


def metrics_table(metrics: Metrics) -> tuple[list[str], list[list[object]]]:
    """Columns in order of first appearance; absent values are left empty."""
    header: list[str] = []
    for row in metrics:
        header += [key for key in row if key not in header]
    return header, [[row.get(key, "") for key in header] for row in metrics]


async def _dataset(config: ExperimentConfig) -> Dataset:
    try:
        if config.dataset.path:
            dataset, _ = await load_dataset(config.dataset.path)
            return dataset
        return make_dataset(config.dataset, config.seed)
    except Exception as e:
        raise ExperimentError(str(e), "datasets", "gen_dataset", "dataset") from e


async def _config(source: os.PathLike[str] | str | ExperimentConfig) -> ExperimentConfig:
    if isinstance(source, ExperimentConfig):
        return source
    config = await load_config(source)
    assert config is not None
    return config


def _output_dir(config: ExperimentConfig, out: os.PathLike[str] | str | None) -> anyio.Path:
    return anyio.Path(out if out is not None else config.run.output_dir)


async def run_experiment(
    source: os.PathLike[str] | str | ExperimentConfig,
    *,
    out: os.PathLike[str] | str | None = None,
    limiter: anyio.CapacityLimiter | None = None,
) -> list[anyio.Path]:
    """Fit the configured model and write its artifacts. Returns the written paths.
    ---

    The config is parsed and validated before any computation. Module errors
    are raised as `ExperimentError` carrying the module, operation and config
    section. The fit itself runs on a worker thread borrowed from `limiter`,
    which defaults to one holding the config's `threads`.
    """
    config = await _config(source)
    fit = find_fit(config)
    directory = _output_dir(config, out)
    async with output_lock(directory):
        dataset = await _dataset(config)
        init_rng, fit_rng = split_rng(make_rng(config.seed), 2)
        ctx = Context(config, dataset, init_rng, fit_rng)
        if limiter is None:
            limiter = anyio.CapacityLimiter(config.threads)
        started = time.perf_counter()
        try:
            outcome = await anyio.to_thread.run_sync(
                functools.partial(fit.run, ctx), limiter=limiter
            )
        except Exception as e:
            logger.error(f"modelzoo error: {e.__class__.__qualname__} {e}")
            raise ExperimentError(str(e), fit.module, fit.operation, "model") from e
        logger.info(
            f"modelzoo {fit.operation} finished in {time.perf_counter() - started:.2f}s"
        )
        header = CheckpointHeader(
            FAMILY=config.model.family,
            VARIANT=config.model.variant,
            SEED=config.seed,
            SHAPE=",".join(str(extent) for extent in ctx.shape),
        )
        header.update_from(
            **{key: value for key, value in outcome.header.items() if value is not None}
        )
        config_path = directory / "config.txt"
        await config_path.write_text(format_config(config), encoding="utf-8")
        paths = [config_path]
        columns, rows = metrics_table(ctx.metrics)
        paths.append(await write_csv(directory / "metrics.csv", columns, rows))
        paths.append(await dump_checkpoint(directory / "checkpoint.bin", header, outcome.tensors))
        if outcome.samples is not None:
            paths += await _write_samples(outcome.samples, directory)
    return paths


async def run_experiments(
    sources: Sequence[os.PathLike[str] | str | ExperimentConfig],
    *,
    threads: int | None = None,
) -> list[list[anyio.Path]]:
    """Run several experiments concurrently, at most `threads` fits at once.
    ---

    `threads` defaults to `MODELZOO_THREADS`, else the CPU count. Every config
    is loaded before any fit starts, and no two may share an output directory.
    A failed run cancels the others. Returns the written paths of each run,
    in the order given.
    """
    limiter = anyio.CapacityLimiter(resolve_threads(threads))
    configs = [await _config(source) for source in sources]
    directories = [str(_output_dir(config, None)) for config in configs]
    if len(set(directories)) < len(directories):
        raise ConfigError("each run needs its own output directory", "run", "output_dir")
    results: list[list[anyio.Path]] = [[] for _ in configs]

    async def _run(index: int, config: ExperimentConfig) -> None:
        results[index] = await run_experiment(config, limiter=limiter)

    async with anyio.create_task_group() as tg:
        for index, config in enumerate(configs):
            tg.start_soon(_run, index, config)
    return results


async def _write_samples(samples: Array, directory: anyio.Path) -> list[anyio.Path]:
    if samples.ndim == 4:
        kind = "ppm" if samples.shape[-1] == 3 else "pgm"
        images = samples if kind == "ppm" else samples[..., 0]
        return await write_artifacts(kind, images, directory / "samples")
    return await write_artifacts("csv", samples, directory / "samples.csv")


async def _checkpoint(directory: anyio.Path) -> tuple[CheckpointHeader, dict[str, Array]]:
    try:
        return await load_checkpoint(directory / "checkpoint.bin")
    except Exception as e:
        raise ExperimentError(str(e), "checkpoint", "load_checkpoint", "run") from e


async def sample_experiment(
    source: os.PathLike[str] | str | ExperimentConfig,
    *,
    out: os.PathLike[str] | str | None = None,
    n: int | None = None,
) -> list[anyio.Path]:
    """Reload a run's checkpoint and write `n` fresh samples (default `sample_count`)."""
    config = await _config(source)
    directory = _output_dir(config, out)
    header, tensors = await _checkpoint(directory)
    count = n or config.run.sample_count
    rng = split_rng(make_rng(config.seed), 3)[2]
    try:
        samples = await anyio.to_thread.run_sync(
            draw_samples, config, header, tensors, count, rng
        )
    except Exception as e:
        raise ExperimentError(str(e), header.get("FAMILY", "experiment"), "sample", "model") from e
    async with output_lock(directory):
        return await _write_samples(samples, directory)


async def evaluate_experiment(
    source: os.PathLike[str] | str | ExperimentConfig,
    *,
    out: os.PathLike[str] | str | None = None,
) -> dict[str, float]:
    """Score a run's checkpoint and write the scores to `eval.csv`."""
    config = await _config(source)
    directory = _output_dir(config, out)
    header, tensors = await _checkpoint(directory)
    dataset = await _dataset(config)
    rng = split_rng(make_rng(config.seed), 3)[2]
    try:
        scores = await anyio.to_thread.run_sync(
            evaluate_outcome, config, dataset, header, tensors, rng
        )
    except Exception as e:
        raise ExperimentError(str(e), "evaluation", "evaluate", "model") from e
    async with output_lock(directory):
        await write_csv(directory / "eval.csv", ["metric", "value"], list(scores.items()))
    summary = " ".join(f"{key}={value:.4g}" for key, value in scores.items())
    logger.info(f"modelzoo eval {summary}")
    return scores

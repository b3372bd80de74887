from __future__ import annotations

import dataclasses
import os
import shlex
import typing
from typing import TYPE_CHECKING, Any

import anyio

from modelzoo.mcmc import LangevinConfig
from modelzoo.optim import TrainConfig
from modelzoo.utilities import logger

if TYPE_CHECKING:
    from collections.abc import Iterator


class ConfigError(ValueError):
    """Raised for unknown sections or keys, malformed values and missing required keys."""

    def __init__(self, message: str, section: str | None = None, key: str | None = None) -> None:
        where = ".".join(part for part in (section, key) if part)
        super().__init__(f"{where}: {message}" if where else message)
        self.section = section
        self.key = key


def resolve_threads(threads: int | None = None) -> int:
    """Worker thread cap: the argument, else `MODELZOO_THREADS`, else the CPU count."""
    if threads is None:
        setting = os.getenv("MODELZOO_THREADS")
        try:
            threads = int(setting) if setting else os.cpu_count() or 1
        except ValueError:
            raise ConfigError(
                f"must be a positive integer, got {setting!r}",
                "environment",
                "MODELZOO_THREADS",
            ) from None
    if threads < 1:
        raise ConfigError(
            f"must be a positive integer, got {threads}", "environment", "MODELZOO_THREADS"
        )
    return threads


@dataclasses.dataclass(frozen=True)
class RunSection:
    seed: int | None = None
    output_dir: str = "runs"
    log_every: int = 10
    sample_count: int = 64


@dataclasses.dataclass(frozen=True)
class DatasetSection:
    name: str = ""
    path: str = ""
    n: int = 1000
    k: int = 8
    radius: float = 2.0
    scale: float = 0.1
    p: int = 20
    d: int = 3
    sigma2: float = 0.1
    sparsity: int = 3
    rank: int = 3
    mask_rate: float = 0.5
    size: int = 16
    kind: str = "stripes"
    classes: int = 3
    noise: float = 0.1


@dataclasses.dataclass(frozen=True)
class ModelSection:
    family: str = ""
    variant: str = ""
    latent_dim: int = 2
    sigma2: float = 1.0
    init_mode: str = "persistent"
    method: str = "exact"
    cd_k: int = 1
    lam: float = 0.1
    ridge: float = 0.0
    rounds: int = 20
    rigorous: bool = False
    update_order: str = "theta-first"
    freeze_ebm: bool = False
    grids: list[int] = dataclasses.field(default_factory=lambda: [1, 4, 16])
    pin_constant: bool = False
    features: str = "raw-moments"
    order: int = 2
    bins: int = 16
    mc_samples: int = 1
    estimator: str = "analytic-kl"


@dataclasses.dataclass(frozen=True)
class ArchitectureSection:
    hidden: list[int] = dataclasses.field(default_factory=lambda: [32, 32])
    activation: str = "relu"
    out_activation: str = "identity"
    encoder_hidden: list[int] = dataclasses.field(default_factory=lambda: [32])
    residual: bool = False
    channel_divisor: int = 8


@dataclasses.dataclass(frozen=True)
class SamplerSection:
    step_size: float = 0.3
    steps: int = 30
    mh_correct: bool = False
    divergence_bound: float = 1e6
    inference_step_size: float = 0.1
    inference_steps: int = 10


@dataclasses.dataclass(frozen=True)
class TrainingSection:
    epochs: int = 100
    batch_size: int = 100
    learning_rate: float = 0.01
    decay: str = "none"
    decay_every: int = 10
    optimizer: str = "sgd"
    n_chains: int = 100


SECTIONS: dict[str, type[Any]] = {
    "run": RunSection,
    "dataset": DatasetSection,
    "model": ModelSection,
    "architecture": ArchitectureSection,
    "sampler": SamplerSection,
    "training": TrainingSection,
}


@dataclasses.dataclass
class ExperimentConfig:
    """Configure one experiment.
    ---

    Sections mirror the `[section]` blocks of the config file. `seed` in `[run]`
    is required. If `threads` is not provided as an argument, it is read from
    the `MODELZOO_THREADS` environment variable, and defaults to the number of
    CPUs.
    """

    run: RunSection
    dataset: DatasetSection
    model: ModelSection
    architecture: ArchitectureSection
    sampler: SamplerSection
    training: TrainingSection
    threads: int

    def __init__(
        self,
        run: RunSection,
        dataset: DatasetSection | None = None,
        model: ModelSection | None = None,
        architecture: ArchitectureSection | None = None,
        sampler: SamplerSection | None = None,
        training: TrainingSection | None = None,
        threads: int | None = None,
    ) -> None:
        if run.seed is None:
            raise ConfigError("a seed is required", "run", "seed")
        self.run = run
        self.dataset = dataset or DatasetSection()
        self.model = model or ModelSection()
        self.architecture = architecture or ArchitectureSection()
        self.sampler = sampler or SamplerSection()
        self.training = training or TrainingSection()
        self.threads = resolve_threads(threads)
        try:
            self.langevin()
            self.inference_langevin()
        except ValueError as e:
            raise ConfigError(str(e), "sampler") from e
        try:
            self.train()
        except ValueError as e:
            raise ConfigError(str(e), "training") from e

    @property
    def seed(self) -> int:
        assert self.run.seed is not None
        return self.run.seed

    def langevin(self) -> LangevinConfig:
        s = self.sampler
        return LangevinConfig(
            step_size=s.step_size,
            steps=s.steps,
            mh_correct=s.mh_correct,
            rng_seed=self.seed,
            divergence_bound=s.divergence_bound,
        )

    def inference_langevin(self) -> LangevinConfig:
        s = self.sampler
        return LangevinConfig(
            step_size=s.inference_step_size,
            steps=s.inference_steps,
            rng_seed=self.seed,
            divergence_bound=s.divergence_bound,
        )

    def train(self) -> TrainConfig:
        t = self.training
        return TrainConfig(
            epochs=t.epochs,
            batch_size=t.batch_size,
            learning_rate=t.learning_rate,
            decay=t.decay,  # type: ignore[arg-type]
            decay_every=t.decay_every,
            optimizer=t.optimizer,  # type: ignore[arg-type]
            n_chains=t.n_chains,
            log_every=self.run.log_every,
        )

    def sections(self) -> Iterator[tuple[str, Any]]:
        for name in SECTIONS:
            yield name, getattr(self, name)


def _coerce(section: str, key: str, annotation: Any, raw: str) -> object:
    origin = typing.get_origin(annotation)
    args = [arg for arg in typing.get_args(annotation) if arg is not type(None)]
    if origin is list:
        return [_coerce(section, key, args[0], item.strip()) for item in raw.split(",") if item]
    if args and origin is not list:
        annotation = args[0]
    try:
        if annotation is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return raw.lower() == "true"
        if annotation is int:
            return int(raw)
        if annotation is float:
            return float(raw)
    except ValueError as e:
        raise ConfigError(str(e), section, key) from None
    return raw


def _split_line(line: str) -> tuple[str, str] | None:
    """`key = value`, with the value unquoted by shell rules and comments removed."""
    if len(split_line := line.split(sep="=", maxsplit=1)) != 2:
        return None
    key = split_line[0].strip(" \n\"'").lower()
    value = " ".join(shlex.split(split_line[1], comments=True, posix=True))
    return key, value.strip(" \n\"'")


def parse_config(text: str, *, threads: int | None = None) -> ExperimentConfig:
    """Parse `[section]` blocks of `key = value` lines. Unknown names are rejected."""
    raw: dict[str, dict[str, str]] = {}
    section: str | None = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip().lower()
            if section not in SECTIONS:
                raise ConfigError(
                    f"unknown section on line {number}; expected one of {', '.join(SECTIONS)}",
                    section,
                )
            raw.setdefault(section, {})
            continue
        if section is None:
            raise ConfigError(f"line {number} is outside any [section]")
        pair = _split_line(stripped)
        if pair is None:
            raise ConfigError(f"line {number} is not a key = value pair", section)
        key, value = pair
        if key in raw[section]:
            raise ConfigError(f"duplicate key on line {number}", section, key)
        raw[section][key] = value
    built: dict[str, Any] = {}
    for name, cls in SECTIONS.items():
        hints = typing.get_type_hints(cls)
        values = raw.get(name, {})
        unknown = sorted(set(values) - set(hints))
        if unknown:
            raise ConfigError(f"unknown key; expected one of {', '.join(hints)}", name, unknown[0])
        built[name] = cls(
            **{key: _coerce(name, key, hints[key], value) for key, value in values.items()}
        )
    return ExperimentConfig(**built, threads=threads)


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, list):
        return ", ".join(str(item) for item in value)
    return shlex.quote(str(value))


def format_config(config: ExperimentConfig) -> str:
    """Render a config in the file format, every key written out."""
    blocks = []
    for name, section in config.sections():
        lines = [f"[{name}]"]
        for field in dataclasses.fields(section):
            value = getattr(section, field.name)
            if value is not None:
                lines.append(f"{field.name} = {_format_value(value)}")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


async def load_config(
    source: os.PathLike[str] | str,
    *,
    threads: int | None = None,
    encoding: str | None = "utf-8",
    raise_exceptions: bool = True,
) -> ExperimentConfig | None:
    """Load an experiment config file."""
    try:
        path = await anyio.Path(source).resolve(strict=True)
        config = parse_config(await path.read_text(encoding=encoding), threads=threads)
        logger.info(f"modelzoo loaded config from {path}")
        return config
    except Exception as e:
        logger.error(f"modelzoo error: {e.__class__.__qualname__} {e}")
        if raise_exceptions:
            raise
    return None

from __future__ import annotations

import dataclasses
import math
from collections.abc import Mapping
from typing import TYPE_CHECKING, Literal, Protocol

import numpy as np

if TYPE_CHECKING:
    from modelzoo.types import Array, Params


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Settings shared by every iterative fit.
    ---

    `decay` selects the learning-rate schedule `η_t`. With `"log"`, the rate is
    `η₀ / (1 + ln(1 + ⌊t / decay_every⌋))`, which decays logarithmically and
    changes every `decay_every` iterations. With `"inverse"`, the rate is
    `η₀ / (1 + ⌊t / decay_every⌋)`.
    """

    epochs: int = 100
    batch_size: int = 100
    learning_rate: float = 0.01
    decay: Literal["none", "log", "inverse"] = "none"
    decay_every: int = 10
    optimizer: Literal["sgd", "adam"] = "sgd"
    n_chains: int = 100
    log_every: int = 10

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.n_chains < 1:
            raise ValueError("epochs, batch_size and n_chains must be positive")
        if self.learning_rate <= 0 or not math.isfinite(self.learning_rate):
            raise ValueError(f"Learning rate must be positive, got {self.learning_rate}")
        if self.decay not in ("none", "log", "inverse"):
            raise ValueError(f"Unknown decay rule {self.decay!r}")
        if self.decay_every < 1 or self.log_every < 1:
            raise ValueError("decay_every and log_every must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"Unknown optimizer {self.optimizer!r}")

    @classmethod
    def descriptive(cls, **overrides: object) -> TrainConfig:
        """Mini-batches of 100, initial rate 0.3, logarithmic decay every 10 iterations."""
        settings: dict[str, object] = {
            "batch_size": 100,
            "learning_rate": 0.3,
            "decay": "log",
            "decay_every": 10,
        }
        settings.update(overrides)
        return cls(**settings)  # type: ignore[arg-type]

    def rate(self, iteration: int) -> float:
        stage = iteration // self.decay_every
        if self.decay == "log":
            return self.learning_rate / (1.0 + math.log1p(stage))
        if self.decay == "inverse":
            return self.learning_rate / (1.0 + stage)
        return self.learning_rate

    def replace(self, **changes: object) -> TrainConfig:
        return dataclasses.replace(self, **changes)  # type: ignore[arg-type]


class Optimizer(Protocol):
    def step(
        self, params: Mapping[str, Array], direction: Mapping[str, Array], rate: float
    ) -> Params: ...


class Sgd:
    """Plain ascent: `p + rate * direction`. Returns new arrays; inputs are untouched."""

    __slots__ = ()

    def step(
        self, params: Mapping[str, Array], direction: Mapping[str, Array], rate: float
    ) -> Params:
        return {
            name: value + rate * direction[name] if name in direction else value
            for name, value in params.items()
        }


class Adam:
    """Adam ascent with bias-corrected moments, keyed by parameter name."""

    __slots__ = ("beta1", "beta2", "eps", "_m", "_v", "_t")

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: Params = {}
        self._v: Params = {}
        self._t = 0

    def step(
        self, params: Mapping[str, Array], direction: Mapping[str, Array], rate: float
    ) -> Params:
        self._t += 1
        updated: Params = {}
        for name, value in params.items():
            if name not in direction:
                updated[name] = value
                continue
            g = direction[name]
            m = self.beta1 * self._m.get(name, np.zeros_like(g)) + (1 - self.beta1) * g
            v = self.beta2 * self._v.get(name, np.zeros_like(g)) + (1 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - self.beta1**self._t)
            v_hat = v / (1 - self.beta2**self._t)
            updated[name] = value + rate * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    return Adam() if cfg.optimizer == "adam" else Sgd()


def norm(direction: Mapping[str, Array]) -> float:
    """Euclidean norm of a parameter-keyed direction."""
    return math.sqrt(math.fsum(float(np.sum(g * g)) for g in direction.values()))


def all_finite(direction: Mapping[str, Array]) -> bool:
    return all(bool(np.all(np.isfinite(g))) for g in direction.values())

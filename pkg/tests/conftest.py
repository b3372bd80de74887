from __future__ import annotations

from typing import TYPE_CHECKING

import anyio
import numpy as np
import pytest

import modelzoo.utilities

if TYPE_CHECKING:
    from pathlib import Path

    from modelzoo.types import Array


@pytest.fixture(scope="session")
def anyio_backend() -> str:
    """Specify the back-end for pytest to use when running async functions
    with [AnyIO](https://anyio.readthedocs.io/en/stable/testing.html).
    """
    return "asyncio"


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded PCG64 stream, fresh for every test."""
    return modelzoo.utilities.make_rng(20240521)


@pytest.fixture
def ring_data(rng: np.random.Generator) -> Array:
    """Four well-separated 2D clusters on a circle of radius 2."""
    angles = 2 * np.pi * np.arange(4) / 4
    centers = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    labels = rng.integers(0, 4, size=400)
    return centers[labels] + 0.1 * rng.standard_normal((400, 2))


@pytest.fixture
def binary_data(rng: np.random.Generator) -> Array:
    """Correlated 4-bit vectors: two noisy copies of two independent bits."""
    base = rng.integers(0, 2, size=(500, 2))
    flips = rng.random((500, 4)) < 0.1
    return np.abs(np.concatenate([base, base], axis=1) - flips).astype(np.float64)


CONFIG_TEXT = """
[run]
seed = 7
output_dir = {output_dir}
sample_count = 16

[dataset]
name = gaussian-mixture-2d
n = 200
k = 4
radius = 2.0
scale = 0.1

[model]
family = discriminative
variant = logistic

[training]
epochs = 5
batch_size = 50
learning_rate = 0.05
"""


@pytest.fixture
def config_text() -> str:
    """Template for a small experiment config. Fill in `output_dir` before use."""
    return CONFIG_TEXT


@pytest.fixture
async def config_file(tmp_path: Path, config_text: str) -> anyio.Path:
    """Small logistic regression experiment config written to a temporary file."""
    path = anyio.Path(tmp_path) / "experiment.cfg"
    output_dir = anyio.Path(tmp_path) / "runs"
    await path.write_text(config_text.format(output_dir=output_dir))
    return path

"""Procedural toy datasets with recorded ground truth.

Every generator is a pure function of its parameters and a seeded stream, so a
dataset can always be regenerated from its manifest.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from collections.abc import Callable
from typing import TYPE_CHECKING, NamedTuple

import anyio
import numpy as np
from scipy import linalg

from modelzoo.artifacts import dequantize, read_csv, read_pgm, write_artifacts, write_csv
from modelzoo.generative.rbm import RBMModel, sample_exact
from modelzoo.utilities import logger, make_rng

if TYPE_CHECKING:
    from modelzoo.config import DatasetSection
    from modelzoo.types import Array, DatasetManifest, ManifestValue

TEXTURE_KINDS = ("stripes", "checkers", "rings")
STRIPE_PERIOD = 4


class Dataset(NamedTuple):
    """Generated data. Images are `(n, H, W, 1)`, everything else `(n, p)`."""

    name: str
    data: Array
    labels: Array | None = None
    mask: Array | None = None
    ground_truth: dict[str, ManifestValue] = {}

    @property
    def is_image(self) -> bool:
        return self.data.ndim == 4


def _ring(k: int, radius: float) -> Array:
    angles = 2 * math.pi * np.arange(k) / k
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gaussian_mixture_2d(section: DatasetSection, rng: np.random.Generator) -> Dataset:
    centers = _ring(section.k, section.radius)
    labels = rng.integers(section.k, size=section.n)
    X = centers[labels] + section.scale * rng.standard_normal((section.n, 2))
    return Dataset(
        "gaussian-mixture-2d",
        X,
        labels.astype(np.float64),
        ground_truth={"centers": centers.tolist(), "scale": section.scale},
    )


def two_moons(section: DatasetSection, rng: np.random.Generator) -> Dataset:
    labels = rng.integers(2, size=section.n)
    t = math.pi * rng.random(section.n)
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    X = np.where(labels[:, None] == 0, upper, lower)
    X = X + section.noise * rng.standard_normal(X.shape)
    return Dataset("two-moons", X, labels.astype(np.float64))


def two_spirals(section: DatasetSection, rng: np.random.Generator) -> Dataset:
    labels = rng.integers(2, size=section.n)
    t = 3 * math.pi * np.sqrt(rng.random(section.n))
    sign = np.where(labels == 0, 1.0, -1.0)[:, None]
    X = sign * np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / (3 * math.pi)
    X = X + section.noise * rng.standard_normal(X.shape)
    return Dataset("two-spirals", X, labels.astype(np.float64))


def fa_synthetic(section: DatasetSection, rng: np.random.Generator) -> Dataset:
    """`X = W h + ε` with `h ~ N(0, I_d)` and `ε ~ N(0, σ²I_p)`."""
    W = rng.standard_normal((section.p, section.d))
    h = rng.standard_normal((section.n, section.d))
    X = h @ W.T + math.sqrt(section.sigma2) * rng.standard_normal((section.n, section.p))
    return Dataset(
        "fa-synthetic", X, ground_truth={"W": W.tolist(), "sigma2": section.sigma2}
    )


def sparse_synthetic(section: DatasetSection, rng: np.random.Generator) -> Dataset:
    """Unit-norm dictionary atoms combined by `sparsity` Gaussian codes per example."""
    if not 1 <= section.sparsity <= section.d:
        raise ValueError(f"sparsity must lie in 1..{section.d}, got {section.sparsity}")
    D = rng.standard_normal((section.p, section.d))
    D /= np.linalg.norm(D, axis=0, keepdims=True)
    codes = np.zeros((section.n, section.d))
    for row in codes:
        support = rng.choice(section.d, size=section.sparsity, replace=False)
        row[support] = rng.standard_normal(section.sparsity)
    X = codes @ D.T + section.noise * rng.standard_normal((section.n, section.p))
    return Dataset("sparse-synthetic", X, ground_truth={"dictionary": D.tolist()})


def rbm_synthetic(section: DatasetSection, rng: np.random.Generator) -> Dataset:
    model = RBMModel(
        W=rng.standard_normal((section.p, section.d)),
        b=0.5 * rng.standard_normal(section.p),
        c=0.5 * rng.standard_normal(section.d),
    )
    X = sample_exact(model, section.n, rng)
    truth: dict[str, ManifestValue] = {
        "W": model.W.tolist(),
        "b": model.visible_bias.tolist(),
        "c": model.hidden_bias.tolist(),
    }
    return Dataset("rbm-synthetic", X, ground_truth=truth)


def masked_ratings(section: DatasetSection, rng: np.random.Generator) -> Dataset:
    """Low-rank ratings with a Bernoulli mask; `mask_rate` is the share hidden."""
    if not 0 <= section.mask_rate < 1:
        raise ValueError(f"mask_rate must lie in [0, 1), got {section.mask_rate}")
    U = rng.standard_normal((section.n, section.rank))
    V = rng.standard_normal((section.p, section.rank))
    full = U @ V.T
    X = full + section.noise * rng.standard_normal(full.shape)
    mask = (rng.random(full.shape) >= section.mask_rate).astype(np.float64)
    return Dataset(
        "masked-ratings",
        np.where(mask > 0, X, 0.0),
        mask=mask,
        ground_truth={"ratings": full.tolist()},
    )


def texture(size: int, kind: str, rng: np.random.Generator, noise: float = 0.0) -> Array:
    """One `size × size` texture in [-1, 1] with a random phase."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "stripes":
        phase = rng.integers(STRIPE_PERIOD)
        image = np.cos(2 * math.pi * (cols + phase) / STRIPE_PERIOD)
    elif kind == "checkers":
        shift = rng.integers(2, size=2)
        image = np.where(((rows + shift[0]) // 2 + (cols + shift[1]) // 2) % 2 == 0, 1.0, -1.0)
    elif kind == "rings":
        center = rng.uniform(0, size, size=2)
        radius = np.hypot(rows - center[0], cols - center[1])
        image = np.cos(2 * math.pi * radius / STRIPE_PERIOD)
    else:
        kinds = ", ".join(TEXTURE_KINDS)
        raise ValueError(f"Unknown texture kind {kind!r}; expected one of {kinds}")
    image = image + noise * rng.standard_normal(image.shape)
    return np.clip(image, -1.0, 1.0)


def procedural_textures(section: DatasetSection, rng: np.random.Generator) -> Dataset:
    images = np.stack(
        [texture(section.size, section.kind, rng, section.noise) for _ in range(section.n)]
    )
    truth: dict[str, ManifestValue] = {"kind": section.kind}
    if section.kind in ("stripes", "rings"):
        truth["period"] = STRIPE_PERIOD
    return Dataset("procedural-textures", images[..., None], ground_truth=truth)


def labeled_blobs(section: DatasetSection, rng: np.random.Generator) -> Dataset:
    """`classes` isotropic blobs with centers on a ring of radius `radius`."""
    if section.classes < 2:
        raise ValueError(f"labeled-blobs needs at least 2 classes, got {section.classes}")
    centers = _ring(section.classes, section.radius)
    labels = rng.integers(section.classes, size=section.n)
    X = centers[labels] + section.scale * rng.standard_normal((section.n, 2))
    return Dataset(
        "labeled-blobs",
        X,
        labels.astype(np.float64),
        ground_truth={"centers": centers.tolist()},
    )


def curved_manifold(section: DatasetSection, rng: np.random.Generator) -> Dataset:
    """A curved 2-manifold rotated into `p` dimensions."""
    if section.p < 5:
        raise ValueError(f"curved-manifold embeds 5 coordinates; p must be >= 5, got {section.p}")
    u, v = rng.uniform(-1, 1, size=(2, section.n))
    surface = np.stack(
        [u, v, np.sin(math.pi * u), np.cos(math.pi * v), u * v], axis=1
    )
    rotation, _ = linalg.qr(rng.standard_normal((section.p, section.p)))
    X = surface @ rotation[:, : surface.shape[1]].T
    X = X + section.noise * rng.standard_normal(X.shape)
    return Dataset(
        "curved-manifold", X, ground_truth={"embedding": rotation[:, :5].tolist()}
    )


GENERATORS: dict[str, Callable[[DatasetSection, np.random.Generator], Dataset]] = {
    "gaussian-mixture-2d": gaussian_mixture_2d,
    "two-moons": two_moons,
    "two-spirals": two_spirals,
    "fa-synthetic": fa_synthetic,
    "sparse-synthetic": sparse_synthetic,
    "rbm-synthetic": rbm_synthetic,
    "masked-ratings": masked_ratings,
    "procedural-textures": procedural_textures,
    "labeled-blobs": labeled_blobs,
    "curved-manifold": curved_manifold,
}


def make_dataset(section: DatasetSection, seed: int) -> Dataset:
    """Generate the dataset `section.name` from `seed`."""
    generator = GENERATORS.get(section.name)
    if generator is None:
        raise ValueError(
            f"Unknown dataset {section.name!r}; expected one of {', '.join(GENERATORS)}"
        )
    if section.n < 1:
        raise ValueError(f"Datasets need n >= 1, got {section.n}")
    return generator(section, make_rng(seed))


def _manifest(
    dataset: Dataset, section: DatasetSection, seed: int, files: list[str]
) -> DatasetManifest:
    params = {
        key: value
        for key, value in dataclasses.asdict(section).items()
        if key not in ("name", "path")
    }
    return {
        "name": dataset.name,
        "seed": seed,
        "params": params,
        "files": files,
        "ground_truth": dataset.ground_truth,
    }


async def gen_dataset(
    section: DatasetSection,
    seed: int,
    destination: os.PathLike[str] | str,
    *,
    raise_exceptions: bool = True,
) -> list[anyio.Path]:
    """Generate a dataset into `destination` with a `manifest.json`.
    ---

    Point clouds go to `data.csv` with columns `x0, x1, ...`, plus a `label`
    column for labeled datasets. Masked ratings add `mask.csv`. Textures go
    to `images/sample_0000.pgm` and onwards. Returns the written paths, the
    manifest last.
    """
    directory = anyio.Path(destination)
    try:
        dataset = make_dataset(section, seed)
        await directory.mkdir(parents=True, exist_ok=True)
        paths: list[anyio.Path] = []
        if dataset.is_image:
            paths += await write_artifacts("pgm", dataset.data[..., 0], directory / "images")
        else:
            header = [f"x{j}" for j in range(dataset.data.shape[1])]
            table = dataset.data
            if dataset.labels is not None:
                header.append("label")
                table = np.column_stack([table, dataset.labels])
            paths.append(await write_csv(directory / "data.csv", header, table.tolist()))
            if dataset.mask is not None:
                paths.append(await write_csv(directory / "mask.csv", header, dataset.mask.tolist()))
        files = [str(anyio.Path(path).relative_to(directory)) for path in paths]
        manifest = _manifest(dataset, section, seed, files)
        manifest_path = directory / "manifest.json"
        await manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        paths.append(manifest_path)
        logger.info(f"modelzoo generated {dataset.name} in {directory}")
        return paths
    except Exception as e:
        logger.error(f"modelzoo error: {e.__class__.__qualname__} {e}")
        if raise_exceptions:
            raise
    return []


async def load_dataset(source: os.PathLike[str] | str) -> tuple[Dataset, DatasetManifest]:
    """Read back a directory written by `gen_dataset`."""
    directory = await anyio.Path(source).resolve(strict=True)
    manifest: DatasetManifest = json.loads(await (directory / "manifest.json").read_text())
    files = manifest["files"]
    if files and files[0].endswith(".pgm"):
        images = [dequantize(await read_pgm(directory / name)) for name in files]
        data = np.stack(images)[..., None]
        return Dataset(manifest["name"], data, ground_truth=manifest["ground_truth"]), manifest
    header, table = await read_csv(directory / "data.csv")
    labels = None
    if header[-1] == "label":
        labels, table = table[:, -1], table[:, :-1]
    mask = None
    if "mask.csv" in files:
        _, mask = await read_csv(directory / "mask.csv")
    dataset = Dataset(manifest["name"], table, labels, mask, manifest["ground_truth"])
    return dataset, manifest

from __future__ import annotations

import dataclasses
import json
from typing import TYPE_CHECKING

import anyio
import numpy as np
import pytest

import modelzoo.datasets
from modelzoo.config import DatasetSection
from modelzoo.datasets import GENERATORS, make_dataset

if TYPE_CHECKING:
    from pathlib import Path

    from pytest_mock import MockerFixture


def section(name: str, **settings: object) -> DatasetSection:
    base = DatasetSection(name=name, n=50)
    return dataclasses.replace(base, **settings)  # type: ignore[arg-type]


SMALL = {
    "fa-synthetic": {"p": 6, "d": 2},
    "sparse-synthetic": {"p": 6, "d": 4, "sparsity": 2},
    "rbm-synthetic": {"p": 5, "d": 3},
    "masked-ratings": {"p": 7, "rank": 2},
    "procedural-textures": {"size": 8, "n": 4},
    "curved-manifold": {"p": 6},
}


class TestGenerators:
    """Test the procedural dataset generators."""

    @pytest.mark.parametrize("name", sorted(GENERATORS))
    def test_deterministic(self, name: str) -> None:
        """Assert that every dataset is a pure function of its parameters and seed."""
        settings = section(name, **SMALL.get(name, {}))
        first = make_dataset(settings, 5)
        second = make_dataset(settings, 5)
        other = make_dataset(settings, 6)
        assert np.array_equal(first.data, second.data)
        assert not np.array_equal(first.data, other.data)
        assert np.all(np.isfinite(first.data))
        assert first.name == name
        assert json.loads(json.dumps(first.ground_truth)) == first.ground_truth

    def test_unknown_name(self) -> None:
        """Assert that unknown dataset names list the valid ones."""
        with pytest.raises(ValueError, match="two-moons"):
            make_dataset(section("three-moons"), 1)

    def test_empty(self) -> None:
        """Assert that datasets need at least one example."""
        with pytest.raises(ValueError, match="n >= 1"):
            make_dataset(section("two-moons", n=0), 1)

    def test_mixture(self) -> None:
        """Assert that ring mixture points sit near their labeled centers."""
        dataset = make_dataset(section("gaussian-mixture-2d", n=500, k=8, scale=0.05), 3)
        centers = np.array(dataset.ground_truth["centers"])
        assert centers.shape == (8, 2)
        assert np.allclose(np.linalg.norm(centers, axis=1), 2.0)
        assert dataset.labels is not None
        offsets = dataset.data - centers[dataset.labels.astype(int)]
        assert np.max(np.abs(offsets)) < 0.5

    def test_fa_truth(self) -> None:
        """Assert that factor analysis data has the covariance `W W' + σ² I`."""
        dataset = make_dataset(section("fa-synthetic", n=20000, p=4, d=2, sigma2=0.1), 2)
        W = np.array(dataset.ground_truth["W"])
        expected = W @ W.T + 0.1 * np.eye(4)
        covariance = np.cov(dataset.data, rowvar=False)
        assert np.linalg.norm(covariance - expected) / np.linalg.norm(expected) < 0.05

    def test_sparse_atoms(self) -> None:
        """Assert that dictionary atoms have unit norm and sparsity is bounded."""
        dataset = make_dataset(section("sparse-synthetic", p=5, d=3, sparsity=1), 4)
        atoms = np.array(dataset.ground_truth["dictionary"])
        assert np.allclose(np.linalg.norm(atoms, axis=0), 1.0)
        with pytest.raises(ValueError, match="sparsity"):
            make_dataset(section("sparse-synthetic", d=3, sparsity=4), 4)

    def test_rbm_is_binary(self) -> None:
        """Assert that RBM samples are binary vectors."""
        dataset = make_dataset(section("rbm-synthetic", p=4, d=2), 1)
        assert set(np.unique(dataset.data)) <= {0.0, 1.0}
        assert np.array(dataset.ground_truth["W"]).shape == (4, 2)

    def test_mask(self) -> None:
        """Assert that hidden ratings are zeroed and the mask rate is respected."""
        dataset = make_dataset(section("masked-ratings", n=200, p=10, mask_rate=0.5), 1)
        assert dataset.mask is not None
        assert np.all(dataset.data[dataset.mask == 0] == 0.0)
        assert 0.4 < dataset.mask.mean() < 0.6
        with pytest.raises(ValueError, match="mask_rate"):
            make_dataset(section("masked-ratings", mask_rate=1.0), 1)

    def test_stripes_period(self) -> None:
        """Assert that stripe textures repeat every four columns."""
        dataset = make_dataset(section("procedural-textures", n=3, size=16, noise=0.0), 8)
        assert dataset.is_image
        assert dataset.data.shape == (3, 16, 16, 1)
        assert dataset.ground_truth["period"] == modelzoo.datasets.STRIPE_PERIOD
        image = dataset.data[0, :, :, 0]
        assert np.allclose(image[:, :-4], image[:, 4:])
        centered = image - image.mean()
        lag = [np.sum(centered[:, :-k] * centered[:, k:]) for k in (2, 4)]
        assert lag[1] > 0 > lag[0]

    @pytest.mark.parametrize("kind", ("checkers", "rings"))
    def test_texture_kinds(self, rng: np.random.Generator, kind: str) -> None:
        """Assert that every texture kind stays within [-1, 1]."""
        image = modelzoo.datasets.texture(8, kind, rng, noise=0.5)
        assert image.shape == (8, 8)
        assert np.max(np.abs(image)) <= 1.0

    def test_unknown_texture(self, rng: np.random.Generator) -> None:
        """Assert that unknown texture kinds are rejected."""
        with pytest.raises(ValueError, match="stripes"):
            modelzoo.datasets.texture(8, "plaid", rng)

    def test_blobs_need_classes(self) -> None:
        """Assert that labeled blobs need two classes or more."""
        dataset = make_dataset(section("labeled-blobs", classes=4), 1)
        assert dataset.labels is not None
        assert set(np.unique(dataset.labels)) <= {0.0, 1.0, 2.0, 3.0}
        with pytest.raises(ValueError, match="2 classes"):
            make_dataset(section("labeled-blobs", classes=1), 1)

    def test_manifold(self) -> None:
        """Assert that the curved manifold lies in the span of its embedding."""
        dataset = make_dataset(section("curved-manifold", p=8, noise=0.0), 1)
        embedding = np.array(dataset.ground_truth["embedding"])
        projected = dataset.data @ embedding @ embedding.T
        assert np.allclose(projected, dataset.data)
        with pytest.raises(ValueError, match="p must be"):
            make_dataset(section("curved-manifold", p=4), 1)


class TestFiles:
    """Test `gen_dataset` and `load_dataset`."""

    @pytest.mark.anyio
    async def test_points(self, tmp_path: Path) -> None:
        """Assert that point clouds are written as CSV with a label column and a manifest."""
        directory = anyio.Path(tmp_path) / "moons"
        settings = section("two-moons", n=20, noise=0.05)
        paths = await modelzoo.datasets.gen_dataset(settings, 3, directory)
        assert [path.name for path in paths] == ["data.csv", "manifest.json"]
        dataset, manifest = await modelzoo.datasets.load_dataset(directory)
        assert manifest["seed"] == 3
        assert manifest["params"]["noise"] == 0.05
        assert "name" not in manifest["params"]
        assert manifest["files"] == ["data.csv"]
        expected = make_dataset(settings, 3)
        assert dataset.labels is not None
        assert np.array_equal(dataset.data, expected.data)
        assert np.array_equal(dataset.labels, expected.labels)

    @pytest.mark.anyio
    async def test_mask(self, tmp_path: Path) -> None:
        """Assert that masked ratings carry their mask file."""
        directory = anyio.Path(tmp_path) / "ratings"
        settings = section("masked-ratings", n=10, p=4, rank=2)
        await modelzoo.datasets.gen_dataset(settings, 3, directory)
        dataset, manifest = await modelzoo.datasets.load_dataset(directory)
        assert manifest["files"] == ["data.csv", "mask.csv"]
        assert dataset.mask is not None
        assert np.array_equal(dataset.mask, make_dataset(settings, 3).mask)

    @pytest.mark.anyio
    async def test_images(self, tmp_path: Path) -> None:
        """Assert that textures are written as PGM images and read back quantized."""
        directory = anyio.Path(tmp_path) / "textures"
        settings = section("procedural-textures", n=2, size=8, noise=0.0)
        paths = await modelzoo.datasets.gen_dataset(settings, 1, directory)
        assert [path.name for path in paths] == [
            "sample_0000.pgm",
            "sample_0001.pgm",
            "manifest.json",
        ]
        dataset, manifest = await modelzoo.datasets.load_dataset(directory)
        assert manifest["files"][0] == "images/sample_0000.pgm"
        assert dataset.data.shape == (2, 8, 8, 1)
        assert np.max(np.abs(dataset.data - make_dataset(settings, 1).data)) <= 1.0 / 255.0
        assert manifest["ground_truth"]["kind"] == "stripes"

    @pytest.mark.anyio
    async def test_errors(self, mocker: MockerFixture, tmp_path: Path) -> None:
        """Assert that generation errors are logged, and raised unless suppressed."""
        logger = mocker.patch.object(modelzoo.datasets, "logger", autospec=True)
        settings = section("three-moons")
        with pytest.raises(ValueError):
            await modelzoo.datasets.gen_dataset(settings, 1, anyio.Path(tmp_path))
        paths = await modelzoo.datasets.gen_dataset(
            settings, 1, anyio.Path(tmp_path), raise_exceptions=False
        )
        assert paths == []
        assert logger.error.call_count == 2

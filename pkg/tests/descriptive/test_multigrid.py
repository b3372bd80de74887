from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pytest

import modelzoo.descriptive.multigrid
from modelzoo.descriptive.multigrid import (
    GridPyramid,
    build_pyramid,
    fit_multigrid,
    sample_multigrid,
    seed_histogram,
    upsample_nearest,
)
from modelzoo.mcmc import LangevinConfig
from modelzoo.optim import TrainConfig

if TYPE_CHECKING:
    from modelzoo.types import Metrics


class TestPyramid:
    """Test `def build_pyramid` and `def upsample_nearest`."""

    def test_block_means(self) -> None:
        """Assert that every level holds block averages of the image."""
        image = np.arange(16.0).reshape(4, 4)
        coarsest, middle, finest = build_pyramid(image, [1, 2, 4])
        assert coarsest.shape == (1, 1, 1)
        assert coarsest.item() == pytest.approx(7.5)
        assert middle[:, :, 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]
        assert np.array_equal(finest[:, :, 0], image)

    @pytest.mark.parametrize(
        ("grids", "message"),
        (
            ([1, 4, 2], "strictly increasing"),
            ([1, 3, 4], "divide"),
            ([1, 2], "does not match"),
            ([0, 4], "positive"),
        ),
    )
    def test_rejects_grids(self, grids: list[int], message: str) -> None:
        """Assert that grid sizes must form a dividing chain ending at the image size."""
        with pytest.raises(ValueError, match=message):
            build_pyramid(np.zeros((4, 4)), grids)

    def test_rejects_non_square(self) -> None:
        """Assert that images must be square."""
        with pytest.raises(ValueError, match="square"):
            build_pyramid(np.zeros((4, 2)), [1, 2])

    def test_upsample(self) -> None:
        """Assert that nearest-neighbor upsampling replicates every pixel."""
        images = np.array([[[[1.0], [2.0]], [[3.0], [4.0]]]])
        large = upsample_nearest(images, 2)
        assert large.shape == (1, 4, 4, 1)
        assert large[0, :, :, 0].tolist() == [
            [1.0, 1.0, 2.0, 2.0],
            [1.0, 1.0, 2.0, 2.0],
            [3.0, 3.0, 4.0, 4.0],
            [3.0, 3.0, 4.0, 4.0],
        ]


class TestGridPyramid:
    """Test `class GridPyramid` and its 1×1 seeds."""

    def test_seed_histogram(self) -> None:
        """Assert that seed histograms are per-channel distributions over [-1, 1]."""
        coarsest = np.array([[[[0.55, -2.0]]], [[[0.55, 0.05]]]])
        edges, histogram = seed_histogram(coarsest)
        assert edges[0] == -1.0 and edges[-1] == 1.0
        assert histogram.shape == (2, 20)
        assert np.allclose(histogram.sum(axis=1), 1.0)
        assert histogram[1, 0] == 0.5

    def test_seeds(self, rng: np.random.Generator) -> None:
        """Assert that seeds fall inside the bins that hold mass."""
        edges, histogram = seed_histogram(np.full((3, 1, 1, 1), 0.55))
        pyramid = GridPyramid((1,), (), edges, histogram)
        seeds = pyramid.seed(50, rng)
        assert seeds.shape == (50, 1, 1, 1)
        assert np.all((seeds >= 0.5 - 1e-12) & (seeds <= 0.6 + 1e-12))

    def test_rejects(self, rng: np.random.Generator) -> None:
        """Assert that pyramids start at 1×1 and hold one model per finer grid."""
        edges, histogram = seed_histogram(np.zeros((2, 1, 1, 1)))
        model = modelzoo.descriptive.multigrid.default_grid_model(2, 1, rng, channel_divisor=32)
        with pytest.raises(ValueError, match="1×1"):
            GridPyramid((2, 4), (model,), edges, histogram)
        with pytest.raises(ValueError, match="as many models"):
            GridPyramid((1, 2, 4), (model,), edges, histogram)

    @pytest.mark.parametrize("size", (4, 16, 32))
    def test_default_models(self, rng: np.random.Generator, size: int) -> None:
        """Assert that the default score network gives one score per image."""
        model = modelzoo.descriptive.multigrid.default_grid_model(
            size, 3, rng, channel_divisor=32
        )
        assert model.score(np.zeros((2, size, size, 3))).shape == (2,)


class TestFit:
    """Test `def fit_multigrid` and `def sample_multigrid`."""

    def test_fit_and_sample(self, rng: np.random.Generator) -> None:
        """Assert that a short fit trains every grid and samples at the finest size."""
        data = rng.uniform(-0.5, 0.5, size=(6, 4, 4))
        lang_cfg = LangevinConfig(step_size=0.1, steps=3)
        metrics: Metrics = []
        pyramid = fit_multigrid(
            data,
            [2, 4],
            lang_cfg,
            TrainConfig(epochs=2, batch_size=4, learning_rate=0.01, n_chains=3),
            channel_divisor=32,
            rng=rng,
            metrics=metrics,
        )
        assert pyramid.grids == (1, 2, 4)
        assert len(pyramid.models) == 2
        assert [set(row) for row in metrics] == [
            {"iteration", "discrepancy_2", "discrepancy_4"}
        ] * 2
        samples = sample_multigrid(pyramid, lang_cfg, rng, n=2)
        assert samples.shape == (2, 4, 4, 1)
        assert np.all(np.isfinite(samples))

    def test_pyramid_consistency(self, rng: np.random.Generator) -> None:
        """Assert that block-averaged fine samples look like the coarse grid's own samples."""
        data = rng.uniform(-0.5, 0.5, size=(6, 4, 4))
        lang_cfg = LangevinConfig(step_size=0.01, steps=3)
        pyramid = fit_multigrid(
            data,
            [2, 4],
            lang_cfg,
            TrainConfig(epochs=2, batch_size=4, learning_rate=0.01, n_chains=3),
            channel_divisor=32,
            rng=rng,
        )
        fine = sample_multigrid(pyramid, lang_cfg, rng, n=1000)
        averaged = np.stack([build_pyramid(image, [1, 2, 4])[1] for image in fine])
        coarse_pyramid = GridPyramid((1, 2), pyramid.models[:1], pyramid.edges, pyramid.histogram)
        coarse = sample_multigrid(coarse_pyramid, lang_cfg, rng, n=1000)
        edges = np.linspace(-1.0, 1.0, 21)
        p = np.histogram(np.clip(averaged, -1.0, 1.0), edges)[0] / averaged.size
        q = np.histogram(np.clip(coarse, -1.0, 1.0), edges)[0] / coarse.size
        assert 0.5 * np.abs(p - q).sum() < 0.2

from __future__ import annotations

from typing import TYPE_CHECKING

import anyio
import numpy as np
import pytest

import modelzoo.artifacts

if TYPE_CHECKING:
    from pathlib import Path

    from pytest_mock import MockerFixture


class TestQuantize:
    """Test the mapping between [-1, 1] values and 8-bit levels."""

    def test_endpoints_and_clamping(self) -> None:
        """Assert that the range ends map to 0 and 255 and outliers are clamped."""
        levels = modelzoo.artifacts.quantize([-3.0, -1.0, 0.0, 1.0, 9.0])
        assert levels.tolist() == [0, 0, 128, 255, 255]

    def test_dequantize(self) -> None:
        """Assert that dequantized levels are within half a level of the original."""
        values = np.linspace(-1.0, 1.0, 11)
        restored = modelzoo.artifacts.dequantize(modelzoo.artifacts.quantize(values))
        assert np.max(np.abs(restored - values)) <= 1.0 / 255.0


class TestCsv:
    """Test CSV formatting and parsing."""

    def test_format(self) -> None:
        """Assert that integral floats are written without a fraction."""
        text = modelzoo.artifacts.format_csv(["a", "b"], [[1.0, 0.25], [2, "x"]])
        assert text == "a,b\n1,0.25\n2,x\n"

    def test_row_length(self) -> None:
        """Assert that rows must match the header."""
        with pytest.raises(ValueError, match="fields"):
            modelzoo.artifacts.format_csv(["a"], [[1.0, 2.0]])

    def test_parse(self) -> None:
        """Assert that parsed tables keep the shortest round-trip floats."""
        value = 0.1 + 0.2
        header, table = modelzoo.artifacts.parse_csv(
            modelzoo.artifacts.format_csv(["v", "w"], [[value, -3.0]])
        )
        assert header == ["v", "w"]
        assert table[0, 0] == value
        with pytest.raises(ValueError, match="header"):
            modelzoo.artifacts.parse_csv("\n\n")


class TestPnm:
    """Test binary PGM and PPM encoding."""

    def test_pgm_header(self) -> None:
        """Assert that grayscale images get a P5 header with width before height."""
        data = modelzoo.artifacts.encode_pnm(np.zeros((2, 3)))
        assert data.startswith(b"P5\n3 2\n255\n")
        assert len(data) == len(b"P5\n3 2\n255\n") + 6

    def test_decode(self) -> None:
        """Assert that decoding restores the quantized levels of a color image."""
        image = np.linspace(-1.0, 1.0, 12).reshape(2, 2, 3)
        levels = modelzoo.artifacts.decode_pnm(modelzoo.artifacts.encode_pnm(image))
        assert levels.shape == (2, 2, 3)
        assert np.array_equal(levels, modelzoo.artifacts.quantize(image))

    def test_comments(self) -> None:
        """Assert that header comments are skipped."""
        data = b"P5\n# made by hand\n2 1\n255\n\x00\xff"
        assert modelzoo.artifacts.decode_pnm(data).tolist() == [[0, 255]]

    @pytest.mark.parametrize(
        "data", (b"P5\n2 1\n", b"P2\n1 1\n255\n\x00", b"P5\n2 2\n255\n\x00")
    )
    def test_rejects(self, data: bytes) -> None:
        """Assert that truncated, ASCII and short images are rejected."""
        with pytest.raises(ValueError):
            modelzoo.artifacts.decode_pnm(data)

    def test_rejects_shape(self) -> None:
        """Assert that only one- and three-channel images can be encoded."""
        with pytest.raises(ValueError, match="H×W"):
            modelzoo.artifacts.encode_pnm(np.zeros((2, 2, 2)))


class TestWriteArtifacts:
    """Test `write_artifacts`."""

    @pytest.mark.anyio
    async def test_csv(self, tmp_path: Path) -> None:
        """Assert that tabular payloads are written with default column names."""
        target = anyio.Path(tmp_path) / "points.csv"
        paths = await modelzoo.artifacts.write_artifacts("csv", np.ones((3, 2)), target)
        assert paths == [target]
        header, table = await modelzoo.artifacts.read_csv(target)
        assert header == ["x0", "x1"]
        assert table.shape == (3, 2)

    @pytest.mark.anyio
    async def test_image_batch(self, tmp_path: Path) -> None:
        """Assert that image batches become numbered files in a directory."""
        target = anyio.Path(tmp_path) / "images"
        paths = await modelzoo.artifacts.write_artifacts("pgm", np.zeros((3, 4, 4)), target)
        assert [path.name for path in paths] == [
            "sample_0000.pgm",
            "sample_0001.pgm",
            "sample_0002.pgm",
        ]
        levels = await modelzoo.artifacts.read_pgm(paths[1])
        assert levels.shape == (4, 4)
        assert np.all(levels == 128)

    @pytest.mark.anyio
    async def test_single_color_image(self, tmp_path: Path) -> None:
        """Assert that one color image is written to the destination itself."""
        target = anyio.Path(tmp_path) / "image.ppm"
        await modelzoo.artifacts.write_artifacts("ppm", np.ones((2, 2, 3)), target)
        assert (await modelzoo.artifacts.read_ppm(target)).shape == (2, 2, 3)
        with pytest.raises(ValueError, match="color"):
            await modelzoo.artifacts.read_pgm(target)

    @pytest.mark.anyio
    async def test_unknown_kind(self, tmp_path: Path) -> None:
        """Assert that unknown kinds are rejected unless errors are suppressed."""
        target = anyio.Path(tmp_path) / "x.bmp"
        with pytest.raises(ValueError, match="Unknown artifact kind"):
            await modelzoo.artifacts.write_artifacts(
                "bmp",  # type: ignore[arg-type]
                np.zeros((2, 2)),
                target,
            )
        paths = await modelzoo.artifacts.write_artifacts(
            "bmp",  # type: ignore[arg-type]
            np.zeros((2, 2)),
            target,
            raise_exceptions=False,
        )
        assert paths == []

    @pytest.mark.anyio
    async def test_write_error_is_logged(self, mocker: MockerFixture, tmp_path: Path) -> None:
        """Assert that write failures are logged before being raised."""
        logger = mocker.patch.object(modelzoo.artifacts, "logger", autospec=True)
        target = anyio.Path(tmp_path) / "missing" / "points.csv"
        with pytest.raises(FileNotFoundError):
            await modelzoo.artifacts.write_csv(target, ["a"], [[1.0]])
        logger.error.assert_called_once()
        path = await modelzoo.artifacts.write_csv(target, ["a"], [[1.0]], raise_exceptions=False)
        assert path == target

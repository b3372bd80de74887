from __future__ import annotations

from typing import TYPE_CHECKING

import anyio
import numpy as np
import pytest

import modelzoo.checkpoint
from modelzoo.checkpoint import CheckpointHeader

if TYPE_CHECKING:
    from pathlib import Path

    from pytest_mock import MockerFixture


class TestCheckpointHeader:
    """Test `class CheckpointHeader`."""

    def test_parse_text(self) -> None:
        """Assert that `KEY=value` text is parsed with shell rules."""
        header = CheckpointHeader("family=generative VARIANT='factor analysis' # note")
        assert dict(header) == {"FAMILY": "generative", "VARIANT": "factor analysis"}

    def test_keyword_arguments(self) -> None:
        """Assert that keyword values are stored as strings under upper-cased keys."""
        header = CheckpointHeader(seed=3, sigma2=0.5)
        assert header["seed"] == "3"
        assert header.get_int("SEED") == 3
        assert header.get_float("sigma2") == 0.5
        del header["Seed"]
        assert "SEED" not in header
        assert len(header) == 1

    def test_str_reads_back(self) -> None:
        """Assert that the rendered header parses back to the same mapping."""
        header = CheckpointHeader(note="it's a $HOME test", empty="")
        assert str(header).count("\n") == 2
        assert dict(CheckpointHeader(str(header))) == dict(header)

    @pytest.mark.parametrize("key", ("", "A=B", "TWO WORDS"))
    def test_rejects_keys(self, key: str) -> None:
        """Assert that empty keys and keys with `=` or spaces are rejected."""
        with pytest.raises(KeyError):
            CheckpointHeader()[key] = "value"

    def test_rejects_multiline_values(self) -> None:
        """Assert that values cannot span lines."""
        with pytest.raises(ValueError, match="spans lines"):
            CheckpointHeader(note="one\ntwo")

    def test_rejects_non_string_args(self) -> None:
        """Assert that positional arguments must be text."""
        with pytest.raises(TypeError):
            CheckpointHeader(1)  # type: ignore[arg-type]

    def test_missing_numbers(self) -> None:
        """Assert that missing numeric keys fall back to a default or raise."""
        header = CheckpointHeader()
        assert header.get_int("rounds", 4) == 4
        assert header.get_float("lam", 0.1) == 0.1
        with pytest.raises(KeyError, match="ROUNDS"):
            header.get_int("rounds")
        with pytest.raises(KeyError):
            header.get_float("lam")

    def test_tensor_names(self) -> None:
        """Assert that tensor names are listed in stored order."""
        assert CheckpointHeader("TENSORS=theta/W,theta/b").tensor_names == ["theta/W", "theta/b"]
        assert CheckpointHeader().tensor_names == []


class TestEncoding:
    """Test `encode_checkpoint` and `decode_checkpoint`."""

    def test_layout(self) -> None:
        """Assert that the header ends with an empty line followed by tensor blobs."""
        data = modelzoo.checkpoint.encode_checkpoint(
            CheckpointHeader(family="rbm"), {"W": np.eye(2), "b": np.zeros(2)}
        )
        text, _, blobs = data.partition(b"\n\n")
        assert text.decode().splitlines() == ["FAMILY=rbm", "TENSORS=W,b"]
        assert len(blobs) == 8 * (1 + 2 + 4) + 8 * (1 + 1 + 2)

    def test_decode(self) -> None:
        """Assert that names, shapes and values come back in stored order."""
        tensors = {"theta/W": np.arange(6.0).reshape(2, 3), "theta/b": np.array([0.5])}
        header, decoded = modelzoo.checkpoint.decode_checkpoint(
            modelzoo.checkpoint.encode_checkpoint(CheckpointHeader(seed=1), tensors)
        )
        assert header["SEED"] == "1"
        assert list(decoded) == ["theta/W", "theta/b"]
        assert np.array_equal(decoded["theta/W"], tensors["theta/W"])

    def test_header_is_not_modified(self) -> None:
        """Assert that encoding leaves the caller's header untouched."""
        header = CheckpointHeader(family="rbm")
        modelzoo.checkpoint.encode_checkpoint(header, {"W": np.eye(2)})
        assert "TENSORS" not in header

    @pytest.mark.parametrize("name", ("", "a,b"))
    def test_rejects_names(self, name: str) -> None:
        """Assert that empty names and names with commas cannot be stored."""
        with pytest.raises(ValueError, match="cannot be stored"):
            modelzoo.checkpoint.encode_checkpoint(CheckpointHeader(), {name: np.zeros(1)})

    def test_rejects_corrupt(self) -> None:
        """Assert that missing separators and tensor count mismatches are rejected."""
        with pytest.raises(ValueError, match="empty line"):
            modelzoo.checkpoint.decode_checkpoint(b"FAMILY=rbm\n")
        data = modelzoo.checkpoint.encode_checkpoint(CheckpointHeader(), {"W": np.eye(2)})
        with pytest.raises(ValueError, match="holds"):
            modelzoo.checkpoint.decode_checkpoint(data.replace(b"TENSORS=W", b"TENSORS=W,V"))

    def test_prefixes(self) -> None:
        """Assert that prefixes separate the parameter sets of one checkpoint."""
        merged = {
            **modelzoo.checkpoint.prefixed({"W1": np.eye(2)}, "theta/"),
            **modelzoo.checkpoint.prefixed({"W1": np.ones(2)}, "alpha/"),
        }
        assert sorted(merged) == ["alpha/W1", "theta/W1"]
        restored = modelzoo.checkpoint.unprefixed(merged, "alpha/")
        assert list(restored) == ["W1"]
        assert restored["W1"].tolist() == [1.0, 1.0]


class TestFiles:
    """Test `dump_checkpoint` and `load_checkpoint`."""

    @pytest.mark.anyio
    async def test_dump_and_load(self, tmp_path: Path) -> None:
        """Assert that a dumped checkpoint loads back with its header."""
        destination = anyio.Path(tmp_path) / "checkpoint.bin"
        path = await modelzoo.checkpoint.dump_checkpoint(
            destination, CheckpointHeader(family="pca"), {"W": np.eye(3)}
        )
        assert path == await destination.resolve()
        header, tensors = await modelzoo.checkpoint.load_checkpoint(path)
        assert header["FAMILY"] == "pca"
        assert np.array_equal(tensors["W"], np.eye(3))

    @pytest.mark.anyio
    async def test_dump_error(self, mocker: MockerFixture, tmp_path: Path) -> None:
        """Assert that write errors are logged, and raised unless suppressed."""
        logger = mocker.patch.object(modelzoo.checkpoint, "logger", autospec=True)
        destination = anyio.Path(tmp_path) / "missing" / "checkpoint.bin"
        with pytest.raises(FileNotFoundError):
            await modelzoo.checkpoint.dump_checkpoint(destination, CheckpointHeader(), {})
        path = await modelzoo.checkpoint.dump_checkpoint(
            destination, CheckpointHeader(), {}, raise_exceptions=False
        )
        assert path == destination
        assert logger.error.call_count == 2

    @pytest.mark.anyio
    async def test_load_missing(self, mocker: MockerFixture, tmp_path: Path) -> None:
        """Assert that a missing checkpoint is logged and raised."""
        logger = mocker.patch.object(modelzoo.checkpoint, "logger", autospec=True)
        with pytest.raises(FileNotFoundError):
            await modelzoo.checkpoint.load_checkpoint(anyio.Path(tmp_path) / "none.bin")
        logger.error.assert_called_once()

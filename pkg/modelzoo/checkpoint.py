"""Model checkpoints: a `KEY=value` text header, an empty line, then tensor blobs."""

from __future__ import annotations

import os
import shlex
from collections.abc import Mapping, MutableMapping
from typing import TYPE_CHECKING

import anyio
import numpy as np

from modelzoo.tensor import Tensor, iter_tensors
from modelzoo.utilities import logger

if TYPE_CHECKING:
    from collections.abc import Iterator

    from numpy.typing import ArrayLike

    from modelzoo.types import Array

SEPARATOR = b"\n\n"


class CheckpointHeader(MutableMapping[str, str]):
    """Header of a checkpoint file.
    ---

    Keys are upper-cased and values are stored as strings. Text passed in is
    parsed with shell rules, one `KEY=value` pair per token, so values written
    by `str()` (which shell-quotes them) read back unchanged.
    """

    __slots__ = ("_data",)

    def __init__(self, *args: str, **kwargs: object) -> None:
        self._data: dict[str, str] = {}
        self.update_from(*args, **kwargs)

    def __getitem__(self, key: str) -> str:
        return self._data[key.upper()]

    def __setitem__(self, key: str, value: str) -> None:
        if not key or "=" in key or any(c.isspace() for c in key):
            raise KeyError(f"Invalid checkpoint header key {key!r}")
        if "\n" in str(value):
            raise ValueError(f"Checkpoint header value for {key!r} spans lines")
        self._data[key.upper()] = str(value)

    def __delitem__(self, key: str) -> None:
        del self._data[key.upper()]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __str__(self) -> str:
        return "".join(f"{key}={shlex.quote(value)}\n" for key, value in self._data.items())

    def __repr__(self) -> str:
        return f"CheckpointHeader({self._data!r})"

    def _parse_args(self, *args: str) -> tuple[tuple[str, str], ...]:
        if any(not isinstance(arg, str) for arg in args):
            raise TypeError("Checkpoint headers are parsed from strings")
        parsed: list[str] = []
        for arg in args:
            parsed += shlex.split(arg, comments=True, posix=True)
        return tuple(
            (split_arg[0].strip(" \n\"'").upper(), split_arg[1])
            for a in parsed
            if len(split_arg := a.split(sep="=", maxsplit=1)) == 2
        )

    def update_from(self, *args: str, **kwargs: object) -> None:
        """Set keys from `KEY=value` text and from keyword arguments."""
        for key, value in self._parse_args(*args):
            self[key] = value
        for key, value in kwargs.items():
            self[key] = str(value)

    def get_int(self, key: str, default: int | None = None) -> int:
        value = self.get(key)
        if value is None:
            if default is None:
                raise KeyError(f"Checkpoint header has no {key.upper()}")
            return default
        return int(value)

    def get_float(self, key: str, default: float | None = None) -> float:
        value = self.get(key)
        if value is None:
            if default is None:
                raise KeyError(f"Checkpoint header has no {key.upper()}")
            return default
        return float(value)

    @property
    def tensor_names(self) -> list[str]:
        names = self.get("TENSORS", "")
        return [name for name in names.split(",") if name]


def encode_checkpoint(header: CheckpointHeader, tensors: Mapping[str, ArrayLike]) -> bytes:
    names = list(tensors)
    bad = [name for name in names if not name or "," in name]
    if bad:
        raise ValueError(f"Tensor names {bad} cannot be stored in a checkpoint")
    header = CheckpointHeader(str(header))
    header["TENSORS"] = ",".join(names)
    blobs = b"".join(Tensor(tensors[name]).to_bytes() for name in names)
    return str(header).encode("utf-8") + b"\n" + blobs


def decode_checkpoint(data: bytes) -> tuple[CheckpointHeader, dict[str, Array]]:
    text, separator, blobs = data.partition(SEPARATOR)
    if not separator:
        raise ValueError("Checkpoint header is not terminated by an empty line")
    header = CheckpointHeader(text.decode("utf-8"))
    names = header.tensor_names
    tensors = list(iter_tensors(blobs))
    if len(tensors) != len(names):
        raise ValueError(f"Checkpoint names {len(names)} tensors but holds {len(tensors)}")
    return header, {name: tensor.array for name, tensor in zip(names, tensors)}


async def dump_checkpoint(
    destination: os.PathLike[str] | str,
    header: CheckpointHeader,
    tensors: Mapping[str, ArrayLike],
    *,
    raise_exceptions: bool = True,
) -> anyio.Path:
    """Dump a header and named tensors to a checkpoint file."""
    path = anyio.Path(destination)
    try:
        await path.write_bytes(encode_checkpoint(header, tensors))
        logger.info(f"modelzoo dumped {len(tensors)} tensors to {path}")
        return await path.resolve(strict=raise_exceptions)
    except Exception as e:
        logger.error(f"modelzoo error: {e.__class__.__qualname__} {e}")
        if raise_exceptions:
            raise
    return path


async def load_checkpoint(
    source: os.PathLike[str] | str,
) -> tuple[CheckpointHeader, dict[str, Array]]:
    """Load a checkpoint file. Tensors come back keyed by name, in stored order."""
    try:
        path = await anyio.Path(source).resolve(strict=True)
        header, tensors = decode_checkpoint(await path.read_bytes())
        logger.info(f"modelzoo loaded {len(tensors)} tensors from {path}")
        return header, tensors
    except Exception as e:
        logger.error(f"modelzoo error: {e.__class__.__qualname__} {e}")
        raise


def prefixed(params: Mapping[str, Array], prefix: str) -> dict[str, Array]:
    return {f"{prefix}{name}": np.asarray(value) for name, value in params.items()}


def unprefixed(tensors: Mapping[str, Array], prefix: str) -> dict[str, Array]:
    return {
        name.removeprefix(prefix): value
        for name, value in tensors.items()
        if name.startswith(prefix)
    }

from __future__ import annotations

import math
import os
from collections.abc import Iterable, Sequence
from typing import TYPE_CHECKING, Literal

import anyio
import numpy as np

from modelzoo.utilities import logger

if TYPE_CHECKING:
    from numpy.typing import ArrayLike, NDArray

    from modelzoo.types import Array

ArtifactKind = Literal["csv", "pgm", "ppm"]


def quantize(values: ArrayLike) -> NDArray[np.uint8]:
    """Map the data range [-1, 1] linearly onto 0..255, clamping outliers."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.rint((v + 1.0) * 127.5), 0, 255).astype(np.uint8)


def dequantize(levels: ArrayLike) -> Array:
    return np.asarray(levels, dtype=np.float64) / 127.5 - 1.0


def _format_value(value: object) -> str:
    if isinstance(value, str):
        return value
    number = float(value)  # type: ignore[arg-type]
    if number.is_integer() and abs(number) < 2**53:
        return str(int(number))
    return repr(number)


def format_csv(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"Row has {len(row)} fields, header has {len(header)}")
        lines.append(",".join(_format_value(value) for value in row))
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> tuple[list[str], Array]:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValueError("CSV has no header row")
    header = lines[0].split(",")
    rows = [[float(field) for field in line.split(",")] for line in lines[1:]]
    return header, np.array(rows, dtype=np.float64).reshape(len(rows), len(header))


def encode_pnm(image: ArrayLike) -> bytes:
    """Binary PGM (P5) for `H×W` images, binary PPM (P6) for `H×W×3` images."""
    levels = quantize(image)
    if levels.ndim == 3 and levels.shape[2] == 1:
        levels = levels[:, :, 0]
    if levels.ndim == 2:
        magic = b"P5"
    elif levels.ndim == 3 and levels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"Expected an H×W or H×W×3 image, got shape {levels.shape}")
    height, width = levels.shape[:2]
    return magic + f"\n{width} {height}\n255\n".encode("ascii") + levels.tobytes()


def decode_pnm(data: bytes) -> NDArray[np.uint8]:
    """Decode binary PGM/PPM into its raw 0..255 levels."""
    fields: list[bytes] = []
    offset = 0
    while len(fields) < 4:
        while offset < len(data) and data[offset : offset + 1].isspace():
            offset += 1
        if data[offset : offset + 1] == b"#":
            offset = data.index(b"\n", offset) + 1
            continue
        end = offset
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        if end == offset:
            raise ValueError("Truncated PGM/PPM header")
        fields.append(data[offset:end])
        offset = end
    magic, width, height, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"Unsupported image format {magic!r} with maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    pixels = np.frombuffer(data, dtype=np.uint8, offset=offset + 1)
    if pixels.size != width * height * channels:
        raise ValueError(f"Expected {width * height * channels} pixels, got {pixels.size}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape).copy()


async def write_csv(
    destination: os.PathLike[str] | str,
    header: Sequence[str],
    rows: Iterable[Sequence[object]],
    *,
    raise_exceptions: bool = True,
) -> anyio.Path:
    """Write a table with a header row. Values use the shortest round-trip float repr."""
    path = anyio.Path(destination)
    try:
        await path.write_text(format_csv(header, rows), encoding="utf-8")
        logger.debug(f"modelzoo wrote {path}")
    except Exception as e:
        logger.error(f"modelzoo error: {e.__class__.__qualname__} {e}")
        if raise_exceptions:
            raise
    return path


async def read_csv(source: os.PathLike[str] | str) -> tuple[list[str], Array]:
    return parse_csv(await anyio.Path(source).read_text(encoding="utf-8"))


async def read_pgm(source: os.PathLike[str] | str) -> NDArray[np.uint8]:
    levels = decode_pnm(await anyio.Path(source).read_bytes())
    if levels.ndim != 2:
        raise ValueError(f"{source} is a color image; use read_ppm")
    return levels


async def read_ppm(source: os.PathLike[str] | str) -> NDArray[np.uint8]:
    levels = decode_pnm(await anyio.Path(source).read_bytes())
    if levels.ndim != 3:
        raise ValueError(f"{source} is a grayscale image; use read_pgm")
    return levels


def _image_batch(kind: ArtifactKind, payload: Array) -> tuple[Array, bool]:
    single = 2 if kind == "pgm" else 3
    if kind == "ppm" and payload.shape[-1] != 3:
        raise ValueError(f"PPM images need 3 channels, got shape {payload.shape}")
    if payload.ndim == single:
        return payload[None], True
    if payload.ndim == single + 1:
        return payload, False
    raise ValueError(f"Payload of shape {payload.shape} is not a {kind} image or batch")


async def write_artifacts(
    kind: ArtifactKind,
    payload: ArrayLike,
    destination: os.PathLike[str] | str,
    *,
    header: Sequence[str] | None = None,
    prefix: str = "sample",
    raise_exceptions: bool = True,
) -> list[anyio.Path]:
    """Write tabular data as CSV, or images as PGM/PPM.
    ---

    A CSV payload is a 2D array written to `destination`, with columns named by
    `header` (default `x0, x1, ...`). An image payload is either one image,
    written to `destination`, or a batch written into the `destination`
    directory as `{prefix}_0000.pgm`, `{prefix}_0001.pgm`, and so on.
    Values are rescaled from [-1, 1] to 0..255 with clamping.
    """
    data = np.asarray(payload, dtype=np.float64)
    target = anyio.Path(destination)
    try:
        if kind == "csv":
            table = data.reshape(len(data), -1) if data.ndim != 1 else data[:, None]
            names = header or [f"x{j}" for j in range(table.shape[1])]
            return [await write_csv(target, names, table.tolist())]
        if kind not in ("pgm", "ppm"):
            raise ValueError(f"Unknown artifact kind {kind!r}; expected csv, pgm or ppm")
        images, single = _image_batch(kind, data)
        if single:
            await target.write_bytes(encode_pnm(images[0]))
            return [target]
        await target.mkdir(parents=True, exist_ok=True)
        width = max(4, int(math.log10(max(len(images), 1))) + 1)
        paths = [target / f"{prefix}_{i:0{width}d}.{kind}" for i in range(len(images))]
        async with anyio.create_task_group() as tg:
            for path, image in zip(paths, images):
                tg.start_soon(path.write_bytes, encode_pnm(image))
        logger.info(f"modelzoo wrote {len(paths)} {kind} images to {target}")
        return paths
    except Exception as e:
        logger.error(f"modelzoo error: {e.__class__.__qualname__} {e}")
        if raise_exceptions:
            raise
    return []

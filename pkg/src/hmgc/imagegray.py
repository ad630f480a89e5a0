"""Image-gray encoding: pack one parameter snapshot into a zero-padded square
8-bit matrix, plus binary PGM persistence.

A snapshot of P values becomes a side x side matrix with side = ceil(sqrt(P)).
The first P cells (row-major) hold the min-max normalized values scaled to
[0, 255]; the trailing side^2 - P cells are zero. Normalization is per image
by default; a fixed per-parameter range can be supplied instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = ["GrayImage", "encode", "write_pgm", "read_pgm"]


@dataclass(frozen=True, eq=False)
class GrayImage:
    side: int
    pixels: np.ndarray  # uint8, shape (side, side), row-major

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.side == other.side and np.array_equal(self.pixels, other.pixels)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def encode(snapshot, value_range: tuple | None = None) -> GrayImage:
    """Encode one snapshot (or bare value vector) as a grayscale image.

    value_range: optional (low, high) arrays or scalars giving a fixed
    per-parameter normalization range; default is the snapshot's own min/max.
    Values at or below low map to 0, at or above high map to 255. A degenerate
    range (high == low) maps to 0.
    """
    values = np.asarray(getattr(snapshot, "values", snapshot), dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("snapshot must be a non-empty 1-D value vector")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite value in snapshot")

    p = values.size
    side = math.isqrt(p)
    if side * side < p:
        side += 1

    if value_range is None:
        low = values.min()
        high = values.max()
    else:
        low = np.asarray(value_range[0], dtype=np.float64)
        high = np.asarray(value_range[1], dtype=np.float64)

    span = high - low
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(span > 0, 255.0 * (values - low) / span, 0.0)
    scaled = np.clip(scaled, 0.0, 255.0)
    data = _round_half_up(scaled).astype(np.uint8)

    pixels = np.zeros(side * side, dtype=np.uint8)
    pixels[:p] = data
    return GrayImage(side=side, pixels=pixels.reshape(side, side))


def write_pgm(image: GrayImage, path) -> None:
    """Write a binary PGM (P5, maxval 255). No comment lines are emitted."""
    header = f"P5\n{image.side} {image.side}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(image.pixels.astype(np.uint8, copy=False).tobytes())


def _read_header_tokens(data: bytes, start: int, count: int) -> tuple[list[int], int]:
    """Read `count` whitespace-separated integer tokens, skipping # comments."""
    tokens: list[int] = []
    i = start
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < n and not data[j : j + 1].isspace():
            j += 1
        if j == i:
            raise DataError("malformed PGM header: missing token")
        try:
            tokens.append(int(data[i:j]))
        except ValueError as exc:
            raise DataError(f"malformed PGM header: {data[i:j]!r}") from exc
        i = j
    return tokens, i


def read_pgm(path) -> GrayImage:
    """Read a binary PGM written by write_pgm (comments are tolerated)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 2:
        raise DataError("malformed PGM header: file too short")
    magic = data[:2]
    if magic != b"P5":
        raise DataError(f"unsupported PGM variant: {magic!r} (only binary P5)")
    (width, height, maxval), pos = _read_header_tokens(data, 2, 3)
    if maxval != 255:
        raise DataError(f"unsupported PGM maxval {maxval} (expected 255)")
    if width <= 0 or height <= 0:
        raise DataError("malformed PGM header: non-positive dimensions")
    if width != height:
        raise DataError(f"expected square image, got {width}x{height}")
    pos += 1  # single whitespace byte terminates the header
    payload = data[pos : pos + width * height]
    if len(payload) != width * height:
        raise DataError("truncated PGM payload")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GrayImage(side=width, pixels=pixels.copy())

"""Dense float64 matrices and counter-based seeded random streams."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import numpy.typing as npt

# 2-D float64 array; column vectors are (d, 1). Library functions never mutate
# their inputs, so returned matrices can be shared between tasks.
Matrix = npt.NDArray[np.float64]

_U64_MAX = 2**64 - 1


class NumericsError(Exception):
    """Base class for every error raised by the numeric core."""


class DimensionError(NumericsError, ValueError):
    """Operand shapes do not conform."""


class DomainError(NumericsError, ValueError):
    """An argument lies outside the domain of the operation."""


class InvalidStateError(NumericsError, RuntimeError):
    """An object is not in a state that allows the requested operation."""


def shape_text(m: Matrix) -> str:
    return "x".join(str(n) for n in np.shape(m))


def as_matrix(values) -> Matrix:
    """Coerce nested sequences or arrays into a 2-D float64 matrix.

    1-D input becomes a column vector.
    """
    m = np.array(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(-1, 1)
    if m.ndim != 2 or m.size == 0:
        raise DimensionError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


def zeros(rows: int, cols: int) -> Matrix:
    _check_dims(rows, cols)
    return np.zeros((rows, cols), dtype=np.float64)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {shape_text(a)} by {shape_text(b)}")
    return a @ b


def frobenius_norm(m: Matrix) -> float:
    return math.sqrt(float(np.sum(np.square(m))))


def pack_stream_id(*coords: Union[int, str]) -> int:
    """Pack experiment coordinates (names, rank, repeat, ...) into a 64-bit stream id."""
    text = "/".join(str(c) for c in coords).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Philox stream keyed by (seed, stream_id).

    Each call to :meth:`generator` restarts the stream from counter zero, so a
    stream is a value: equal keys give bit-identical draws on every platform.
    Normals come from numpy's ziggurat sampler over the Philox bits.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        for name in ("seed", "stream_id"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or not 0 <= value <= _U64_MAX:
                raise DomainError(f"{name} must be an unsigned 64-bit integer, got {value!r}")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, *coords: Union[int, str]) -> "RngStream":
        return RngStream(self.seed, pack_stream_id(self.stream_id, *coords))


RandomSource = Union[RngStream, np.random.Generator]


def _generator(rng: RandomSource) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


def gaussian_fill(
    rows: int,
    cols: int,
    mean: float,
    variance: float,
    rng: RandomSource,
) -> Matrix:
    """iid normal entries.

    An :class:`RngStream` always yields the same matrix; a live
    ``numpy.random.Generator`` continues its own sequence.
    """
    if not variance >= 0:
        raise DomainError(f"variance must be non-negative, got {variance}")
    _check_dims(rows, cols)
    z = _generator(rng).standard_normal((rows, cols))
    return mean + math.sqrt(variance) * z


def _check_dims(rows: int, cols: int) -> None:
    if rows < 1 or cols < 1:
        raise DimensionError(f"matrix dimensions must be positive, got {rows}x{cols}")

"""Dense spatiotemporal fields, trajectory windows and the ``.rapf`` file format."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FIELD_MAGIC = b"RAPF"
FIELD_VERSION = 1
_HEADER = struct.Struct("<4sI4I")
_MAX_ELEMENTS = 2**62 // 4


class DimensionError(ValueError):
    """Raised when array shapes do not agree."""


class FormatError(ValueError):
    """Raised when a binary file is malformed. Carries the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a field."""


@dataclass(frozen=True, eq=False)
class SpatiotemporalField:
    """A T x C x H x W block of float32 values stored row-major.

    ``data`` is always a C-contiguous float32 array of shape ``(t, c, h, w)``.
    Construction rejects non-finite values.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise DimensionError(f"field must be 4-D (t, c, h, w), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
            raise NonFiniteError(f"non-finite value at flat offset {bad}")
        arr = arr.view()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def zeros(cls, t: int, c: int, h: int, w: int) -> "SpatiotemporalField":
        return cls(np.zeros((t, c, h, w), dtype=np.float32))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def t(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def size(self) -> int:
        return self.data.size

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def offset(self, t: int, c: int, h: int, w: int) -> int:
        _, C, H, W = self.shape
        return ((t * C + c) * H + h) * W + w

    def frames(self, start: int, stop: int) -> "SpatiotemporalField":
        return SpatiotemporalField(self.data[start:stop])

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpatiotemporalField):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))

    def __repr__(self) -> str:
        return f"SpatiotemporalField(shape={self.shape})"


@dataclass(frozen=True)
class TrajectoryPair:
    """An (input window, future window) exemplar cut from one trajectory."""

    x: SpatiotemporalField
    y: SpatiotemporalField
    source_id: int
    start_index: int

    def __post_init__(self):
        if self.x.shape[1:] != self.y.shape[1:]:
            raise DimensionError(
                f"x and y disagree on (c, h, w): {self.x.shape} vs {self.y.shape}"
            )

    @property
    def identity(self) -> tuple[int, int]:
        return (self.source_id, self.start_index)


def check_same_shape(a: SpatiotemporalField, b: SpatiotemporalField) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


_BINOPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def field_binop(a: SpatiotemporalField, b: SpatiotemporalField, op: str) -> SpatiotemporalField:
    """Elementwise ``add``, ``sub`` or ``mul`` in float32."""
    check_same_shape(a, b)
    try:
        fn = _BINOPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; expected one of {sorted(_BINOPS)}") from None
    return SpatiotemporalField(fn(a.data, b.data, dtype=np.float32))


def encode_field(f: SpatiotemporalField) -> bytes:
    return _HEADER.pack(FIELD_MAGIC, FIELD_VERSION, *f.shape) + f.data.astype("<f4").tobytes()


def decode_field(buf: bytes) -> SpatiotemporalField:
    if len(buf) < _HEADER.size:
        raise FormatError(f"header needs {_HEADER.size} bytes, file has {len(buf)}", len(buf))
    magic, version, t, c, h, w = _HEADER.unpack_from(buf, 0)
    if magic != FIELD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FIELD_MAGIC!r}", 0)
    if version != FIELD_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    count = t * c * h * w
    if count > _MAX_ELEMENTS:
        raise FormatError(f"dimension product {t}x{c}x{h}x{w} overflows", 8)
    need = _HEADER.size + 4 * count
    if len(buf) != need:
        kind = "truncated payload" if len(buf) < need else "trailing bytes after payload"
        raise FormatError(
            f"{kind}: header declares {t}x{c}x{h}x{w}={count} floats, "
            f"payload holds {(len(buf) - _HEADER.size) / 4:g}",
            min(len(buf), need),
        )
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=_HEADER.size)
    return SpatiotemporalField(arr.reshape(t, c, h, w))


def write_field(f: SpatiotemporalField, path) -> None:
    Path(path).write_bytes(encode_field(f))


def read_field(path) -> SpatiotemporalField:
    return decode_field(Path(path).read_bytes())


def window_split(
    traj: SpatiotemporalField, t_in: int, t_out: int, stride: int, source_id: int = 0
) -> list[TrajectoryPair]:
    """Cut a trajectory into consecutive (x, y) windows ``stride`` frames apart.

    A trajectory shorter than ``t_in + t_out`` yields an empty list.
    """
    if t_in < 1 or t_out < 1 or stride < 1:
        raise ValueError("t_in, t_out and stride must all be >= 1")
    span = t_in + t_out
    if traj.t < span:
        log.info("trajectory %s has %d frames, need %d; no windows", source_id, traj.t, span)
        return []
    n = (traj.t - span) // stride + 1
    pairs = []
    for j in range(n):
        s = j * stride
        pairs.append(
            TrajectoryPair(
                x=SpatiotemporalField(traj.data[s : s + t_in]),
                y=SpatiotemporalField(traj.data[s + t_in : s + span]),
                source_id=source_id,
                start_index=s,
            )
        )
    return pairs

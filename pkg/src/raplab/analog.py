"""Historical analog database: MSE similarity, exact top-k retrieval, persistence."""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .field import (
    DimensionError,
    FormatError,
    SpatiotemporalField,
    TrajectoryPair,
    check_same_shape,
    read_field,
)

DB_MAGIC = b"RAPD"
DB_VERSION = 1
_DB_HEADER = struct.Struct("<4sIQ5I")
_RECORD_IDS = struct.Struct("<QQ")


class RetrievalError(RuntimeError):
    pass


class BuildError(ValueError):
    pass


def similarity(xa: SpatiotemporalField, xb: SpatiotemporalField) -> float:
    """Mean squared difference: float32 difference, float64 left-to-right accumulation."""
    check_same_shape(xa, xb)
    out = np.empty(1, dtype=np.float64)
    kernels.scan_scores(xa.flat()[None, :], xb.flat(), out, 0, 1)
    return float(out[0])


@dataclass(frozen=True)
class ExclusionRule:
    """Which database entries a query may not retrieve.

    ``exact_self`` drops the entry with the query's own (source_id, start_index);
    ``source_window`` drops every entry of the same source whose start index lies
    within ``window_radius`` timesteps of the query's.
    """

    mode: str = "none"
    window_radius: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "exact_self", "source_window"):
            raise ValueError(f"unknown exclusion mode {self.mode!r}")
        if self.window_radius < 0:
            raise ValueError("window_radius must be >= 0")

    def mask(self, db: "AnalogDatabase", identity: Optional[tuple[int, int]]) -> np.ndarray:
        """Boolean array, True where an entry is excluded."""
        if self.mode == "none" or identity is None:
            return np.zeros(len(db), dtype=bool)
        sid, start = identity
        same = db.source_ids == sid
        if self.mode == "exact_self":
            return same & (db.start_indices == start)
        return same & (np.abs(db.start_indices - start) <= self.window_radius)


@dataclass
class RetrievalResult:
    index: int
    score: float
    reference: SpatiotemporalField
    analog_input: SpatiotemporalField


@dataclass
class AnalogDatabase:
    """Ordered (x, y) exemplars stored as contiguous float32 blocks.

    ``xs`` has one flattened input window per row; ``ys`` keeps the future
    windows in ``(N, t_out, c, h, w)`` layout.
    """

    xs: np.ndarray
    ys: np.ndarray
    source_ids: np.ndarray
    start_indices: np.ndarray
    t_in: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xs = np.ascontiguousarray(self.xs, dtype=np.float32)
        self.ys = np.ascontiguousarray(self.ys, dtype=np.float32)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        self.start_indices = np.asarray(self.start_indices, dtype=np.int64)
        n = len(self.source_ids)
        if self.xs.shape[0] != n or self.ys.shape[0] != n or len(self.start_indices) != n:
            raise BuildError("database columns have different lengths")
        _, t_out, c, h, w = self.ys.shape
        if self.xs.shape[1] != self.t_in * c * h * w:
            raise BuildError("x rows do not match the (t_in, c, h, w) implied by y")

    @classmethod
    def from_pairs(cls, pairs: Sequence[TrajectoryPair], provenance: Optional[dict] = None) -> "AnalogDatabase":
        if not pairs:
            raise BuildError("cannot build a database from zero pairs")
        x0, y0 = pairs[0].x.shape, pairs[0].y.shape
        for i, p in enumerate(pairs):
            if p.x.shape != x0 or p.y.shape != y0:
                raise BuildError(f"entry {i} has shapes {p.x.shape}/{p.y.shape}, expected {x0}/{y0}")
        return cls(
            xs=np.stack([p.x.flat() for p in pairs]),
            ys=np.stack([p.y.data for p in pairs]),
            source_ids=[p.source_id for p in pairs],
            start_indices=[p.start_index for p in pairs],
            t_in=x0[0],
            provenance=dict(provenance or {}),
        )

    def __len__(self) -> int:
        return len(self.source_ids)

    @property
    def x_shape(self) -> tuple[int, int, int, int]:
        _, _, c, h, w = self.ys.shape
        return (self.t_in, c, h, w)

    @property
    def y_shape(self) -> tuple[int, int, int, int]:
        return tuple(self.ys.shape[1:])  # type: ignore[return-value]

    def x(self, i: int) -> SpatiotemporalField:
        return SpatiotemporalField(self.xs[i].reshape(self.x_shape))

    def y(self, i: int) -> SpatiotemporalField:
        return SpatiotemporalField(self.ys[i])

    def entry(self, i: int) -> TrajectoryPair:
        return TrajectoryPair(self.x(i), self.y(i), int(self.source_ids[i]), int(self.start_indices[i]))

    def scores(self, query: SpatiotemporalField, workers: int = 1) -> np.ndarray:
        """Similarity of ``query`` to every entry, computed in ``workers`` partitions."""
        if query.shape != self.x_shape:
            raise DimensionError(f"query shape {query.shape} != database x-shape {self.x_shape}")
        out = np.empty(len(self), dtype=np.float64)
        q = query.flat()
        bounds = _partitions(len(self), workers)
        if len(bounds) == 1:
            kernels.scan_scores(self.xs, q, out, 0, len(self))
        else:
            with ThreadPoolExecutor(len(bounds)) as pool:
                list(pool.map(lambda b: kernels.scan_scores(self.xs, q, out, b[0], b[1]), bounds))
        return out


def _partitions(n: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, min(int(workers), n)) if n else 1
    edges = np.linspace(0, n, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a] or [(0, n)]


def _local_topk(scores, allowed, lo, hi, k):
    idx = np.arange(lo, hi)[allowed[lo:hi]]
    order = np.argsort(scores[idx], kind="stable")[:k]
    return [(float(scores[i]), int(i)) for i in idx[order]]


def retrieve(
    db: AnalogDatabase,
    query: SpatiotemporalField,
    k: int = 1,
    excl: ExclusionRule = ExclusionRule(),
    query_identity: Optional[tuple[int, int]] = None,
    workers: int = 1,
) -> list[RetrievalResult]:
    """The ``k`` entries closest to ``query``, ordered by (score, index)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = db.scores(query, workers)
    allowed = ~excl.mask(db, query_identity)
    if not allowed.any():
        raise RetrievalError("no database entries left after exclusion")
    # each partition keeps its own top-k; the merge uses the total order on (score, index)
    candidates = []
    for lo, hi in _partitions(len(db), workers):
        candidates.extend(_local_topk(scores, allowed, lo, hi, k))
    best = sorted(candidates)[:k]
    return [RetrievalResult(i, s, db.y(i), db.x(i)) for s, i in best]


def brute_force_retrieve(
    db: AnalogDatabase,
    query: SpatiotemporalField,
    k: int = 1,
    excl: ExclusionRule = ExclusionRule(),
    query_identity: Optional[tuple[int, int]] = None,
) -> list[tuple[int, float]]:
    """Reference scan: score every entry in one numpy pass, stable-sort them all.

    Shares no code with the partitioned kernel path; exclusion is re-derived
    entry by entry.
    """
    q = query.flat()
    diff = np.subtract(db.xs, q, dtype=np.float32).astype(np.float64)
    scores = np.add.accumulate(diff * diff, axis=1)[:, -1] / float(q.size)
    keep = []
    for i in range(len(db)):
        if query_identity is not None and excl.mode != "none":
            same_source = int(db.source_ids[i]) == query_identity[0]
            gap = abs(int(db.start_indices[i]) - query_identity[1])
            if excl.mode == "exact_self" and same_source and gap == 0:
                continue
            if excl.mode == "source_window" and same_source and gap <= excl.window_radius:
                continue
        keep.append(i)
    if not keep:
        raise RetrievalError("no database entries left after exclusion")
    keep = np.asarray(keep)
    order = np.argsort(scores[keep], kind="stable")[:k]
    return [(int(keep[j]), float(scores[keep[j]])) for j in order]


def build_database(manifest) -> AnalogDatabase:
    """Load the manifest's retrieval library, in manifest order."""
    entries = manifest.retrieval
    if not entries:
        raise BuildError("manifest has an empty retrieval list")
    pairs = []
    shape = None
    for e in entries:
        x = read_field(manifest.resolve(e["x_path"]))
        y = read_field(manifest.resolve(e["y_path"]))
        if shape is None:
            shape = (x.shape, y.shape)
        elif (x.shape, y.shape) != shape:
            raise BuildError(
                f"entry {e['x_path']} has shapes {x.shape}/{y.shape}, expected {shape[0]}/{shape[1]}"
            )
        pairs.append(TrajectoryPair(x, y, int(e["source_id"]), int(e["start_index"])))
    return AnalogDatabase.from_pairs(
        pairs,
        provenance={"manifest": str(manifest.path), "interval": manifest.retrieval_interval},
    )


def encode_database(db: AnalogDatabase) -> bytes:
    t_out, c, h, w = db.y_shape
    parts = [_DB_HEADER.pack(DB_MAGIC, DB_VERSION, len(db), db.t_in, t_out, c, h, w)]
    xs = db.xs.astype("<f4")
    ys = db.ys.astype("<f4").reshape(len(db), -1)
    for i in range(len(db)):
        parts.append(_RECORD_IDS.pack(int(db.source_ids[i]), int(db.start_indices[i])))
        parts.append(xs[i].tobytes())
        parts.append(ys[i].tobytes())
    return b"".join(parts)


def decode_database(buf: bytes) -> AnalogDatabase:
    if len(buf) < _DB_HEADER.size:
        raise FormatError("database header truncated", len(buf))
    magic, version, n, t_in, t_out, c, h, w = _DB_HEADER.unpack_from(buf, 0)
    if magic != DB_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DB_MAGIC!r}", 0)
    if version != DB_VERSION:
        raise FormatError(f"unsupported database version {version}", 4)
    dx, dy = t_in * c * h * w, t_out * c * h * w
    rec = _RECORD_IDS.size + 4 * (dx + dy)
    need = _DB_HEADER.size + n * rec
    if len(buf) != need:
        raise FormatError(f"expected {need} bytes for {n} records, file has {len(buf)}", min(len(buf), need))
    dtype = np.dtype([("sid", "<u8"), ("start", "<u8"), ("x", "<f4", (dx,)), ("y", "<f4", (dy,))])
    recs = np.frombuffer(buf, dtype=dtype, count=n, offset=_DB_HEADER.size)
    return AnalogDatabase(
        xs=recs["x"].astype(np.float32),
        ys=recs["y"].astype(np.float32).reshape(n, t_out, c, h, w),
        source_ids=recs["sid"].astype(np.int64),
        start_indices=recs["start"].astype(np.int64),
        t_in=t_in,
    )


def save_database(db: AnalogDatabase, path) -> None:
    Path(path).write_bytes(encode_database(db))


def load_database(path) -> AnalogDatabase:
    db = decode_database(Path(path).read_bytes())
    db.provenance = {"file": str(path)}
    return db

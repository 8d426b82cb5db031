"""Synthetic trajectory generators and dataset assembly.

Two explicit-Euler systems on a periodic unit-spaced grid:

* advection-diffusion of one scalar (upwind transport, 5-point Laplacian);
* Gray-Scott reaction-diffusion of two species (U, V).

``build_dataset`` simulates many seeded runs, cuts them into windows and
writes a JSON manifest that lists train / val / test pairs and the retrieval
library.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels
from .field import SpatiotemporalField, TrajectoryPair, read_field, window_split, write_field

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"simulation left the float32 range or produced NaN at step {step}")
        self.step = step


@dataclass(frozen=True)
class SimConfig:
    system: str = "gray_scott"
    h: int = 32
    w: int = 32
    dt: float = 1.0
    n_steps: int = 3000
    record_every: int = 200
    # advection-diffusion
    vx: float = 0.0
    vy: float = 0.0
    kappa: float = 0.0
    # gray-scott
    Du: float = 0.16
    Dv: float = 0.08
    F: float = 0.035
    k: float = 0.065
    # initial conditions
    perturb_size: int = 8
    # the square sits at the grid centre shifted by up to this many cells per axis
    perturb_jitter: int = 2
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.system not in ("advection_diffusion", "gray_scott"):
            raise ConfigError(f"unknown system {self.system!r}")
        if not (self.n_steps >= self.record_every >= 1):
            raise ConfigError("need n_steps >= record_every >= 1")
        if self.perturb_size < 0 or self.perturb_jitter < 0 or self.noise < 0:
            raise ConfigError("perturbation size, jitter and noise must be >= 0")
        if self.h < 1 or self.w < 1 or self.dt <= 0:
            raise ConfigError("grid must be non-empty and dt positive")
        if self.system == "advection_diffusion":
            if self.kappa < 0:
                raise ConfigError("kappa must be >= 0")
            if self.kappa * self.dt > 0.25:
                raise ConfigError(f"diffusion bound violated: kappa*dt = {self.kappa * self.dt} > 0.25")
            speed = float(np.hypot(self.vx, self.vy))
            if speed * self.dt > 0.5:
                raise ConfigError(f"CFL bound violated: |v|*dt = {speed * self.dt} > 0.5")
            # the two bounds above do not suffice together: the upwind + 5-point
            # update is monotone only while its centre coefficient stays >= 0
            combined = (abs(self.vx) + abs(self.vy) + 4.0 * self.kappa) * self.dt
            if combined > 1.0:
                raise ConfigError(f"combined bound violated: (|vx|+|vy|+4*kappa)*dt = {combined} > 1")
        else:
            if min(self.Du, self.Dv) < 0:
                raise ConfigError("diffusivities must be >= 0")
            if max(self.Du, self.Dv) * self.dt > 0.25:
                raise ConfigError(
                    f"diffusion bound violated: max(Du, Dv)*dt = {max(self.Du, self.Dv) * self.dt} > 0.25"
                )

    @property
    def channels(self) -> int:
        return 2 if self.system == "gray_scott" else 1

    @property
    def n_frames(self) -> int:
        return self.n_steps // self.record_every + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(**d)


def _check_init(cfg: SimConfig, init: SpatiotemporalField, channels: int):
    if init.shape != (1, channels, cfg.h, cfg.w):
        raise ConfigError(f"initial field must be 1x{channels}x{cfg.h}x{cfg.w}, got {init.shape}")


def simulate_advection_diffusion(cfg: SimConfig, init: SpatiotemporalField) -> SpatiotemporalField:
    if cfg.system != "advection_diffusion":
        raise ConfigError("config is not an advection_diffusion config")
    _check_init(cfg, init, 1)
    u0 = np.ascontiguousarray(init.data[0, 0], dtype=np.float64)
    frames, bad = kernels.advection_diffusion_run(
        u0, float(cfg.vx), float(cfg.vy), float(cfg.kappa), float(cfg.dt), cfg.n_steps, cfg.record_every
    )
    if bad >= 0:
        raise DivergenceError(bad)
    return SpatiotemporalField(frames)


def simulate_gray_scott(cfg: SimConfig, init: SpatiotemporalField) -> SpatiotemporalField:
    if cfg.system != "gray_scott":
        raise ConfigError("config is not a gray_scott config")
    _check_init(cfg, init, 2)
    if init.data.min() < 0.0 or init.data.max() > 1.5:
        raise ConfigError("Gray-Scott initial values must lie in [0, 1.5]")
    u0 = np.ascontiguousarray(init.data[0, 0], dtype=np.float64)
    v0 = np.ascontiguousarray(init.data[0, 1], dtype=np.float64)
    frames, bad = kernels.gray_scott_run(
        u0, v0, float(cfg.Du), float(cfg.Dv), float(cfg.F), float(cfg.k), float(cfg.dt),
        cfg.n_steps, cfg.record_every,
    )
    if bad >= 0:
        raise DivergenceError(bad)
    return SpatiotemporalField(frames)


def simulate(cfg: SimConfig, init: SpatiotemporalField) -> SpatiotemporalField:
    if cfg.system == "gray_scott":
        return simulate_gray_scott(cfg, init)
    return simulate_advection_diffusion(cfg, init)


def initial_condition(cfg: SimConfig, rng: np.random.Generator) -> SpatiotemporalField:
    """Seeded initial state.

    Gray-Scott: U=1, V=0 with one ``perturb_size`` square (U=0.5, V=0.25) near
    the centre, shifted by a random offset of at most ``perturb_jitter`` cells
    per axis (wrapping around the edges), plus uniform noise of amplitude
    ``noise``, clipped to [0, 1.5]. Advection-diffusion: one Gaussian blob of
    random centre and width.
    """
    h, w = cfg.h, cfg.w
    if cfg.system == "gray_scott":
        u = np.ones((h, w))
        v = np.zeros((h, w))
        j = cfg.perturb_jitter
        r0 = (h - cfg.perturb_size) // 2 + int(rng.integers(-j, j + 1))
        c0 = (w - cfg.perturb_size) // 2 + int(rng.integers(-j, j + 1))
        rows = (r0 + np.arange(cfg.perturb_size)) % h
        cols = (c0 + np.arange(cfg.perturb_size)) % w
        u[np.ix_(rows, cols)] = 0.5
        v[np.ix_(rows, cols)] = 0.25
        u += cfg.noise * rng.uniform(-1.0, 1.0, (h, w))
        v += cfg.noise * rng.uniform(-1.0, 1.0, (h, w))
        data = np.clip(np.stack([u, v]), 0.0, 1.5)
        return SpatiotemporalField(data[None])
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    sigma = rng.uniform(1.5, 4.0)
    yy, xx = np.mgrid[0:h, 0:w]
    dy = np.minimum(np.abs(yy - cy), h - np.abs(yy - cy))
    dx = np.minimum(np.abs(xx - cx), w - np.abs(xx - cx))
    blob = np.exp(-(dx**2 + dy**2) / (2 * sigma**2))
    return SpatiotemporalField(blob[None, None])


def source_rng(cfg: SimConfig, source_id: int) -> np.random.Generator:
    """Generator of trajectory ``source_id``: child ``source_id`` of ``SeedSequence(cfg.seed)``."""
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(source_id,)))


def simulate_source(cfg: SimConfig, source_id: int, n_steps: Optional[int] = None) -> SpatiotemporalField:
    """Re-run trajectory ``source_id`` of a dataset, optionally for longer.

    The first ``cfg.n_frames`` frames are identical to the stored trajectory.
    """
    if n_steps is not None:
        cfg = replace(cfg, n_steps=n_steps)
    return simulate(cfg, initial_condition(cfg, source_rng(cfg, source_id)))


def split_counts(n: int, fractions) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or not np.isclose(fr.sum(), 1.0):
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    quotas = fr * n
    counts = np.floor(quotas + 1e-9).astype(int)
    rema = quotas - counts
    for i in sorted(range(3), key=lambda j: (-rema[j], j))[: n - counts.sum()]:
        counts[i] += 1
    return [int(c) for c in counts]


@dataclass
class DatasetManifest:
    """On-disk dataset description; entry paths are relative to the manifest's folder."""

    path: Path
    generator: dict
    seed: int
    t_in: int
    t_out: int
    stride: int
    retrieval_interval: int
    splits: dict
    retrieval: list
    trajectories: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    @property
    def root(self) -> Path:
        return Path(self.path).parent

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    @property
    def sim_config(self) -> SimConfig:
        return SimConfig.from_dict(self.generator)

    def pairs(self, split: str, sources: Optional[set] = None) -> list[TrajectoryPair]:
        entries = self.retrieval if split == "retrieval" else self.splits[split]
        out = []
        for e in entries:
            if sources is not None and e["source_id"] not in sources:
                continue
            out.append(
                TrajectoryPair(
                    read_field(self.resolve(e["x_path"])),
                    read_field(self.resolve(e["y_path"])),
                    int(e["source_id"]),
                    int(e["start_index"]),
                )
            )
        return out

    def trajectory(self, source_id: int) -> SpatiotemporalField:
        return read_field(self.resolve(self.trajectories["files"][str(source_id)]))

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "generator": self.generator,
            "seed": self.seed,
            "t_in": self.t_in,
            "t_out": self.t_out,
            "stride": self.stride,
            "retrieval_interval": self.retrieval_interval,
            "splits": self.splits,
            "retrieval": self.retrieval,
            "trajectories": self.trajectories,
            "stats": self.stats,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def save(self) -> None:
        Path(self.path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("version") != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version {doc.get('version')}")
        return cls(
            path=Path(path),
            generator=doc["generator"],
            seed=doc["seed"],
            t_in=doc["t_in"],
            t_out=doc["t_out"],
            stride=doc["stride"],
            retrieval_interval=doc["retrieval_interval"],
            splits=doc["splits"],
            retrieval=doc["retrieval"],
            trajectories=doc.get("trajectories", {}),
            stats=doc.get("stats", {}),
        )


def _entry(p: TrajectoryPair, root: Path) -> dict:
    stem = f"pairs/{p.source_id:05d}_{p.start_index:04d}"
    write_field(p.x, root / f"{stem}_x.rapf")
    write_field(p.y, root / f"{stem}_y.rapf")
    return {"x_path": f"{stem}_x.rapf", "y_path": f"{stem}_y.rapf",
            "source_id": p.source_id, "start_index": p.start_index}


def build_dataset(
    cfg: SimConfig,
    n_trajectories: int,
    t_in: int,
    t_out: int,
    stride: int,
    retrieval_interval: int,
    split_fractions=(0.8, 0.1, 0.1),
    out_dir=".",
    workers: int = 1,
) -> DatasetManifest:
    """Simulate ``n_trajectories`` seeded runs and write a windowed dataset.

    Whole trajectories are assigned to splits (train first, then val, test);
    the retrieval library is every ``retrieval_interval``-th training pair.
    """
    if n_trajectories < 3:
        raise ConfigError("need at least 3 trajectories")
    if retrieval_interval < 1:
        raise ConfigError("retrieval_interval must be >= 1")
    counts = split_counts(n_trajectories, split_fractions)
    root = Path(out_dir)
    (root / "pairs").mkdir(parents=True, exist_ok=True)
    (root / "traj").mkdir(parents=True, exist_ok=True)
    def run(i):
        return simulate_source(cfg, i)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trajs = list(pool.map(run, range(n_trajectories)))
    else:
        trajs = [run(i) for i in range(n_trajectories)]

    split_of = []
    for name, cnt in zip(SPLITS, counts):
        split_of += [name] * cnt
    splits = {name: [] for name in SPLITS}
    traj_ids = {name: [] for name in SPLITS}
    files = {}
    skipped = 0
    max_abs = 0.0
    acc = [0.0, 0.0, 0]
    for i, traj in enumerate(trajs):
        rel = f"traj/traj_{i:05d}.rapf"
        write_field(traj, root / rel)
        files[str(i)] = rel
        pairs = window_split(traj, t_in, t_out, stride, source_id=i)
        if not pairs:
            skipped += 1
            continue
        name = split_of[i]
        traj_ids[name].append(i)
        splits[name].extend(_entry(p, root) for p in pairs)
        if name == "train":
            max_abs = max(max_abs, float(np.abs(traj.data).max()))
            d = traj.data.astype(np.float64)
            acc[0] += float(d.sum())
            acc[1] += float((d * d).sum())
            acc[2] += d.size
    retrieval = splits["train"][::retrieval_interval]
    mean = acc[0] / acc[2] if acc[2] else 0.0
    stats = {
        "max_abs_train": max_abs,
        "variance_train": (acc[1] / acc[2] - mean * mean) if acc[2] else 0.0,
        "skipped_trajectories": skipped,
        "split_counts": dict(zip(SPLITS, counts)),
    }
    manifest = DatasetManifest(
        path=root / "manifest.json",
        generator=cfg.to_dict(),
        seed=cfg.seed,
        t_in=t_in,
        t_out=t_out,
        stride=stride,
        retrieval_interval=retrieval_interval,
        splits=splits,
        retrieval=retrieval,
        trajectories={"files": files, **{k: v for k, v in traj_ids.items()}},
        stats=stats,
    )
    manifest.save()
    log.info("dataset written to %s: %s", root, {k: len(v) for k, v in splits.items()})
    return manifest

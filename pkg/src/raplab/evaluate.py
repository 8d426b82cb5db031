"""Forecast metrics, the analog-only baseline, rollouts and the experiment matrix."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .analog import AnalogDatabase, ExclusionRule, build_database, retrieve
from .field import DimensionError, SpatiotemporalField, TrajectoryPair
from .model import VARIANTS, ArchitectureConfig, DualStreamParameters, load_checkpoint
from .train import LossConfig, Retriever, TrainConfig, predict_batch, train

log = logging.getLogger(__name__)

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
ANALOG_ONLY = "analog_only"


class RolloutDivergence(FloatingPointError):
    def __init__(self, cycle: int):
        super().__init__(f"rollout produced non-finite values in cycle {cycle}")
        self.cycle = cycle


def _pair(y_hat, y_gt):
    a = y_hat.data if isinstance(y_hat, SpatiotemporalField) else np.asarray(y_hat)
    b = y_gt.data if isinstance(y_gt, SpatiotemporalField) else np.asarray(y_gt)
    if a.shape != b.shape:
        raise DimensionError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def metric_mse(y_hat, y_gt) -> float:
    a, b = _pair(y_hat, y_gt)
    return float(np.mean((a - b) ** 2))


def metric_mae(y_hat, y_gt) -> float:
    a, b = _pair(y_hat, y_gt)
    return float(np.mean(np.abs(a - b)))


def psnr_from_mse(mse: float, max_i: float) -> float:
    if max_i <= 0:
        raise ValueError("max_i must be > 0")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_i * max_i / mse)


def metric_psnr(y_hat, y_gt, max_i: float) -> float:
    return psnr_from_mse(metric_mse(y_hat, y_gt), max_i)


def metric_ssim(y_hat, y_gt, max_i: float) -> float:
    """Mean SSIM over all 7x7 windows of every (t, c) frame.

    Uniform window, population moments, ``c1=(0.01*max_i)^2``, ``c2=(0.03*max_i)^2``.
    """
    if max_i <= 0:
        raise ValueError("max_i must be > 0")
    a, b = _pair(y_hat, y_gt)
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise DimensionError(f"grid {a.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = (SSIM_WINDOW, SSIM_WINDOW)
    wa = sliding_window_view(a, win, axis=(-2, -1))
    wb = sliding_window_view(b, win, axis=(-2, -1))
    axes = (-2, -1)
    mu_a = wa.mean(axis=axes)
    mu_b = wb.mean(axis=axes)
    var_a = (wa * wa).mean(axis=axes) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=axes) - mu_b * mu_b
    cov = (wa * wb).mean(axis=axes) - mu_a * mu_b
    c1 = (SSIM_K1 * max_i) ** 2
    c2 = (SSIM_K2 * max_i) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricSet:
    mse: float
    mae: float
    psnr: float
    ssim: float
    n: int

    def to_dict(self) -> dict:
        return {k: _jsonable(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricSet":
        return cls(**{k: (math.inf if v == "inf" else v) for k, v in d.items()})


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def score_samples(preds: np.ndarray, truths: np.ndarray, max_i: float) -> tuple[MetricSet, list[dict]]:
    """Per-sample metrics and their means. Every variant is scored through here."""
    if preds.shape != truths.shape:
        raise DimensionError(f"predictions {preds.shape} vs truths {truths.shape}")
    rows = []
    for yh, yt in zip(preds, truths):
        mse = metric_mse(yh, yt)
        rows.append({"mse": mse, "mae": metric_mae(yh, yt), "psnr": psnr_from_mse(mse, max_i),
                     "ssim": metric_ssim(yh, yt, max_i)})
    if not rows:
        raise ValueError("no samples to score")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("mse", "mae", "psnr", "ssim")}
    return MetricSet(n=len(rows), **mean), rows


def sample_digest(pairs: Sequence[TrajectoryPair]) -> str:
    h = hashlib.sha256()
    for p in pairs:
        h.update(np.asarray(p.identity, dtype="<i8").tobytes())
        h.update(p.y.data.astype("<f4").tobytes())
    return h.hexdigest()[:16]


def analog_only_forecast(db: AnalogDatabase, x_query: SpatiotemporalField, workers: int = 1) -> SpatiotemporalField:
    """The retrieved analog's future, returned verbatim."""
    return retrieve(db, x_query, 1, ExclusionRule("none"), None, workers)[0].reference


def rollout(checkpoint, db: Optional[AnalogDatabase], x0: SpatiotemporalField, n_cycles: int,
            workers: int = 1) -> SpatiotemporalField:
    """Autoregressive forecast of ``n_cycles * t_out`` frames, re-retrieving every cycle."""
    params = checkpoint if isinstance(checkpoint, DualStreamParameters) else load_checkpoint(checkpoint)[0]
    cfg = params.config
    if cfg.t_out < cfg.t_in:
        raise ValueError("rollout needs t_out >= t_in")
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    window = x0
    out = []
    for cycle in range(1, n_cycles + 1):
        y = predict_batch(params, db, [window], workers)[0]
        if not np.isfinite(y).all():
            raise RolloutDivergence(cycle)
        out.append(y)
        window = SpatiotemporalField(y[cfg.t_out - cfg.t_in:])
    return SpatiotemporalField(np.concatenate(out))


def relative_improvement(base: float, enhanced: float) -> float:
    if base <= 0:
        raise ValueError("base must be > 0")
    return 100.0 * (base - enhanced) / base


def gap_recovery(lower_bound_loss: float, ours_loss: float, upper_bound_loss: float) -> float:
    """Share of the (partial-data minus full-data) loss gap closed, in percent."""
    gap = lower_bound_loss - upper_bound_loss
    if gap == 0:
        raise ValueError("degenerate gap: lower and upper bound losses are equal")
    return 100.0 * (lower_bound_loss - ours_loss) / gap


# ---------------------------------------------------------------------------
# experiment matrix

MATRICES = {
    "main": [("baseline_single_stream", 1.0), ("rap_dual_stream", 1.0), (ANALOG_ONLY, 1.0)],
    "fusion": [("baseline_single_stream", 1.0), ("naive_concat", 1.0), ("rap_dual_stream", 1.0)],
    "data_scale": [("baseline_single_stream", 1.0), ("baseline_single_stream", 0.5), ("rap_dual_stream", 0.5)],
}
MATRICES["all"] = list(dict.fromkeys(MATRICES["main"] + MATRICES["fusion"] + MATRICES["data_scale"]))


def run_label(variant: str, fraction: float) -> str:
    return variant if fraction == 1.0 else f"{variant}@{fraction:g}"


@dataclass(frozen=True)
class ExperimentConfig:
    matrix: str = "main"
    seeds: tuple = (0,)
    levels: int = 3
    base_channels: int = 8
    ref_encoder_depth: Optional[int] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    data_fraction: float = 0.5
    eval_batch: int = 32
    n_pgm_samples: int = 1
    reuse_runs: bool = False
    # explicit full-data variant list; overrides ``matrix`` when given
    variants: Optional[tuple] = None

    def __post_init__(self):
        if self.matrix not in MATRICES:
            raise ValueError(f"unknown experiment matrix {self.matrix!r}")
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", TrainConfig.from_dict(self.train))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.variants is not None:
            object.__setattr__(self, "variants", tuple(self.variants))
            bad = set(self.variants) - set(VARIANTS) - {ANALOG_ONLY}
            if bad:
                raise ValueError(f"unknown variants {sorted(bad)}")

    def runs(self):
        if self.variants is not None:
            return [(v, 1.0) for v in self.variants]
        out = []
        for variant, frac in MATRICES[self.matrix]:
            out.append((variant, self.data_fraction if frac != 1.0 else 1.0))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        if self.variants is not None:
            d["variants"] = list(self.variants)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class ExperimentReport:
    metrics: dict                    # label -> seed -> MetricSet
    seeds: list
    comparisons: list
    digests: dict
    sample_digests: dict
    normalization: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.errors

    def mean(self, label: str, key: str = "mse") -> float:
        vals = [getattr(m, key) for m in self.metrics[label].values()]
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        return {
            "complete": self.complete,
            "seeds": self.seeds,
            "metrics": {lab: {str(s): m.to_dict() for s, m in per.items()} for lab, per in self.metrics.items()},
            "means": {lab: {k: _jsonable(self.mean(lab, k)) for k in ("mse", "mae", "psnr", "ssim")}
                      for lab in self.metrics if self.metrics[lab]},
            "comparisons": self.comparisons,
            "digests": self.digests,
            "sample_digests": self.sample_digests,
            "normalization": self.normalization,
            "errors": self.errors,
            "timings": self.timings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        metrics = {lab: {int(s): MetricSet.from_dict(m) for s, m in per.items()} for lab, per in d["metrics"].items()}
        return cls(metrics, d["seeds"], d["comparisons"], d["digests"], d["sample_digests"],
                   d.get("normalization", {}), d.get("errors", {}), d.get("timings", {}))


def _comparisons(report: ExperimentReport) -> list[dict]:
    have = {lab for lab, per in report.metrics.items() if per}
    out = []
    rap = "rap_dual_stream"
    for other in ("baseline_single_stream", "naive_concat", ANALOG_ONLY):
        if rap in have and other in have:
            out.append({"kind": "relative_improvement", "base": other, "enhanced": rap, "metric": "mse",
                        "value": relative_improvement(report.mean(other), report.mean(rap))})
    labels = [lab for lab in have if "@" in lab]
    for lab in labels:
        variant, frac = lab.split("@")
        lb = f"baseline_single_stream@{frac}"
        if variant == rap and lb in have and "baseline_single_stream" in have:
            lb_v, ub_v = report.mean(lb), report.mean("baseline_single_stream")
            entry = {"kind": "gap_recovery", "lower_bound": lb, "ours": lab, "upper_bound": "baseline_single_stream",
                     "metric": "mse", "reference_value": 81.0}
            try:
                entry["value"] = gap_recovery(lb_v, report.mean(lab), ub_v)
            except ValueError as exc:
                entry["value"] = None
                entry["error"] = str(exc)
            out.append(entry)
    return out


def write_pgm(path, frame: np.ndarray) -> dict:
    """8-bit binary PGM, min/max normalized; returns the normalization used."""
    f = np.asarray(frame, dtype=np.float64)
    lo, hi = float(f.min()), float(f.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.round((f - lo) * scale).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return {"min": lo, "max": hi}


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8).reshape(h, w)


def _subset(manifest, fraction: float) -> Optional[set]:
    if fraction >= 1.0:
        return None
    ids = sorted(manifest.trajectories.get("train", sorted({e["source_id"] for e in manifest.splits["train"]})))
    keep = max(1, math.ceil(fraction * len(ids)))
    return set(ids[:keep])


def run_experiment(manifest, exp: ExperimentConfig, out_dir, workers: int = 1) -> ExperimentReport:
    """Train and score every (variant, data fraction) of ``exp.matrix`` for each seed.

    Writes per-run folders, ``report_<digest>.json`` / ``.csv`` and PGM frame
    dumps under ``out_dir``. Runs that raise are recorded in ``errors`` and the
    report is marked incomplete.
    """
    out = Path(out_dir)
    (out / "pgm").mkdir(parents=True, exist_ok=True)
    db = build_database(manifest)
    test = manifest.pairs("test")
    val = manifest.pairs("val")
    truths = np.stack([p.y.data for p in test])
    max_i = float(manifest.stats.get("max_abs_train") or np.abs(truths).max() or 1.0)
    shared = sample_digest(test)
    x_shape = test[0].x.shape
    y_shape = test[0].y.shape
    exp_digest = config_digest({"experiment": exp.to_dict(), "generator": manifest.generator, "seed": manifest.seed})
    report = ExperimentReport({}, list(exp.seeds), [], {"experiment": exp_digest}, {})
    train_cache: dict = {}

    for variant, frac in exp.runs():
        label = run_label(variant, frac)
        report.metrics[label] = {}
        for seed in exp.seeds:
            run_cfg = {"variant": variant, "fraction": frac, "seed": seed, "levels": exp.levels,
                       "base_channels": exp.base_channels, "ref_encoder_depth": exp.ref_encoder_depth,
                       "train": replace(exp.train, seed=seed, variant=variant).to_dict() if variant != ANALOG_ONLY else None,
                       "generator": manifest.generator}
            digest = config_digest(run_cfg)
            report.digests[f"{label}/s{seed}"] = digest
            run_dir = out / "runs" / f"{label.replace('@', '_at_')}_{digest}_s{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            t0 = time.time()
            try:
                done = run_dir / "metrics.json"
                if exp.reuse_runs and done.exists():
                    saved = json.loads(done.read_text())
                    ms = MetricSet.from_dict(saved["metrics"])
                    preds = None
                else:
                    if variant == ANALOG_ONLY:
                        preds = np.stack([analog_only_forecast(db, p.x, workers).data for p in test])
                    else:
                        arch = ArchitectureConfig(*x_shape[:1], y_shape[0], *x_shape[1:], levels=exp.levels,
                                                  base_channels=exp.base_channels, variant=variant,
                                                  ref_encoder_depth=exp.ref_encoder_depth)
                        sources = _subset(manifest, frac)
                        key = frac
                        if key not in train_cache:
                            train_cache[key] = manifest.pairs("train", sources)
                        tcfg = replace(exp.train, seed=seed, variant=variant, workers=workers)
                        res = train(train_cache[key], val, db, arch, tcfg, run_dir)
                        params = load_checkpoint(res.best_path)[0]
                        retr = Retriever(db, ExclusionRule("none"), workers, cache=True) if arch.uses_reference else None
                        preds = np.concatenate([
                            predict_batch(params, db, [p.x for p in test[lo:lo + exp.eval_batch]], workers, retr)
                            for lo in range(0, len(test), exp.eval_batch)
                        ])
                    ms, _ = score_samples(preds, truths, max_i)
                    done.write_text(json.dumps({"metrics": ms.to_dict(), "config": run_cfg,
                                                "sample_digest": shared}, indent=1, sort_keys=True))
                report.metrics[label][seed] = ms
                report.sample_digests[f"{label}/s{seed}"] = shared
                if preds is not None:
                    for j in range(min(exp.n_pgm_samples, len(test))):
                        stem = f"{label.replace('@', '_at_')}_{digest}_s{seed}_n{j}"
                        err = preds[j] - truths[j]
                        for kind, arr in (("pred", preds[j]), ("truth", truths[j]), ("error", err)):
                            f = arr[-1, 0]
                            report.normalization[f"{stem}_{kind}"] = write_pgm(out / "pgm" / f"{stem}_{kind}.pgm", f)
            except Exception as exc:  # recorded, the report is flagged incomplete
                log.exception("run %s seed %d failed", label, seed)
                report.errors[f"{label}/s{seed}"] = f"{type(exc).__name__}: {exc}"
            report.timings[f"{label}/s{seed}"] = round(time.time() - t0, 3)
            log.info("%s seed %d done in %.1fs", label, seed, time.time() - t0)

    report.comparisons = _comparisons(report)
    write_report(report, out, exp_digest)
    return report


def write_report(report: ExperimentReport, out_dir, digest: str) -> tuple[Path, Path]:
    out = Path(out_dir)
    jpath = out / f"report_{digest}.json"
    cpath = out / f"report_{digest}.csv"
    jpath.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "seed", "mse", "mae", "psnr", "ssim", "n"])
        for lab, per in report.metrics.items():
            for seed, m in sorted(per.items()):
                w.writerow([lab, seed, repr(m.mse), repr(m.mae), _jsonable(m.psnr), repr(m.ssim), m.n])
            if per:
                w.writerow([lab, "mean", *(repr(report.mean(lab, k)) for k in ("mse", "mae")),
                            _jsonable(report.mean(lab, "psnr")), repr(report.mean(lab, "ssim")), ""])
    return jpath, cpath


def load_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

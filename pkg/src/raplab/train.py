"""Loss, Adam with cosine annealing, and the retrieve-then-forecast training loop.

The retrieved reference target is only ever an input to the forward pass.
``loss_total`` sees the forecast and the ground truth, nothing else.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .analog import AnalogDatabase, ExclusionRule, RetrievalError, retrieve
from .field import DimensionError, SpatiotemporalField, TrajectoryPair
from .model import (
    ArchitectureConfig,
    DualStreamParameters,
    backward_batch,
    forward_batch,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "step", "lr", "train_loss", "val_loss")


class OptimizerError(FloatingPointError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be >= 0")


def _values(a) -> np.ndarray:
    return a.data if isinstance(a, SpatiotemporalField) else np.asarray(a)


def loss_total(y_hat, y_gt, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """``lambda1 * mean|d| + lambda2 * mean d^2`` with ``d = y_hat - y_gt``, and its gradient.

    Accepts fields or arrays of any matching shape (a leading batch axis makes
    this the batch mean). Accumulates in float64; the gradient is float64 with
    the shape of ``y_hat``, using 0 as the subgradient of ``|.|`` at 0.
    """
    a, b = _values(y_hat), _values(y_gt)
    if a.shape != b.shape:
        raise DimensionError(f"loss inputs differ in shape: {a.shape} vs {b.shape}")
    d = a.astype(np.float64) - b.astype(np.float64)
    n = d.size
    l1 = float(np.abs(d).sum()) / n
    mse = float((d * d).sum()) / n
    value = cfg.lambda1 * l1 + cfg.lambda2 * mse
    grad = (cfg.lambda1 / n) * np.sign(d) + (2.0 * cfg.lambda2 / n) * d
    return value, grad


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr_max: float = 1e-4
    lr_min: float = 0.0
    total_steps: int = 1

    @classmethod
    def for_params(cls, params: DualStreamParameters, **kw) -> "OptimizerState":
        m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        v = {k: np.zeros_like(a) for k, a in params.tensors.items()}
        return cls(m=m, v=v, **kw)

    def aux(self) -> dict:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    def meta(self) -> dict:
        return {k: getattr(self, k) for k in ("step", "beta1", "beta2", "epsilon", "lr_max", "lr_min", "total_steps")}

    @classmethod
    def restore(cls, meta: dict, aux: dict) -> "OptimizerState":
        m = {k[2:]: a for k, a in aux.items() if k.startswith("m.")}
        v = {k[2:]: a for k, a in aux.items() if k.startswith("v.")}
        return cls(m=m, v=v, **meta)


def cosine_lr(step: int, state: OptimizerState) -> float:
    s = min(max(step, 0), state.total_steps)
    return state.lr_min + 0.5 * (state.lr_max - state.lr_min) * (1.0 + math.cos(math.pi * s / state.total_steps))


def adam_step(params: DualStreamParameters, grads: dict, state: OptimizerState) -> DualStreamParameters:
    """One bias-corrected Adam update, in place. Uses ``cosine_lr(step - 1)`` after incrementing ``step``."""
    for k, g in grads.items():
        if not np.isfinite(g).all():
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise OptimizerError(f"gradient of {k} has {bad} non-finite entries at step {state.step + 1}")
    state.step += 1
    lr = cosine_lr(state.step - 1, state)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in params.tensors.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = b1 * state.m[k].astype(np.float64) + (1.0 - b1) * g
        v = b2 * state.v[k].astype(np.float64) + (1.0 - b2) * g * g
        state.m[k] = m.astype(np.float32)
        state.v[k] = v.astype(np.float32)
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        params.tensors[k] = (p.astype(np.float64) - upd).astype(np.float32)
    return params


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    lr_max: float = 1e-4
    lr_min: float = 0.0
    exclusion: str = "source_window"
    # None: t_in + t_out, i.e. every window that overlaps the query in time
    window_radius: Optional[int] = None
    variant: str = "rap_dual_stream"
    checkpoint_every: int = 1
    workers: int = 1
    cache_retrieval: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))

    def exclusion_rule(self, t_in: int, t_out: int) -> ExclusionRule:
        radius = t_in + t_out if self.window_radius is None else self.window_radius
        return ExclusionRule(self.exclusion, radius if self.exclusion == "source_window" else 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Retriever:
    """Top-1 reference lookup with a call counter and an optional identity-keyed cache."""

    def __init__(self, db: Optional[AnalogDatabase], rule: ExclusionRule = ExclusionRule(),
                 workers: int = 1, cache: bool = False):
        self.db = db
        self.rule = rule
        self.workers = workers
        self.calls = 0
        self._cache: Optional[dict] = {} if cache else None

    def reference(self, x: SpatiotemporalField, identity: Optional[tuple[int, int]]) -> np.ndarray:
        if self.db is None or len(self.db) == 0:
            raise RetrievalError("reference-conditioned model needs a non-empty analog database")
        if self._cache is not None and identity is not None and identity in self._cache:
            return self.db.ys[self._cache[identity]]
        self.calls += 1
        idx = retrieve(self.db, x, 1, self.rule, identity, self.workers)[0].index
        if self._cache is not None and identity is not None:
            self._cache[identity] = idx
        return self.db.ys[idx]

    def references(self, xs: Sequence[SpatiotemporalField], identities) -> np.ndarray:
        return np.stack([self.reference(x, i) for x, i in zip(xs, identities)])


Sample = Union[TrajectoryPair, tuple]


def _unpack(batch: Sequence[Sample]):
    xs, ys, ids = [], [], []
    for s in batch:
        if isinstance(s, TrajectoryPair):
            xs.append(s.x), ys.append(s.y), ids.append(s.identity)
        else:
            x, y, ident = s
            xs.append(x), ys.append(y), ids.append(ident)
    return xs, ys, ids


def train_step(params: DualStreamParameters, batch: Sequence[Sample], db: Optional[AnalogDatabase],
               cfg: TrainConfig, state: OptimizerState,
               retriever: Optional[Retriever] = None) -> tuple[DualStreamParameters, float]:
    """Retrieve (if the variant needs it), forecast, score, backpropagate, update.

    ``batch`` holds ``TrajectoryPair`` objects or ``(x_query, y_gt, identity)``
    tuples. Returns the updated parameters and the batch-mean loss.
    """
    arch = params.config
    xs, ys, ids = _unpack(batch)
    xq = np.stack([x.data for x in xs])
    yr = None
    if arch.uses_reference:
        if retriever is None:
            retriever = Retriever(db, cfg.exclusion_rule(arch.t_in, arch.t_out), cfg.workers, cfg.cache_retrieval)
        yr = retriever.references(xs, ids)
    y_hat, tape = forward_batch(params, xq, yr, keep=True)
    loss, grad = loss_total(y_hat, np.stack([y.data for y in ys]), cfg.loss)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite training loss at step {state.step + 1}")
    grads = backward_batch(params, tape, grad)
    adam_step(params, grads, state)
    return params, loss


def predict_batch(params: DualStreamParameters, db: Optional[AnalogDatabase],
                  xs: Sequence[SpatiotemporalField], workers: int = 1,
                  retriever: Optional[Retriever] = None) -> np.ndarray:
    """Forecasts for a list of query fields; retrieval uses exclusion ``none``."""
    xq = np.stack([x.data for x in xs])
    yr = None
    if params.config.uses_reference:
        retriever = retriever or Retriever(db, ExclusionRule("none"), workers)
        yr = retriever.references(xs, [None] * len(xs))
    return forward_batch(params, xq, yr)[0]


def _as_params(checkpoint) -> DualStreamParameters:
    if isinstance(checkpoint, DualStreamParameters):
        return checkpoint
    return load_checkpoint(checkpoint)[0]


def infer(checkpoint, db: Optional[AnalogDatabase], x_new: SpatiotemporalField, workers: int = 1) -> SpatiotemporalField:
    """Forecast one window from a checkpoint (path or parameters)."""
    params = _as_params(checkpoint)
    return SpatiotemporalField(predict_batch(params, db, [x_new], workers)[0])


def evaluate_loss(params, db, pairs: Sequence[TrajectoryPair], loss_cfg: LossConfig,
                  batch_size: int = 32, workers: int = 1, retriever: Optional[Retriever] = None) -> float:
    """Mean loss over ``pairs`` via the inference path."""
    if not pairs:
        return float("nan")
    retriever = retriever or (Retriever(db, ExclusionRule("none"), workers, cache=True)
                              if params.config.uses_reference else None)
    total = 0.0
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo:lo + batch_size]
        y_hat = predict_batch(params, db, [p.x for p in chunk], workers, retriever)
        loss, _ = loss_total(y_hat, np.stack([p.y.data for p in chunk]), loss_cfg)
        total += loss * len(chunk)
    return total / len(pairs)


@dataclass
class TrainResult:
    params: DualStreamParameters
    history: list
    best_path: Path
    last_path: Path
    retrieval_calls: int


def _write_history(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["step"], repr(r["lr"]), repr(r["train_loss"]), repr(r["val_loss"])])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "step": int(r["step"]), "lr": float(r["lr"]),
             "train_loss": float(r["train_loss"]), "val_loss": float(r["val_loss"])}
            for r in csv.DictReader(fh)
        ]


def train(
    train_pairs: Sequence[TrajectoryPair],
    val_pairs: Sequence[TrajectoryPair],
    db: Optional[AnalogDatabase],
    arch: ArchitectureConfig,
    cfg: TrainConfig,
    out_dir,
    resume: bool = False,
) -> TrainResult:
    """Full training run writing ``history.csv``, ``best.rapw`` and ``last.rapw`` into ``out_dir``.

    Each epoch shuffles with a generator seeded by ``(seed, epoch)`` so a
    resumed run replays exactly the batches an uninterrupted run would see.
    """
    if arch.variant != cfg.variant:
        raise ValueError(f"architecture variant {arch.variant} != training variant {cfg.variant}")
    if not train_pairs:
        raise TrainingError("no training pairs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    best_path, last_path = out / "best.rapw", out / "last.rapw"
    n = len(train_pairs)
    steps_per_epoch = -(-n // cfg.batch_size)
    retriever = None
    if arch.uses_reference:
        retriever = Retriever(db, cfg.exclusion_rule(arch.t_in, arch.t_out), cfg.workers, cfg.cache_retrieval)
    val_retriever = Retriever(db, ExclusionRule("none"), cfg.workers, cache=True) if arch.uses_reference else None

    history: list[dict] = []
    best_val = math.inf
    start_epoch = 1
    if resume and last_path.exists():
        params, extra, aux = load_checkpoint(last_path)
        state = OptimizerState.restore(extra["optimizer"], aux)
        history = extra["history"]
        best_val = extra["best_val"]
        start_epoch = extra["epoch"] + 1
        log.info("resuming from epoch %d", start_epoch)
    else:
        params = DualStreamParameters.init(arch, cfg.seed)
        state = OptimizerState.for_params(
            params, lr_max=cfg.lr_max, lr_min=cfg.lr_min, total_steps=cfg.epochs * steps_per_epoch
        )

    for epoch in range(start_epoch, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            batch = [train_pairs[i] for i in order[lo:lo + cfg.batch_size]]
            _, loss = train_step(params, batch, db, cfg, state, retriever)
            losses.append(loss * len(batch))
        train_loss = sum(losses) / n
        val_loss = evaluate_loss(params, db, list(val_pairs), cfg.loss, workers=cfg.workers, retriever=val_retriever)
        row = {"epoch": epoch, "step": state.step, "lr": cosine_lr(state.step, state),
               "train_loss": train_loss, "val_loss": val_loss}
        history.append(row)
        log.info("epoch %d  train %.6g  val %.6g  lr %.3g", epoch, train_loss, val_loss, row["lr"])
        score = val_loss if math.isfinite(val_loss) else train_loss
        if score < best_val:
            best_val = score
            save_checkpoint(best_path, params, {"epoch": epoch, "val_loss": val_loss, "train": cfg.to_dict()})
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            extra = {"epoch": epoch, "optimizer": state.meta(), "history": history,
                     "best_val": best_val, "train": cfg.to_dict()}
            save_checkpoint(last_path, params, extra, state.aux())
        _write_history(out / "history.csv", history)
    calls = retriever.calls if retriever else 0
    return TrainResult(params, history, best_path, last_path, calls)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})

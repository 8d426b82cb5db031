"""``rap-lab`` command line.

Each subcommand merges defaults, an optional ``--config`` JSON file and
explicit flags (in that order), writes the merged result to
``resolved_config.json`` in its output folder, and hands the resolved objects
to the library. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analog import (
    AnalogDatabase,
    ExclusionRule,
    build_database,
    load_database,
    retrieve,
    save_database,
)
from .evaluate import (
    ANALOG_ONLY,
    ExperimentConfig,
    analog_only_forecast,
    load_report,
    metric_mse,
    rollout,
    score_samples,
)
from .field import read_field, write_field
from .model import ArchitectureConfig, load_checkpoint
from .physics import DatasetManifest, SimConfig, build_dataset, simulate_source
from .train import LossConfig, TrainConfig, predict_batch, train

log = logging.getLogger("raplab")

VARIANT_FLAGS = {
    "baseline": "baseline_single_stream",
    "rap": "rap_dual_stream",
    "naive-concat": "naive_concat",
    "analog-only": ANALOG_ONLY,
}
EXCLUSION_FLAGS = {"none": "none", "exact-self": "exact_self", "source-window": "source_window"}

DEFAULTS = {
    "seed": 0,
    "workers": None,
    "data": {
        "sim": SimConfig().to_dict(),
        "n_trajectories": 375,
        "t_in": 4,
        "t_out": 4,
        "stride": 4,
        "retrieval_interval": 3,
        "split_fractions": [0.8, 0.1, 0.1],
    },
    "model": {"levels": 3, "base_channels": 8, "ref_encoder_depth": None},
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k not in ("seed", "workers")},
    "experiment": {"matrix": "main", "seeds": [0], "data_fraction": 0.5, "eval_batch": 32, "n_pgm_samples": 1},
    "eval": {"k": 1, "exclusion": "none", "cycles": 10},
}


class DomainError(Exception):
    """Raised for bad inputs detected by the CLI itself (exit code 1)."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then ``--config`` file, then flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            cfg = _merge(cfg, json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, ValueError) as exc:
            raise DomainError(f"cannot read config {args.config}: {exc}") from None
    g = lambda name: getattr(args, name, None)  # noqa: E731
    if g("seed") is not None:
        cfg["seed"] = args.seed
    if g("workers") is not None:
        cfg["workers"] = args.workers
    if cfg["workers"] is None:
        cfg["workers"] = os.cpu_count() or 1
    tr = cfg["train"]
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr_max", "lr_max"), ("lr_min", "lr_min")):
        if g(flag) is not None:
            tr[key] = g(flag)
    tr.setdefault("loss", {})
    if g("lambda1") is not None:
        tr["loss"]["lambda1"] = args.lambda1
    if g("lambda2") is not None:
        tr["loss"]["lambda2"] = args.lambda2
    if g("exclusion") is not None:
        tr["exclusion"] = EXCLUSION_FLAGS[args.exclusion]
        cfg["eval"]["exclusion"] = EXCLUSION_FLAGS[args.exclusion]
    if g("variant") is not None:
        tr["variant"] = VARIANT_FLAGS[args.variant]
    if g("retrieval_interval") is not None:
        cfg["data"]["retrieval_interval"] = args.retrieval_interval
    if g("k") is not None:
        cfg["eval"]["k"] = args.k
    if g("cycles") is not None:
        cfg["eval"]["cycles"] = args.cycles
    if g("matrix") is not None:
        cfg["experiment"]["matrix"] = args.matrix
    if g("seeds") is not None:
        cfg["experiment"]["seeds"] = args.seeds
    if g("data_fraction") is not None:
        cfg["experiment"]["data_fraction"] = args.data_fraction
    cfg["data"]["sim"]["seed"] = cfg["seed"]
    return cfg


def sim_config(cfg: dict) -> SimConfig:
    return SimConfig.from_dict(cfg["data"]["sim"])


def train_config(cfg: dict, variant: str | None = None) -> TrainConfig:
    d = dict(cfg["train"])
    d["loss"] = LossConfig(**d.get("loss", {}))
    d["seed"] = cfg["seed"]
    d["workers"] = cfg["workers"]
    if variant is not None:
        d["variant"] = variant
    return TrainConfig.from_dict(d)


def arch_config(cfg: dict, manifest: DatasetManifest, variant: str) -> ArchitectureConfig:
    sim = manifest.sim_config
    return ArchitectureConfig(manifest.t_in, manifest.t_out, sim.channels, sim.h, sim.w,
                              variant=variant, **cfg["model"])


def experiment_config(cfg: dict) -> ExperimentConfig:
    e = cfg["experiment"]
    return ExperimentConfig(
        matrix=e["matrix"], seeds=tuple(e["seeds"]), data_fraction=e["data_fraction"],
        eval_batch=e["eval_batch"], n_pgm_samples=e["n_pgm_samples"], train=train_config(cfg),
        **cfg["model"],
    )


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, cfg: dict, command: str) -> None:
    doc = {"command": command, "version": __version__, "config": cfg}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load_manifest(path) -> DatasetManifest:
    if not path:
        raise DomainError("--manifest is required")
    try:
        return DatasetManifest.load(path)
    except OSError as exc:
        raise DomainError(f"cannot read manifest: {exc}") from None


def _database(args, manifest) -> AnalogDatabase:
    return load_database(args.db) if getattr(args, "db", None) else build_database(manifest)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg):
    out = _out(args, "data")
    _snapshot(out, cfg, "gen-data")
    d = cfg["data"]
    m = build_dataset(sim_config(cfg), d["n_trajectories"], d["t_in"], d["t_out"], d["stride"],
                      d["retrieval_interval"], tuple(d["split_fractions"]), out, workers=cfg["workers"])
    print(m.path)


def cmd_build_db(args, cfg):
    manifest = _load_manifest(args.manifest)
    if args.retrieval_interval is not None and args.retrieval_interval != manifest.retrieval_interval:
        manifest.retrieval = manifest.splits["train"][:: args.retrieval_interval]
        manifest.retrieval_interval = args.retrieval_interval
    out = Path(args.out or "analogs.rapdb")
    out.parent.mkdir(parents=True, exist_ok=True)
    _snapshot(out.parent, cfg, "build-db")
    db = build_database(manifest)
    save_database(db, out)
    print(f"{out}\t{len(db)}")


def cmd_retrieve(args, cfg):
    if not args.db or not args.query:
        raise DomainError("retrieve needs --db and --query")
    db = load_database(args.db)
    q = read_field(args.query)
    identity = None
    if args.source_id is not None:
        identity = (args.source_id, args.start_index or 0)
    ev = cfg["eval"]
    rule = ExclusionRule(ev["exclusion"], args.window_radius or 0)
    out = _out(args, "retrieved")
    _snapshot(out, cfg, "retrieve")
    for rank, r in enumerate(retrieve(db, q, ev["k"], rule, identity, cfg["workers"])):
        path = out / f"analog_{rank}_{r.index}_y.rapf"
        write_field(r.reference, path)
        print(f"{r.index}\t{r.score!r}\t{path}")


def cmd_train(args, cfg):
    manifest = _load_manifest(args.manifest)
    tcfg = train_config(cfg)
    if tcfg.variant == ANALOG_ONLY:
        raise DomainError("analog-only has no parameters to train")
    out = _out(args, "train_out")
    _snapshot(out, cfg, "train")
    db = _database(args, manifest) if tcfg.variant != "baseline_single_stream" else None
    arch = arch_config(cfg, manifest, tcfg.variant)
    res = train(manifest.pairs("train"), manifest.pairs("val"), db, arch, tcfg, out, resume=args.resume)
    print(res.best_path)


def _predict_split(args, cfg, manifest, pairs):
    variant = cfg["train"]["variant"]
    db = _database(args, manifest)
    if variant == ANALOG_ONLY and not args.checkpoint:
        return np.stack([analog_only_forecast(db, p.x, cfg["workers"]).data for p in pairs])
    if not args.checkpoint:
        raise DomainError("--checkpoint is required unless --variant analog-only")
    params = load_checkpoint(args.checkpoint)[0]
    return predict_batch(params, db if params.config.uses_reference else None, [p.x for p in pairs], cfg["workers"])


def cmd_eval(args, cfg):
    manifest = _load_manifest(args.manifest)
    pairs = manifest.pairs(args.split)
    out = _out(args, "eval_out")
    _snapshot(out, cfg, "eval")
    preds = _predict_split(args, cfg, manifest, pairs)
    max_i = float(manifest.stats["max_abs_train"])
    ms, rows = score_samples(preds, np.stack([p.y.data for p in pairs]), max_i)
    doc = {"split": args.split, "max_i": max_i, "metrics": ms.to_dict(),
           "samples": [{"source_id": p.source_id, "start_index": p.start_index,
                        **{k: ("inf" if math.isinf(v) else v) for k, v in r.items()}} for p, r in zip(pairs, rows)]}
    (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(ms.to_dict(), sort_keys=True))


def cmd_rollout(args, cfg):
    manifest = _load_manifest(args.manifest)
    if not args.checkpoint:
        raise DomainError("--checkpoint is required")
    params = load_checkpoint(args.checkpoint)[0]
    cycles = cfg["eval"]["cycles"]
    sid = args.source_id if args.source_id is not None else manifest.trajectories["test"][0]
    sim = manifest.sim_config
    t_in, t_out = manifest.t_in, manifest.t_out
    n_frames = t_in + cycles * t_out
    traj = simulate_source(sim, sid, n_steps=(n_frames - 1) * sim.record_every)
    db = _database(args, manifest) if params.config.uses_reference else None
    out = _out(args, "rollout_out")
    _snapshot(out, cfg, "rollout")
    pred = rollout(params, db, traj.frames(0, t_in), cycles, cfg["workers"])
    write_field(pred, out / f"rollout_{sid:05d}.rapf")
    lines = ["cycle,mse"]
    for c in range(cycles):
        lo = c * t_out
        mse = metric_mse(pred.frames(lo, lo + t_out), traj.frames(t_in + lo, t_in + lo + t_out))
        lines.append(f"{c + 1},{mse!r}")
    (out / f"rollout_{sid:05d}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))


def cmd_ablate(args, cfg):
    from .evaluate import run_experiment

    manifest = _load_manifest(args.manifest)
    out = _out(args, "ablate_out")
    _snapshot(out, cfg, "ablate")
    rep = run_experiment(manifest, experiment_config(cfg), out, workers=cfg["workers"])
    print(format_report(rep.to_dict()))
    if not rep.complete:
        raise DomainError(f"{len(rep.errors)} run(s) failed; report is incomplete")


def format_report(doc: dict) -> str:
    lines = [f"{'run':32s} {'mse':>12s} {'mae':>12s} {'psnr':>10s} {'ssim':>8s}"]
    for lab, m in doc["means"].items():
        psnr = m["psnr"] if isinstance(m["psnr"], str) else f"{m['psnr']:.3f}"
        lines.append(f"{lab:32s} {m['mse']:12.6g} {m['mae']:12.6g} {psnr:>10s} {m['ssim']:8.4f}")
    for c in doc["comparisons"]:
        if c["kind"] == "relative_improvement":
            lines.append(f"improvement {c['enhanced']} vs {c['base']}: {c['value']:.2f}%")
        else:
            val = "n/a" if c["value"] is None else f"{c['value']:.1f}%"
            lines.append(f"gap recovery {c['ours']}: {val} (reference value {c['reference_value']:.0f}%)")
    if not doc.get("complete", True):
        lines.append(f"INCOMPLETE: {doc['errors']}")
    return "\n".join(lines)


def cmd_report(args, cfg):
    if not args.report:
        raise DomainError("--report is required")
    rep = load_report(args.report)
    print(format_report(rep.to_dict()))


# ---------------------------------------------------------------------------


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out")
    common.add_argument("--k", type=int)
    common.add_argument("--variant", choices=sorted(VARIANT_FLAGS))
    common.add_argument("--exclusion", choices=sorted(EXCLUSION_FLAGS))
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--lr-max", type=float)
    common.add_argument("--lr-min", type=float)
    common.add_argument("--lambda1", type=float)
    common.add_argument("--lambda2", type=float)
    common.add_argument("--retrieval-interval", type=int)
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="rap-lab", description="Retrieval-augmented forecasting lab.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="subcommand")

    sub.add_parser("gen-data", parents=[common], help="simulate trajectories and write a dataset")
    s = sub.add_parser("build-db", parents=[common], help="build a .rapdb analog database")
    s.add_argument("--manifest")
    s = sub.add_parser("retrieve", parents=[common], help="query a database with a .rapf window")
    s.add_argument("--db")
    s.add_argument("--query")
    s.add_argument("--source-id", type=int)
    s.add_argument("--start-index", type=int)
    s.add_argument("--window-radius", type=int)
    s = sub.add_parser("train", parents=[common], help="train one variant")
    s.add_argument("--manifest")
    s.add_argument("--db")
    s.add_argument("--resume", action="store_true")
    s = sub.add_parser("eval", parents=[common], help="score a checkpoint (or analog-only) on a split")
    s.add_argument("--manifest")
    s.add_argument("--db")
    s.add_argument("--checkpoint")
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s = sub.add_parser("rollout", parents=[common], help="autoregressive rollout on a test trajectory")
    s.add_argument("--manifest")
    s.add_argument("--db")
    s.add_argument("--checkpoint")
    s.add_argument("--cycles", type=int)
    s.add_argument("--source-id", type=int)
    s = sub.add_parser("ablate", parents=[common], help="run an experiment matrix over seeds")
    s.add_argument("--manifest")
    s.add_argument("--matrix", choices=("main", "fusion", "data_scale", "all"))
    s.add_argument("--seeds", type=_seeds)
    s.add_argument("--data-fraction", type=float)
    s = sub.add_parser("report", parents=[common], help="print a saved experiment report")
    s.add_argument("--report")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-db": cmd_build_db,
    "retrieve": cmd_retrieve,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the synopsis
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except (DomainError, ValueError, RuntimeError, FloatingPointError, OSError, KeyError) as exc:
        print(f"rap-lab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from raplab.analog import ExclusionRule, build_database, load_database, retrieve
from raplab.cli import DEFAULTS, main
from raplab.evaluate import load_report, metric_mse, score_samples
from raplab.field import read_field, write_field
from raplab.model import load_checkpoint
from raplab.physics import DatasetManifest
from raplab.train import predict_batch

TINY = {
    "data": {
        "sim": {"h": 8, "w": 8, "n_steps": 900, "record_every": 100, "perturb_size": 3, "perturb_jitter": 1},
        "n_trajectories": 12, "t_in": 2, "t_out": 2, "stride": 2, "retrieval_interval": 2,
        "split_fractions": [0.5, 0.25, 0.25],
    },
    "model": {"levels": 2, "base_channels": 4},
    "train": {"epochs": 2, "batch_size": 4, "lr_max": 1e-3, "cache_retrieval": True},
    "workers": 1,
}


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(root / "cfg.json"), "--seed", "5", "--out", str(root / "data")]) == 0
    return root


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_gen_data_is_deterministic(cli_data, tmp_path):
    assert main(["gen-data", "--config", str(cli_data / "cfg.json"), "--seed", "5", "--out", str(tmp_path / "d")]) == 0
    assert _tree(tmp_path / "d") == _tree(cli_data / "data")


def test_resolved_config_precedence(cli_data, tmp_path, capsys):
    code, _, _ = _run(capsys, "build-db", "--config", cli_data / "cfg.json", "--manifest",
                      cli_data / "data/manifest.json", "--out", tmp_path / "a.rapdb", "--seed", "9", "--epochs", "7")
    assert code == 0
    doc = json.loads((tmp_path / "resolved_config.json").read_text())["config"]
    assert doc["seed"] == 9 and doc["data"]["sim"]["seed"] == 9
    assert doc["train"]["epochs"] == 7  # flag beats file
    assert doc["train"]["batch_size"] == 4  # file beats default
    assert doc["experiment"] == DEFAULTS["experiment"]


def test_build_db_and_retrieve_match_library(cli_data, tmp_path, capsys):
    m = DatasetManifest.load(cli_data / "data/manifest.json")
    code, out, _ = _run(capsys, "build-db", "--manifest", cli_data / "data/manifest.json", "--out", tmp_path / "a.rapdb")
    assert code == 0 and out.split("\t")[1].strip() == str(len(m.retrieval))
    db = load_database(tmp_path / "a.rapdb")
    ref = build_database(m)
    for name in ("xs", "ys", "source_ids", "start_indices"):
        assert getattr(db, name).tobytes() == getattr(ref, name).tobytes()
    q = m.pairs("test")[0].x
    write_field(q, tmp_path / "q.rapf")
    code, out, _ = _run(capsys, "retrieve", "--db", tmp_path / "a.rapdb", "--query", tmp_path / "q.rapf",
                        "--k", 3, "--out", tmp_path / "r")
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 3
    lib = retrieve(db, q, 3, ExclusionRule("none"))
    for line, r in zip(lines, lib):
        idx, score, path = line.split("\t")
        assert int(idx) == r.index and float(score) == r.score
        assert read_field(path) == r.reference


def test_train_eval_rollout_thin_adapter(cli_data, tmp_path, capsys):
    man = cli_data / "data/manifest.json"
    cfg = cli_data / "cfg.json"
    code, out, _ = _run(capsys, "train", "--config", cfg, "--manifest", man, "--variant", "rap", "--out", tmp_path / "t")
    assert code == 0
    ckpt = out.strip()
    assert (tmp_path / "t/history.csv").exists() and (tmp_path / "t/resolved_config.json").exists()

    code, out, _ = _run(capsys, "eval", "--config", cfg, "--manifest", man, "--checkpoint", ckpt, "--out", tmp_path / "e")
    assert code == 0
    m = DatasetManifest.load(man)
    pairs = m.pairs("test")
    params = load_checkpoint(ckpt)[0]
    preds = predict_batch(params, build_database(m), [p.x for p in pairs])
    ms, _ = score_samples(preds, np.stack([p.y.data for p in pairs]), m.stats["max_abs_train"])
    assert json.loads(out)["mse"] == ms.mse
    assert json.loads((tmp_path / "e/metrics.json").read_text())["metrics"]["mse"] == ms.mse

    code, out, _ = _run(capsys, "rollout", "--config", cfg, "--manifest", man, "--checkpoint", ckpt,
                        "--cycles", 3, "--out", tmp_path / "ro")
    assert code == 0 and out.splitlines()[0] == "cycle,mse" and len(out.splitlines()) == 4
    sid = m.trajectories["test"][0]
    pred = read_field(tmp_path / f"ro/rollout_{sid:05d}.rapf")
    assert pred.shape == (6, 2, 8, 8)
    assert float(out.splitlines()[1].split(",")[1]) == metric_mse(pred.frames(0, 2), m.trajectory(sid).frames(2, 4))


def test_eval_analog_only_needs_no_checkpoint(cli_data, tmp_path, capsys):
    code, out, _ = _run(capsys, "eval", "--manifest", cli_data / "data/manifest.json", "--variant", "analog-only",
                        "--out", tmp_path)
    assert code == 0 and json.loads(out)["n"] == len(DatasetManifest.load(cli_data / "data/manifest.json").pairs("test"))


def test_ablate_and_report(cli_data, tmp_path, capsys):
    code, out, _ = _run(capsys, "ablate", "--config", cli_data / "cfg.json", "--manifest", cli_data / "data/manifest.json",
                        "--matrix", "fusion", "--seeds", "0", "--epochs", 1, "--out", tmp_path)
    assert code == 0
    reports = list(tmp_path.glob("report_*.json"))
    assert len(reports) == 1
    rep = load_report(reports[0])
    assert set(rep.metrics) == {"baseline_single_stream", "naive_concat", "rap_dual_stream"}
    code, out2, _ = _run(capsys, "report", "--report", reports[0])
    assert code == 0 and out2.strip() == out.strip()


def test_usage_errors_exit_2(capsys):
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["train", "--variant", "bogus"]) == 2
    assert main(["ablate", "--seeds", "a,b"]) == 2
    assert "usage" in capsys.readouterr().err


def test_domain_errors_exit_1(cli_data, tmp_path, capsys):
    code, _, err = _run(capsys, "train", "--manifest", tmp_path / "missing.json")
    assert code == 1 and "error" in err
    code, _, err = _run(capsys, "retrieve", "--db", tmp_path / "none.rapdb")
    assert code == 1
    bad = tmp_path / "bad.rapdb"
    bad.write_bytes(b"not a database")
    write_field(DatasetManifest.load(cli_data / "data/manifest.json").pairs("test")[0].x, tmp_path / "q.rapf")
    code, _, err = _run(capsys, "retrieve", "--db", bad, "--query", tmp_path / "q.rapf")
    assert code == 1
    code, _, _ = _run(capsys, "train", "--manifest", cli_data / "data/manifest.json", "--variant", "analog-only")
    assert code == 1
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"sim": {"dt": 5.0}}}))
    code, _, err = _run(capsys, "gen-data", "--config", cfg, "--out", tmp_path / "g")
    assert code == 1 and "error" in err


@pytest.mark.skipif(shutil.which("rap-lab") is None, reason="console script not installed")
def test_console_script():
    r = subprocess.run(["rap-lab", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip()
    r = subprocess.run([sys.executable, "-m", "raplab", "gen-data", "--bogus"], capture_output=True, text=True)
    assert r.returncode == 2

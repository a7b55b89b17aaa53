import json
from pathlib import Path

import numpy as np
import pytest

from dsalab import pipeline as pl
from dsalab.cli import main
from dsalab.datagen import read_database
from dsalab.ssmtl import model_from_dict, predict

TINY = {
    "grid": "bundled:case9",
    "contingencies": "bundled:case9_contingencies",
    "seed": 5,
    "topologies": [
        {"id": "T0", "removed": []},
        {"id": "T1", "removed": ["4-5a"]},
        {"id": "X1", "removed": ["4-5a", "6-7a", "8-9a"], "seen": False},
    ],
    "n_per_topology": 24,
    "boundary_n": 30,
    "near_boundary_samples": 12,
    "benchmark_ocs": 20,
    "stages": [
        {"alpha": 1.0, "beta": 0.0, "min_epochs": 2, "max_epochs": 2},
        {"alpha": 0.5, "beta": 0.5, "min_epochs": 2, "max_epochs": 3},
        {"alpha": 0.75, "beta": 0.25, "min_epochs": 2, "max_epochs": 3},
    ],
    "baseline_min_epochs": 2,
    "baseline_max_epochs": 4,
    "k_nearest": 10,
}


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def workdir(config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in ("generate", "train"):
        assert main([cmd, "--config", str(config), "--out", str(out)]) == 0
    return out


def run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def test_usage_errors(capsys):
    assert run(capsys, )[0] == 1
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "attack", "--epsilon", "abc")[0] == 1
    assert run(capsys, "assess")[0] == 1


def test_missing_config_and_grid(capsys, tmp_path):
    code, _, err = run(capsys, "generate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path))
    assert code == 2 and "nope.json" in err
    bad = dict(TINY, grid=str(tmp_path / "missing_grid.json"))
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(bad))
    code, _, err = run(capsys, "generate", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == 2 and "missing_grid.json" in err


def test_train_needs_database(capsys, config, tmp_path):
    code, _, err = run(capsys, "train", "--config", str(config), "--out", str(tmp_path))
    assert code == 2 and "generate" in err


def test_generate_is_byte_deterministic(config, workdir, tmp_path):
    assert main(["generate", "--config", str(config), "--out", str(tmp_path)]) == 0
    for name in (pl.DATABASE_FILE, pl.DATABASE_FILE + ".meta.json", pl.BOUNDARY_FILE, "generation.csv"):
        assert (tmp_path / name).read_bytes() == (workdir / name).read_bytes(), name


def test_boundary_mode_provenance(config, tmp_path):
    assert main(["generate", "--config", str(config), "--out", str(tmp_path), "--mode", "boundary"]) == 0
    meta = json.loads((tmp_path / (pl.DATABASE_FILE + ".meta.json")).read_text())
    assert meta["generator"] == "boundary"


def test_artifacts_embed_provenance(config, workdir):
    cfg = pl.load_config(config)
    head = f"# config_hash={cfg.hash()} seed={cfg.seed}"
    for name in ("generation.csv", "training_log.csv"):
        assert (workdir / name).read_text().splitlines()[0] == head
    for name in (pl.MODEL_FILE, pl.BASELINE_FILE, pl.DATABASE_FILE + ".meta.json"):
        doc = json.loads((workdir / name).read_text())
        assert doc["config_hash"] == cfg.hash() and doc["seed"] == cfg.seed


def test_checkpoint_reproduces_predictions_and_fair_split(config, workdir):
    cfg = pl.load_config(config)
    db = read_database(workdir / pl.DATABASE_FILE)
    trained = pl.train_models(cfg, db)
    doc = json.loads((workdir / pl.MODEL_FILE).read_text())
    reloaded = model_from_dict(doc)
    test = pl.test_set(db, trained.normalizer)
    np.testing.assert_array_equal(predict(trained.model, test.x, test.cidx)[1], predict(reloaded, test.x, test.cidx)[1])
    base = json.loads((workdir / pl.BASELINE_FILE).read_text())
    assert doc["split_hash"] == base["split_hash"] == trained.split_hash


def test_training_log_stage_transitions(workdir):
    rows = [r.split(",") for r in (workdir / "training_log.csv").read_text().splitlines()[2:]]
    weights = []
    for r in rows:
        w = (float(r[2]), float(r[3]))
        if not weights or weights[-1] != w:
            weights.append(w)
    assert weights == [(1.0, 0.0), (0.5, 0.5), (0.75, 0.25)]


def test_normalizer_uses_train_split_only(workdir):
    db = read_database(workdir / pl.DATABASE_FILE)
    doc = json.loads((workdir / pl.MODEL_FILE).read_text())
    x = np.array([s.features for s in pl.train_split(db, doc["train_topologies"])])
    np.testing.assert_allclose(doc["normalizer"]["mean"], x.mean(axis=0), rtol=1e-12, atol=1e-15)
    assert "X1" not in doc["train_topologies"]


def _write_ocs(path, samples):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({"oc_id": s.oc_id, "features": [float(v) for v in s.features]}) + "\n")


def test_assess_outputs_and_confidence(capsys, config, workdir, tmp_path):
    db = read_database(workdir / pl.DATABASE_FILE)
    train_ocs = [s for s in db.samples if s.split == "train" and s.topology_id == "T0" and s.contingency_index == 0][:5]
    oc_file = tmp_path / "ocs.jsonl"
    _write_ocs(oc_file, train_ocs)
    out_file = tmp_path / "pred.jsonl"
    code = main(["assess", "--config", str(config), "--out", str(workdir), "--oc-file", str(oc_file),
                 "--contingency", db.contingency_vocab[1], "--output", str(out_file)])
    assert code == 0
    recs = [json.loads(l) for l in out_file.read_text().splitlines()]
    assert len(recs) == 5
    assert set(recs[0]) >= {"label", "probability", "avg_distance", "percentile", "band"}
    assert all(r["contingency"] == db.contingency_vocab[1] for r in recs)
    code, out, _ = run(capsys, "assess", "--config", str(config), "--out", str(workdir), "--oc-file", str(oc_file))
    assert code == 0 and len(out.splitlines()) == 5 * len(db.contingency_vocab)


def test_assess_empty_unknown_and_mismatch(capsys, config, workdir, tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    code, out, _ = run(capsys, "assess", "--config", str(config), "--out", str(workdir), "--oc-file", str(empty))
    assert code == 0 and out == ""
    code, _, err = run(capsys, "assess", "--config", str(config), "--out", str(workdir), "--oc-file", str(empty),
                       "--contingency", "nope")
    assert code == 2 and "unknown contingency" in err
    wide = tmp_path / "wide.jsonl"
    wide.write_text(json.dumps({"oc_id": "w", "features": [0.0] * 60}) + "\n")
    grid = pl.load_config(config).resolve("bundled:case14")
    code, _, err = run(capsys, "assess", "--config", str(config), "--out", str(workdir), "--oc-file", str(wide),
                       "--grid", str(grid))
    assert code == 2
    diag = json.loads(err.splitlines()[0])
    assert diag["expected"] == 54 and diag["got"] == 60 and "gate" in diag


def test_attack_calibrate_benchmark_commands(capsys, config, workdir):
    code, out, _ = run(capsys, "attack", "--config", str(config), "--out", str(workdir), "--epsilon", "0.1")
    assert code == 0 and "ssmtl,0.1," in out
    code, out, _ = run(capsys, "calibrate-threshold", "--config", str(config), "--out", str(workdir))
    assert code == 0 and "threshold h" in out
    gate = json.loads((workdir / "gate.json").read_text())
    assert set(gate["gate"]) == {"X1"}
    code, out, _ = run(capsys, "benchmark", "--config", str(config), "--out", str(workdir))
    assert code == 0 and "speedup" in out.splitlines()[0]


def test_reproduce_is_deterministic(capsys, config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        code, out, _ = run(capsys, "reproduce", "--config", str(config), "--out", str(d), "--no-benchmark")
        assert code == 0 and "per_topology_f2.csv" in out
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    report = (a / "per_topology_f2.csv").read_text()
    assert "ssmtl,X1,0," in report

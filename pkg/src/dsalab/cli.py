"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import confidence as conf
from . import pipeline as pl
from .datagen import GenerationExhaustedError, read_database
from .grid import load_grid
from .metrics import SPEED_CAVEAT, speed_table_csv
from .ssmtl import TopologyMismatchError, TrainingDivergedError, predict
from .toposim import gate_new_topology

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("dsalab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (default: bundled 9-bus experiment)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="dsalab", description="Dynamic security assessment laboratory")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", parents=[common], help="build the labeled database")
    g.add_argument("--mode", choices=["tds", "boundary"])
    sub.add_parser("train", parents=[common], help="train SS-MTL and the raw baseline")
    a = sub.add_parser("assess", parents=[common], help="classify operating conditions with confidence")
    a.add_argument("--oc-file", required=True, help="JSON Lines file of records with raw 'features'")
    a.add_argument("--contingency", help="contingency id (default: all)")
    a.add_argument("--grid", help="grid file of the OCs' topology, used by the similarity gate on width mismatch")
    a.add_argument("--output", help="write predictions here instead of stdout")
    k = sub.add_parser("attack", parents=[common], help="FGSM bad-data evaluation")
    k.add_argument("--epsilon", type=float)
    sub.add_parser("calibrate-threshold", parents=[common], help="similarity threshold and retrain check")
    sub.add_parser("benchmark", parents=[common], help="TDS vs inference timing")
    r = sub.add_parser("reproduce", parents=[common], help="run every stage end to end")
    r.add_argument("--mode", choices=["tds", "boundary"])
    r.add_argument("--epsilon", type=float)
    r.add_argument("--no-benchmark", action="store_true", help="skip the timing stage")
    return p


def _config(args) -> pl.PipelineConfig:
    path = Path(args.config) if args.config else pl.bundled_config_path()
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = pl.load_config(path)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "mode", None):
        over["mode"] = args.mode
    if getattr(args, "epsilon", None) is not None:
        over["epsilon"] = args.epsilon
    if args.out:
        over["out"] = args.out
    return replace(cfg, **over) if over else cfg


def _database(out: Path):
    path = out / pl.DATABASE_FILE
    if not path.exists():
        raise FileNotFoundError(f"no database at {path}; run 'generate' first")
    return read_database(path)


def _models(out: Path, db):
    if not (out / pl.MODEL_FILE).exists():
        raise FileNotFoundError(f"no model at {out / pl.MODEL_FILE}; run 'train' first")
    return pl.load_models(out, db)


def cmd_generate(cfg: pl.PipelineConfig, out: Path) -> int:
    res: dict = {}
    db = pl.stage_generate(cfg, out, res)
    print(f"wrote {len(db.samples)} samples to {out / pl.DATABASE_FILE} (generator={db.meta['generator']})")
    nb = res["near_boundary"]
    print(f"near-boundary fraction: boundary={nb['boundary']:.3f} tds={nb['tds']:.3f}")
    return EXIT_OK


def cmd_train(cfg: pl.PipelineConfig, out: Path) -> int:
    db = _database(out)
    res: dict = {}
    trained = pl.stage_train(cfg, out, db, res)
    print(f"trained on {len(trained.data)} rows from {', '.join(trained.train_topologies)}; "
          f"split hash {trained.split_hash}")
    return EXIT_OK


def cmd_assess(cfg: pl.PipelineConfig, out: Path, args) -> int:
    db = _database(out)
    trained, known = _models(out, db)
    vocab = trained.model.contingency_vocab
    if args.contingency is not None and args.contingency not in vocab:
        raise ValueError(f"unknown contingency id {args.contingency!r}; known: {vocab}")
    with open(args.oc_file) as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    sink = open(args.output, "w") if args.output else sys.stdout
    try:
        if not records:
            return EXIT_OK
        x = np.array([r["features"] for r in records], dtype=float)
        if x.ndim != 2 or x.shape[1] != trained.model.m:
            width = x.shape[1] if x.ndim == 2 else "ragged"
            msg = {"error": "feature width mismatch", "expected": trained.model.m, "got": width}
            if args.grid:
                gate_file = out / "gate.json"
                h = cfg.threshold
                if gate_file.exists():
                    h = json.loads(gate_file.read_text())["threshold"]
                h = float("inf") if h in ("inf", "calibrate") else float(h)
                decision = gate_new_topology(load_grid(args.grid), list(known.values()), h)
                msg["gate"] = decision.to_dict()
                msg["recommendation"] = "retrain" if decision.retrain else "reuse model after feature remapping"
            else:
                msg["recommendation"] = "run the similarity gate with --grid; retraining is likely required"
            print(json.dumps(msg), file=sys.stderr)
            raise TopologyMismatchError(msg["error"])
        cov = pl.fit_confidence(cfg, db, trained)
        z = trained.normalizer.transform(x)
        reports = conf.confidence_batch(cov, z)
        targets = [args.contingency] if args.contingency else vocab
        for cid in targets:
            ci = vocab.index(cid)
            labels, probs = predict(trained.model, z, np.full(len(z), ci))
            for r, lab, p, rep in zip(records, labels, probs, reports):
                rec = {"oc_id": r.get("oc_id"), "contingency": cid, "label": int(lab), "probability": float(p)}
                rec.update(rep.to_dict())
                sink.write(json.dumps(rec) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


def cmd_attack(cfg: pl.PipelineConfig, out: Path) -> int:
    db = _database(out)
    trained, _ = _models(out, db)
    res: dict = {}
    pl.stage_attack(cfg, out, db, trained, res)
    print((out / "attack.csv").read_text(), end="")
    return EXIT_OK


def cmd_calibrate(cfg: pl.PipelineConfig, out: Path) -> int:
    db = _database(out)
    trained, _ = _models(out, db)
    res: dict = {}
    h = pl.stage_calibrate(cfg, out, db, trained, res)
    print((out / "calibration.csv").read_text(), end="")
    print(f"threshold h = {h}")
    for t, g in res["gate"].items():
        print(f"{t}: mean_rmse={g['mean_rmse']:.4f} retrain={g['retrain']}")
    return EXIT_OK


def cmd_benchmark(cfg: pl.PipelineConfig, out: Path) -> int:
    db = _database(out)
    trained, _ = _models(out, db)
    rows = pl.stage_benchmark(cfg, out, db, trained, {})
    print(speed_table_csv(rows), end="")
    print(SPEED_CAVEAT)
    return EXIT_OK


def cmd_reproduce(cfg: pl.PipelineConfig, out: Path, args) -> int:
    res = pl.run_experiment(cfg, out, benchmark=not args.no_benchmark)
    print(f"seen-topology F2: ssmtl={res['seen_f2_ssmtl']:.4f} baseline={res['seen_f2_baseline']:.4f}")
    for name in ("per_topology_f2.csv", "attack.csv", "calibration.csv", "retrain.csv"):
        print(f"-- {name}")
        print((out / name).read_text(), end="")
    if res.get("speedup") is not None:
        print(f"speedup {res['speedup']:.0f}x ({SPEED_CAVEAT})")
    return EXIT_OK


def _exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, pl.StageError) else exc
    if isinstance(cause, (TrainingDivergedError, GenerationExhaustedError, np.linalg.LinAlgError,
                          FloatingPointError, OverflowError)):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "assess":
            return cmd_assess(cfg, out, args)
        if args.command == "attack":
            return cmd_attack(cfg, out)
        if args.command == "calibrate-threshold":
            return cmd_calibrate(cfg, out)
        if args.command == "benchmark":
            return cmd_benchmark(cfg, out)
        return cmd_reproduce(cfg, out, args)
    except (OSError, ValueError, KeyError, RuntimeError, json.JSONDecodeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())

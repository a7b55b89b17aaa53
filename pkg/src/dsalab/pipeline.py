"""Experiment configuration, feature normalization and the end-to-end stages.

Each stage reads and writes plain files in one output directory so the CLI
subcommands can run them separately; ``reproduce`` chains all of them.
Artifacts carry the config hash and master seed. Wall-clock timings go to a
separate ``benchmark.csv`` because they cannot be reproduced byte for byte.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import confidence as conf
from .datagen import (
    Database,
    SamplingConfig,
    apply_topology_change,
    assign_splits,
    bisect_many,
    config_hash,
    generate_boundary_database,
    generate_tds_database,
    merge_databases,
    _label_points,
    grid_from_features,
    ray_box,
    sample_record,
    scaled_point,
    write_database,
)
from .dynsim import ContingencySpec, StaticConfig, load_contingencies, simulate
from .grid import GridModel, bundled_grid_path, load_grid, solve_power_flow
from .metrics import benchmark_speed, evaluate, speed_table_csv
from .robustness import AttackConfig, evaluate_resilience, fgsm, surrogate_hash, train_surrogate, write_attacked
from .ssmtl import (
    LossSchedule,
    RawClassifier,
    SsMtlModel,
    Stage,
    TrainingConfig,
    TrainingSet,
    build_model,
    build_raw_classifier,
    model_from_dict,
    model_to_dict,
    predict,
    raw_from_dict,
    raw_to_dict,
    train,
    train_raw_classifier,
)
from .toposim import (
    SvSequence,
    calibrate_threshold,
    calibration_csv,
    compute_svs,
    gate_new_topology,
    mean_rmse,
)

log = logging.getLogger(__name__)

DATABASE_FILE = "database.jsonl"
BOUNDARY_FILE = "boundary.jsonl"
MODEL_FILE = "model.json"
BASELINE_FILE = "baseline.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# --------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class TopologySpec:
    id: str
    removed: tuple[str, ...] = ()
    seen: bool = True


@dataclass
class PipelineConfig:
    grid: str
    contingencies: str
    topologies: list[TopologySpec]
    seed: int
    n_per_topology: int = 200
    mode: str = "tds"
    sampling: SamplingConfig = SamplingConfig()
    boundary_n: int = 600
    bisection_tol: float = 0.005
    test_fraction: float = 0.3
    training: TrainingConfig = TrainingConfig()
    stages: tuple[Stage, ...] = LossSchedule().stages
    baseline_min_epochs: int = 60
    baseline_max_epochs: int = 200
    latent_dim: int = 16
    hidden: int = 64
    dropout: float = 0.1
    mask_rate: float = 0.15
    k_nearest: int = 50
    epsilon: float = 0.05
    surrogate_fraction: float = 0.5
    threshold: float | str = "calibrate"
    f2_tolerance: float = 0.05
    near_boundary_samples: int = 240
    benchmark_ocs: int = 1000
    out: str = "out"
    base_dir: str = "."

    def __post_init__(self):
        if self.mode not in ("tds", "boundary"):
            raise ValueError("mode must be 'tds' or 'boundary'")
        if not self.topologies:
            raise ValueError("at least one topology is required")
        if not any(t.seen for t in self.topologies):
            raise ValueError("at least one topology must be seen in training")

    def resolve(self, ref: str) -> Path:
        if ref.startswith("bundled:"):
            return bundled_grid_path(ref.split(":", 1)[1])
        p = Path(ref)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("out")
        d.pop("base_dir")
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def schedule(self) -> LossSchedule:
        return LossSchedule(tuple(self.stages))


def config_from_dict(doc: dict, base_dir: str | Path = ".") -> PipelineConfig:
    doc = dict(doc)
    if "seed" not in doc:
        raise ValueError("config must set a master seed")
    doc["topologies"] = [TopologySpec(t["id"], tuple(t.get("removed", ())), t.get("seen", True))
                         for t in doc["topologies"]]
    if "sampling" in doc:
        doc["sampling"] = SamplingConfig(**doc["sampling"])
    if "training" in doc:
        doc["training"] = TrainingConfig(**doc["training"])
    if "stages" in doc:
        doc["stages"] = tuple(Stage(**s) for s in doc["stages"])
    doc.setdefault("base_dir", str(base_dir))
    cfg = PipelineConfig(**doc)
    for ref in (cfg.grid, cfg.contingencies):
        if not cfg.resolve(ref).exists():
            raise FileNotFoundError(f"referenced file not found: {cfg.resolve(ref)}")
    return cfg


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    return config_from_dict(doc, path.parent)


def bundled_config_path() -> Path:
    return Path(__file__).parent / "data" / "config9.json"


def sub_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def provenance(cfg: PipelineConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed}


def _csv_header(cfg: PipelineConfig) -> str:
    return f"# config_hash={cfg.hash()} seed={cfg.seed}\n"


def _write_text(path: Path, text: str) -> None:
    path.write_text(text)


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# Normalization


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Normalizer":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        flat = std <= 1e-12
        if flat.any():
            log.warning("%d zero-variance features get unit scale", int(flat.sum()))
        return cls(mean, np.where(flat, 1.0, std))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mean"], dtype=float), np.array(d["std"], dtype=float))


def training_set(samples, normalizer: Normalizer) -> TrainingSet:
    if not samples:
        return TrainingSet(np.zeros((0, len(normalizer.mean))), [], [], [])
    return TrainingSet(
        normalizer.transform(np.array([s.features for s in samples])),
        [s.contingency_index for s in samples],
        [-1 if s.label is None else s.label for s in samples],
        [s.topology_id for s in samples],
    )


def unique_rows(samples) -> np.ndarray:
    seen, rows = set(), []
    for s in samples:
        if s.oc_id not in seen:
            seen.add(s.oc_id)
            rows.append(s.features)
    return np.array(rows)


# --------------------------------------------------------------------------
# Grids and generation


def load_inputs(cfg: PipelineConfig) -> tuple[GridModel, list[ContingencySpec], dict[str, GridModel]]:
    base = load_grid(cfg.resolve(cfg.grid))
    conts = load_contingencies(cfg.resolve(cfg.contingencies))
    grids = {}
    for t in cfg.topologies:
        grids[t.id] = apply_topology_change(base, t.removed, t.id)
    return base, conts, grids


def generate(cfg: PipelineConfig, mode: str | None = None) -> Database:
    mode = mode or cfg.mode
    _, conts, grids = load_inputs(cfg)
    parts = []
    for k, t in enumerate(cfg.topologies):
        s = sub_seed(cfg.seed, 1, k)
        if mode == "tds":
            parts.append(generate_tds_database(grids[t.id], conts, cfg.n_per_topology, s, cfg.sampling))
        else:
            n = int(round(cfg.n_per_topology * len(conts) * (1 - cfg.sampling.unlabeled_fraction)))
            parts.append(generate_boundary_database(grids[t.id], conts, n, s, cfg.bisection_tol, cfg.sampling))
    db = merge_databases(parts)
    assign_splits(db, cfg.test_fraction, cfg.seed, test_only=[t.id for t in cfg.topologies if not t.seen])
    db.meta = {"generator": mode, **provenance(cfg), "n_per_topology": cfg.n_per_topology,
               "generators": {p.samples[0].topology_id: p.meta.get("generator") for p in parts if p.samples}}
    return db


def near_boundary_fraction(db: Database, grid: GridModel, conts: Sequence[ContingencySpec],
                           tol: float, sampling: SamplingConfig, band: float | None = None,
                           limit: int | None = None) -> float:
    """Share of labeled samples whose load scale lies within ``band`` of the
    security boundary along their own load direction.

    Samples that already carry a boundary use it; otherwise the boundary is
    located by bisection along ``factors / mean(factors)``. Rays without a
    secure/insecure crossing inside the scaling box count as far.
    """
    band = 2 * tol if band is None else band
    samples = [s for s in db.samples if s.label is not None and s.topology_id == grid.topology_id]
    if limit is not None:
        samples = samples[:limit]
    if not samples:
        return 0.0
    near = 0
    todo: dict[int, list] = {}
    for s in samples:
        if s.boundary is not None:
            near += abs(s.scale - s.boundary) <= band
        else:
            todo.setdefault(s.contingency_index, []).append(s)
    by_index = {c.contingency_index: c for c in conts}
    for ci, group in todo.items():
        cont = by_index[ci]
        ratios = []
        for s in group:
            variant = grid_from_features(grid, s.features)
            p = np.array([ld.p for ld in variant.loads])
            p0 = np.array([ld.p for ld in grid.loads])
            f = p / p0
            ratios.append((f / f.mean(), float(f.mean())))
        dirs = [r[0] for r in ratios]
        scales = np.array([r[1] for r in ratios])
        boxes = np.array([ray_box(d, sampling) for d in dirs])

        def label_at(idx, sc):
            pts = [scaled_point(grid, dirs[i], float(v), sampling) for i, v in zip(idx, sc)]
            ok = np.zeros(len(pts), dtype=bool)
            live = [j for j, p in enumerate(pts) if p is not None]
            if live:
                ok[live] = np.array(_label_points([pts[j] for j in live], cont, StaticConfig()), dtype=bool)
            return ok

        idx_all = np.arange(len(group))
        sec_lo = label_at(idx_all, boxes[:, 0])
        sec_hi = label_at(idx_all, boxes[:, 1])
        crossing = np.flatnonzero(sec_lo & ~sec_hi)
        if crossing.size == 0:
            continue

        def probe(active, mids):
            return label_at(crossing[active], mids)

        lo, hi, _ = bisect_many(probe, boxes[crossing, 0], boxes[crossing, 1], tol)
        bnd = 0.5 * (lo + hi)
        near += int(np.sum(np.abs(scales[crossing] - bnd) <= band))
    return near / len(samples)


# --------------------------------------------------------------------------
# Training


@dataclass
class Trained:
    model: SsMtlModel
    baseline: RawClassifier
    normalizer: Normalizer
    data: TrainingSet
    train_topologies: list[str]
    split_hash: str
    log: object = None


def seen_ids(cfg: PipelineConfig) -> list[str]:
    return [t.id for t in cfg.topologies if t.seen]


def unseen_ids(cfg: PipelineConfig) -> list[str]:
    return [t.id for t in cfg.topologies if not t.seen]


def train_split(db: Database, topologies: Sequence[str]):
    chosen = set(topologies)
    return db.select(lambda s: s.split == "train" and s.topology_id in chosen)


def train_models(cfg: PipelineConfig, db: Database, extra_train: Sequence[str] = (), seed_tag: int = 0) -> Trained:
    """Train SS-MTL and the raw baseline on the train split of seen topologies
    (plus ``extra_train``), with a normalizer fitted on that split only."""
    topologies = sorted(set(seen_ids(cfg)) | set(extra_train))
    samples = train_split(db, topologies)
    if not samples:
        raise ValueError("empty train split")
    norm = Normalizer.fit(np.array([s.features for s in samples]))
    data = training_set(samples, norm)
    C = len(db.contingency_vocab)
    seed = sub_seed(cfg.seed, 2, seed_tag)
    tcfg = replace(cfg.training, seed=seed)
    model = build_model(db.m, C, seed, cfg.hidden, cfg.latent_dim, 16, cfg.dropout, cfg.mask_rate)
    model.contingency_vocab = list(db.contingency_vocab)
    model.feature_layout = list(db.feature_layout)
    model, tlog = train(model, data, tcfg, cfg.schedule())
    baseline = build_raw_classifier(db.m, C, seed, cfg.hidden, 16, cfg.dropout)
    baseline, _ = train_raw_classifier(baseline, data, tcfg, max_epochs=cfg.baseline_max_epochs,
                                       min_epochs=cfg.baseline_min_epochs)
    split_hash = config_hash(sorted(f"{s.oc_id}#{s.contingency_index}" for s in samples))
    return Trained(model, baseline, norm, data, topologies, split_hash, tlog)


def save_models(cfg: PipelineConfig, out: Path, trained: Trained, known_svs: dict[str, SvSequence]) -> None:
    prov = provenance(cfg)
    common = dict(normalizer=trained.normalizer.to_dict(), split_hash=trained.split_hash,
                  train_topologies=trained.train_topologies, **prov)
    doc = model_to_dict(trained.model)
    doc.update(common, known_svs={k: v.values.tolist() for k, v in known_svs.items()})
    _write_json(out / MODEL_FILE, doc)
    bdoc = raw_to_dict(trained.baseline)
    bdoc.update(common)
    _write_json(out / BASELINE_FILE, bdoc)
    if trained.log is not None:
        _write_text(out / "training_log.csv", _csv_header(cfg) + trained.log.to_csv())


def load_models(out: Path, db: Database | None = None) -> tuple[Trained, dict[str, SvSequence]]:
    """Reload checkpoints; the training set is rebuilt from ``db`` when given."""
    with open(out / MODEL_FILE) as fh:
        doc = json.load(fh)
    with open(out / BASELINE_FILE) as fh:
        bdoc = json.load(fh)
    norm = Normalizer.from_dict(doc["normalizer"])
    topologies = doc.get("train_topologies", [])
    data = training_set(train_split(db, topologies), norm) if db is not None else None
    known = {k: SvSequence(np.array(v), k) for k, v in doc.get("known_svs", {}).items()}
    return Trained(model_from_dict(doc), raw_from_dict(bdoc), norm, data, topologies, doc.get("split_hash", "")), known


def test_set(db: Database, norm: Normalizer, topologies: Sequence[str] | None = None) -> TrainingSet:
    chosen = db.select(lambda s: s.split == "test" and s.label is not None
                       and (topologies is None or s.topology_id in topologies))
    return training_set(chosen, norm)


def ssmtl_predictor(model: SsMtlModel):
    return lambda x, c: predict(model, x, c)[0]


def raw_predictor(clf: RawClassifier):
    return lambda x, c: clf.predict(x, c)[0]


def f2_of(predictor, data: TrainingSet) -> float:
    return evaluate(predictor(data.x, data.cidx), data.y, data.topology).f_beta


def per_topology_f2(predictor, data: TrainingSet) -> dict[str, float]:
    return evaluate(predictor(data.x, data.cidx), data.y, data.topology).topology_scores()


def fit_confidence(cfg: PipelineConfig, db: Database, trained: Trained) -> conf.CovarianceModel:
    rows = unique_rows(train_split(db, trained.train_topologies))
    return conf.fit_covariance(trained.normalizer.transform(rows), k_nearest=cfg.k_nearest)


# --------------------------------------------------------------------------
# Stages


def stage_generate(cfg: PipelineConfig, out: Path, res: dict) -> Database:
    _, conts, grids = load_inputs(cfg)
    db = generate(cfg, cfg.mode)
    write_database(db, out / DATABASE_FILE)
    g0 = grids[cfg.topologies[0].id]
    boundary = generate_boundary_database(g0, conts, cfg.boundary_n, sub_seed(cfg.seed, 3),
                                          cfg.bisection_tol, cfg.sampling)
    boundary.meta.update(provenance(cfg))
    write_database(boundary, out / BOUNDARY_FILE)
    reference = db if cfg.mode == "tds" else generate(cfg, "tds")
    tds_base = Database([s for s in reference.samples if s.topology_id == g0.topology_id],
                        reference.contingency_vocab, reference.feature_layout)
    n_cmp = min(cfg.near_boundary_samples, len(boundary.samples))
    dens_b = near_boundary_fraction(boundary, g0, conts, cfg.bisection_tol, cfg.sampling, limit=n_cmp)
    dens_t = near_boundary_fraction(tds_base, g0, conts, cfg.bisection_tol, cfg.sampling, limit=n_cmp)
    res["near_boundary"] = {"boundary": dens_b, "tds": dens_t, "n": n_cmp, "tol": cfg.bisection_tol}
    _write_table(cfg, out, "generation.csv",
                 "generator,near_boundary_fraction,n\n" f"boundary,{dens_b:.6f},{n_cmp}\n" f"tds,{dens_t:.6f},{n_cmp}\n")
    return db


def stage_train(cfg: PipelineConfig, out: Path, db: Database, res: dict) -> Trained:
    _, _, grids = load_inputs(cfg)
    trained = train_models(cfg, db)
    save_models(cfg, out, trained, {t: compute_svs(grids[t]) for t in seen_ids(cfg)})
    res["split_hash"] = trained.split_hash
    res["stage_transitions"] = [[float(a), float(b)] for a, b in trained.log.stage_weights]
    return trained


def stage_evaluate(cfg: PipelineConfig, out: Path, db: Database, trained: Trained, res: dict) -> dict[str, float]:
    test = test_set(db, trained.normalizer)
    seen = seen_ids(cfg)
    seen_test = test.subset(np.isin(test.topology, seen))
    f2_model = per_topology_f2(ssmtl_predictor(trained.model), test)
    f2_base = per_topology_f2(raw_predictor(trained.baseline), test)
    res["seen_f2_ssmtl"] = f2_of(ssmtl_predictor(trained.model), seen_test)
    res["seen_f2_baseline"] = f2_of(raw_predictor(trained.baseline), seen_test)
    rows = ["model,topology_id,seen,f2"]
    for name, scores, key in (("ssmtl", f2_model, "seen_f2_ssmtl"), ("baseline", f2_base, "seen_f2_baseline")):
        rows += [f"{name},{t},{int(t in seen)},{scores[t]:.6f}" for t in sorted(scores)]
        rows.append(f"{name},SEEN,1,{res[key]:.6f}")
    _write_table(cfg, out, "per_topology_f2.csv", "\n".join(rows) + "\n")

    cov = fit_confidence(cfg, db, trained)
    groups = [("train", unique_rows(train_split(db, trained.train_topologies))[:50])]
    if unseen_ids(cfg):
        groups.append(("unseen", unique_rows(db.select(lambda s: s.topology_id in unseen_ids(cfg)))[:50]))
    rows = ["group,mean_percentile,high_share,low_share"]
    for name, x in groups:
        reps = conf.confidence_batch(cov, trained.normalizer.transform(x))
        rows.append(f"{name},{np.mean([r.percentile for r in reps]):.4f},"
                    f"{np.mean([r.confidence_band == 'high' for r in reps]):.4f},"
                    f"{np.mean([r.confidence_band == 'low' for r in reps]):.4f}")
    _write_table(cfg, out, "confidence.csv", "\n".join(rows) + "\n")
    return f2_model


def stage_attack(cfg: PipelineConfig, out: Path, db: Database, trained: Trained, res: dict,
                 epsilon: float | None = None) -> dict:
    eps_main = cfg.epsilon if epsilon is None else epsilon
    seen = seen_ids(cfg)
    test = test_set(db, trained.normalizer, seen)
    surrogate = train_surrogate(trained.data, cfg.surrogate_fraction, sub_seed(cfg.seed, 4),
                                n_contingencies=len(db.contingency_vocab))
    lab = trained.data.labeled
    sur_pred = surrogate.predict(trained.data.x[lab], trained.data.cidx[lab])[0]
    res["surrogate_train_accuracy"] = float(np.mean(sur_pred == trained.data.y[lab]))
    rows = ["model,epsilon,clean_f2,attacked_f2,f2_drop,flip_rate,surrogate_loss_increase"]
    attack = {}
    for eps in (0.0, eps_main):
        acfg = AttackConfig(epsilon=eps, surrogate_fraction=cfg.surrogate_fraction, seed=cfg.seed)
        for name, pred in (("ssmtl", ssmtl_predictor(trained.model)), ("baseline", raw_predictor(trained.baseline))):
            rep = evaluate_resilience(pred, surrogate, test, acfg)
            attack[f"{name}@{eps}"] = {"clean_f2": rep.clean_f2, "attacked_f2": rep.attacked_f2,
                                       "loss_increase": rep.mean_loss_increase}
            rows.append(f"{name},{eps},{rep.clean_f2:.6f},{rep.attacked_f2:.6f},{rep.f2_drop:.6f},"
                        f"{rep.flipped.mean():.6f},{rep.mean_loss_increase:.6f}")
    _write_table(cfg, out, "attack.csv", "\n".join(rows) + "\n")
    records = [s for s in db.samples if s.split == "test" and s.label is not None and s.topology_id in seen]
    x_adv = fgsm(surrogate, test.x, test.cidx, test.y, eps_main)
    write_attacked(out / "attacked.jsonl", [sample_record(s) for s in records],
                   trained.normalizer.inverse(x_adv), eps_main, surrogate_hash(surrogate))
    res["attack"] = attack
    return attack


def _retrain_split(db: Database, topo: str, cfg: PipelineConfig) -> None:
    """Give a held-out topology its own train/test split for the retraining check."""
    ocs = sorted({s.oc_id for s in db.samples if s.topology_id == topo})
    rng = np.random.default_rng([cfg.seed, 0x5C])
    test = {ocs[i] for i in rng.permutation(len(ocs))[: int(round(cfg.test_fraction * len(ocs)))]}
    for s in db.samples:
        if s.topology_id == topo:
            s.split = "test" if s.oc_id in test else "train"


def stage_calibrate(cfg: PipelineConfig, out: Path, db: Database, trained: Trained, res: dict,
                    f2_model: dict[str, float] | None = None, retrain: bool = True) -> float:
    _, _, grids = load_inputs(cfg)
    seen = seen_ids(cfg)
    svs = {t: compute_svs(g) for t, g in grids.items()}
    known = [svs[t] for t in seen]
    if f2_model is None:
        f2_model = per_topology_f2(ssmtl_predictor(trained.model), test_set(db, trained.normalizer))
    rmse = {t: mean_rmse(svs[t], known) for t in grids}
    h, rows = calibrate_threshold(rmse, f2_model, seen, cfg.f2_tolerance)
    if cfg.threshold != "calibrate":
        h = float(cfg.threshold)
    _write_table(cfg, out, "calibration.csv", calibration_csv(rows))
    gates = {t: gate_new_topology(svs[t], known, h).to_dict() for t in unseen_ids(cfg)}
    for g in gates.values():
        if not math.isfinite(g["threshold"]):
            g["threshold"] = "inf"
    res["threshold"] = h if math.isfinite(h) else "inf"
    res["calibration"] = [{"topology_id": r.topology_id, "mean_rmse": r.mean_rmse, "f2": r.f2, "seen": r.seen}
                          for r in rows]
    res["gate"] = gates
    _write_json(out / "gate.json", {**provenance(cfg), "threshold": res["threshold"], "gate": gates})
    if not retrain:
        return h
    rows = ["topology_id,gate_retrain,f2_before,f2_after"]
    work = Database([replace(s) for s in db.samples], db.contingency_vocab, db.feature_layout, db.meta)
    # the retraining comparison runs for every held-out topology so the gate
    # decision can be checked against what retraining actually buys
    for k, t in enumerate(unseen_ids(cfg)):
        _retrain_split(work, t, cfg)
        before = f2_of(ssmtl_predictor(trained.model), test_set(work, trained.normalizer, [t]))
        again = train_models(cfg, work, extra_train=[t], seed_tag=1 + k)
        after = f2_of(ssmtl_predictor(again.model), test_set(work, again.normalizer, [t]))
        rows.append(f"{t},{int(gates[t]['retrain'])},{before:.6f},{after:.6f}")
        res.setdefault("retrain", {})[t] = {"f2_before": before, "f2_after": after}
    _write_table(cfg, out, "retrain.csv", "\n".join(rows) + "\n")
    return h


def stage_benchmark(cfg: PipelineConfig, out: Path, db: Database, trained: Trained, res: dict,
                    repetitions: int = 5):
    _, conts, grids = load_inputs(cfg)
    rows = run_benchmark(grids[cfg.topologies[0].id], conts, trained.model, trained.normalizer, db,
                         cfg.benchmark_ocs, repetitions)
    (out / "benchmark.csv").write_text(_csv_header(cfg) + speed_table_csv(rows))
    res["speedup"] = rows[0].speedup if rows else None
    return rows


def run_benchmark(grid: GridModel, conts: Sequence[ContingencySpec], model: SsMtlModel, norm: Normalizer,
                  db: Database, n_ocs: int, repetitions: int = 5):
    base_rows = unique_rows([s for s in db.samples if s.topology_id == grid.topology_id])
    if len(base_rows) == 0 or n_ocs <= 0:
        return []
    reps = int(math.ceil(n_ocs / len(base_rows)))
    x = norm.transform(np.tile(base_rows, (reps, 1))[:n_ocs])
    sol = solve_power_flow(grid)
    C = model.n_contingencies
    xs = np.repeat(x, C, axis=0)
    cs = np.tile(np.arange(C), len(x))

    def tds(_):
        return simulate(grid, sol, conts[0])

    def infer(n):
        return predict(model, xs[: n * C], cs[: n * C])

    return benchmark_speed(grid.topology_id, tds, infer, len(x), repetitions)


def _write_table(cfg: PipelineConfig, out: Path, name: str, text: str) -> None:
    _write_text(out / name, _csv_header(cfg) + text)


def run_experiment(cfg: PipelineConfig, out: Path, benchmark: bool = True) -> dict:
    """generate -> train -> evaluate -> attack -> calibrate -> benchmark.

    Returns the summary written to ``report.json`` (plus the benchmark speedup,
    which is kept out of the reproducible report).
    """
    out.mkdir(parents=True, exist_ok=True)
    res: dict = {}
    stage = "generate"
    try:
        db = stage_generate(cfg, out, res)
        stage = "train"
        trained = stage_train(cfg, out, db, res)
        stage = "evaluate"
        f2_model = stage_evaluate(cfg, out, db, trained, res)
        stage = "attack"
        stage_attack(cfg, out, db, trained, res)
        stage = "calibrate"
        stage_calibrate(cfg, out, db, trained, res, f2_model)
        if benchmark:
            stage = "benchmark"
            stage_benchmark(cfg, out, db, trained, res)
    except Exception as exc:  # reported with the failing stage
        raise StageError(stage, exc) from exc
    report = {k: v for k, v in res.items() if k != "speedup"}
    _write_json(out / "report.json", {**provenance(cfg), **report})
    return res

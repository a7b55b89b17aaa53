"""Labeled database generation.

Two generators share the same labeling pipeline (``dynsim.label_batch``):

* ``generate_tds_database`` samples operating conditions from a Gaussian load
  model and labels every (operating condition, contingency) pair.
* ``generate_boundary_database`` screens load-scaling rays with a power-flow
  feasibility check and bisects each surviving ray to the security boundary,
  so most emitted samples sit close to it.

Randomness flows from one master seed through per-task generators keyed by
``[seed, task...]``, so results do not depend on execution order.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .dynsim import ContingencySpec, StaticConfig, check_contingency, label_batch
from .grid import (
    GridModel,
    ModelRejectedError,
    PowerFlowSolution,
    generator_output,
    solve_power_flow,
    with_loads,
    within_generation_limits,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class GenerationExhaustedError(RuntimeError):
    """Too few feasible operating conditions within the attempt budget."""


@dataclass(frozen=True)
class SamplingConfig:
    std_frac: float = 0.15
    adjacent_corr: float = 0.0
    low: float = 0.5
    high: float = 1.5
    pf_min: float = 0.95
    unlabeled_fraction: float = 0.2


@dataclass
class OperatingPoint:
    grid: GridModel
    solution: PowerFlowSolution
    factors: np.ndarray  # per-load active-power multipliers


@dataclass
class LabeledSample:
    topology_id: str
    contingency_index: int
    features: np.ndarray
    label: int | None
    oc_id: str = ""
    split: str = "train"
    scale: float | None = None
    boundary: float | None = None

    @property
    def labeled(self) -> bool:
        return self.label is not None


@dataclass
class Database:
    samples: list[LabeledSample]
    contingency_vocab: list[str]
    feature_layout: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.feature_layout)

    @property
    def topology_ids(self) -> list[str]:
        return sorted({s.topology_id for s in self.samples})

    def select(self, pred: Callable[[LabeledSample], bool]) -> list[LabeledSample]:
        return [s for s in self.samples if pred(s)]

    def topology_counts(self) -> dict[str, dict[str, int]]:
        counts: dict[str, dict[str, int]] = {}
        for s in self.samples:
            c = counts.setdefault(s.topology_id, {"secure": 0, "insecure": 0, "unlabeled": 0})
            key = "unlabeled" if s.label is None else ("secure" if s.label == 1 else "insecure")
            c[key] += 1
        return dict(sorted(counts.items()))


# --------------------------------------------------------------------------
# Features


def feature_layout(grid: GridModel) -> list[str]:
    names = [f"gen_p:{g.bus}" for g in grid.generators]
    names += [f"gen_q:{g.bus}" for g in grid.generators]
    names += [f"load_p:{ld.bus}" for ld in grid.loads]
    names += [f"load_q:{ld.bus}" for ld in grid.loads]
    names += [f"line_p:{ln.id}" for ln in grid.lines]
    names += [f"line_q:{ln.id}" for ln in grid.lines]
    names += [f"v:{b.id}" for b in grid.buses]
    names += [f"theta:{b.id}" for b in grid.buses]
    return names


def oc_features(grid: GridModel, sol: PowerFlowSolution) -> np.ndarray:
    """Canonical pre-fault feature vector; out-of-service lines carry zero flow."""
    pg, qg = generator_output(grid, sol)
    x = np.concatenate([
        pg, qg,
        [ld.p for ld in grid.loads], [ld.q for ld in grid.loads],
        sol.line_flows[:, 0].real, sol.line_flows[:, 0].imag,
        sol.v_mag, sol.v_ang,
    ])
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite feature vector")
    return x


def grid_from_features(grid: GridModel, x: Sequence[float]) -> GridModel:
    """Rebuild the load/dispatch variant of ``grid`` that produced features ``x``."""
    ng, nl = len(grid.generators), len(grid.loads)
    x = np.asarray(x)
    pg = x[:ng]
    lp = x[2 * ng:2 * ng + nl]
    lq = x[2 * ng + nl:2 * ng + 2 * nl]
    gens = tuple(
        g if grid.buses[grid.index[g.bus]].kind == "slack" else replace(g, p_set=float(p))
        for g, p in zip(grid.generators, pg)
    )
    return replace(with_loads(grid, lp, lq), generators=gens)


# --------------------------------------------------------------------------
# Operating-condition sampling


def load_covariance(grid: GridModel, config: SamplingConfig) -> np.ndarray:
    """Covariance of the per-load multipliers; adjacent loads share ``adjacent_corr``."""
    nl = len(grid.loads)
    cov = np.eye(nl)
    if config.adjacent_corr:
        edges = {(ln.from_bus, ln.to_bus) for ln in grid.lines if ln.in_service}
        edges |= {(b, a) for a, b in edges}
        for i, li in enumerate(grid.loads):
            for j, lj in enumerate(grid.loads):
                if i != j and (li.bus, lj.bus) in edges:
                    cov[i, j] = config.adjacent_corr
    return cov * config.std_frac ** 2


def dispatch(grid: GridModel, factors: np.ndarray, config: SamplingConfig) -> GridModel:
    """Scale loads by ``factors``, keep Q/P of each load with the power-factor floor,
    and rescale non-slack generation to the new total demand."""
    tan_max = math.tan(math.acos(config.pf_min))
    p = np.array([ld.p for ld in grid.loads]) * factors
    q = np.array([ld.q * f for ld, f in zip(grid.loads, factors)])
    q = np.clip(q, -tan_max * np.abs(p), tan_max * np.abs(p))
    total0 = sum(ld.p for ld in grid.loads)
    ratio = p.sum() / total0 if total0 else 1.0
    gens = []
    for g in grid.generators:
        if grid.buses[grid.index[g.bus]].kind != "slack":
            if g.p_set * ratio > g.p_max:
                raise ModelRejectedError(f"dispatch at bus {g.bus} exceeds p_max")
            g = replace(g, p_set=g.p_set * ratio)
        gens.append(g)
    return replace(with_loads(grid, p, q), generators=tuple(gens))


def sample_operating_conditions(
    grid: GridModel, count: int, seed: int, config: SamplingConfig = SamplingConfig()
) -> list[OperatingPoint]:
    """Draw ``count`` converged operating conditions from the Gaussian load model."""
    grid.check_connected()
    rng = np.random.default_rng([seed, 0x5A])
    nl = len(grid.loads)
    cov = load_covariance(grid, config)
    out: list[OperatingPoint] = []
    attempts = 0
    while len(out) < count:
        if attempts >= 50 * max(count, 1):
            raise GenerationExhaustedError(f"only {len(out)} of {count} feasible samples after {attempts} draws")
        attempts += 1
        factors = np.clip(rng.multivariate_normal(np.ones(nl), cov), config.low, config.high)
        try:
            variant = dispatch(grid, factors, config)
        except ModelRejectedError:
            continue
        sol = solve_power_flow(variant)
        if not sol.converged:
            continue
        out.append(OperatingPoint(variant, sol, factors))
    return out


# --------------------------------------------------------------------------
# TDS database


def _label_points(
    points: Sequence[OperatingPoint], cont: ContingencySpec, label_config: StaticConfig, chunk: int = 256
) -> list[int]:
    labels: list[int] = []
    for k in range(0, len(points), chunk):
        part = points[k:k + chunk]
        got = label_batch([p.grid for p in part], [p.solution for p in part], cont, label_config)
        labels.extend(int(lab.secure) for lab in got)
    return labels


def generate_tds_database(
    grid: GridModel,
    contingencies: Sequence[ContingencySpec],
    n: int,
    seed: int,
    sampling: SamplingConfig = SamplingConfig(),
    label_config: StaticConfig = StaticConfig(),
) -> Database:
    """One sample per (operating condition, contingency); a fraction of the
    operating conditions are kept unlabeled (features only)."""
    for c in contingencies:
        check_contingency(grid, c)
    points = sample_operating_conditions(grid, n, seed, sampling)
    rng = np.random.default_rng([seed, 0x11])
    n_unlabeled = int(round(sampling.unlabeled_fraction * n))
    unlabeled = set(rng.permutation(n)[:n_unlabeled].tolist())
    labeled_idx = [i for i in range(n) if i not in unlabeled]
    labels = {}
    for c in contingencies:
        got = _label_points([points[i] for i in labeled_idx], c, label_config)
        for i, y in zip(labeled_idx, got):
            labels[(i, c.contingency_index)] = y
    samples = []
    for i, p in enumerate(points):
        x = oc_features(p.grid, p.solution)
        for c in contingencies:
            samples.append(LabeledSample(
                topology_id=grid.topology_id,
                contingency_index=c.contingency_index,
                features=x,
                label=labels.get((i, c.contingency_index)),
                oc_id=f"{grid.topology_id}/{i}",
                scale=float(np.mean(p.factors)) if len(p.factors) else 1.0,
            ))
    return Database(
        samples=samples,
        contingency_vocab=[c.id for c in sorted(contingencies, key=lambda c: c.contingency_index)],
        feature_layout=feature_layout(grid),
        meta={"generator": "tds", "seed": seed, "n": n},
    )


# --------------------------------------------------------------------------
# Boundary database


def bisect_boundary(is_secure: Callable[[float], bool], lo: float, hi: float, tol: float) -> tuple[float, float, list]:
    """Shrink [lo, hi] (secure at lo, insecure at hi) until hi - lo <= tol.

    Returns the final bracket and the probes as (scale, secure) pairs.
    """
    probes = []
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        ok = bool(is_secure(mid))
        probes.append((mid, ok))
        if ok:
            lo = mid
        else:
            hi = mid
    return lo, hi, probes


def bisect_many(
    is_secure: Callable[[np.ndarray], np.ndarray], lo: np.ndarray, hi: np.ndarray, tol: float
) -> tuple[np.ndarray, np.ndarray, list[tuple[np.ndarray, np.ndarray, np.ndarray]]]:
    """Vectorized :func:`bisect_boundary`; ``is_secure`` labels an array of
    (ray index, scale) probes in one call. Returns final brackets and, per
    round, (ray indices, scales, outcomes)."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    rounds = []
    while True:
        active = np.flatnonzero(hi - lo > tol)
        if active.size == 0:
            break
        mid = 0.5 * (lo[active] + hi[active])
        ok = np.asarray(is_secure(active, mid), dtype=bool)
        rounds.append((active, mid, ok))
        lo[active[ok]] = mid[ok]
        hi[active[~ok]] = mid[~ok]
    return lo, hi, rounds


def scaled_point(grid: GridModel, direction: np.ndarray, scale: float, config: SamplingConfig) -> OperatingPoint | None:
    factors = direction * scale
    try:
        variant = dispatch(grid, factors, config)
    except ModelRejectedError:
        return None
    sol = solve_power_flow(variant)
    if not sol.converged:
        return None
    return OperatingPoint(variant, sol, factors)


def ray_box(direction: np.ndarray, config: SamplingConfig) -> tuple[float, float]:
    """Scale range along a ray keeping every load within [low, high] x nominal."""
    return config.low / direction.min(), config.high / direction.max()


def generate_boundary_database(
    grid: GridModel,
    contingencies: Sequence[ContingencySpec],
    n: int,
    seed: int,
    bisection_tol: float = 0.01,
    sampling: SamplingConfig = SamplingConfig(),
    label_config: StaticConfig = StaticConfig(),
    batch_rays: int = 32,
) -> Database:
    """Boundary-focused generator: feasibility screen, anchors, ray bisection.

    ``n`` is the number of labeled samples emitted. A ray's scale is the
    common multiplier applied to its per-load direction (mean 1).
    """
    for c in contingencies:
        check_contingency(grid, c)
    layout = feature_layout(grid)
    vocab = [c.id for c in sorted(contingencies, key=lambda c: c.contingency_index)]
    cov = load_covariance(grid, sampling)
    nl = len(grid.loads)
    samples: list[LabeledSample] = []
    screened = 0
    rays_used = 0
    batch_no = 0
    anchors_found = False
    while len(samples) < n:
        rng = np.random.default_rng([seed, 0xB0, batch_no])
        batch_no += 1
        if batch_no > 50 * max(1, n // batch_rays + 1):
            break
        raw = np.clip(rng.multivariate_normal(np.ones(nl), cov, size=batch_rays),
                      sampling.low, sampling.high)
        directions = raw / raw.mean(axis=1, keepdims=True)
        rays = []
        for d in directions:
            lo, hi = ray_box(d, sampling)
            top = scaled_point(grid, d, hi, sampling)
            if top is None or not within_generation_limits(top.grid, top.solution):
                screened += 1
                continue
            bottom = scaled_point(grid, d, lo, sampling)
            if bottom is None:
                screened += 1
                continue
            rays.append((d, lo, hi, bottom, top))
        if not rays:
            continue
        for c in contingencies:
            got_lo = _label_points([r[3] for r in rays], c, label_config)
            got_hi = _label_points([r[4] for r in rays], c, label_config)
            keep = [k for k in range(len(rays)) if got_lo[k] == 1 and got_hi[k] == 0]
            if not keep:
                continue
            anchors_found = True
            cache: dict[tuple[int, float], OperatingPoint | None] = {}

            def probe(idx: np.ndarray, scales: np.ndarray) -> np.ndarray:
                pts = []
                for i, s in zip(idx, scales):
                    pt = scaled_point(grid, rays[keep[i]][0], float(s), sampling)
                    cache[(int(i), float(s))] = pt
                    pts.append(pt)
                ok = np.zeros(len(pts), dtype=bool)
                live = [j for j, p in enumerate(pts) if p is not None]
                if live:
                    labs = _label_points([pts[j] for j in live], c, label_config)
                    ok[live] = np.array(labs, dtype=bool)
                return ok

            lo0 = np.array([rays[k][1] for k in keep])
            hi0 = np.array([rays[k][2] for k in keep])
            lo, hi, rounds = bisect_many(probe, lo0, hi0, bisection_tol)
            boundary = 0.5 * (lo + hi)
            emitted: list[tuple[int, float, OperatingPoint, int]] = []
            for j, k in enumerate(keep):
                emitted.append((j, float(lo0[j]), rays[k][3], 1))
                emitted.append((j, float(hi0[j]), rays[k][4], 0))
            for idx, mids, oks in rounds:
                for i, s, ok in zip(idx, mids, oks):
                    pt = cache[(int(i), float(s))]
                    if pt is not None:
                        emitted.append((int(i), float(s), pt, int(ok)))
            emitted.sort(key=lambda e: (e[0], e[1]))
            for j, s, pt, y in emitted:
                samples.append(LabeledSample(
                    topology_id=grid.topology_id,
                    contingency_index=c.contingency_index,
                    features=oc_features(pt.grid, pt.solution),
                    label=y,
                    oc_id=f"{grid.topology_id}/b{rays_used + keep[j]}/{s:.6f}",
                    scale=s,
                    boundary=float(boundary[j]),
                ))
        rays_used += len(rays)
    if not anchors_found:
        log.warning("no secure/insecure anchor pair inside the scaling box; falling back to TDS sampling")
        n_oc = max(1, math.ceil(n / max(1, len(contingencies))))
        db = generate_tds_database(grid, contingencies, n_oc, seed, replace(sampling, unlabeled_fraction=0.0), label_config)
        db.samples = db.samples[:n]
        db.meta.update(generator="tds-fallback")
        return db
    return Database(
        samples=samples[:n],
        contingency_vocab=vocab,
        feature_layout=layout,
        meta={"generator": "boundary", "seed": seed, "n": n, "bisection_tol": bisection_tol,
              "rays": rays_used, "rays_screened_out": screened},
    )


# --------------------------------------------------------------------------
# Topologies


def apply_topology_change(grid: GridModel, removed_lines: Iterable[str], topology_id: str | None = None) -> GridModel:
    """Take ``removed_lines`` out of service under a fresh topology id."""
    removed = list(removed_lines)
    for lid in removed:
        grid.line_index(lid)
    new_id = topology_id or f"{grid.topology_id}~{'+'.join(removed) if removed else 'same'}"
    if new_id == grid.topology_id:
        raise ValueError("topology change needs a fresh id")
    lines = tuple(replace(ln, in_service=False) if ln.id in removed else ln for ln in grid.lines)
    new = replace(grid, lines=lines, topology_id=new_id)
    if not new.is_connected():
        raise ModelRejectedError(f"removing {removed} disconnects the network")
    return new


def merge_databases(parts: Sequence[Database]) -> Database:
    if not parts:
        raise ValueError("nothing to merge")
    first = parts[0]
    for p in parts[1:]:
        if p.feature_layout != first.feature_layout or p.contingency_vocab != first.contingency_vocab:
            raise ValueError("databases disagree on feature layout or contingency vocabulary")
    seen = set()
    samples = []
    for p in parts:
        for s in p.samples:
            key = (s.oc_id, s.contingency_index)
            if key in seen:
                raise ValueError(f"duplicate (OC, contingency) pair {key}")
            seen.add(key)
            samples.append(s)
    return Database(samples, list(first.contingency_vocab), list(first.feature_layout), dict(first.meta))


def assign_splits(db: Database, test_fraction: float, seed: int, test_only: Iterable[str] = ()) -> None:
    """Split by operating condition so all contingencies of an OC share a split."""
    test_only = set(test_only)
    by_topo: dict[str, list[str]] = {}
    for s in db.samples:
        ocs = by_topo.setdefault(s.topology_id, [])
        if not ocs or ocs[-1] != s.oc_id:
            if s.oc_id not in ocs:
                ocs.append(s.oc_id)
    test_ocs: set[str] = set()
    for k, topo in enumerate(sorted(by_topo)):
        ocs = by_topo[topo]
        if topo in test_only:
            test_ocs.update(ocs)
            continue
        rng = np.random.default_rng([seed, 0x5B, k])
        n_test = int(round(test_fraction * len(ocs)))
        test_ocs.update(ocs[i] for i in rng.permutation(len(ocs))[:n_test])
    for s in db.samples:
        s.split = "test" if s.oc_id in test_ocs else "train"


# --------------------------------------------------------------------------
# Persistence


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def sample_record(s: LabeledSample) -> dict:
    rec = {
        "topology_id": s.topology_id,
        "contingency_index": s.contingency_index,
        "features": [float(v) for v in s.features],
        "label": s.label,
        "oc_id": s.oc_id,
        "split": s.split,
    }
    if s.scale is not None:
        rec["scale"] = s.scale
    if s.boundary is not None:
        rec["boundary"] = s.boundary
    return rec


def write_database(db: Database, path: str | Path, csv: bool = False) -> dict:
    """Write ``<path>`` (JSON Lines) and ``<path>.meta.json``; returns the metadata."""
    path = Path(path)
    for s in db.samples:
        if len(s.features) != db.m:
            raise ValueError("refusing to write mixed feature dimensions")
        if not np.all(np.isfinite(s.features)):
            raise ValueError("refusing to write non-finite features")
    with open(path, "w") as fh:
        for s in db.samples:
            fh.write(json.dumps(sample_record(s)) + "\n")
    meta = dict(db.meta)
    meta.update(
        format_version=FORMAT_VERSION,
        contingency_vocab=db.contingency_vocab,
        m=db.m,
        feature_layout=db.feature_layout,
        topology_counts=db.topology_counts(),
    )
    with open(meta_path(path), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    if csv:
        with open(path.with_suffix(".csv"), "w") as fh:
            fh.write(",".join(["topology_id", "contingency_index", "label", "split"] + db.feature_layout) + "\n")
            for s in db.samples:
                lab = "" if s.label is None else str(s.label)
                fh.write(",".join([s.topology_id, str(s.contingency_index), lab, s.split] + [repr(float(v)) for v in s.features]) + "\n")
    return meta


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_database(path: str | Path) -> Database:
    path = Path(path)
    with open(meta_path(path)) as fh:
        meta = json.load(fh)
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported database format {meta.get('format_version')!r}")
    samples = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            samples.append(LabeledSample(
                topology_id=rec["topology_id"],
                contingency_index=int(rec["contingency_index"]),
                features=np.array(rec["features"], dtype=float),
                label=rec["label"],
                oc_id=rec.get("oc_id", ""),
                split=rec.get("split", "train"),
                scale=rec.get("scale"),
                boundary=rec.get("boundary"),
            ))
    layout = meta.pop("feature_layout")
    vocab = meta.pop("contingency_vocab")
    return Database(samples, vocab, layout, meta)

"""Topology similarity from singular values of the admittance magnitude matrix.

A new topology is compared with every known one by the RMSE between their
singular value sequences; the model is retrained when the mean RMSE exceeds a
threshold calibrated from how F2 degrades with that distance.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .grid import GridModel, build_admittance

log = logging.getLogger(__name__)

# Threshold reported for the 68-bus system; kept for reference, never applied
# to other grids.
REFERENCE_THRESHOLD_68BUS = 16.0
DEFAULT_F2_TOLERANCE = 0.05


@dataclass(frozen=True)
class SvSequence:
    values: np.ndarray
    topology_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(v < 0) or np.any(np.diff(v) > 0):
            raise ValueError("singular values must be nonnegative and descending")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class SimilarityDecision:
    mean_rmse: float
    threshold: float
    retrain: bool

    def to_dict(self) -> dict:
        return {"mean_rmse": self.mean_rmse, "threshold": self.threshold, "retrain": self.retrain}


def svs_of_matrix(matrix: np.ndarray, topology_id: str = "") -> SvSequence:
    s = np.linalg.svd(np.abs(np.asarray(matrix)), compute_uv=False)
    return SvSequence(np.sort(s)[::-1], topology_id)


def compute_svs(grid: GridModel) -> SvSequence:
    return svs_of_matrix(build_admittance(grid), grid.topology_id)


def svs_rmse(s1: SvSequence, s2: SvSequence) -> float:
    a, b = s1.values, s2.values
    if len(a) != len(b):
        log.warning("singular value sequences differ in length (%d vs %d); zero-padding", len(a), len(b))
        n = max(len(a), len(b))
        a = np.pad(a, (0, n - len(a)))
        b = np.pad(b, (0, n - len(b)))
    if len(a) == 0:
        return 0.0
    return float(np.sqrt(np.mean((a - b) ** 2)))


def mean_rmse(new: SvSequence, known: Sequence[SvSequence]) -> float:
    if not known:
        raise ValueError("no known topologies to compare against")
    return float(np.mean([svs_rmse(new, k) for k in known]))


def gate_new_topology(new_grid: GridModel | SvSequence, known_svs: Sequence[SvSequence],
                      threshold: float) -> SimilarityDecision:
    new = new_grid if isinstance(new_grid, SvSequence) else compute_svs(new_grid)
    r = mean_rmse(new, known_svs)
    return SimilarityDecision(r, float(threshold), bool(r > threshold))


@dataclass(frozen=True)
class CalibrationRow:
    topology_id: str
    mean_rmse: float
    f2: float
    seen: bool


def calibrate_threshold(rmse_by_topology: Mapping[str, float], f2_by_topology: Mapping[str, float],
                        seen: Sequence[str], tolerance: float = DEFAULT_F2_TOLERANCE
                        ) -> tuple[float, list[CalibrationRow]]:
    """Pick the retrain threshold from a (mean RMSE, F2) table.

    Topologies whose F2 falls more than ``tolerance`` below the seen-topology
    mean count as failing. The threshold sits midway between the smallest
    failing mean RMSE and the largest passing mean RMSE below it, so that the
    failing topology itself triggers retraining. Without failures it is +inf.
    """
    if len(rmse_by_topology) < 3:
        raise ValueError("calibration needs at least three topologies")
    if set(rmse_by_topology) != set(f2_by_topology):
        raise ValueError("RMSE and F2 tables cover different topologies")
    seen = set(seen)
    if not seen:
        raise ValueError("at least one seen topology is required")
    rows = sorted(
        (CalibrationRow(t, float(rmse_by_topology[t]), float(f2_by_topology[t]), t in seen) for t in rmse_by_topology),
        key=lambda r: (r.mean_rmse, r.topology_id),
    )
    ref = float(np.mean([r.f2 for r in rows if r.seen]))
    failing = [r for r in rows if ref - r.f2 > tolerance]
    if not failing:
        return math.inf, rows
    first = failing[0].mean_rmse
    passing = [r.mean_rmse for r in rows if r.mean_rmse < first]
    h = 0.5 * (first + max(passing)) if passing else 0.5 * first
    return h, rows


def calibration_csv(rows: Sequence[CalibrationRow]) -> str:
    out = ["topology_id,mean_rmse,f2,seen"]
    for r in rows:
        out.append(f"{r.topology_id},{r.mean_rmse:.6f},{r.f2:.6f},{int(r.seen)}")
    return "\n".join(out) + "\n"

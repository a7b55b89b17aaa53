"""Classification metrics with insecure (label 0) as the positive class, plus
the simulation-vs-inference timing harness."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

SPEED_CAVEAT = (
    "TDS time is per contingency for one operating condition; "
    "model time covers all contingencies for one operating condition."
)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @classmethod
    def from_labels(cls, predicted: Sequence[int], actual: Sequence[int]) -> "ConfusionMatrix":
        p = np.asarray(predicted, dtype=int)
        a = np.asarray(actual, dtype=int)
        if p.shape != a.shape:
            raise ValueError("prediction and label vectors differ in length")
        alarm_p, alarm_a = p == 0, a == 0
        return cls(
            tp=int(np.sum(alarm_p & alarm_a)),
            fp=int(np.sum(alarm_p & ~alarm_a)),
            tn=int(np.sum(~alarm_p & ~alarm_a)),
            fn=int(np.sum(~alarm_p & alarm_a)),
        )

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    def f_beta(self, beta: float = 2.0) -> float:
        return f_beta(self.precision, self.recall, beta)


def f_beta(precision: float, recall: float, beta: float = 2.0) -> float:
    """Weighted harmonic mean; 0 when the denominator vanishes."""
    if not (0.0 <= precision <= 1.0 and 0.0 <= recall <= 1.0):
        raise ValueError("precision and recall must lie in [0, 1]")
    b2 = beta * beta
    den = b2 * precision + recall
    if den == 0:
        return 0.0
    return (1 + b2) * precision * recall / den


@dataclass
class MetricReport:
    confusion: ConfusionMatrix
    beta: float
    per_topology: dict[str, ConfusionMatrix] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.confusion.precision

    @property
    def recall(self) -> float:
        return self.confusion.recall

    @property
    def f_beta(self) -> float:
        return self.confusion.f_beta(self.beta)

    def topology_scores(self) -> dict[str, float]:
        return {t: cm.f_beta(self.beta) for t, cm in self.per_topology.items()}

    def spread(self) -> dict[str, float]:
        s = list(self.topology_scores().values())
        if not s:
            return {"min": float("nan"), "mean": float("nan"), "variance": float("nan")}
        return {"min": min(s), "mean": float(np.mean(s)), "variance": float(np.var(s))}

    def weakest_topology(self) -> str | None:
        scores = self.topology_scores()
        return min(scores, key=scores.get) if scores else None

    def to_csv(self) -> str:
        rows = ["topology_id,tp,fp,tn,fn,precision,recall,f_beta"]
        items = list(self.per_topology.items()) + [("ALL", self.confusion)]
        for t, cm in items:
            rows.append(f"{t},{cm.tp},{cm.fp},{cm.tn},{cm.fn},{cm.precision:.6f},{cm.recall:.6f},{cm.f_beta(self.beta):.6f}")
        return "\n".join(rows) + "\n"

    def summary(self) -> str:
        sp = self.spread()
        return (
            f"F{self.beta:g}={self.f_beta:.4f} precision={self.precision:.4f} recall={self.recall:.4f} "
            f"n={self.confusion.total}; per-topology min={sp['min']:.4f} mean={sp['mean']:.4f} var={sp['variance']:.5f}"
        )


def evaluate(predictions: Sequence[int], labels: Sequence[int], topology_ids: Sequence[str],
             beta: float = 2.0) -> MetricReport:
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    topology_ids = np.asarray(topology_ids, dtype=object)
    if not (len(predictions) == len(labels) == len(topology_ids)):
        raise ValueError("predictions, labels and topology ids must be aligned")
    per = {}
    for t in sorted(set(topology_ids.tolist())):
        sel = topology_ids == t
        per[t] = ConfusionMatrix.from_labels(predictions[sel], labels[sel])
    return MetricReport(ConfusionMatrix.from_labels(predictions, labels), beta, per)


# --------------------------------------------------------------------------
# Speed benchmark


@dataclass
class SpeedRow:
    system: str
    tds_ms: float
    model_ms: float

    @property
    def speedup(self) -> float:
        return self.tds_ms / self.model_ms if self.model_ms > 0 else float("inf")


def median_ms(fn: Callable[[], object], repetitions: int = 5, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def benchmark_speed(system: str, tds_run: Callable[[int], object], infer_all: Callable[[int], object],
                    n_ocs: int, repetitions: int = 5) -> list[SpeedRow]:
    """Median wall times: one TDS run per contingency vs inference per OC.

    ``tds_run(i)`` simulates OC ``i`` under one contingency; ``infer_all(n)``
    classifies the first ``n`` OCs under every contingency.
    """
    if n_ocs <= 0:
        return []
    if repetitions < 5:
        raise ValueError("at least 5 repetitions are required")
    tds = median_ms(lambda: tds_run(0), repetitions)
    model = median_ms(lambda: infer_all(n_ocs), repetitions) / n_ocs
    return [SpeedRow(system, tds, model)]


def speed_table_csv(rows: Sequence[SpeedRow]) -> str:
    out = ["system,tds_ms_per_contingency,model_ms_per_oc_all_contingencies,speedup"]
    for r in rows:
        out.append(f"{r.system},{r.tds_ms:.3f},{r.model_ms:.5f},{r.speedup:.1f}")
    return "\n".join(out) + "\n"

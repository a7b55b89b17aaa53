"""Mahalanobis-distance confidence for queries against a training reference set.

A query's score is its mean distance to the ``k`` nearest reference points.
That score is ranked against the leave-self-out scores of the reference points
themselves, giving a percentile and a coarse band.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

HIGH_PERCENTILE = 50.0
LOW_PERCENTILE = 10.0


@dataclass(frozen=True)
class ConfidenceReport:
    avg_distance: float
    percentile: float
    confidence_band: str

    def to_dict(self) -> dict:
        return {"avg_distance": self.avg_distance, "percentile": self.percentile, "band": self.confidence_band}


def band_for(percentile: float) -> str:
    if percentile >= HIGH_PERCENTILE:
        return "high"
    if percentile >= LOW_PERCENTILE:
        return "medium"
    return "low"


@dataclass(frozen=True)
class CovarianceModel:
    mean: np.ndarray
    cov: np.ndarray
    inv: np.ndarray
    reg: float
    reference: np.ndarray
    k_nearest: int
    whitener: np.ndarray  # L with inv = L @ L.T
    reference_scores: np.ndarray  # leave-self-out mean k-NN distance per reference row

    @property
    def m(self) -> int:
        return len(self.mean)


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def _knn_mean(d: np.ndarray, k: int) -> np.ndarray:
    part = np.partition(d, k - 1, axis=1)[:, :k]
    return part.mean(axis=1)


def fit_covariance(features: np.ndarray, reg: float | None = None, k_nearest: int = 50) -> CovarianceModel:
    """Sample covariance plus ``reg * I``; ``reg`` defaults to 1e-6 * trace(S) / m."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite features")
    n, m = X.shape
    if n < 2:
        raise ValueError("need at least two reference samples")
    if n < m + 1:
        log.warning("only %d samples for %d features; covariance is rank deficient, relying on regularization", n, m)
    mean = X.mean(axis=0)
    S = np.cov(X, rowvar=False).reshape(m, m)
    if reg is None:
        reg = 1e-6 * np.trace(S) / m
        if reg == 0:
            reg = 1e-6
    Sr = S + reg * np.eye(m)
    inv = np.linalg.inv(Sr)
    inv = 0.5 * (inv + inv.T)
    L = np.linalg.cholesky(inv)
    k = k_nearest
    if k > n:
        log.warning("reference set of %d points is smaller than k=%d; using all points", n, k)
        k = n
    W = X @ L
    d = _pairwise(W, W)
    np.fill_diagonal(d, np.inf)
    ref_scores = _knn_mean(d, min(k, n - 1))
    return CovarianceModel(mean, S, inv, float(reg), X, k, L, ref_scores)


def mahalanobis(model: CovarianceModel | np.ndarray, x, y) -> float:
    """Distance under the model's regularized inverse (or a given inverse matrix)."""
    inv = model.inv if isinstance(model, CovarianceModel) else np.asarray(model, dtype=float)
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    if d.shape != (inv.shape[0],):
        raise ValueError(f"expected vectors of length {inv.shape[0]}")
    return float(np.sqrt(max(d @ inv @ d, 0.0)))


def average_distance(model: CovarianceModel, x: np.ndarray) -> np.ndarray:
    """Mean distance from each query row to its ``k`` nearest reference points."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape[1] != model.m:
        raise ValueError(f"expected {model.m} features, got {X.shape[1]}")
    d = _pairwise(X @ model.whitener, model.reference @ model.whitener)
    k = min(model.k_nearest, d.shape[1])
    return _knn_mean(d, k)


def percentile_of(model: CovarianceModel, scores: np.ndarray) -> np.ndarray:
    ref = np.sort(model.reference_scores)
    # share of reference scores >= each query score
    below = np.searchsorted(ref, scores, side="left")
    return 100.0 * (len(ref) - below) / len(ref)


def confidence_batch(model: CovarianceModel, x: np.ndarray) -> list[ConfidenceReport]:
    scores = average_distance(model, x)
    pct = percentile_of(model, scores)
    return [ConfidenceReport(float(s), float(p), band_for(p)) for s, p in zip(scores, pct)]


def confidence(model: CovarianceModel, x) -> ConfidenceReport:
    return confidence_batch(model, np.atleast_2d(x))[0]

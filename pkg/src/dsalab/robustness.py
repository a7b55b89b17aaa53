"""Bad-data injection with the fast gradient sign method.

A surrogate raw-feature classifier supplies input gradients; the perturbed
features are then fed to every model under test (black-box transfer).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import config_hash
from .metrics import evaluate
from .ssmtl import RawClassifier, TrainingConfig, TrainingSet, build_raw_classifier, raw_to_dict, train_raw_classifier


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.05
    surrogate_fraction: float = 0.5
    feature_clip: tuple[np.ndarray, np.ndarray] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if not 0 < self.surrogate_fraction <= 1:
            raise ValueError("surrogate_fraction must lie in (0, 1]")


@dataclass
class AttackReport:
    clean_f2: float
    attacked_f2: float
    flipped: np.ndarray
    mean_loss_increase: float
    epsilon: float

    @property
    def f2_drop(self) -> float:
        return self.clean_f2 - self.attacked_f2


def train_surrogate(data: TrainingSet, fraction: float, seed: int, config: TrainingConfig | None = None,
                    max_epochs: int = 60, n_contingencies: int | None = None) -> RawClassifier:
    """Raw-feature classifier on a random ``fraction`` of the labeled rows."""
    labeled = np.flatnonzero(data.labeled)
    n = int(round(fraction * len(labeled)))
    if n == 0:
        raise ValueError("surrogate subset is empty")
    rng = np.random.default_rng([seed, 0xAD])
    pick = np.sort(rng.permutation(labeled)[:n]) if n < len(labeled) else labeled
    sub = data.subset(pick)
    n_cont = n_contingencies or int(data.cidx.max()) + 1
    clf = build_raw_classifier(data.x.shape[1], n_cont, seed + 7919)
    cfg = config or TrainingConfig(seed=seed)
    train_raw_classifier(clf, sub, cfg, max_epochs=max_epochs, min_epochs=5)
    return clf


def fgsm_from_gradient(x: np.ndarray, grad: np.ndarray, epsilon: float, clip=None) -> np.ndarray:
    x_adv = np.asarray(x, dtype=float) + epsilon * np.sign(grad)
    if clip is not None:
        x_adv = np.clip(x_adv, clip[0], clip[1])
    return x_adv


def fgsm(surrogate: RawClassifier, x, cidx, y, epsilon: float, clip=None) -> np.ndarray:
    """One signed-gradient step of size ``epsilon`` that increases the surrogate loss."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if epsilon == 0:
        return x.copy()
    _, g = surrogate.loss_and_input_grad(x, cidx, y)
    return fgsm_from_gradient(x, g, epsilon, clip)


def evaluate_resilience(predict: Callable[[np.ndarray, np.ndarray], np.ndarray], surrogate: RawClassifier,
                        test: TrainingSet, config: AttackConfig) -> AttackReport:
    """F2 on clean and FGSM-perturbed copies of the same labeled test rows."""
    test = test.subset(test.labeled)
    x_adv = fgsm(surrogate, test.x, test.cidx, test.y, config.epsilon, config.feature_clip)
    clean = np.asarray(predict(test.x, test.cidx))
    attacked = np.asarray(predict(x_adv, test.cidx))
    f_clean = evaluate(clean, test.y, test.topology).f_beta
    f_adv = evaluate(attacked, test.y, test.topology).f_beta
    loss0, _ = surrogate.loss_and_input_grad(test.x, test.cidx, test.y)
    loss1, _ = surrogate.loss_and_input_grad(x_adv, test.cidx, test.y)
    return AttackReport(f_clean, f_adv, clean != attacked, float(np.mean(loss1 - loss0)), config.epsilon)


def surrogate_hash(surrogate: RawClassifier) -> str:
    return config_hash(raw_to_dict(surrogate))


def write_attacked(path: str | Path, records: Sequence[dict], x_adv: np.ndarray, epsilon: float, s_hash: str) -> None:
    """Attacked copies of database records with a provenance field."""
    with open(path, "w") as fh:
        for rec, x in zip(records, x_adv):
            out = dict(rec)
            out["features"] = [float(v) for v in x]
            out["provenance"] = {"attack": "fgsm", "epsilon": epsilon, "surrogate_hash": s_hash}
            fh.write(json.dumps(out) + "\n")

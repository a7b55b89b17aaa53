"""Conditional masked autoencoder with a classifier head on the latent code.

The encoder sees ``[x_masked, c]`` with ``c`` a one-hot contingency vector,
the decoder sees ``[z, c]`` and reconstructs ``x``, and the classifier reads
``z`` alone. Training minimizes ``alpha * L_recon + beta * L_class`` through a
sequence of (alpha, beta) stages, each run until a relative-improvement rule
fires or its epoch budget runs out. Every mini-batch holds samples from one
topology only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .neural import (
    AdamState,
    ContractError,
    Network,
    adam_step,
    backward,
    forward,
    init_network,
    network_from_dict,
    network_to_dict,
)

PROB_CLIP = 1e-7
MODEL_VERSION = 1


class TopologyMismatchError(ContractError):
    """Feature width differs from the one the model was trained on."""


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainingSet:
    """Normalized features with contingency indices, labels and topology ids.

    ``y`` holds 0/1 for labeled rows and -1 for unlabeled ones.
    """

    x: np.ndarray
    cidx: np.ndarray
    y: np.ndarray
    topology: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.cidx = np.asarray(self.cidx, dtype=int)
        self.y = np.asarray(self.y, dtype=int)
        self.topology = np.asarray(self.topology, dtype=object)
        n = len(self.x)
        if not (len(self.cidx) == len(self.y) == len(self.topology) == n):
            raise ContractError("training arrays must be aligned")

    def __len__(self):
        return len(self.x)

    @property
    def labeled(self) -> np.ndarray:
        return self.y >= 0

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.x[idx], self.cidx[idx], self.y[idx], self.topology[idx])


@dataclass(frozen=True)
class Stage:
    alpha: float
    beta: float
    min_epochs: int = 5
    max_epochs: int = 40

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("stage weights must be nonnegative")
        if self.max_epochs < max(1, self.min_epochs):
            raise ValueError("max_epochs must cover min_epochs")


@dataclass(frozen=True)
class LossSchedule:
    stages: tuple[Stage, ...] = (
        Stage(1.0, 0.0, min_epochs=2, max_epochs=30),
        Stage(0.5, 0.5, min_epochs=60, max_epochs=200),
        Stage(0.75, 0.25, min_epochs=60, max_epochs=200),
    )

    def __post_init__(self):
        if not self.stages:
            raise ValueError("schedule needs at least one stage")

    def to_dict(self) -> list[dict]:
        return [vars(s).copy() for s in self.stages]


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    window: int = 5
    tolerance: float = 1e-4
    use_unlabeled: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class SsMtlModel:
    encoder: Network
    decoder: Network
    classifier: Network
    latent_dim: int
    n_contingencies: int
    mask_rate: float = 0.15
    contingency_vocab: list[str] = field(default_factory=list)
    feature_layout: list[str] = field(default_factory=list)
    schedule: list[dict] = field(default_factory=list)

    def __post_init__(self):
        m = self.decoder.n_out
        C = self.n_contingencies
        if self.encoder.n_in != m + C or self.encoder.n_out != self.latent_dim:
            raise ContractError("encoder must map m + C inputs to the latent width")
        if self.decoder.n_in != self.latent_dim + C:
            raise ContractError("decoder input must be latent + C")
        if self.classifier.n_in != self.latent_dim or self.classifier.n_out != 1:
            raise ContractError("classifier must map the latent code to one probability")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ContractError("mask_rate must lie in [0, 1)")

    @property
    def m(self) -> int:
        return self.decoder.n_out


def build_model(m: int, n_contingencies: int, seed: int, hidden: int = 64, latent: int = 16,
                cls_hidden: int = 16, dropout: float = 0.1, mask_rate: float = 0.15) -> SsMtlModel:
    rng = np.random.default_rng([seed, 0xE1])
    C = n_contingencies
    enc = init_network([m + C, hidden, latent], ["relu", "identity"], rng, dropout)
    dec = init_network([latent + C, hidden, m], ["relu", "identity"], rng, dropout)
    cls = init_network([latent, cls_hidden, 1], ["relu", "sigmoid"], rng, dropout)
    return SsMtlModel(enc, dec, cls, latent, C, mask_rate)


# --------------------------------------------------------------------------
# Losses


def make_condition(contingency_index: int, n_contingencies: int) -> np.ndarray:
    if not 0 <= contingency_index < n_contingencies:
        raise ValueError(f"contingency index {contingency_index} outside [0, {n_contingencies})")
    c = np.zeros(n_contingencies)
    c[contingency_index] = 1.0
    return c


def one_hot(indices: Sequence[int], n_contingencies: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= n_contingencies):
        raise ValueError("contingency index out of range")
    return np.eye(n_contingencies)[idx]


def _check_width(model: SsMtlModel, x: np.ndarray) -> None:
    if x.shape[1] != model.m:
        raise TopologyMismatchError(
            f"feature width {x.shape[1]} differs from the trained width {model.m}; "
            "run the topology similarity gate and retrain if it recommends so"
        )


def input_mask(shape: tuple[int, int], rate: float, rng: np.random.Generator | None) -> np.ndarray | None:
    if rate <= 0 or rng is None:
        return None
    return (rng.random(shape) >= rate).astype(float)


def bce(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, PROB_CLIP, 1 - PROB_CLIP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


@dataclass
class LossTerms:
    total: float
    recon: float
    classification: float | None
    grads: dict | None = None


def loss_terms(model: SsMtlModel, x: np.ndarray, c: np.ndarray, y: np.ndarray | None,
               alpha: float, beta: float, mask: np.ndarray | None = None,
               training: bool = False, rng: np.random.Generator | None = None,
               with_grads: bool = False) -> LossTerms:
    """Joint loss and optionally its gradients for every network.

    ``y`` uses -1 for unlabeled rows; they enter the reconstruction term only.
    The classifier is not evaluated at all when ``beta == 0``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    _check_width(model, x)
    c = np.atleast_2d(c)
    xin = x if mask is None else x * mask
    enc = forward(model.encoder, np.hstack([xin, c]), training, rng)
    z = enc.output
    dec = forward(model.decoder, np.hstack([z, c]), training, rng)
    resid = dec.output - x
    B = len(x)
    recon = float(np.sum(resid ** 2) / B)
    total = alpha * recon
    cls_loss = None
    cls_cache = None
    lab = None
    if beta > 0:
        if y is None:
            raise ContractError("classification term needs labels")
        y = np.asarray(y)
        lab = y >= 0
        if lab.any():
            cls_cache = forward(model.classifier, z, training, rng)
            p = cls_cache.output[:, 0]
            cls_loss = bce(p[lab], y[lab].astype(float))
            total += beta * cls_loss
    if not math.isfinite(total):
        raise TrainingDivergedError(f"non-finite loss (recon={recon}, class={cls_loss})")
    terms = LossTerms(total, recon, cls_loss)
    if not with_grads:
        return terms

    latent = model.latent_dim
    g_dec = backward(model.decoder, alpha * 2.0 * resid / B, dec)
    g_z = g_dec.input[:, :latent]
    g_cls = None
    if cls_cache is not None:
        p = cls_cache.output[:, 0]
        n_lab = int(lab.sum())
        yl = np.where(lab, y, 0).astype(float)
        inside = (p > PROB_CLIP) & (p < 1 - PROB_CLIP)
        pc = np.clip(p, PROB_CLIP, 1 - PROB_CLIP)
        dp = np.where(lab & inside, (-yl / pc + (1 - yl) / (1 - pc)) / n_lab, 0.0)
        g_cls = backward(model.classifier, beta * dp[:, None], cls_cache)
        g_z = g_z + g_cls.input
    g_enc = backward(model.encoder, g_z, enc)
    terms.grads = {"encoder": g_enc, "decoder": g_dec, "classifier": g_cls}
    return terms


def reconstruction_loss(model: SsMtlModel, x, c, seed: int | None = None) -> float:
    """Masked reconstruction error (batch mean of per-sample squared error)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rng = None if seed is None else np.random.default_rng(seed)
    mask = input_mask(x.shape, model.mask_rate, rng)
    return loss_terms(model, x, c, None, 1.0, 0.0, mask).recon


def classification_loss(model: SsMtlModel, x, c, y) -> float:
    y = np.asarray(y)
    if np.any(y < 0):
        raise ContractError("classification loss requires labeled samples only")
    return loss_terms(model, x, c, y, 0.0, 1.0).classification


def joint_loss(model: SsMtlModel, x, c, y, alpha: float, beta: float, mask=None) -> float:
    return loss_terms(model, x, c, y, alpha, beta, mask).total


# --------------------------------------------------------------------------
# Training


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    alpha: float
    beta: float
    recon: float
    classification: float
    total: float


@dataclass
class TrainingLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    stage_starts: list[int] = field(default_factory=list)
    batch_topologies: list[tuple[int, str]] = field(default_factory=list)  # (epoch, topology)
    stage_weights: list[tuple[float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        rows = ["epoch,stage,alpha,beta,L_recon,L_class,L"]
        for r in self.epochs:
            rows.append(f"{r.epoch},{r.stage},{float(r.alpha)!r},{float(r.beta)!r},{float(r.recon)!r},{float(r.classification)!r},{float(r.total)!r}")
        return "\n".join(rows) + "\n"


def topology_batches(topology: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle within each topology, chunk, then shuffle the chunk order."""
    batches = []
    for topo in sorted(set(topology.tolist())):
        idx = np.flatnonzero(topology == topo)
        idx = idx[rng.permutation(len(idx))]
        batches.extend(idx[i:i + batch_size] for i in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def converged(history: Sequence[float], window: int, tolerance: float) -> bool:
    """True when the best loss of the last ``window`` epochs improves on the
    best loss before them by less than ``tolerance`` (relative)."""
    if len(history) <= window:
        return False
    before = min(history[:-window])
    recent = min(history[-window:])
    if before == 0:
        return True
    return (before - recent) / abs(before) < tolerance


def train(model: SsMtlModel, data: TrainingSet, config: TrainingConfig = TrainingConfig(),
          schedule: LossSchedule = LossSchedule()) -> tuple[SsMtlModel, TrainingLog]:
    """Staged joint training in place; returns the model and its log."""
    if len(data) == 0:
        raise ValueError("empty training split")
    _check_width(model, data.x)
    if not config.use_unlabeled:
        data = data.subset(data.labeled)
    C = model.n_contingencies
    cond = one_hot(data.cidx, C)
    opt = {name: AdamState.for_network(getattr(model, name), config.learning_rate)
           for name in ("encoder", "decoder", "classifier")}
    log = TrainingLog()
    epoch = 0
    for s_idx, stage in enumerate(schedule.stages):
        log.stage_starts.append(epoch)
        log.stage_weights.append((stage.alpha, stage.beta))
        history: list[float] = []
        for _ in range(stage.max_epochs):
            rng = np.random.default_rng([config.seed, 0x7A, epoch])
            sums = np.zeros(3)
            n_cls = 0
            batches = topology_batches(data.topology, config.batch_size, rng)
            for idx in batches:
                log.batch_topologies.append((epoch, str(data.topology[idx[0]])))
                xb = data.x[idx]
                mask = input_mask(xb.shape, model.mask_rate, rng)
                t = loss_terms(model, xb, cond[idx], data.y[idx], stage.alpha, stage.beta,
                               mask, training=True, rng=rng, with_grads=True)
                for name in ("encoder", "decoder"):
                    adam_step(opt[name], getattr(model, name), t.grads[name])
                if t.grads["classifier"] is not None:
                    adam_step(opt["classifier"], model.classifier, t.grads["classifier"])
                sums += (t.recon, t.classification or 0.0, t.total)
                n_cls += t.classification is not None
            nb = len(batches)
            rec = EpochRecord(epoch, s_idx + 1, stage.alpha, stage.beta, sums[0] / nb,
                              sums[1] / max(n_cls, 1), sums[2] / nb)
            log.epochs.append(rec)
            history.append(rec.total)
            epoch += 1
            if len(history) >= stage.min_epochs and converged(history, config.window, config.tolerance):
                break
    model.schedule = schedule.to_dict()
    return model, log


def predict_proba(model: SsMtlModel, x: np.ndarray, cidx) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    _check_width(model, x)
    c = one_hot(np.broadcast_to(np.asarray(cidx), (len(x),)), model.n_contingencies)
    z = forward(model.encoder, np.hstack([x, c])).output
    return forward(model.classifier, z).output[:, 0]


def predict(model: SsMtlModel, x: np.ndarray, cidx, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Labels (1 = secure) and probabilities; no masking or dropout."""
    p = predict_proba(model, x, cidx)
    return (p >= threshold).astype(int), p


def model_to_dict(model: SsMtlModel) -> dict:
    return {
        "format_version": MODEL_VERSION,
        "kind": "ssmtl",
        "latent_dim": model.latent_dim,
        "C": model.n_contingencies,
        "mask_rate": model.mask_rate,
        "contingency_vocab": list(model.contingency_vocab),
        "feature_layout": list(model.feature_layout),
        "schedule": model.schedule,
        "encoder": network_to_dict(model.encoder),
        "decoder": network_to_dict(model.decoder),
        "classifier": network_to_dict(model.classifier),
    }


def model_from_dict(doc: dict) -> SsMtlModel:
    if doc.get("format_version") != MODEL_VERSION or doc.get("kind") != "ssmtl":
        raise ContractError("not a supported SS-MTL checkpoint")
    return SsMtlModel(
        network_from_dict(doc["encoder"]),
        network_from_dict(doc["decoder"]),
        network_from_dict(doc["classifier"]),
        doc["latent_dim"],
        doc["C"],
        doc["mask_rate"],
        doc["contingency_vocab"],
        doc["feature_layout"],
        doc["schedule"],
    )


# --------------------------------------------------------------------------
# Raw-feature classifier (baseline and attack surrogate)


@dataclass
class RawClassifier:
    """Feed-forward classifier on ``[x, c]`` without any reconstruction task."""

    net: Network
    n_contingencies: int

    @property
    def m(self) -> int:
        return self.net.n_in - self.n_contingencies

    def inputs(self, x, cidx) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.m:
            raise TopologyMismatchError(f"feature width {x.shape[1]} differs from the trained width {self.m}")
        c = one_hot(np.broadcast_to(np.asarray(cidx), (len(x),)), self.n_contingencies)
        return np.hstack([x, c])

    def predict_proba(self, x, cidx) -> np.ndarray:
        return forward(self.net, self.inputs(x, cidx)).output[:, 0]

    def predict(self, x, cidx, threshold: float = 0.5):
        p = self.predict_proba(x, cidx)
        return (p >= threshold).astype(int), p

    def loss_and_input_grad(self, x, cidx, y) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample BCE and its gradient with respect to ``x``."""
        cache = forward(self.net, self.inputs(x, cidx))
        p = cache.output[:, 0]
        y = np.asarray(y, dtype=float)
        pc = np.clip(p, PROB_CLIP, 1 - PROB_CLIP)
        loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
        inside = (p > PROB_CLIP) & (p < 1 - PROB_CLIP)
        dp = np.where(inside, -y / pc + (1 - y) / (1 - pc), 0.0)
        g = backward(self.net, dp[:, None], cache).input
        return loss, g[:, : self.m]


def build_raw_classifier(m: int, n_contingencies: int, seed: int, hidden: int = 64, second: int = 16,
                         dropout: float = 0.1) -> RawClassifier:
    rng = np.random.default_rng([seed, 0xB0])
    net = init_network([m + n_contingencies, hidden, second, 1], ["relu", "relu", "sigmoid"], rng, dropout)
    return RawClassifier(net, n_contingencies)


def train_raw_classifier(clf: RawClassifier, data: TrainingSet, config: TrainingConfig = TrainingConfig(),
                         max_epochs: int = 200, min_epochs: int = 60) -> tuple[RawClassifier, list[float]]:
    """Plain BCE training on labeled rows with the same batching and stop rule."""
    data = data.subset(data.labeled)
    if len(data) == 0:
        raise ValueError("no labeled training samples")
    inputs = clf.inputs(data.x, data.cidx)
    y = data.y.astype(float)
    opt = AdamState.for_network(clf.net, config.learning_rate)
    history: list[float] = []
    for epoch in range(max_epochs):
        rng = np.random.default_rng([config.seed, 0x7B, epoch])
        total = 0.0
        batches = topology_batches(data.topology, config.batch_size, rng)
        for idx in batches:
            cache = forward(clf.net, inputs[idx], True, rng)
            p = cache.output[:, 0]
            yb = y[idx]
            total += bce(p, yb)
            inside = (p > PROB_CLIP) & (p < 1 - PROB_CLIP)
            pc = np.clip(p, PROB_CLIP, 1 - PROB_CLIP)
            dp = np.where(inside, (-yb / pc + (1 - yb) / (1 - pc)) / len(idx), 0.0)
            adam_step(opt, clf.net, backward(clf.net, dp[:, None], cache))
        history.append(total / len(batches))
        if not math.isfinite(history[-1]):
            raise TrainingDivergedError("non-finite classifier loss")
        if epoch + 1 >= min_epochs and converged(history, config.window, config.tolerance):
            break
    return clf, history


def raw_to_dict(clf: RawClassifier) -> dict:
    return {"format_version": MODEL_VERSION, "kind": "raw", "C": clf.n_contingencies, "net": network_to_dict(clf.net)}


def raw_from_dict(doc: dict) -> RawClassifier:
    if doc.get("format_version") != MODEL_VERSION or doc.get("kind") != "raw":
        raise ContractError("not a supported raw classifier checkpoint")
    return RawClassifier(network_from_dict(doc["net"]), doc["C"])

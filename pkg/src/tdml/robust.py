"""Cross-validation, suspicion flagging, top-K aggregation, attacks and detection.

Detection projects each sampled model's per-layer gradient onto a
two-dimensional ranking embedding (mean rank, rank standard deviation) taken
across the sampled models, splits the points of every layer with 2-means and
picks the layer whose clusters separate most relative to the other layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateGeometry, TDMLError
from .model import GlobalModel, GradientRecord, decode_checkpoint, evaluate
from .pipeline import ShardAssignment


@dataclass(frozen=True)
class ValidationResult:
    model_author: str
    epoch: int
    accuracy: float
    loss: float
    validator: str
    decode_failed: bool = False

    def to_json(self) -> dict:
        return {
            "model_author": self.model_author, "epoch": self.epoch, "accuracy": self.accuracy,
            "loss": self.loss, "validator": self.validator, "decode_failed": self.decode_failed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ValidationResult":
        return cls(d["model_author"], d["epoch"], d["accuracy"], d["loss"], d["validator"],
                   d.get("decode_failed", False))


def cross_validate(validator: str, pending: Mapping[str, bytes | GlobalModel], test_x, test_y,
                   epoch: int) -> list[ValidationResult]:
    """Evaluate each pending local model (checkpoint bytes or model) on the test set."""
    results = []
    for author in sorted(pending):
        item = pending[author]
        try:
            model = item if isinstance(item, GlobalModel) else decode_checkpoint(item)
            ev = evaluate(model.params, test_x, test_y)
            results.append(ValidationResult(author, epoch, ev.accuracy, ev.loss, validator))
        except (TDMLError, ValueError, IndexError):
            results.append(ValidationResult(author, epoch, 0.0, float("inf"), validator, True))
    return results


def suspicion_scores(h: Mapping[str, float]) -> dict[str, float]:
    vals = np.array([h[k] for k in h], dtype=float)
    mu = vals.mean()
    dev = np.abs(vals - mu)
    total = dev.sum()
    scores = {}
    for i, k in enumerate(h):
        rest = total - dev[i]
        if rest > 0:
            scores[k] = float(dev[i] / rest)
        else:
            scores[k] = float("inf") if dev[i] > 0 else 0.0
    return scores


def flag_suspicious(h: Mapping[str, float], tau: float = 0.5) -> set[str]:
    """Flag the most outlying model when its score exceeds ``tau`` and it sits below the mean."""
    if len(h) < 2:
        raise ValueError("need at least two results")
    vals = [h[k] for k in h]
    if max(vals) == min(vals):
        return set()
    mu = float(np.mean(vals))
    scores = suspicion_scores(h)
    best = max(sorted(h), key=lambda k: scores[k])
    if scores[best] > tau and h[best] < mu:
        return {best}
    return set()


def rank_models(h: Mapping[str, float]) -> list[str]:
    return sorted(h, key=lambda k: (-h[k], k))


def mean_models(models: Sequence[GlobalModel]) -> list:
    """Coordinate-wise parameter mean in the given order."""
    n = len(models)
    params = []
    for l in range(len(models[0].params)):
        w = models[0].params[l][0].copy()
        b = models[0].params[l][1].copy()
        for m in models[1:]:
            w += m.params[l][0]
            b += m.params[l][1]
        params.append((w / n, b / n))
    return params


def aggregate_topk(models: Mapping[str, GlobalModel], h: Mapping[str, float], k: int,
                   exclude=()) -> tuple[GlobalModel, list[str]]:
    """Average the ``k`` best-validated models that are not excluded.

    Members are summed in UUID order.  The result's version is one past the
    version the local models started from.
    """
    eligible = {a: h[a] for a in models if a not in set(exclude)}
    if k > len(eligible) or k < 1:
        raise ValueError(f"K={k} but only {len(eligible)} eligible models")
    members = sorted(rank_models(eligible)[:k])
    chosen = [models[a] for a in members]
    base = chosen[0]
    return GlobalModel(base.arch, mean_models(chosen), base.version + 1), members


def fedavg_aggregate(models: Mapping[str, GlobalModel]) -> tuple[GlobalModel, list[str]]:
    members = sorted(models)
    chosen = [models[a] for a in members]
    return GlobalModel(chosen[0].arch, mean_models(chosen), chosen[0].version + 1), members


# --------------------------------------------------------------------------
# Attacks

ATTACK_KINDS = ("zero_gradient", "mean_shift", "gaussian")


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    target: str
    start_epoch: int = 1
    delta: float | None = None
    delta_rms: float | None = None  # shift as a multiple of the benign gradient RMS
    sigma2: float = 30.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "mean_shift" and not (self.delta or self.delta_rms):
            raise ValueError("mean_shift needs a non-zero delta or delta_rms")
        if self.kind == "gaussian" and self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")


def _map(record: GradientRecord, fn) -> GradientRecord:
    return GradientRecord([(fn(gw), fn(gb)) for gw, gb in record.grads], record.epoch,
                          record.trainer, record.lo)


def attack_zero(record: GradientRecord) -> GradientRecord:
    return _map(record, np.zeros_like)


def attack_meanshift(record: GradientRecord, delta: float) -> GradientRecord:
    if delta == 0:
        raise ValueError("delta = 0 is a no-op attack")
    return _map(record, lambda g: g + delta)


def attack_gaussian(record: GradientRecord, sigma2: float, seed: int) -> GradientRecord:
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    rng = np.random.default_rng(seed)
    sd = float(np.sqrt(sigma2))
    return _map(record, lambda g: rng.normal(0.0, sd, size=g.shape))


def gradient_rms(record: GradientRecord) -> float:
    flat = np.concatenate(record.flat_layers())
    return float(np.sqrt(np.mean(flat ** 2)))


# --------------------------------------------------------------------------
# Detection

def rank_features(values: np.ndarray) -> np.ndarray:
    """Per-model (mean rank, rank std) over coordinates; ``values`` is (models, coords).

    Ranks are ascending within each coordinate with ties averaged.
    """
    ranks = rankdata(values, axis=0, method="average")
    return np.column_stack([ranks.mean(axis=1), ranks.std(axis=1)])


@dataclass(frozen=True)
class Clustering:
    labels: np.ndarray
    centroids: np.ndarray
    score: float


def two_means(points: np.ndarray, eps: float = 1e-9, max_iter: int = 100) -> Clustering:
    """Lloyd's 2-means seeded with the farthest pair of points."""
    n = len(points)
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    i, j = np.unravel_index(int(np.argmax(d)), d.shape)
    if d[i, j] == 0:
        return Clustering(np.zeros(n, dtype=int), np.vstack([points[0], points[0]]), 0.0)
    i, j = min(i, j), max(i, j)
    centroids = np.vstack([points[i], points[j]]).astype(float)
    labels = np.full(n, -1)
    for _ in range(max_iter):
        dist = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=-1)
        new = (dist[:, 1] < dist[:, 0]).astype(int)
        if np.array_equal(new, labels):
            break
        labels = new
        for c in (0, 1):
            if np.any(labels == c):
                centroids[c] = points[labels == c].mean(axis=0)
    within = np.sqrt(np.mean(np.sum((points - centroids[labels]) ** 2, axis=1)))
    score = float(np.linalg.norm(centroids[0] - centroids[1]) / (within + eps))
    return Clustering(labels, centroids, score)


def layer_ratios(scores: Sequence[float]) -> list[float]:
    scores = np.asarray(scores, dtype=float)
    total = scores.sum()
    out = []
    for s in scores:
        rest = total - s
        if rest > 0:
            out.append(float(s / rest))
        else:
            out.append(float("inf") if s > 0 else 0.0)
    return out


@dataclass
class DetectionReport:
    epoch: int
    flagged: str
    sample: list[str]
    features: list[list[list[float]]]  # layer -> model -> [mean rank, rank std]
    scores: list[float]
    ratios: list[float]
    layer: int
    labels: list[int]
    malicious_models: list[str]
    attributed: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch, "flagged": self.flagged, "sample": self.sample,
            "features": self.features, "scores": self.scores,
            "ratios": [r if np.isfinite(r) else None for r in self.ratios],
            "layer": self.layer, "labels": self.labels,
            "malicious_models": self.malicious_models, "attributed": self.attributed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DetectionReport":
        ratios = [float("inf") if r is None else r for r in d["ratios"]]
        return cls(d["epoch"], d["flagged"], d["sample"], d["features"], d["scores"], ratios,
                   d["layer"], d["labels"], d["malicious_models"], d["attributed"])


def detect_malicious(sample: Sequence[str], flagged: str,
                     layer_grads: Mapping[str, Sequence[np.ndarray]],
                     assignment: ShardAssignment | None = None, *, epoch: int = 0,
                     eps: float = 1e-9) -> DetectionReport:
    """Locate the most separated layer and attribute it to a trainer.

    ``layer_grads[model][L]`` is the flattened gradient of layer ``L``.  The
    minority cluster at the chosen layer is reported as malicious; on a tie
    the cluster holding ``flagged`` is taken.  Trainers are attributed only
    when ``flagged`` lies in that cluster, via ``assignment``.
    """
    sample = list(sample)
    if flagged not in sample:
        sample.append(flagged)
    if len(sample) < 3:
        raise ValueError("detection needs at least three sampled models")
    n_layers = len(layer_grads[flagged])
    stacks = [np.vstack([np.asarray(layer_grads[m][L]).ravel() for m in sample]) for L in range(n_layers)]
    if all(np.all(s == s[0]) for s in stacks):
        raise DegenerateGeometry("every sampled model uploaded identical gradients")
    features, scores, clusterings = [], [], []
    for s in stacks:
        feat = rank_features(s)
        cl = two_means(feat, eps)
        features.append(feat.tolist())
        scores.append(cl.score)
        clusterings.append(cl)
    ratios = layer_ratios(scores)
    layer = int(np.argmax(ratios))
    labels = clusterings[layer].labels
    sizes = [int(np.sum(labels == c)) for c in (0, 1)]
    fi = sample.index(flagged)
    if sizes[0] == sizes[1]:
        bad = labels[fi]
    else:
        bad = int(np.argmin(sizes))
    malicious = [m for m, lab in zip(sample, labels) if lab == bad]
    attributed = []
    if flagged in malicious and assignment is not None:
        attributed = [assignment.owner(layer)]
    return DetectionReport(epoch, flagged, sample, features, scores, ratios, layer,
                           labels.tolist(), malicious, attributed)


def mahalanobis(reference: np.ndarray, point: np.ndarray, rel_tol: float = 1e-12) -> float:
    """Distance of ``point`` from the sample distribution of ``reference`` rows.

    Directions with zero sample variance count as infinitely far unless the
    point has no component along them.
    """
    reference = np.asarray(reference, dtype=float)
    mu = reference.mean(axis=0)
    cov = np.atleast_2d(np.cov(reference.T, ddof=1))
    vals, vecs = np.linalg.eigh(cov)
    diff = vecs.T @ (np.asarray(point, dtype=float) - mu)
    scale = max(float(vals.max()), 0.0)
    total = 0.0
    for v, c in zip(vals, diff):
        if v > rel_tol * max(scale, 1e-300):
            total += c * c / v
        elif abs(c) > 1e-12:
            return float("inf")
    return float(np.sqrt(total))

"""Poison countermeasures: kernel-density scoring and a binary detector."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.distance import pdist
from scipy.stats import rankdata

from .errors import ScoringError, TrainingError
from .models import ModelSpec, build_model, to_tensor
from .train import predict_logits


@dataclass(frozen=True)
class DetectionMetrics:
    """Confusion counts and rates; a rate is None when its denominator is 0."""

    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float | None
    tnr: float | None
    prc: float | None
    f1: float | None
    acc: float | None

    def as_dict(self):
        return {k: getattr(self, k) for k in ("tp", "fp", "tn", "fn", "tpr", "tnr", "prc", "f1", "acc")}


def _ratio(a, b):
    return a / b if b > 0 else None


def metrics_from_counts(tp, fp, tn, fn) -> DetectionMetrics:
    tpr = _ratio(tp, tp + fn)
    prc = _ratio(tp, tp + fp)
    f1 = None
    if tpr is not None and prc is not None and prc + tpr > 0:
        f1 = 2 * prc * tpr / (prc + tpr)
    return DetectionMetrics(tp, fp, tn, fn, tpr, _ratio(tn, tn + fp), prc, f1,
                            _ratio(tp + tn, tp + fp + tn + fn))


def detection_metrics(predictions, truth) -> DetectionMetrics:
    """Metrics for boolean verdicts against ground truth (True = poisoned)."""
    p = np.asarray(predictions, dtype=bool)
    t = np.asarray(truth, dtype=bool)
    if p.shape != t.shape:
        raise ValueError(f"predictions {p.shape} and truth {t.shape} differ in length")
    return metrics_from_counts(int(np.sum(p & t)), int(np.sum(p & ~t)),
                               int(np.sum(~p & ~t)), int(np.sum(~p & t)))


# ------------------------------------------------------------------ K-density

def kernel_scores(features, references, bandwidth: float):
    """Mean Gaussian kernel ``exp(-|a - b|^2 / (2 sigma^2))`` of each row to ``references``."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    a = np.atleast_2d(np.asarray(features, dtype=np.float64))
    r = np.atleast_2d(np.asarray(references, dtype=np.float64))
    # direct differences rather than the |a|^2 - 2ab + |b|^2 expansion: exact at zero distance
    d2 = ((a[:, None, :] - r[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2.0 * bandwidth ** 2)).mean(1)


def kdensity(feature_fn, x, reference_by_class, bandwidth: float, label) -> float:
    """K-density of one sample against the references of class ``label``.

    ``feature_fn`` maps a batch (N, H, W, C) to final-hidden-layer features;
    ``reference_by_class`` maps class -> (M, D) reference features.
    """
    refs = reference_by_class.get(label)
    if refs is None or len(refs) == 0:
        raise ScoringError(f"no reference samples for class {label!r}")
    f = np.asarray(feature_fn(np.asarray(x)[None]))
    return float(kernel_scores(f, refs, bandwidth)[0])


def model_features(model, images, batch_size=500):
    """(features, predicted labels) of a classifier exposing ``features`` and ``head``."""
    was = model.training
    model.eval()
    feats, preds = [], []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            f = model.features(to_tensor(np.ascontiguousarray(images[i:i + batch_size])))
            feats.append(f.double().numpy())
            preds.append(model.head(f).argmax(1).numpy())
    model.train(was)
    if not feats:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    return np.concatenate(feats), np.concatenate(preds)


def build_references(model, images):
    """Group training features by the model's own predicted (softmax) label."""
    feats, preds = model_features(model, images)
    return {int(c): feats[preds == c] for c in np.unique(preds)}


def median_bandwidth(reference_by_class, max_points=2000, seed=0) -> float:
    """Median pairwise feature distance over the pooled references."""
    pooled = np.concatenate([r for r in reference_by_class.values() if len(r)])
    if len(pooled) > max_points:
        pooled = pooled[np.random.default_rng(seed).choice(len(pooled), max_points, replace=False)]
    d = pdist(pooled)
    d = d[d > 0]
    if len(d) == 0:
        return 1.0
    return float(np.median(d))


def kdensity_scores(model, images, reference_by_class, bandwidth: float | None = None):
    """Batch K-density; each sample is scored against its predicted class."""
    if bandwidth is None:
        bandwidth = median_bandwidth(reference_by_class)
    feats, preds = model_features(model, images)
    out = np.empty(len(images))
    for c in np.unique(preds):
        refs = reference_by_class.get(int(c))
        if refs is None or len(refs) == 0:
            raise ScoringError(f"no reference samples for class {int(c)}")
        sel = preds == c
        out[sel] = kernel_scores(feats[sel], refs, bandwidth)
    return out


# --------------------------------------------------------------- thresholding

def metrics_at(scores_benign, scores_poison, threshold, lower_is_poison=True) -> DetectionMetrics:
    b = np.asarray(scores_benign, dtype=np.float64)
    p = np.asarray(scores_poison, dtype=np.float64)
    flag = (lambda s: s < threshold) if lower_is_poison else (lambda s: s > threshold)
    tp = int(flag(p).sum())
    fp = int(flag(b).sum())
    return metrics_from_counts(tp, fp, len(b) - fp, len(p) - tp)


def histograms(scores_benign, scores_poison, bins=30):
    both = np.concatenate([scores_benign, scores_poison])
    edges = np.histogram_bin_edges(both, bins=bins)
    return {
        "edges": edges,
        "benign": np.histogram(scores_benign, edges)[0],
        "poison": np.histogram(scores_poison, edges)[0],
    }


def threshold_test(scores_benign, scores_poison, target_fpr: float = 0.05,
                   lower_is_poison: bool = True, bins: int = 30):
    """Pick a threshold with benign false-positive rate <= ``target_fpr``.

    Samples are flagged when their score is strictly below the threshold
    (strictly above if ``lower_is_poison`` is False). Returns
    ``(threshold, DetectionMetrics, histograms)``.
    """
    b = np.asarray(scores_benign, dtype=np.float64)
    p = np.asarray(scores_poison, dtype=np.float64)
    if len(b) == 0 or len(p) == 0:
        raise ValueError("both score sets must be nonempty")
    if not 0.0 <= target_fpr <= 1.0:
        raise ValueError("target_fpr must lie in [0, 1]")
    k = math.floor(target_fpr * len(b) + 1e-9)
    if lower_is_poison:
        # fewer than k+1 benign scores lie strictly below the (k+1)-th smallest
        t = np.sort(b)[k] if k < len(b) else math.inf
    else:
        t = np.sort(b)[::-1][k] if k < len(b) else -math.inf
    return float(t), metrics_at(b, p, t, lower_is_poison), histograms(b, p, bins)


def separability_auc(scores_benign, scores_poison) -> float:
    """Rank AUC of the two score sets, folded to [0.5, 1] (direction-free)."""
    b = np.asarray(scores_benign, dtype=np.float64)
    p = np.asarray(scores_poison, dtype=np.float64)
    if len(b) == 0 or len(p) == 0:
        raise ValueError("both score sets must be nonempty")
    ranks = rankdata(np.concatenate([b, p]))
    auc = (ranks[:len(b)].sum() - len(b) * (len(b) + 1) / 2) / (len(b) * len(p))
    return float(max(auc, 1.0 - auc))


def write_scores_csv(path, ids, scores, verdicts=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "score", "verdict"])
        for i, sid in enumerate(ids):
            v = "" if verdicts is None else ("poison" if verdicts[i] else "benign")
            w.writerow([sid, repr(float(scores[i])), v])


def write_histograms_csv(path, hist):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "benign", "poison"])
        e = hist["edges"]
        for i in range(len(e) - 1):
            w.writerow([repr(float(e[i])), repr(float(e[i + 1])), int(hist["benign"][i]), int(hist["poison"][i])])


# ------------------------------------------------------------------- detector

@dataclass
class Detector:
    model: torch.nn.Module
    spec: ModelSpec
    losses: list

    def poison_probability(self, images):
        return torch.softmax(predict_logits(self.model, images), dim=1)[:, 1].numpy()

    def predict(self, images, threshold=0.5):
        return self.poison_probability(images) > threshold

    def evaluate(self, benign_images, poison_images) -> DetectionMetrics:
        preds = np.concatenate([self.predict(benign_images), self.predict(poison_images)])
        truth = np.r_[np.zeros(len(benign_images), bool), np.ones(len(poison_images), bool)]
        return detection_metrics(preds, truth)


def train_detector(benign_images, poison_images, detector_spec: ModelSpec | None = None,
                   seed: int = 0, epochs: int = 10, batch_size: int = 64, lr: float = 0.01) -> Detector:
    """Binary benign (0) / poisoned (1) classifier on balanced mini-batches."""
    if len(benign_images) == 0 or len(poison_images) == 0:
        raise ValueError("detector training needs benign and poisoned images")
    shape = tuple(benign_images.shape[1:])
    spec = detector_spec or ModelSpec("vgg-detector", shape, 2, width=8)
    torch.manual_seed(seed)
    model = build_model(spec)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9, weight_decay=5e-4)
    rng = np.random.default_rng(seed)
    half = batch_size // 2
    steps = max(1, math.ceil((len(benign_images) + len(poison_images)) / batch_size))
    y = torch.cat([torch.zeros(half, dtype=torch.long), torch.ones(half, dtype=torch.long)])
    losses = []
    model.train()
    for epoch in range(epochs):
        for _ in range(steps):
            bi = rng.integers(0, len(benign_images), half)
            pi = rng.integers(0, len(poison_images), half)
            x = to_tensor(np.ascontiguousarray(np.concatenate([benign_images[bi], poison_images[pi]])))
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"detector diverged in epoch {epoch}; last losses {losses[-5:]}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
    model.eval()
    return Detector(model, spec, losses)

"""MixMatch, UDA and FixMatch objectives.

Each ``*_step`` runs the model on already-augmented batches and returns the
labeled loss, the unlabeled loss and one diagnostic (total loss for MixMatch,
the fraction of unlabeled samples above the confidence threshold for UDA and
FixMatch). Targets derived from the model's own predictions are detached, so
gradients flow only through the logits the loss is measured on. The
``*_objective`` functions take those logits and targets directly, which is
what the gradient checks differentiate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

ALGORITHMS = ("mixmatch", "uda", "fixmatch", "supervised")
DEFAULT_LAMBDA_U = {"mixmatch": 100.0, "uda": 1.0, "fixmatch": 1.0, "supervised": 0.0}


@dataclass
class SSLConfig:
    algorithm: str = "fixmatch"
    T: float = 0.5
    lambda_u: float | None = None
    tau: float = 0.8
    K: int = 2
    # MixMatch has no threshold in its original form; set a float to enable one
    mixmatch_tau: float | None = None
    # placeholder, MixUp inside MixMatch batches is not implemented
    mixup: bool = False
    # steps over which lambda_u ramps linearly from 0 (0 = no ramp)
    rampup_steps: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.lambda_u is None:
            self.lambda_u = DEFAULT_LAMBDA_U[self.algorithm]
        if self.T <= 0:
            raise ValueError("temperature T must be > 0")
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be >= 0")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.mixup:
            raise NotImplementedError("MixUp is not part of this MixMatch variant")


def sharpen(dist, T: float):
    """Temperature sharpening ``p_i^(1/T) / sum_c p_c^(1/T)``.

    Works on numpy arrays or torch tensors, over the last axis.
    """
    if T <= 0:
        raise ValueError("temperature must be > 0")
    if isinstance(dist, torch.Tensor):
        if torch.any(dist.sum(-1) <= 0):
            raise ValueError("cannot sharpen an all-zero distribution")
        # log-space keeps tiny probabilities from underflowing at small T
        logp = torch.log(dist.clamp_min(0)) / T
        return torch.softmax(logp, dim=-1)
    p = np.asarray(dist, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if np.any(p.sum(axis=-1) <= 0):
        raise ValueError("cannot sharpen an all-zero distribution")
    with np.errstate(divide="ignore"):
        logp = np.log(p) / T
    logp = logp - logp.max(axis=-1, keepdims=True)
    q = np.exp(logp)
    return q / q.sum(axis=-1, keepdims=True)


def guess_label(model, sample, K: int = 1, mode: str = "average", augment=None):
    """Label guess for a batch of unlabeled inputs (N, C, H, W).

    ``average`` averages softmax outputs over ``K`` views produced by
    ``augment`` (a callable on the batch; identity if None). ``weak-single``
    uses one view.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if mode not in ("average", "weak-single"):
        raise ValueError(f"unknown guess mode {mode!r}")
    views = K if mode == "average" else 1
    with torch.no_grad():
        probs = [torch.softmax(model(sample if augment is None else augment(sample)), dim=-1)
                 for _ in range(views)]
    return torch.stack(probs).mean(0)


def argmax_lowest(probs):
    """Argmax over the last axis with ties broken towards the lowest index."""
    m = probs.max(dim=-1, keepdim=True).values
    idx = torch.arange(probs.shape[-1], device=probs.device).expand_as(probs)
    big = torch.full_like(idx, probs.shape[-1])
    return torch.where(probs == m, idx, big).min(dim=-1).values


def soft_cross_entropy(logits, targets):
    return -(targets * F.log_softmax(logits, dim=-1)).sum(-1)


# ----------------------------------------------------------------- objectives

def mixmatch_objective(logits_x, targets_x, logits_views, guess, lambda_u, mask=None):
    """L_X = CE on labeled logits; L_U = MSE between view softmaxes and guess.

    ``logits_views`` has shape (K, B, C); ``guess`` (B, C) is a constant.
    The squared distance is averaged over views, samples and classes.
    """
    l_x = F.cross_entropy(logits_x, targets_x)
    if logits_views.numel() == 0:
        l_u = logits_x.new_zeros(())
    else:
        sq = (torch.softmax(logits_views, dim=-1) - guess.unsqueeze(0)) ** 2
        if mask is not None:
            sq = sq * mask.view(1, -1, 1)
        l_u = sq.mean()
    return l_x, l_u, l_x + lambda_u * l_u


def consistency_objective(logits_x, targets_x, logits_strong, targets_u, mask):
    """CE on labeled logits plus masked (soft or one-hot) CE on strong views.

    The unlabeled term is averaged over the whole batch, masked samples
    contributing zero.
    """
    l_x = F.cross_entropy(logits_x, targets_x)
    if logits_strong.numel() == 0:
        return l_x, logits_x.new_zeros(())
    l_u = (soft_cross_entropy(logits_strong, targets_u) * mask).mean()
    return l_x, l_u


# ---------------------------------------------------------------------- steps

def _empty(unlabeled_batch):
    return unlabeled_batch is None or len(unlabeled_batch[0]) == 0


def mixmatch_step(model, labeled_batch, unlabeled_batch, config: SSLConfig, lambda_u=None):
    """MixMatch without MixUp.

    ``unlabeled_batch`` is a 1-tuple holding a (K, B, C, H, W) tensor of
    weakly augmented views. The guess is the sharpened mean prediction over
    the views; the loss pulls each view's prediction towards it.
    """
    lam = config.lambda_u if lambda_u is None else lambda_u
    x, y = labeled_batch
    logits_x = model(x)
    if lam == 0 or _empty(unlabeled_batch) or len(unlabeled_batch[0][0]) == 0:
        l_x = F.cross_entropy(logits_x, y)
        zero = logits_x.new_zeros(())
        return l_x, zero, l_x
    views = unlabeled_batch[0]
    k, b = views.shape[:2]
    logits_views = model(views.reshape(k * b, *views.shape[2:])).reshape(k, b, -1)
    with torch.no_grad():
        mean = torch.softmax(logits_views, dim=-1).mean(0)
        guess = sharpen(mean, config.T)
        mask = None
        if config.mixmatch_tau is not None:
            mask = (mean.max(-1).values > config.mixmatch_tau).float()
    return mixmatch_objective(logits_x, y, logits_views, guess, lam, mask)


def uda_step(model, labeled_batch, unlabeled_batch, config: SSLConfig):
    """UDA: the sharpened weak-view guess supervises the strong view.

    ``unlabeled_batch`` = (weak, strong). Samples count only when the weak
    view's top probability is strictly greater than ``tau``.
    """
    x, y = labeled_batch
    logits_x = model(x)
    if _empty(unlabeled_batch) or config.lambda_u == 0:
        return F.cross_entropy(logits_x, y), logits_x.new_zeros(()), 0.0
    weak, strong = unlabeled_batch
    with torch.no_grad():
        probs = torch.softmax(model(weak), dim=-1)
        mask = (probs.max(-1).values > config.tau).float()
        targets = sharpen(probs, config.T)
    l_x, l_u = consistency_objective(logits_x, y, model(strong), targets, mask)
    return l_x, l_u, float(mask.mean())


def fixmatch_step(model, labeled_batch, unlabeled_batch, config: SSLConfig):
    """FixMatch: one-hot argmax of the weak view supervises the strong view."""
    x, y = labeled_batch
    logits_x = model(x)
    if _empty(unlabeled_batch) or config.lambda_u == 0:
        return F.cross_entropy(logits_x, y), logits_x.new_zeros(()), 0.0
    weak, strong = unlabeled_batch
    with torch.no_grad():
        # NaN rows get no target; the divergence then surfaces through the loss
        probs = torch.nan_to_num(torch.softmax(model(weak), dim=-1), nan=0.0)
        conf = probs.max(-1).values
        mask = (conf > config.tau).float()
        targets = F.one_hot(argmax_lowest(probs), probs.shape[-1]).to(probs.dtype)
    l_x, l_u = consistency_objective(logits_x, y, model(strong), targets, mask)
    return l_x, l_u, float(mask.mean())


def fixmatch_targets(probs, tau):
    """(one-hot targets, mask) for weak-view probabilities; exposed for tests."""
    probs = torch.as_tensor(probs)
    mask = (probs.max(-1).values > tau).float()
    return F.one_hot(argmax_lowest(probs), probs.shape[-1]).to(probs.dtype), mask

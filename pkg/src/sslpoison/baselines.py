"""Comparison attacks on the unlabeled set.

Each attack replaces (or removes) ``floor(pdr * |U|)`` uniformly chosen
unlabeled samples and leaves everything else untouched. Replaced samples get
the id ``<attack>-<source id>``. The 4-image and two-unlabeled variants of the
pattern attack live in :mod:`sslpoison.poison`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from scipy import integrate, ndimage

from .data import DatasetBundle, SealedLabels, Split
from .errors import AttackError
from .models import ModelSpec, build_model, to_tensor
from .poison import poison_count


@dataclass(frozen=True)
class DensityFn:
    """Unnormalized density on [0, 1] for the interpolation weight."""

    id: str
    p: Callable[[np.ndarray], np.ndarray]

    def normalizer(self) -> float:
        return integrate.quad(lambda x: float(self.p(np.asarray(x))), 0.0, 1.0)[0]

    def pdf(self, x):
        return self.p(np.asarray(x, dtype=np.float64)) / self.normalizer()

    def sample(self, n, rng, grid=4097):
        """Inverse-transform sampling on a fine grid."""
        xs = np.linspace(0.0, 1.0, grid)
        px = self.p(xs)
        if np.any(px < 0):
            raise ValueError(f"density {self.id!r} is negative on [0, 1]")
        cdf = np.concatenate([[0.0], np.cumsum((px[1:] + px[:-1]) / 2 * np.diff(xs))])
        if cdf[-1] <= 0:
            raise ValueError(f"density {self.id!r} has no mass on [0, 1]")
        cdf /= cdf[-1]
        return np.interp(rng.random(n), cdf, xs)


DENSITIES = {
    "const1": DensityFn("const1", lambda x: np.ones_like(x, dtype=np.float64)),
    "one_minus_x": DensityFn("one_minus_x", lambda x: 1.0 - x),
    "one_point_five_minus_x": DensityFn("one_point_five_minus_x", lambda x: 1.5 - x),
    "bump": DensityFn("bump", lambda x: 1.0 - x ** 2 + 0.5),
}


def _victims(n_unlabeled, pdr, rng):
    if not 0.0 < pdr <= 1.0:
        raise ValueError(f"pdr must lie in (0, 1], got {pdr}")
    n = poison_count(pdr, n_unlabeled)
    return np.sort(rng.choice(n_unlabeled, n, replace=False))


def _replace(bundle: DatasetBundle, victims, new_images, prefix, new_labels=None):
    unl = bundle.unlabeled
    images = np.array(unl.images)
    ids = np.array(unl.ids, dtype=object)
    images[victims] = new_images
    for v in victims:
        ids[v] = f"{prefix}-{unl.ids[v]}"
    hidden = None
    if unl.hidden is not None:
        labels = np.array(unl.hidden._labels)
        if new_labels is not None:
            labels[victims] = new_labels
        hidden = SealedLabels(labels)
    return bundle.with_unlabeled(Split(images, ids.astype(str), None, hidden))


def attack_empty(bundle: DatasetBundle, pdr: float, seed: int = 0) -> DatasetBundle:
    """Replace victims with all-black images."""
    victims = _victims(len(bundle.unlabeled), pdr, np.random.default_rng(seed))
    return _replace(bundle, victims, 0.0, "empty")


def attack_remove(bundle: DatasetBundle, fraction: float, seed: int = 0) -> DatasetBundle:
    """Drop ``floor(fraction * |U|)`` unlabeled samples."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"removal fraction must lie in (0, 1), got {fraction}")
    unl = bundle.unlabeled
    rng = np.random.default_rng(seed)
    gone = rng.choice(len(unl), poison_count(fraction, len(unl)), replace=False)
    keep = np.setdiff1d(np.arange(len(unl)), gone)
    return bundle.with_unlabeled(unl.take(keep))


def attack_interpolate(bundle: DatasetBundle, pdr: float, density: DensityFn | str,
                       seed: int, pool: Split) -> DatasetBundle:
    """Replace victims with ``(1 - a) x + a y`` for cross-class pairs (x, y).

    Endpoints come from ``pool``, the attacker's labeled samples (guess set
    plus public data); ``a`` is drawn from ``density``.
    """
    density = DENSITIES[density] if isinstance(density, str) else density
    if pool.labels is None or len(np.unique(pool.labels)) < 2:
        raise ValueError("interpolation needs an attacker pool with at least two classes")
    rng = np.random.default_rng(seed)
    victims = _victims(len(bundle.unlabeled), pdr, rng)
    alphas = density.sample(len(victims), rng)
    a_idx = rng.integers(0, len(pool), len(victims))
    b_idx = np.empty_like(a_idx)
    for i, a in enumerate(a_idx):
        others = np.flatnonzero(pool.labels != pool.labels[a])
        b_idx[i] = rng.choice(others)
    new = interpolate(pool.images[a_idx], pool.images[b_idx], alphas)
    labels = np.where(alphas <= 0.5, pool.labels[a_idx], pool.labels[b_idx])
    return _replace(bundle, victims, new, "interp", labels)


def interpolate(a, b, alpha):
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1, *([1] * (np.ndim(a) - 1)))
    if np.ndim(a) == 3:
        alpha = alpha.reshape(())
    out = (1.0 - alpha) * a + alpha * b
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def warp_field(shape, strength: float, grid_size: int, rng):
    """Smooth displacement field (2, H, W) with vector norms <= strength.

    Random vectors on a ``grid_size`` x ``grid_size`` grid are scaled so the
    longest has length ``strength`` and then upsampled bilinearly; bilinear
    weights are convex, so the bound carries over to every pixel.
    """
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    if strength < 0:
        raise ValueError("strength must be >= 0")
    h, w = shape[:2]
    coarse = rng.uniform(-1.0, 1.0, (2, grid_size, grid_size))
    norm = np.sqrt((coarse ** 2).sum(0)).max()
    coarse *= strength / norm if norm > 0 else 0.0
    yy, xx = np.meshgrid(np.linspace(0, grid_size - 1, h), np.linspace(0, grid_size - 1, w), indexing="ij")
    return np.stack([ndimage.map_coordinates(coarse[c], [yy, xx], order=1) for c in range(2)])


def warp(image, field):
    if not np.any(field):
        return np.array(image)
    h, w = image.shape[:2]
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = [yy + field[0], xx + field[1]]
    out = np.stack([ndimage.map_coordinates(image[:, :, c], coords, order=1, mode="nearest")
                    for c in range(image.shape[2])], axis=-1)
    return np.clip(out, 0.0, 1.0)


def attack_warp(bundle: DatasetBundle, pdr: float, strength: float = 0.5, grid_size: int = 4,
                seed: int = 0) -> DatasetBundle:
    """Deform victims with a smooth random displacement field (strength in pixels)."""
    if strength < 0:
        raise ValueError("strength must be >= 0")
    rng = np.random.default_rng(seed)
    victims = _victims(len(bundle.unlabeled), pdr, rng)
    shape = bundle.unlabeled.shape
    new = np.stack([warp(bundle.unlabeled.images[v], warp_field(shape, strength, grid_size, rng))
                    for v in victims]) if len(victims) else np.zeros((0, *shape))
    return _replace(bundle, victims, new, "warp")


def train_surrogate(pool: Split, num_classes, surrogate_spec=None, seed=0, steps=300, lr=0.05):
    """Small CNN fit on the attacker's labeled pool."""
    spec = surrogate_spec or ModelSpec("small-cnn", pool.shape, num_classes, width=8)
    torch.manual_seed(seed)
    model = build_model(spec)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9)
    rng = np.random.default_rng(seed)
    labels = torch.from_numpy(np.array(pool.labels))
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(pool), min(64, max(len(pool), 1)))
        loss = F.cross_entropy(model(to_tensor(np.ascontiguousarray(pool.images[idx]))), labels[idx])
        if not torch.isfinite(loss):
            raise AttackError(f"FGSM surrogate diverged at step {step}; last losses {losses[-5:]}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    model.eval()
    return model


def fgsm(model, images, epsilon: float):
    """``x + eps * sign(grad_x CE(model(x), argmax model(x)))`` clipped to [0, 1]."""
    x = to_tensor(np.ascontiguousarray(images)).requires_grad_(True)
    logits = model(x)
    loss = F.cross_entropy(logits, logits.argmax(1).detach())
    (grad,) = torch.autograd.grad(loss, x)
    adv = (x + epsilon * grad.sign()).clamp(0.0, 1.0).detach()
    return adv.permute(0, 2, 3, 1).numpy()


def attack_fgsm(bundle: DatasetBundle, pdr: float, epsilon: float, surrogate_spec=None,
                seed: int = 0, pool: Split | None = None) -> DatasetBundle:
    """Perturb victims with one FGSM step against a surrogate fit on ``pool``."""
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    if pool is None or pool.labels is None or len(pool) == 0:
        raise ValueError("FGSM needs a labeled attacker pool to train its surrogate")
    rng = np.random.default_rng(seed)
    victims = _victims(len(bundle.unlabeled), pdr, rng)
    src = bundle.unlabeled.images[victims]
    if epsilon == 0.0:
        new = np.array(src)
    else:
        model = train_surrogate(pool, bundle.num_classes, surrogate_spec, seed)
        new = np.concatenate([fgsm(model, src[i:i + 256], epsilon) for i in range(0, len(src), 256)])
    return _replace(bundle, victims, new, "fgsm")

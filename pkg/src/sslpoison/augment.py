"""Weak/strong augmentation for SSL training and corruption transforms.

All functions take and return float HWC images in [0, 1]. Randomness comes
from an explicit ``seed`` or ``numpy.random.Generator`` so that identical
inputs give identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import imageops

MAX_SHIFT = 0.125
STRONG_OPS = ("invert", "posterize", "solarize", "brightness", "contrast", "occlude", "rotate")

# magnitude ranges of the strong ops; all artifact defaults
STRONG_RANGES = {
    "posterize": (4, 8),           # bits kept
    "solarize": (0.5, 1.0),        # threshold
    "brightness": (0.5, 1.5),      # multiplicative factor
    "contrast": (0.5, 1.5),        # factor around the mean
    "occlude": (0.1, 0.5),         # side length as a fraction of H and W
    "rotate": (-30.0, 30.0),       # degrees
}


def _rng(seed=None, rng=None):
    if rng is not None:
        return rng
    return np.random.default_rng(seed)


@dataclass
class AugmentPolicy:
    kind: str = "weak"
    ops: tuple[str, ...] = ("flip", "shift")
    ranges: dict = field(default_factory=dict)
    num_ops: int = 2
    fill: float = 0.5

    def __post_init__(self):
        if self.kind == "weak":
            bad = set(self.ops) - {"flip", "shift"}
            if bad:
                raise ValueError(f"weak policy may only flip and shift, got {sorted(bad)}")
        elif self.kind == "strong":
            bad = set(self.ops) - set(STRONG_OPS)
            if bad:
                raise ValueError(f"unknown strong ops {sorted(bad)}")
        else:
            raise ValueError(f"policy kind must be weak or strong, got {self.kind!r}")

    @classmethod
    def strong(cls, **kw):
        return cls(kind="strong", ops=STRONG_OPS, ranges=dict(STRONG_RANGES), **kw)

    def __call__(self, image, rng):
        if self.kind == "weak":
            return weak_augment(image, rng=rng, flip=None if "flip" in self.ops else False,
                                shift=None if "shift" in self.ops else (0, 0))
        return strong_augment(image, rng=rng, ops=self.ops, num_ops=self.num_ops,
                              ranges={**STRONG_RANGES, **self.ranges}, fill=self.fill)


# ------------------------------------------------------------------- weak ops

def hflip(image):
    return np.ascontiguousarray(image[:, ::-1])


def translate(image, dy: int, dx: int):
    """Shift content by (dy, dx) pixels, replicating edge pixels into the gap."""
    if dy == 0 and dx == 0:
        return np.array(image)
    h, w = image.shape[:2]
    py, px = abs(dy), abs(dx)
    padded = np.pad(image, ((py, py), (px, px), (0, 0)), mode="edge")
    return padded[py - dy:py - dy + h, px - dx:px - dx + w]


def weak_augment(image, seed=None, *, rng=None, flip=None, shift=None):
    """Random horizontal flip (p = 1/2) and a shift of at most 12.5% per axis.

    ``flip`` (bool) and ``shift`` ((dy, dx)) force the respective choice.
    """
    rng = _rng(seed, rng)
    h, w = image.shape[:2]
    do_flip = rng.random() < 0.5 if flip is None else flip
    if shift is None:
        my, mx = int(MAX_SHIFT * h), int(MAX_SHIFT * w)
        shift = (int(rng.integers(-my, my + 1)), int(rng.integers(-mx, mx + 1)))
    out = hflip(image) if do_flip else image
    return translate(out, *shift)


# ----------------------------------------------------------------- strong ops

def invert(image):
    return 1.0 - image


def posterize(image, bits: int):
    shift = 8 - int(bits)
    q = imageops.to_uint8(image) >> shift << shift
    return q.astype(image.dtype) / 255.0


def solarize(image, threshold: float):
    return np.where(image >= threshold, 1.0 - image, image).astype(image.dtype)


def brightness(image, factor: float):
    return np.clip(image * factor, 0.0, 1.0)


def contrast(image, factor: float):
    mean = image.mean()
    return np.clip(mean + factor * (image - mean), 0.0, 1.0)


def occlude(image, top: int, left: int, height: int, width: int, fill: float = 0.5):
    out = np.array(image)
    out[top:top + height, left:left + width] = fill
    return out


def rotate(image, degrees: float):
    out = ndimage.rotate(image, degrees, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def _apply_strong(name, image, rng, ranges, fill):
    lo, hi = ranges.get(name, (0.0, 1.0))
    if name == "invert":
        return invert(image)
    if name == "posterize":
        return posterize(image, int(rng.integers(lo, hi + 1)))
    if name == "solarize":
        return solarize(image, rng.uniform(lo, hi))
    if name == "brightness":
        return brightness(image, rng.uniform(lo, hi))
    if name == "contrast":
        return contrast(image, rng.uniform(lo, hi))
    if name == "occlude":
        h, w = image.shape[:2]
        # sides are capped at half of each axis: area <= 25%
        oh = max(1, min(h // 2, int(round(rng.uniform(lo, hi) * h))))
        ow = max(1, min(w // 2, int(round(rng.uniform(lo, hi) * w))))
        top = int(rng.integers(0, h - oh + 1))
        left = int(rng.integers(0, w - ow + 1))
        return occlude(image, top, left, oh, ow, fill)
    if name == "rotate":
        return rotate(image, rng.uniform(lo, hi))
    raise ValueError(f"unknown strong op {name!r}")


def strong_augment(image, seed=None, *, rng=None, ops=STRONG_OPS, num_ops=2,
                   ranges=None, fill=0.5):
    """Apply ``num_ops`` ops drawn (without replacement) from ``ops``."""
    rng = _rng(seed, rng)
    ranges = STRONG_RANGES if ranges is None else ranges
    chosen = rng.choice(len(ops), size=min(num_ops, len(ops)), replace=False)
    out = np.asarray(image, dtype=np.float32)
    for i in chosen:
        out = _apply_strong(ops[i], out, rng, ranges, fill)
    return out.astype(np.float32, copy=False)


def augment_batch(images, fn, rng):
    """Apply a per-image augmentation to an (N, H, W, C) batch."""
    return np.stack([fn(img, rng=rng) for img in images]).astype(np.float32, copy=False)


# ---------------------------------------------------------------- corruptions

CORRUPTIONS = ("smoothing", "jpeg", "rotation", "noise")


def corrupt(image, kind: str, params=None, seed=None):
    """Deterministic corruption probe / defense transform.

    kinds and params: ``smoothing`` (sigma > 0, in pixels), ``jpeg``
    (quality in [1, 100]), ``rotation`` (angle_range within [-180, 180]; an
    angle is drawn uniformly from it), ``noise`` (sigma > 0 of zero-mean
    Gaussian noise, default 0.05).
    """
    params = dict(params or {})
    image = np.asarray(image, dtype=np.float32)
    if kind == "smoothing":
        sigma = float(params.get("sigma", 1.0))
        if sigma <= 0:
            raise ValueError("smoothing sigma must be > 0")
        out = ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0), mode="nearest")
    elif kind == "jpeg":
        quality = int(params.get("quality", 75))
        if not 1 <= quality <= 100:
            raise ValueError(f"jpeg quality must lie in [1, 100], got {quality}")
        out = imageops.jpeg_roundtrip(image, quality, subsampling=0)
    elif kind == "rotation":
        lo, hi = params.get("angle_range", (-15.0, 15.0))
        if not -180 <= lo <= hi <= 180:
            raise ValueError(f"angle range {(lo, hi)} must lie within [-180, 180]")
        out = rotate(image, np.random.default_rng(seed).uniform(lo, hi))
    elif kind == "noise":
        sigma = float(params.get("sigma", 0.05))
        if sigma <= 0:
            raise ValueError("noise sigma must be > 0")
        out = image + np.random.default_rng(seed).normal(0.0, sigma, image.shape)
    else:
        raise ValueError(f"unknown corruption {kind!r}; choose from {CORRUPTIONS}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def corrupt_batch(images, kind, params=None, seed=0):
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(len(images))
    return np.stack([corrupt(img, kind, params, int(s)) for img, s in zip(images, seeds)]) if len(images) else np.array(images)

"""Pattern-overlay poisoning of the unlabeled set.

A poisoned sample is a regular unlabeled image with a faint overlay built from
images the attacker believes to be in the victim's labeled set::

    poisoned = (1 - pv) * regular + pv * pattern

The pattern is the side-by-side concatenation of the centre crops of two
suspected labeled images (or a 2x2 mosaic of four), preferably of different
classes, so that a model overfitted on the labeled set guesses a wrong label
for the whole image.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import imageops
from .data import DatasetBundle, ImageSample, SealedLabels, Split

VARIANTS = ("phantom", "3u1l", "two-unlabeled")


@dataclass(frozen=True)
class GuessSet:
    """The attacker's suspected labeled samples."""

    samples: Split
    achieved_precision: float
    achieved_sensitivity: float

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValueError("guess set is empty")
        if self.samples.labels is None:
            raise ValueError("guesses need (attacker-assigned) labels")

    def __len__(self):
        return len(self.samples)


@dataclass
class PoisonConfig:
    pv: float = 0.1
    pdr: float = 0.05
    pattern_arity: int = 2
    distinct_label_policy: bool = True
    crop_mode: str = "center"
    crop_offsets: tuple | None = None
    variant: str = "phantom"
    label_grouping: dict | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("pv", "pdr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.pattern_arity not in (2, 4):
            raise ValueError(f"pattern_arity must be 2 or 4, got {self.pattern_arity}")
        if self.crop_mode not in ("center", "custom"):
            raise ValueError(f"crop_mode must be 'center' or 'custom', got {self.crop_mode!r}")
        if self.crop_mode == "custom" and self.crop_offsets is None:
            raise ValueError("custom crop_mode needs crop_offsets")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "3u1l" and self.pattern_arity != 4:
            raise ValueError("the 3u1l variant uses a 4-image pattern")


@dataclass(frozen=True)
class ManifestEntry:
    poisoned_id: str
    source_id: str
    guess_ids: tuple[str, ...]
    pv: float
    guess_labels: tuple[int | None, ...]


@dataclass
class PoisonManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def poisoned_ids(self) -> list[str]:
        return [e.poisoned_id for e in self.entries]

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["poisoned_id", "source_id", "guess_ids", "pv", "guess_labels"])
            for e in self.entries:
                labels = ";".join("?" if lab is None else str(lab) for lab in e.guess_labels)
                w.writerow([e.poisoned_id, e.source_id, ";".join(e.guess_ids), repr(float(e.pv)), labels])

    @classmethod
    def read(cls, path):
        entries = []
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != ["poisoned_id", "source_id", "guess_ids", "pv", "guess_labels"]:
                raise ValueError(f"{path} is not a poison manifest")
            for row in reader:
                if not row:
                    continue
                pid, src, gids, pv, labs = row
                entries.append(ManifestEntry(
                    pid, src, tuple(gids.split(";")) if gids else (), float(pv),
                    tuple(None if x == "?" else int(x) for x in labs.split(";")) if labs else (),
                ))
        return cls(entries)


def build_guess_set(true_labeled: Split, candidate_pool: Split, precision: float,
                    sensitivity: float, seed: int) -> GuessSet:
    """Assemble a guess set with the requested overlap with the true labeled set.

    ``sensitivity`` is the fraction of the labeled set that is guessed,
    ``precision`` the fraction of guesses that are real labeled samples, so the
    set holds ``sensitivity * |X| / precision`` samples. False guesses are drawn
    from ``candidate_pool`` (samples of the same distribution that are not in
    the labeled set); both parts need labels.
    """
    if not (0 < precision <= 1 and 0 < sensitivity <= 1):
        raise ValueError("precision and sensitivity must lie in (0, 1]")
    n_x = len(true_labeled)
    n_true = int(round(sensitivity * n_x))
    size = int(round(sensitivity * n_x / precision))
    n_false = size - n_true
    labeled_ids = set(true_labeled.ids.tolist())
    pool_idx = np.array([i for i, s in enumerate(candidate_pool.ids) if s not in labeled_ids], dtype=np.int64)
    if n_true < 1 or n_false > len(pool_idx):
        raise ValueError(
            f"infeasible guess set: needs {max(n_true, 0)} true and {n_false} false guesses, but "
            f"|X|={n_x} and only {len(pool_idx)} non-labeled candidates; feasible region is "
            f"sensitivity >= {0.5 / max(n_x, 1):.4f} and sensitivity*|X|*(1/precision - 1) <= {len(pool_idx)}"
        )
    pool_labels = _attacker_labels(candidate_pool)
    rng = np.random.default_rng(seed)
    true_idx = np.sort(rng.choice(n_x, n_true, replace=False))
    false_idx = np.sort(rng.choice(pool_idx, n_false, replace=False))
    images = np.concatenate([true_labeled.images[true_idx], candidate_pool.images[false_idx]])
    ids = np.concatenate([true_labeled.ids[true_idx], candidate_pool.ids[false_idx]])
    labels = np.concatenate([true_labeled.labels[true_idx], pool_labels[false_idx]])
    hits = len(labeled_ids & set(ids.tolist()))
    return GuessSet(Split(images, ids, labels), hits / len(ids), hits / n_x)


def _attacker_labels(split: Split) -> np.ndarray:
    if split.labels is not None:
        return split.labels
    if split.hidden is not None:
        return split.hidden.reveal("attack-simulation")
    raise ValueError("candidate pool has no labels")


def _cells(shape, k):
    """(row, col, height, width) of each pattern cell in row-major order."""
    h, w = shape[:2]
    if k == 2:
        return [(0, 0, h, w // 2), (0, w // 2, h, w - w // 2)]
    hh, hw = h // 2, w // 2
    return [(0, 0, hh, hw), (0, hw, hh, w - hw), (hh, 0, h - hh, hw), (hh, hw, h - hh, w - hw)]


def center_offset(shape, ch, cw):
    return (shape[0] - ch) // 2, (shape[1] - cw) // 2


def make_pattern(guesses: Sequence[ImageSample], target_shape, distinct_labels: bool = True,
                 offsets: Sequence[tuple[int, int]] | None = None) -> ImageSample:
    """Tile crops of ``k`` guesses (k = 2 side by side, k = 4 as quadrants).

    Each guess is resized to ``target_shape`` if needed, then the crop of the
    cell's size is cut from its centre (or at the given per-guess ``offsets``).
    """
    k = len(guesses)
    if k not in (2, 4):
        raise ValueError(f"a pattern is built from 2 or 4 images, got {k}")
    labels = [g.label for g in guesses]
    if distinct_labels and None not in labels and len(set(labels)) != k:
        raise ValueError(f"pattern guesses must have pairwise distinct labels, got {labels}")
    target_shape = tuple(target_shape)
    out = np.empty(target_shape, dtype=np.float32)
    for i, (g, (r0, c0, ch, cw)) in enumerate(zip(guesses, _cells(target_shape, k))):
        px = np.asarray(g.pixels, dtype=np.float32)
        if px.shape[2] != target_shape[2]:
            px = _match_channels(px, target_shape[2])
        if px.shape[:2] != target_shape[:2]:
            px = imageops.resize(px, *target_shape[:2])
        oy, ox = center_offset(target_shape, ch, cw) if offsets is None else offsets[i]
        if not (0 <= oy <= target_shape[0] - ch and 0 <= ox <= target_shape[1] - cw):
            raise ValueError(f"crop offset {(oy, ox)} out of bounds for a {ch}x{cw} cell")
        out[r0:r0 + ch, c0:c0 + cw] = px[oy:oy + ch, ox:ox + cw]
    ids = "+".join(g.id for g in guesses)
    return ImageSample(out, None, f"pattern({ids})")


def _match_channels(px, c):
    if c == 1:
        return px.mean(axis=2, keepdims=True)
    return np.repeat(px, c, axis=2)


def blend(regular, pattern, pv: float):
    """Per-pixel affine mix ``(1 - pv) * regular + pv * pattern``.

    Accepts ImageSamples (returns an ImageSample with the regular's id and
    label) or plain arrays (returns an array of the same dtype).
    """
    if not 0.0 <= pv <= 1.0:
        raise ValueError(f"pv must lie in [0, 1], got {pv}")
    if isinstance(regular, ImageSample):
        r = regular.pixels
        p = pattern.pixels if isinstance(pattern, ImageSample) else pattern
        return ImageSample(_mix(r, p, pv), regular.label, regular.id)
    return _mix(regular, pattern, pv)


def _mix(r, p, pv):
    r = np.asarray(r)
    p = np.asarray(p)
    if r.shape != p.shape:
        raise ValueError(f"shape mismatch: regular {r.shape} vs pattern {p.shape}")
    if pv == 0.0:
        return r.copy()
    if pv == 1.0:
        return p.astype(r.dtype, copy=True)
    out = (1.0 - pv) * r + pv * p
    # rounding in float32 can step a hair past the unit interval
    return np.clip(out, 0.0, 1.0).astype(np.result_type(r, p), copy=False)


def poison_count(pdr: float, n: int) -> int:
    # the epsilon keeps e.g. 0.05 * 49960 from flooring to 2497
    return int(np.floor(pdr * n + 1e-9))


def _victim_rng(seed, sid):
    return np.random.default_rng([seed, zlib.crc32(str(sid).encode())])


def poison_unlabeled(bundle: DatasetBundle, guess_set: GuessSet,
                     config: PoisonConfig) -> tuple[DatasetBundle, PoisonManifest]:
    """Replace ``floor(pdr * |U|)`` unlabeled samples with poisoned blends.

    Victims are drawn uniformly without replacement. For each victim the
    pattern images are drawn without replacement from the guess set; with the
    distinct-label policy their labels are pairwise distinct and, when the
    (simulated) true label of the victim is available, also differ from it.
    Poisoned samples get fresh ids ``poison-<source id>`` and keep the
    source's sealed label for evaluation.

    Variants: ``3u1l`` builds a 4-image pattern from one guess and three other
    unlabeled images; ``two-unlabeled`` blends two unlabeled images (no guess
    involved) and is experimental.
    """
    unl = bundle.unlabeled
    n = poison_count(config.pdr, len(unl))
    if n == 0:
        if config.pdr > 0:
            raise ValueError(f"pdr={config.pdr} poisons no sample of |U|={len(unl)}")
        return bundle, PoisonManifest()

    k = config.pattern_arity
    g_labels = guess_set.samples.labels
    group_of = _grouping_lut(config.label_grouping)
    victim_labels = None
    if config.distinct_label_policy and unl.hidden is not None:
        victim_labels = unl.hidden.reveal("attack-simulation")

    n_from_guesses = {"phantom": k, "3u1l": 1, "two-unlabeled": 0}[config.variant]
    if config.distinct_label_policy and n_from_guesses > 0:
        distinct = len(set(group_of(g_labels).tolist()))
        needed = n_from_guesses + (1 if victim_labels is not None else 0)
        if distinct < needed:
            raise ValueError(
                f"guess set covers {distinct} distinct label(s) but the distinct-label policy needs {needed}"
            )
    if len(guess_set) < n_from_guesses:
        raise ValueError(f"guess set has {len(guess_set)} samples, pattern needs {n_from_guesses}")

    rng = np.random.default_rng(config.seed)
    victims = np.sort(rng.choice(len(unl), n, replace=False))
    shape = unl.shape
    images = np.array(unl.images)
    ids = np.array(unl.ids, dtype=object)
    entries = []
    for v in victims:
        vrng = _victim_rng(config.seed, unl.ids[v])
        vlabel = None if victim_labels is None else int(victim_labels[v])
        parts = []
        if n_from_guesses:
            gidx = _pick_guesses(vrng, g_labels, n_from_guesses, vlabel, config.distinct_label_policy, group_of)
            parts += [guess_set.samples.sample(i) for i in gidx]
        others = k - n_from_guesses
        if others:
            cand = vrng.choice(len(unl) - 1, others, replace=False)
            cand = cand + (cand >= v)  # skip the victim itself
            parts += [ImageSample(unl.images[i], None, str(unl.ids[i])) for i in cand]
            # the 3u1l layout puts the single real guess in the last quadrant
            if config.variant == "3u1l":
                parts = parts[1:] + parts[:1]
        pattern = make_pattern(parts, shape, distinct_labels=False,
                               offsets=config.crop_offsets if config.crop_mode == "custom" else None)
        images[v] = _mix(unl.images[v], pattern.pixels, config.pv)
        src = str(unl.ids[v])
        ids[v] = f"poison-{src}"
        entries.append(ManifestEntry(ids[v], src, tuple(p.id for p in parts), config.pv,
                                     tuple(p.label for p in parts)))
    hidden = None if unl.hidden is None else SealedLabels(unl.hidden._labels)
    poisoned = Split(images, ids.astype(str), None, hidden)
    return bundle.with_unlabeled(poisoned), PoisonManifest(entries)


def _grouping_lut(grouping):
    if not grouping:
        return lambda labels: np.asarray(labels)
    lut = {int(k): int(v) for k, v in grouping.items()}
    return lambda labels: np.array([lut[int(x)] for x in np.atleast_1d(labels)])


def _pick_guesses(rng, labels, k, victim_label, distinct, group_of):
    order = rng.permutation(len(labels))
    if not distinct:
        return order[:k]
    groups = group_of(labels)
    used = set() if victim_label is None else {int(group_of([victim_label])[0])}
    picked = []
    for i in order:
        g = int(groups[i])
        if g in used:
            continue
        used.add(g)
        picked.append(i)
        if len(picked) == k:
            return np.array(picked)
    raise ValueError("guess set cannot satisfy the distinct-label policy for this victim")

"""Datasets, labeled-subset selection and label-space remapping.

Images are kept as ``(N, H, W, C)`` float32 arrays in ``[0, 1]``. The labels of
the unlabeled split are kept in a :class:`SealedLabels` wrapper so training
code cannot read them by accident; every read is logged with its purpose.
"""

from __future__ import annotations

import csv
import gzip
import pickle
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import imageops
from .errors import ConfigError, LoadError

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
MNIST_CLASSES = tuple(str(d) for d in range(10))

# three-way grouping: mechanical / small animals / large animals
CIFAR10_SUPERCLASSES = {
    "airplane": "mechanical", "automobile": "mechanical",
    "ship": "mechanical", "truck": "mechanical",
    "bird": "small_animal", "cat": "small_animal", "frog": "small_animal",
    "deer": "large_animal", "dog": "large_animal", "horse": "large_animal",
}

UNSEAL_PURPOSES = ("evaluation", "attack-simulation", "labeling")


@dataclass(frozen=True)
class ImageSample:
    pixels: np.ndarray
    label: int | None = None
    id: str = ""

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or min(p.shape) <= 0 or p.shape[2] not in (1, 3):
            raise ValueError(f"expected HxWxC image with C in (1, 3), got shape {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError(f"pixel values of {self.id!r} outside [0, 1]")


@dataclass(frozen=True)
class LabelSpace:
    classes: tuple[str, ...]
    grouping: Mapping[str, str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        if self.grouping is not None:
            missing = [c for c in self.classes if c not in self.grouping]
            if missing:
                raise ValueError(f"grouping does not cover classes {missing}")

    def __len__(self):
        return len(self.classes)

    def group_ids(self) -> np.ndarray | None:
        """Superclass index of every class id, or None without a grouping."""
        if self.grouping is None:
            return None
        groups = list(dict.fromkeys(self.grouping[c] for c in self.classes))
        return np.array([groups.index(self.grouping[c]) for c in self.classes])


class SealedLabels:
    """Ground-truth labels that exist for evaluation only.

    ``reveal`` returns the labels and appends ``purpose`` to ``audit``, so tests
    can assert that a training run touched them for evaluation and nothing else.
    """

    def __init__(self, labels):
        labels = np.array(labels, dtype=np.int64)
        labels.setflags(write=False)
        self._labels = labels
        self.audit: list[str] = []

    def __len__(self):
        return len(self._labels)

    def __repr__(self):
        return f"SealedLabels(n={len(self._labels)})"

    def reveal(self, purpose: str) -> np.ndarray:
        if purpose not in UNSEAL_PURPOSES:
            raise PermissionError(f"hidden labels cannot be read for {purpose!r}")
        self.audit.append(purpose)
        return self._labels

    def _take(self, idx):
        return SealedLabels(self._labels[idx])


def _readonly(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Split:
    """A set of images with ids and either visible or sealed labels."""

    images: np.ndarray
    ids: np.ndarray
    labels: np.ndarray | None = None
    hidden: SealedLabels | None = field(default=None, compare=False)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        if images.ndim != 4:
            raise ValueError(f"images must be NxHxWxC, got {images.shape}")
        object.__setattr__(self, "images", _readonly(images))
        object.__setattr__(self, "ids", _readonly(np.asarray(self.ids, dtype=str)))
        if len(self.ids) != len(images):
            raise ValueError("ids and images differ in length")
        if self.labels is not None:
            labels = _readonly(np.asarray(self.labels, dtype=np.int64))
            if len(labels) != len(images):
                raise ValueError("labels and images differ in length")
            object.__setattr__(self, "labels", labels)
        if self.hidden is not None and len(self.hidden) != len(images):
            raise ValueError("hidden labels and images differ in length")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def sample(self, i) -> ImageSample:
        label = None if self.labels is None else int(self.labels[i])
        return ImageSample(self.images[i], label, str(self.ids[i]))

    def __iter__(self) -> Iterator[ImageSample]:
        return (self.sample(i) for i in range(len(self)))

    def take(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split(
            self.images[idx],
            self.ids[idx],
            None if self.labels is None else self.labels[idx],
            None if self.hidden is None else self.hidden._take(idx),
        )

    def index_of(self) -> dict[str, int]:
        return {str(s): i for i, s in enumerate(self.ids)}

    @classmethod
    def empty(cls, shape, labeled=True):
        return cls(np.zeros((0, *shape), np.float32), np.zeros(0, str),
                   np.zeros(0, np.int64) if labeled else None)

    @classmethod
    def from_samples(cls, samples: Sequence[ImageSample], sealed=False):
        images = np.stack([s.pixels for s in samples]).astype(np.float32)
        ids = [s.id for s in samples]
        labels = [s.label for s in samples]
        if sealed:
            return cls(images, ids, None, SealedLabels(labels))
        return cls(images, ids, labels)


def concat_splits(splits: Sequence[Split]) -> Split:
    splits = [s for s in splits if len(s)]
    images = np.concatenate([s.images for s in splits])
    ids = np.concatenate([s.ids for s in splits])
    if all(s.labels is not None for s in splits):
        return Split(images, ids, np.concatenate([s.labels for s in splits]))
    labels = np.concatenate([s.labels if s.labels is not None else s.hidden._labels for s in splits])
    return Split(images, ids, None, SealedLabels(labels))


@dataclass(frozen=True)
class DatasetBundle:
    labeled: Split
    unlabeled: Split
    test: Split
    label_space: LabelSpace
    name: str = ""

    def __post_init__(self):
        if self.unlabeled.labels is not None:
            raise ValueError("unlabeled split must not carry visible labels")

    @property
    def num_classes(self):
        return len(self.label_space)

    @property
    def image_shape(self):
        for split in (self.labeled, self.unlabeled, self.test):
            if len(split):
                return split.shape
        return self.unlabeled.shape

    def with_unlabeled(self, unlabeled: Split) -> "DatasetBundle":
        return replace(self, unlabeled=unlabeled)


# --------------------------------------------------------------------- loaders

_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def _find(root: Path, name: str):
    for cand in (root / name, root / (name + ".gz"), root / "raw" / name, root / "raw" / (name + ".gz")):
        if cand.exists():
            return cand
    return None


def read_idx(path) -> np.ndarray:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            data = f.read()
        zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
        if zero != 0 or dtype_code != 0x08:
            raise ValueError("bad magic")
        dims = struct.unpack(">" + "I" * ndim, data[4:4 + 4 * ndim])
        arr = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
        return arr.reshape(dims)
    except (OSError, ValueError, struct.error, EOFError) as exc:
        raise LoadError(f"corrupt IDX file {path}: {exc}") from exc


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def _load_mnist(root: Path) -> DatasetBundle:
    found = {k: _find(root, v) for k, v in _MNIST_FILES.items()}
    missing = [_MNIST_FILES[k] for k, v in found.items() if v is None]
    if missing:
        raise LoadError(f"MNIST root {root} is missing {', '.join(missing)} (optionally .gz)")
    splits = {}
    for part in ("train", "test"):
        imgs = read_idx(found[f"{part}_images"])
        labels = read_idx(found[f"{part}_labels"])
        if imgs.ndim != 3 or labels.ndim != 1 or len(imgs) != len(labels):
            raise LoadError(f"inconsistent MNIST {part} files in {root}")
        ids = np.array([f"{part}-{i:05d}" for i in range(len(imgs))])
        splits[part] = (imgs[..., None].astype(np.float32) / 255.0, labels.astype(np.int64), ids)
    return _bundle(splits, LabelSpace(MNIST_CLASSES), "mnist")


def _load_cifar10(root: Path) -> DatasetBundle:
    base = root / "cifar-10-batches-py" if (root / "cifar-10-batches-py").is_dir() else root
    names = [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]
    missing = [n for n in names if not (base / n).exists()]
    if missing:
        raise LoadError(f"CIFAR-10 root {base} is missing {', '.join(missing)}")

    def read(name):
        path = base / name
        try:
            with open(path, "rb") as f:
                d = pickle.load(f, encoding="bytes")
            data = np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
            return data, np.asarray(d[b"labels"], dtype=np.int64)
        except (OSError, KeyError, ValueError, pickle.UnpicklingError, EOFError) as exc:
            raise LoadError(f"corrupt CIFAR-10 batch {path}: {exc}") from exc

    parts = [read(n) for n in names[:5]]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = read("test_batch")
    splits = {
        "train": (train_x.astype(np.float32) / 255.0, train_y, np.array([f"train-{i:05d}" for i in range(len(train_x))])),
        "test": (test_x.astype(np.float32) / 255.0, test_y, np.array([f"test-{i:05d}" for i in range(len(test_x))])),
    }
    return _bundle(splits, LabelSpace(CIFAR10_CLASSES, CIFAR10_SUPERCLASSES), "cifar10")


def _read_manifest(path: Path):
    rows = []
    try:
        with open(path, newline="", encoding="utf-8") as f:
            for lineno, row in enumerate(csv.reader(f), 1):
                if not row:
                    continue
                if len(row) != 2:
                    raise LoadError(f"{path}:{lineno}: expected 'id,label'")
                rows.append((row[0].strip(), row[1].strip()))
    except UnicodeDecodeError as exc:
        raise LoadError(f"{path} is not UTF-8: {exc}") from exc
    if rows and rows[0] == ("id", "label"):
        rows = rows[1:]
    return rows


def _load_folder_part(root: Path, classes=None):
    manifest = root / "labels.csv"
    if not manifest.exists() or not (root / "images").is_dir():
        raise LoadError(f"folder dataset {root} needs images/<id>.png and labels.csv")
    rows = _read_manifest(manifest)
    images = []
    for sid, _ in rows:
        path = root / "images" / f"{sid}.png"
        if not path.exists():
            raise LoadError(f"missing image {path}")
        try:
            images.append(imageops.load_png(path))
        except OSError as exc:
            raise LoadError(f"corrupt image {path}: {exc}") from exc
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise LoadError(f"images under {root} have mixed shapes {sorted(shapes)}")
    names = [lab for _, lab in rows]
    if classes is None:
        classes = sorted(set(names))
    unknown = sorted(set(names) - set(classes))
    if unknown:
        raise LoadError(f"{manifest} uses labels {unknown} absent from the train manifest")
    labels = np.array([classes.index(n) for n in names], dtype=np.int64)
    return np.stack(images) if images else np.zeros((0, 1, 1, 1), np.float32), labels, np.array([r[0] for r in rows]), classes


def _load_folder(root: Path) -> DatasetBundle:
    x, y, ids, classes = _load_folder_part(root)
    splits = {"train": (x, y, ids)}
    if (root / "test").is_dir():
        tx, ty, tids, _ = _load_folder_part(root / "test", classes)
        splits["test"] = (tx, ty, tids)
    else:
        splits["test"] = (np.zeros((0, *x.shape[1:]), np.float32), np.zeros(0, np.int64), np.zeros(0, str))
    return _bundle(splits, LabelSpace(classes), root.name)


def _bundle(splits, label_space, name):
    tx, ty, tids = splits["train"]
    sx, sy, sids = splits["test"]
    shape = tx.shape[1:]
    return DatasetBundle(
        labeled=Split.empty(shape),
        unlabeled=Split(tx, tids, None, SealedLabels(ty)),
        test=Split(sx, sids, sy),
        label_space=label_space,
        name=name,
    )


LOADERS = {"mnist": _load_mnist, "cifar10": _load_cifar10, "folder": _load_folder}


def load_dataset(name: str, root) -> DatasetBundle:
    """Load a dataset. The whole train pool starts out unlabeled.

    Supported ids: ``mnist`` (IDX archives), ``cifar10`` (python pickle
    batches) and ``folder`` (``images/<id>.png`` plus ``labels.csv``, with an
    optional ``test/`` directory of the same layout).
    """
    if name not in LOADERS:
        raise ConfigError(f"unknown dataset id {name!r}; choose from {sorted(LOADERS)}")
    root = Path(root)
    if not root.is_dir():
        raise LoadError(f"dataset root {root} does not exist")
    return LOADERS[name](root)


def save_folder_dataset(split: Split, label_space: LabelSpace, root, labels=None):
    """Write a split in the ``folder`` layout; ``labels`` overrides split labels."""
    root = Path(root)
    labels = split.labels if labels is None else labels
    if labels is None:
        raise ValueError("a folder dataset needs labels")
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="", encoding="utf-8") as f:
        for sid, img, lab in zip(split.ids, split.images, labels):
            imageops.save_png(img, root / "images" / f"{sid}.png")
            f.write(f"{sid},{label_space.classes[int(lab)]}\n")


def write_mnist_subset(dest, test_per_class=100, seed=0):
    """Write the 5000-digit MNIST subset bundled with mlxtend as IDX archives.

    The digits are split per class into train and test parts, so the result
    loads with ``load_dataset("mnist", dest)``.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    rng = np.random.default_rng(seed)
    test_idx = np.concatenate([
        rng.choice(np.flatnonzero(y == c), test_per_class, replace=False) for c in np.unique(y)
    ])
    train_mask = np.ones(len(y), bool)
    train_mask[test_idx] = False
    train_idx = rng.permutation(np.flatnonzero(train_mask))
    test_idx = rng.permutation(test_idx)
    images = x.reshape(-1, 28, 28).astype(np.uint8)
    dest = Path(dest)
    write_idx(dest / "train-images-idx3-ubyte.gz", images[train_idx])
    write_idx(dest / "train-labels-idx1-ubyte.gz", y[train_idx])
    write_idx(dest / "t10k-images-idx3-ubyte.gz", images[test_idx])
    write_idx(dest / "t10k-labels-idx1-ubyte.gz", y[test_idx])
    return dest


# ------------------------------------------------------------------ operations

def _pool(bundle: DatasetBundle):
    parts = [bundle.labeled, bundle.unlabeled]
    pool = concat_splits(parts)
    labels = pool.hidden._labels if pool.hidden is not None else pool.labels
    return pool, labels


def select_labeled(bundle: DatasetBundle, n: int, seed: int, stratified: bool = True,
                   max_labeled_fraction: float | None = 0.1) -> DatasetBundle:
    """Draw ``n`` labeled samples from the train pool; the rest become unlabeled.

    The pool is the bundle's current labeled plus unlabeled samples. In
    stratified mode the labeled set is spread evenly over classes (leftover
    slots go to randomly chosen classes). ``max_labeled_fraction`` bounds
    ``n / |U|``; pass None to disable.
    """
    pool, labels = _pool(bundle)
    if n < 0 or n > len(pool):
        raise ValueError(f"cannot select {n} labeled samples from a pool of {len(pool)}")
    n_classes = bundle.num_classes
    if max_labeled_fraction is not None and n > max_labeled_fraction * (len(pool) - n):
        raise ValueError(
            f"{n} labeled samples exceed {max_labeled_fraction:.0%} of the {len(pool) - n} unlabeled ones"
        )
    rng = np.random.default_rng(seed)
    if stratified:
        if n < n_classes:
            raise ValueError(f"stratified selection needs n >= {n_classes} classes, got {n}")
        counts = np.full(n_classes, n // n_classes)
        counts[rng.choice(n_classes, n % n_classes, replace=False)] += 1
        chosen = []
        for c in range(n_classes):
            members = np.flatnonzero(labels == c)
            if len(members) < counts[c]:
                raise ValueError(f"class {bundle.label_space.classes[c]!r} has only {len(members)} samples")
            chosen.append(rng.choice(members, counts[c], replace=False))
        chosen = np.sort(np.concatenate(chosen))
    else:
        chosen = np.sort(rng.choice(len(pool), n, replace=False))
    rest = np.setdiff1d(np.arange(len(pool)), chosen)
    if pool.hidden is not None:
        pool.hidden.reveal("labeling")
    labeled = Split(pool.images[chosen], pool.ids[chosen], labels[chosen])
    unlabeled = Split(pool.images[rest], pool.ids[rest], None, SealedLabels(labels[rest]))
    return replace(bundle, labeled=labeled, unlabeled=unlabeled)


def map_labels(bundle: DatasetBundle, grouping: Mapping[str, str]) -> DatasetBundle:
    """Remap every label (visible and sealed) onto superclasses."""
    classes = bundle.label_space.classes
    missing = [c for c in classes if c not in grouping]
    if missing:
        raise ConfigError(f"grouping does not cover class(es) {', '.join(map(repr, missing))}")
    supers = tuple(dict.fromkeys(grouping[c] for c in classes))
    lut = np.array([supers.index(grouping[c]) for c in classes], dtype=np.int64)

    def remap(split: Split) -> Split:
        labels = None if split.labels is None else lut[split.labels]
        hidden = None if split.hidden is None else SealedLabels(lut[split.hidden._labels])
        return Split(split.images, split.ids, labels, hidden)

    return replace(
        bundle,
        labeled=remap(bundle.labeled),
        unlabeled=remap(bundle.unlabeled),
        test=remap(bundle.test),
        label_space=LabelSpace(supers),
    )

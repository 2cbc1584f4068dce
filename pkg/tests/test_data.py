import pickle

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sslpoison.data import (
    CIFAR10_CLASSES, CIFAR10_SUPERCLASSES, DatasetBundle, ImageSample, LabelSpace, SealedLabels, Split,
    load_dataset, map_labels, save_folder_dataset, select_labeled, write_idx,
)
from sslpoison.errors import ConfigError, LoadError

from conftest import make_bundle


def _write_fake_mnist(root, n_train, n_test, seed=0):
    rng = np.random.default_rng(seed)
    write_idx(root / "train-images-idx3-ubyte.gz", rng.integers(0, 256, (n_train, 28, 28)))
    write_idx(root / "train-labels-idx1-ubyte.gz", np.arange(n_train) % 10)
    write_idx(root / "t10k-images-idx3-ubyte.gz", rng.integers(0, 256, (n_test, 28, 28)))
    write_idx(root / "t10k-labels-idx1-ubyte.gz", np.arange(n_test) % 10)


def _write_fake_cifar(root, per_batch, n_test):
    base = root / "cifar-10-batches-py"
    base.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for name, n in [(f"data_batch_{i}", per_batch) for i in range(1, 6)] + [("test_batch", n_test)]:
        d = {b"data": rng.integers(0, 256, (n, 3072), dtype=np.uint8), b"labels": list(np.arange(n) % 10)}
        with open(base / name, "wb") as f:
            pickle.dump(d, f)


def test_mnist_full_size_layout(tmp_path):
    _write_fake_mnist(tmp_path, 60000, 10000)
    b = load_dataset("mnist", tmp_path)
    assert len(b.unlabeled) == 60000 and len(b.test) == 10000
    assert b.image_shape == (28, 28, 1)
    assert len(b.labeled) == 0
    assert b.unlabeled.images.min() >= 0 and b.unlabeled.images.max() <= 1


def test_cifar_full_size_layout(tmp_path):
    _write_fake_cifar(tmp_path, 10000, 10000)
    b = load_dataset("cifar10", tmp_path)
    assert len(b.unlabeled) == 50000 and len(b.test) == 10000
    assert b.image_shape == (32, 32, 3)
    assert b.label_space.classes == CIFAR10_CLASSES


def test_cifar_pixel_order(tmp_path):
    _write_fake_cifar(tmp_path, 2, 2)
    with open(tmp_path / "cifar-10-batches-py" / "data_batch_1", "rb") as f:
        raw = pickle.load(f)[b"data"][0]
    b = load_dataset("cifar10", tmp_path)
    img = b.unlabeled.images[0]
    # row-major planes R, G, B
    assert img[0, 1, 0] == pytest.approx(raw[1] / 255)
    assert img[2, 0, 1] == pytest.approx(raw[1024 + 64] / 255)


def test_empty_dir_lists_expected_files(tmp_path):
    with pytest.raises(LoadError, match="train-images-idx3-ubyte"):
        load_dataset("mnist", tmp_path)


def test_unknown_dataset_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset("imagenet-1k", tmp_path)


def test_missing_root(tmp_path):
    with pytest.raises(LoadError, match="does not exist"):
        load_dataset("mnist", tmp_path / "nope")


def test_corrupt_idx_names_path(tmp_path):
    _write_fake_mnist(tmp_path, 20, 10)
    (tmp_path / "t10k-labels-idx1-ubyte.gz").write_bytes(b"garbage")
    with pytest.raises(LoadError, match="t10k-labels"):
        load_dataset("mnist", tmp_path)


def test_folder_roundtrip(tmp_path):
    b = make_bundle(n_unlabeled=12, n_classes=3, n_labeled=3, shape=(6, 5, 3))
    labels = b.unlabeled.hidden._labels
    save_folder_dataset(b.unlabeled, b.label_space, tmp_path / "ds", labels=labels)
    back = load_dataset("folder", tmp_path / "ds")
    assert back.unlabeled.ids.tolist() == b.unlabeled.ids.tolist()
    # PNG stores 8 bits
    assert np.abs(back.unlabeled.images - b.unlabeled.images).max() <= 0.5 / 255 + 1e-6
    names = [b.label_space.classes[i] for i in labels]
    assert [back.label_space.classes[i] for i in back.unlabeled.hidden._labels] == names


def test_folder_missing_manifest(tmp_path):
    (tmp_path / "images").mkdir()
    with pytest.raises(LoadError, match="labels.csv"):
        load_dataset("folder", tmp_path)


def test_image_sample_validation():
    ImageSample(np.zeros((2, 2, 1)), 0, "a")
    with pytest.raises(ValueError):
        ImageSample(np.full((2, 2, 1), 1.5))
    with pytest.raises(ValueError):
        ImageSample(np.zeros((2, 2, 2)))


def test_label_space_unique():
    with pytest.raises(ValueError):
        LabelSpace(("a", "a"))


def test_sealed_labels_audit():
    s = SealedLabels([1, 2])
    s.reveal("evaluation")
    with pytest.raises(PermissionError):
        s.reveal("training")
    assert s.audit == ["evaluation"]


def test_unlabeled_split_cannot_show_labels(toy_bundle):
    with pytest.raises(ValueError):
        DatasetBundle(toy_bundle.labeled, toy_bundle.labeled, toy_bundle.test, toy_bundle.label_space)


def test_select_labeled_counts(tmp_path):
    _write_fake_mnist(tmp_path, 400, 10)
    b = load_dataset("mnist", tmp_path)
    sel = select_labeled(b, 10, seed=7)
    assert len(sel.labeled) == 10 and len(sel.unlabeled) == 390
    assert sorted(sel.labeled.labels.tolist()) == list(range(10))
    again = select_labeled(b, 10, seed=7)
    assert sel.labeled.ids.tolist() == again.labeled.ids.tolist()
    assert sel.unlabeled.labels is None and sel.unlabeled.hidden is not None


def test_select_labeled_cifar_sized_pool():
    b = make_bundle(n_unlabeled=49960, n_labeled=40, n_classes=10, n_test=0, shape=(2, 2, 1))
    sel = select_labeled(b, 40, seed=1)
    assert len(sel.labeled) == 40 and len(sel.unlabeled) == 49960


def test_select_labeled_too_many(toy_bundle):
    with pytest.raises(ValueError):
        select_labeled(toy_bundle, 10_000, seed=0)


def test_select_labeled_fraction_cap(toy_bundle):
    with pytest.raises(ValueError, match="exceed"):
        select_labeled(toy_bundle, 100, seed=0)
    assert len(select_labeled(toy_bundle, 100, seed=0, max_labeled_fraction=None).labeled) == 100


@settings(max_examples=25, deadline=None)
@given(n=st.integers(4, 20), seed=st.integers(0, 10_000), stratified=st.booleans())
def test_select_labeled_is_partition(n, seed, stratified):
    b = make_bundle(n_unlabeled=150, n_labeled=6, n_classes=4, n_test=0, shape=(2, 2, 1), seed=3)
    pool = set(b.labeled.ids.tolist()) | set(b.unlabeled.ids.tolist())
    sel = select_labeled(b, n, seed, stratified=stratified, max_labeled_fraction=None)
    lab, unl = set(sel.labeled.ids.tolist()), set(sel.unlabeled.ids.tolist())
    assert len(lab) == n
    assert not lab & unl
    assert lab | unl == pool


def test_map_labels_superclasses(tmp_path):
    _write_fake_cifar(tmp_path, 40, 10)
    b = select_labeled(load_dataset("cifar10", tmp_path), 10, seed=0)
    m = map_labels(b, CIFAR10_SUPERCLASSES)
    assert m.label_space.classes == ("mechanical", "small_animal", "large_animal")
    # airplane -> mechanical, cat -> small_animal, dog -> large_animal
    lut = {0: 0, 3: 1, 5: 2}
    for fine, coarse in zip(b.test.labels, m.test.labels):
        if fine in lut:
            assert coarse == lut[fine]
    assert np.array_equal(m.unlabeled.images, b.unlabeled.images)
    assert len(m.unlabeled) == len(b.unlabeled)


def test_map_labels_identity(toy_bundle):
    ident = {c: c for c in toy_bundle.label_space.classes}
    m = map_labels(toy_bundle, ident)
    assert np.array_equal(m.labeled.labels, toy_bundle.labeled.labels)
    assert np.array_equal(m.unlabeled.hidden._labels, toy_bundle.unlabeled.hidden._labels)


def test_map_labels_names_missing_class(toy_bundle):
    grouping = {c: "x" for c in toy_bundle.label_space.classes[1:]}
    with pytest.raises(ConfigError, match="'c0'"):
        map_labels(toy_bundle, grouping)


def test_split_take_and_index(toy_bundle):
    sub = toy_bundle.unlabeled.take([3, 1])
    assert sub.ids.tolist() == [toy_bundle.unlabeled.ids[3], toy_bundle.unlabeled.ids[1]]
    assert toy_bundle.unlabeled.index_of()[toy_bundle.unlabeled.ids[5]] == 5
    assert isinstance(Split.empty((4, 4, 1)), Split)

from pathlib import Path

import numpy as np
import pytest

from sslpoison.data import DatasetBundle, LabelSpace, SealedLabels, Split

ROOT = Path(__file__).resolve().parents[1]
MNIST5K = ROOT / "data" / "mnist5k"


def make_bundle(n_unlabeled=200, n_classes=4, n_labeled=8, n_test=40, shape=(8, 8, 1), seed=0):
    """Random images whose mean intensity encodes the class, so tiny models can learn it."""
    rng = np.random.default_rng(seed)

    def part(n, prefix):
        y = rng.integers(0, n_classes, n) if n else np.zeros(0, np.int64)
        base = (y[:, None, None, None] + 0.5) / n_classes
        x = np.clip(base + rng.normal(0, 0.05, (n, *shape)), 0, 1).astype(np.float32)
        return x, np.array([f"{prefix}-{i:04d}" for i in range(n)]), y.astype(np.int64)

    lx, lids, ly = part(n_labeled, "lab")
    # make sure every class shows up in the labeled set
    ly[:n_classes] = np.arange(min(n_classes, n_labeled))
    lx[:n_classes] = np.clip((ly[:n_classes, None, None, None] + 0.5) / n_classes
                            + np.zeros((1, *shape)), 0, 1)
    ux, uids, uy = part(n_unlabeled, "unl")
    tx, tids, ty = part(n_test, "tst")
    return DatasetBundle(
        Split(lx, lids, ly),
        Split(ux, uids, None, SealedLabels(uy)),
        Split(tx, tids, ty),
        LabelSpace(tuple(f"c{i}" for i in range(n_classes))),
        "toy",
    )


@pytest.fixture
def toy_bundle():
    return make_bundle()


@pytest.fixture(scope="session")
def mnist5k():
    if not (MNIST5K / "train-images-idx3-ubyte.gz").exists():
        pytest.importorskip("mlxtend", reason="data/mnist5k missing and mlxtend unavailable to build it")
        from sslpoison.data import write_mnist_subset

        write_mnist_subset(MNIST5K)
    return MNIST5K


@pytest.fixture(scope="session")
def toy_folder(tmp_path_factory):
    """Folder-layout dataset: 160 train and 40 test 8x8 images in 4 classes."""
    from sslpoison.data import save_folder_dataset

    root = tmp_path_factory.mktemp("toyds")
    b = make_bundle(n_unlabeled=160, n_classes=4, n_labeled=0, n_test=40, seed=5)
    save_folder_dataset(b.unlabeled, b.label_space, root, labels=b.unlabeled.hidden._labels)
    save_folder_dataset(b.test, b.label_space, root / "test")
    return root


def tiny_config(root, out_dir, **kw):
    d = {
        "dataset": "folder", "data_root": str(root), "labeled": 8, "seed": 0,
        "schedule": {"epochs": 2, "steps_per_epoch": 2, "batch_labeled": 8, "batch_unlabeled": 8},
        "model": {"backbone": "small-cnn", "width": 4}, "save_images": 2, "out_dir": str(out_dir),
    }
    d.update(kw)
    return d


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])

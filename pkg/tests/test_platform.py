import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sslpoison import platform as P


def imgs(n, shape=(8, 6, 3), seed=0):
    return np.random.default_rng(seed).random((n, *shape)).astype(np.float32)


@settings(max_examples=100, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), c=st.sampled_from([1, 3]), rows=st.integers(1, 4),
       cols=st.integers(1, 4), fill=st.floats(0, 1), square=st.booleans(), data=st.data())
def test_stack_unstack_bit_identical(h, w, c, rows, cols, fill, square, data):
    n = data.draw(st.integers(1, rows * cols))
    x = imgs(n, (h, w, c), seed=h * w + n)
    canvas, layout = P.stack_images(x, rows, cols, fill, square)
    if square:
        assert canvas.shape[0] == canvas.shape[1]
    assert np.array_equal(P.unstack(canvas, layout), x)


def test_stack_padding_is_black_and_centered():
    canvas, layout = P.stack_images(np.ones((2, 4, 4, 1)), 1, 2, 0.0, square=True)
    assert canvas.shape == (8, 8, 1)
    assert layout.pad_top == 2 and layout.pad_left == 0
    assert canvas[:2].max() == 0 and canvas[6:].max() == 0


def test_stack_errors():
    with pytest.raises(ValueError):
        P.stack_images(imgs(5), 2, 2)
    with pytest.raises(ValueError):
        P.stack_images([np.zeros((2, 2, 1)), np.zeros((3, 2, 1))], 1, 2)
    canvas, layout = P.stack_images(imgs(2), 1, 2)
    with pytest.raises(ValueError):
        P.unstack(canvas[:-1], layout)


def test_unstack_empty():
    layout = P.Layout(1, 1, 4, 4, 3, 0)
    assert P.unstack(np.zeros((4, 4, 3)), layout).shape == (0, 4, 4, 3)


def test_identity_profile_is_lossless():
    x = imgs(7)
    assert np.array_equal(P.platform_roundtrip(x, "identity"), x)


def test_layout_dict_roundtrip():
    _, layout = P.stack_images(imgs(3), 2, 2, square=True)
    layout.ids = ["a", "b", "c"]
    assert P.Layout.from_dict(json.loads(json.dumps(layout.to_dict()))) == layout


@pytest.mark.parametrize("name", ["instagram", "facebook", "pinterest"])
def test_lossy_profiles_keep_shape_and_stay_close(name):
    rng = np.random.default_rng(0)
    # smooth images: JPEG and resampling should change little
    base = np.linspace(0, 1, 28)[None, :, None] * np.ones((28, 28, 1))
    x = np.stack([np.clip(base * rng.uniform(0.5, 1), 0, 1) for _ in range(30)]).astype(np.float32)
    y = P.platform_roundtrip(x, name)
    assert y.shape == x.shape and y.dtype == np.float32
    assert np.abs(y - x).mean() < 0.05
    assert not np.array_equal(y, x)


def test_unknown_profile():
    with pytest.raises(ValueError, match="instagram"):
        P.get_profile("myspace")
    with pytest.raises(ValueError):
        P.PlatformProfile("x", jpeg_quality=0)


def test_grid_for():
    assert P.grid_for(P.PROFILES["facebook"], (28, 28, 1), 100) == (1, 1)
    assert P.grid_for(P.PROFILES["instagram"], (28, 28, 1), 1000) == (21, 21)
    assert P.grid_for(P.PROFILES["instagram"], (28, 28, 1), 5) == (3, 3)


def test_file_roundtrip_two_steps(tmp_path):
    x = imgs(10, (8, 8, 1))
    ids = [f"u{i}" for i in range(10)]
    prof = P.PlatformProfile("lossless-square", target_size=None, enforce_square=True, jpeg_quality=None)
    side = P.export_canvases(x, prof, tmp_path / "out", ids)
    back, back_ids = P.import_canvases(side)
    assert back_ids == ids
    # PNG holds 8 bits per channel
    assert np.abs(back - x).max() <= 0.5 / 255 + 1e-6
    up = P.simulate_upload_dir(tmp_path / "out", "instagram", tmp_path / "up")
    y, y_ids = P.import_canvases(up)
    assert y_ids == ids and y.shape == x.shape

import numpy as np
import pytest
import torch
import torch.nn as nn

from sslpoison.models import ModelSpec, build_model
from sslpoison.saliency import attention_share, conv_layers, gradcam


class LeftHalf(nn.Module):
    """Logit 0 reads only the left half of the conv map."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(1, 1, 1, bias=False)
        nn.init.ones_(self.conv.weight)

    def forward(self, x):
        a = self.conv(x)
        left = a[..., : a.shape[-1] // 2].mean((1, 2, 3))
        return torch.stack([left, -left], 1)


def test_gradcam_locates_evidence():
    x = np.zeros((8, 8, 1), np.float32)
    x[:, :4] = 1.0
    x[2:4, 6] = 1.0  # bright but ignored by the target logit
    cam = gradcam(LeftHalf(), x, target=0)
    assert cam.shape == (8, 8)
    assert attention_share(cam, slice(0, 4)) > 0.8


def test_gradcam_range_and_default_layer():
    torch.manual_seed(0)
    m = build_model(ModelSpec("small-cnn", (16, 16, 3), 4, width=4))
    cam = gradcam(m, np.random.default_rng(0).random((16, 16, 3)))
    assert cam.shape == (16, 16)
    assert cam.min() >= 0 and cam.max() <= 1
    name = sorted(conv_layers(m))[0]
    assert gradcam(m, np.zeros((16, 16, 3)), name).shape == (16, 16)


def test_gradcam_rejects_non_conv():
    m = build_model(ModelSpec("small-cnn", (16, 16, 3), 4, width=4))
    with pytest.raises(ValueError, match="not a conv"):
        gradcam(m, np.zeros((16, 16, 3)), "head")
    with pytest.raises(ValueError, match="no layer"):
        gradcam(m, np.zeros((16, 16, 3)), "nope")
    with pytest.raises(ValueError):
        gradcam(m, np.zeros((16, 16, 3)), m.head)


def test_flat_map_is_zero():
    assert attention_share(np.zeros((4, 4)), slice(0, 2)) == 0.0

"""GradCAM saliency maps."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import to_tensor


def conv_layers(model):
    return {name: m for name, m in model.named_modules() if isinstance(m, nn.Conv2d)}


def _select(model, layer_selector):
    convs = conv_layers(model)
    if not convs:
        raise ValueError("model has no convolutional layer")
    if layer_selector in (None, "last"):
        return list(convs.values())[-1]
    if isinstance(layer_selector, nn.Module):
        if not isinstance(layer_selector, nn.Conv2d):
            raise ValueError(f"GradCAM needs a conv layer, got {type(layer_selector).__name__}")
        return layer_selector
    modules = dict(model.named_modules())
    if layer_selector not in modules:
        raise ValueError(f"no layer named {layer_selector!r}; conv layers: {sorted(convs)}")
    if layer_selector not in convs:
        raise ValueError(f"layer {layer_selector!r} is {type(modules[layer_selector]).__name__}, not a conv layer")
    return convs[layer_selector]


def gradcam(model, sample, layer_selector=None, target: int | None = None):
    """Saliency map (H, W) in [0, 1] for one HWC image.

    Channel weights are the spatially averaged gradients of the target logit
    (default: the predicted class) w.r.t. the selected conv layer's output;
    the map is the ReLU of the weighted activation sum, upsampled bilinearly
    and min-max normalized. A flat map comes back as all zeros.
    """
    layer = _select(model, layer_selector)
    store = {}

    def hook(_, __, out):
        out.retain_grad()
        store["act"] = out

    handle = layer.register_forward_hook(hook)
    was = model.training
    model.eval()
    try:
        x = to_tensor(np.ascontiguousarray(np.asarray(sample, dtype=np.float32)[None]))
        logits = model(x)
        cls = int(logits.argmax(1)) if target is None else int(target)
        model.zero_grad()
        logits[0, cls].backward()
    finally:
        handle.remove()
        model.train(was)
    act = store["act"]
    grad = act.grad if act.grad is not None else torch.zeros_like(act)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[2:], mode="bilinear", align_corners=False)[0, 0].detach()
    cam = cam.double().numpy()
    lo, hi = cam.min(), cam.max()
    if hi - lo <= 1e-12:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def attention_share(cam, columns: slice):
    """Fraction of total saliency mass inside a column range."""
    total = cam.sum()
    return float(cam[:, columns].sum() / total) if total > 0 else 0.0

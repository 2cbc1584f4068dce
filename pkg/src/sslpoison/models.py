"""Backbones: the desk-scale small CNNs, Wide-ResNet and a VGG-style detector.

Every classifier exposes ``features(x)`` (final hidden layer, used for
density scoring) and ``head`` (the linear classifier on top of it).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ModelSpec:
    backbone: str = "small-cnn"
    input_shape: tuple = (28, 28, 1)
    num_classes: int = 10
    width: int = 16

    @property
    def parameter_count(self) -> int:
        return count_parameters(build_model(self))


def count_parameters(model) -> int:
    return sum(p.numel() for p in model.parameters())


class SmallCNN(nn.Module):
    """Two conv blocks, one hidden dense layer, linear head ("small-fc-cnn").

    The flattening layer ties features to absolute positions, which makes
    the model nearly blind to shifted pattern halves; kept for comparison.
    """

    def __init__(self, in_channels, num_classes, height, width, channels=16, hidden=128):
        super().__init__()
        c1, c2 = channels, 2 * channels
        self.block1 = nn.Sequential(
            nn.Conv2d(in_channels, c1, 3, padding=1, bias=False), nn.BatchNorm2d(c1), nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(c1, c2, 3, padding=1, bias=False), nn.BatchNorm2d(c2), nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.fc = nn.Linear(c2 * (height // 4) * (width // 4), hidden)
        self.head = nn.Linear(hidden, num_classes)

    def features(self, x):
        x = self.block2(self.block1(x))
        return F.relu(self.fc(x.flatten(1)))

    def forward(self, x):
        return self.head(self.features(x))


class SmallGapCNN(nn.Module):
    """Conv stages of two 3x3 units each, global average pooling, linear head.

    Stage ``i`` has ``channels * 2**i`` filters; stages are separated by 2x2
    max pooling. This is the desk-scale "small-cnn". With two stages the
    receptive field is too small for 28 px digits.
    """

    def __init__(self, in_channels, num_classes, channels=16, stages=3):
        super().__init__()
        layers, cin = [], in_channels
        for i in range(stages):
            cout = channels * 2 ** i
            if i:
                layers.append(nn.MaxPool2d(2))
            for _ in range(2):
                layers += [nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.LeakyReLU(0.1)]
                cin = cout
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(cin, num_classes)

    def features(self, x):
        return F.adaptive_avg_pool2d(self.body(x), 1).flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


class _WideBlock(nn.Module):
    def __init__(self, cin, cout, stride, bn_momentum=0.001):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin, momentum=bn_momentum)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=True)
        self.bn2 = nn.BatchNorm2d(cout, momentum=bn_momentum)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=True)
        self.shortcut = None
        if cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride, bias=True)

    def forward(self, x):
        o = F.leaky_relu(self.bn1(x), 0.1)
        y = self.conv1(o)
        y = self.conv2(F.leaky_relu(self.bn2(y), 0.1))
        return y + (x if self.shortcut is None else self.shortcut(o))


class WideResNet(nn.Module):
    """WRN-depth-width in the layout common to SSL code bases."""

    def __init__(self, in_channels, num_classes, depth=28, widen=2):
        super().__init__()
        if (depth - 4) % 6:
            raise ValueError("WRN depth must be 6n + 4")
        n = (depth - 4) // 6
        ch = [16, 16 * widen, 32 * widen, 64 * widen]
        self.conv1 = nn.Conv2d(in_channels, ch[0], 3, padding=1, bias=True)
        layers = []
        for g in range(3):
            for i in range(n):
                cin = ch[g] if i == 0 else ch[g + 1]
                layers.append(_WideBlock(cin, ch[g + 1], (1 if g == 0 else 2) if i == 0 else 1))
        self.blocks = nn.Sequential(*layers)
        self.bn = nn.BatchNorm2d(ch[3], momentum=0.001)
        self.head = nn.Linear(ch[3], num_classes)

    def features(self, x):
        x = self.blocks(self.conv1(x))
        x = F.leaky_relu(self.bn(x), 0.1)
        return F.adaptive_avg_pool2d(x, 1).flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


class VGGDetector(nn.Module):
    """Narrow VGG-11-style binary classifier (benign vs poisoned)."""

    CFG = (1, "M", 2, "M", 4, 4, "M", 8, 8, "M", 8, 8)

    def __init__(self, in_channels, width=8):
        super().__init__()
        layers, c = [], in_channels
        for v in self.CFG:
            if v == "M":
                layers.append(nn.MaxPool2d(2, ceil_mode=True))
            else:
                layers += [nn.Conv2d(c, v * width, 3, padding=1), nn.BatchNorm2d(v * width), nn.ReLU()]
                c = v * width
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(c, 2)

    def features(self, x):
        return F.adaptive_avg_pool2d(self.body(x), 1).flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


_WRN = re.compile(r"^(?:wrn|wide-resnet)-(\d+)-(\d+)$")


def build_model(spec: ModelSpec) -> nn.Module:
    h, w, c = spec.input_shape
    if spec.backbone == "small-cnn":
        return SmallGapCNN(c, spec.num_classes, channels=spec.width)
    if spec.backbone == "small-fc-cnn":
        return SmallCNN(c, spec.num_classes, h, w, channels=spec.width)
    m = _WRN.match(spec.backbone)
    if m:
        return WideResNet(c, spec.num_classes, int(m.group(1)), int(m.group(2)))
    if spec.backbone == "vgg-detector":
        return VGGDetector(c, spec.width)
    raise ValueError(f"unknown backbone {spec.backbone!r}")


def to_tensor(images) -> torch.Tensor:
    """(N, H, W, C) float array -> (N, C, H, W) float32 tensor."""
    images = np.asarray(images, dtype=np.float32)
    if not images.flags.writeable:
        images = images.copy()
    return torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()

"""Feature extractors. Each maps ``(B, 3, H, W)`` to ``(B, C, H/stride, W/stride)``.

``tiny_cnn`` is the trainable desk-scale backbone. ``vgg16``, ``fpn`` and
``vitdet`` follow the same contract so the detector can host them, but they are
randomly initialised and sized down; no pretrained weights are shipped.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class NumericError(RuntimeError):
    """Non-finite values appeared in a forward or backward pass."""


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations in {where}")
    return x


class TinyCNN(nn.Module):
    """Four conv blocks (two 3x3 convs each), stride 8, SiLU, no normalisation.

    SiLU keeps every loss smooth in the weights, so finite differences agree
    with autograd everywhere (ReLU kinks break that at small step sizes).
    """

    stride = 8
    size_divisibility = 8

    def __init__(self, widths=(16, 32, 64, 64)):
        super().__init__()
        strides = (2, 2, 2, 1)
        blocks = []
        c_in = 3
        for w, s in zip(widths, strides):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c_in, w, 3, stride=s, padding=1),
                    nn.SiLU(),
                    nn.Conv2d(w, w, 3, padding=1),
                    nn.SiLU(),
                )
            )
            c_in = w
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = c_in

    def forward(self, x):
        for i, block in enumerate(self.blocks):
            x = check_finite(block(x), f"backbone block {i}")
        return x


class VGG16(nn.Module):
    """VGG-16 conv trunk (13 convs, last max-pool removed): stride 16.

    ``width_mult=1`` gives the original channel counts.
    """

    stride = 16
    size_divisibility = 16

    def __init__(self, width_mult: float = 0.25):
        super().__init__()
        cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]
        layers = []
        c_in = 3
        for v in cfg:
            if v == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                c = max(4, int(v * width_mult))
                layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU()]
                c_in = c
        self.features = nn.Sequential(*layers)
        self.out_channels = c_in

    def forward(self, x):
        return check_finite(self.features(x), "vgg16 trunk")


class _BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=stride) if (stride != 1 or c_in != c_out) else nn.Identity()

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))) + self.skip(x))


class FPN(nn.Module):
    """Residual stages at strides 4/8/16/32 with a top-down pyramid.

    The detector is single-level, so the merged stride-8 level is returned.
    """

    stride = 8
    size_divisibility = 32

    def __init__(self, widths=(16, 32, 64, 128), out_channels: int = 64):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, widths[0], 3, stride=2, padding=1), nn.ReLU())
        stages, c_in = [], widths[0]
        for w in widths:
            stages.append(_BasicBlock(c_in, w, 2))
            c_in = w
        self.stages = nn.ModuleList(stages)
        self.lateral = nn.ModuleList([nn.Conv2d(w, out_channels, 1) for w in widths])
        self.smooth = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.out_channels = out_channels

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        # feats strides: 4, 8, 16, 32
        top = self.lateral[3](feats[3])
        for level in (2, 1):
            top = F.interpolate(top, size=feats[level].shape[-2:], mode="nearest") + self.lateral[level](feats[level])
        return check_finite(self.smooth(top), "fpn level p3")


class ViTDet(nn.Module):
    """Plain ViT (patch 16) with a simple feature pyramid up-sampled to stride 8."""

    stride = 8
    size_divisibility = 16

    def __init__(self, dim: int = 64, depth: int = 2, heads: int = 4, out_channels: int = 64, max_tokens: int = 1024):
        super().__init__()
        self.patch = nn.Conv2d(3, dim, 16, stride=16)
        self.pos = nn.Parameter(torch.zeros(1, max_tokens, dim))
        layer = nn.TransformerEncoderLayer(dim, heads, dim * 2, dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.up = nn.ConvTranspose2d(dim, out_channels, 2, stride=2)
        self.out_channels = out_channels

    def forward(self, x):
        t = self.patch(x)
        b, c, h, w = t.shape
        tokens = t.flatten(2).transpose(1, 2)
        if tokens.shape[1] > self.pos.shape[1]:
            raise ValueError(f"input yields {tokens.shape[1]} tokens, more than max_tokens={self.pos.shape[1]}")
        tokens = self.encoder(tokens + self.pos[:, : tokens.shape[1]])
        t = tokens.transpose(1, 2).reshape(b, c, h, w)
        return check_finite(self.up(t), "vitdet pyramid")


BACKBONES = {"tiny_cnn": TinyCNN, "vgg16": VGG16, "fpn": FPN, "vitdet": ViTDet}


def build_backbone(kind: str) -> nn.Module:
    try:
        return BACKBONES[kind]()
    except KeyError:
        raise ValueError(f"unknown backbone {kind!r}; choose from {sorted(BACKBONES)}") from None

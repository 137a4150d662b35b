"""Optional domain-adversarial feature alignment (gradient reversal + discriminator).

Disabled by default. When disabled the alignment loss is a constant zero with
no autograd graph, so it cannot influence training.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.autograd import Function

ALIGN_METHODS = ("adversarial", "image_to_image")


class GradReverse(Function):
    """Identity forward; backward multiplies the incoming gradient by ``-lambda``."""

    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lam, None


def grad_reverse(x: torch.Tensor, lam: float) -> torch.Tensor:
    return GradReverse.apply(x, lam)


class Discriminator(nn.Module):
    """Two 3x3 convs, global average pool, linear -> one domain logit per image."""

    def __init__(self, in_channels: int, hidden: int = 64, seed: int = 0):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.fc = nn.Linear(hidden, 1)
        g = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for m in (self.conv1, self.conv2, self.fc):
                fan_in = m.weight[0].numel()
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=g)
                m.bias.zero_()

    def forward(self, x):
        x = F.silu(self.conv1(x))
        x = F.silu(self.conv2(x))
        return self.fc(x.mean(dim=(2, 3))).squeeze(1)


class AlignState(nn.Module):
    def __init__(self, in_channels: int, enabled: bool = False, grl_lambda: float = 1.0, method: str = "adversarial", seed: int = 0):
        super().__init__()
        if method not in ALIGN_METHODS:
            raise ValueError(f"unknown alignment method {method!r}")
        if method == "image_to_image":
            raise NotImplementedError("image-to-image alignment is not implemented; use 'adversarial'")
        if enabled and grl_lambda < 0:
            raise ValueError(f"align.grl_lambda must be >= 0, got {grl_lambda}")
        self.enabled = bool(enabled)
        self.grl_lambda = float(grl_lambda)
        self.discriminator = Discriminator(in_channels, seed=seed)


def align_loss(features_src: torch.Tensor, features_tgt: torch.Tensor, state: AlignState, reverse: bool = True) -> torch.Tensor:
    """Binary cross-entropy of the discriminator on domain labels (source 0, target 1).

    Features pass through gradient reversal first, so the backbone is pushed
    towards features the discriminator cannot separate. ``reverse=False`` skips
    the reversal (used to check the reversal identity).
    """
    if not state.enabled:
        return features_src.new_zeros(())
    if state.grl_lambda < 0:
        raise ValueError(f"align.grl_lambda must be >= 0, got {state.grl_lambda}")
    if features_src.shape[1:2] != features_tgt.shape[1:2]:
        raise ValueError("source and target features must have the same channel count")
    feats = [features_src, features_tgt]
    if reverse:
        feats = [grad_reverse(f, state.grl_lambda) for f in feats]
    logits = torch.cat([state.discriminator(f) for f in feats])
    labels = torch.cat([features_src.new_zeros(len(features_src)), features_tgt.new_ones(len(features_tgt))])
    return F.binary_cross_entropy_with_logits(logits, labels)

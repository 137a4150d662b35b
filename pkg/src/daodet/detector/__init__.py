"""Two-stage (Faster R-CNN style) detector."""
from __future__ import annotations

import torch

from .backbones import BACKBONES, NumericError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codec import decode_deltas, encode_deltas
from .loss import (
    LossBreakdown,
    LossWeights,
    MatchConfig,
    SupervisedTargets,
    supervised_forward,
    supervised_loss,
)
from .model import AnchorConfig, Detector, DetectorConfig, RawOutputs, forward
from .predict import Detection, Detections, predict, predict_batch, predict_dataset


def grad(params: torch.nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradient of ``loss`` for every named parameter.

    Parameters that are frozen or not part of the loss graph get zeros.
    """
    named = list(params.named_parameters())
    live = [(n, p) for n, p in named if p.requires_grad]
    found = {}
    if isinstance(loss, torch.Tensor) and loss.requires_grad and live:
        grads = torch.autograd.grad(loss, [p for _, p in live], allow_unused=True, retain_graph=True)
        found = {n: g for (n, _), g in zip(live, grads) if g is not None}
    out = {}
    for n, p in named:
        g = found.get(n, torch.zeros_like(p))
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {n}")
        out[n] = g
    return out


__all__ = [
    "AnchorConfig", "BACKBONES", "CheckpointError", "Detection", "Detections", "Detector",
    "DetectorConfig", "LossBreakdown", "LossWeights", "MatchConfig", "NumericError", "RawOutputs",
    "SupervisedTargets", "decode_deltas", "encode_deltas", "forward", "grad", "load_checkpoint",
    "predict", "predict_batch", "predict_dataset", "save_checkpoint", "supervised_forward",
    "supervised_loss",
]

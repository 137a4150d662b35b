"""Box <-> delta parameterisation relative to an anchor (or proposal).

``dx, dy`` are centre offsets divided by the anchor size, ``dw, dh`` are log
size ratios. Size deltas are clamped at decode time to keep ``exp`` finite.
"""
from __future__ import annotations

import numpy as np
import torch

from ..geometry import Box

DELTA_CLAMP = 4.0


def _centers(boxes: torch.Tensor):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode(boxes: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Vectorised encoding of ``(..., 4)`` corner boxes against ``(..., 4)`` anchors."""
    ax, ay, aw, ah = _centers(anchors)
    if torch.any(aw <= 0) or torch.any(ah <= 0):
        raise ValueError("anchors must have positive width and height")
    bx, by, bw, bh = _centers(boxes)
    return torch.stack(
        [(bx - ax) / aw, (by - ay) / ah, torch.log(bw / aw), torch.log(bh / ah)], dim=-1
    )


def decode(deltas: torch.Tensor, anchors: torch.Tensor, clamp: float = DELTA_CLAMP) -> torch.Tensor:
    ax, ay, aw, ah = _centers(anchors)
    dx, dy = deltas[..., 0], deltas[..., 1]
    dw = deltas[..., 2].clamp(-clamp, clamp)
    dh = deltas[..., 3].clamp(-clamp, clamp)
    cx, cy = ax + dx * aw, ay + dy * ah
    w, h = aw * torch.exp(dw), ah * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def encode_deltas(box: Box, anchor: Box) -> np.ndarray:
    if anchor.width <= 0 or anchor.height <= 0:
        raise ValueError(f"anchor must have positive area, got {anchor}")
    if box.width <= 0 or box.height <= 0:
        raise ValueError(f"box must have positive area to be encoded, got {box}")
    b = torch.tensor(box.as_tuple(), dtype=torch.float64)
    a = torch.tensor(anchor.as_tuple(), dtype=torch.float64)
    return encode(b, a).numpy()


def decode_deltas(deltas, anchor: Box) -> Box:
    if anchor.width <= 0 or anchor.height <= 0:
        raise ValueError(f"anchor must have positive area, got {anchor}")
    d = torch.as_tensor(np.asarray(deltas, dtype=np.float64))
    a = torch.tensor(anchor.as_tuple(), dtype=torch.float64)
    out = decode(d, a)
    return Box(*(float(v) for v in out))

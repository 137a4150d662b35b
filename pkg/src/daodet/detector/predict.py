"""Inference: decode RoI outputs, score filter, per-class NMS."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torchvision.ops import batched_nms

from ..augment import _as_chw_float
from ..geometry import Box
from . import codec
from .model import Detector


@dataclass(frozen=True)
class Detection:
    box: Box
    category_id: int
    score: float


Detections = list[Detection]


def nms_order(boxes: torch.Tensor, scores: torch.Tensor, classes: torch.Tensor, iou: float) -> torch.Tensor:
    """Per-class greedy NMS; returns kept indices sorted by descending score.

    Equal scores are resolved in favour of the lower input index.
    """
    if len(boxes) == 0:
        return torch.zeros(0, dtype=torch.int64)
    order = torch.argsort(-scores, stable=True)
    rank = torch.arange(len(order), 0, -1, dtype=torch.float64)
    kept = batched_nms(boxes[order].double(), rank, classes[order], iou)
    return order[kept]


@torch.no_grad()
def predict_batch(
    model: Detector,
    images: Sequence,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    max_detections: int = 100,
) -> list[Detections]:
    tensors = [_as_chw_float(im) for im in images]
    out = model(tensors)
    k = model.num_classes
    probs = torch.softmax(out.roi_logits.double(), dim=1)
    results = []
    start = 0
    for i, rois in enumerate(out.rois):
        n = len(rois)
        h, w = out.image_sizes[i]
        p = probs[start : start + n, :k]
        d = out.roi_deltas[start : start + n].double()
        start += n
        if n == 0:
            results.append([])
            continue
        boxes = codec.decode(d, rois.double().unsqueeze(1).expand(n, k, 4))
        boxes[..., 0::2] = boxes[..., 0::2].clamp(0, w)
        boxes[..., 1::2] = boxes[..., 1::2].clamp(0, h)
        cls = torch.arange(k).expand(n, k)
        mask = p >= score_thresh
        boxes, scores, cls = boxes[mask], p[mask], cls[mask]
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, scores, cls = boxes[valid], scores[valid], cls[valid]
        keep = nms_order(boxes, scores, cls, nms_iou)[:max_detections]
        results.append(
            [
                Detection(Box(*(float(v) for v in boxes[j])), model.category_ids[int(cls[j])], float(scores[j]))
                for j in keep.tolist()
            ]
        )
    return results


def predict(model: Detector, image, score_thresh: float = 0.05, nms_iou: float = 0.5) -> Detections:
    return predict_batch(model, [image], score_thresh, nms_iou)[0]


def predict_dataset(model: Detector, dataset, batch_size: int = 16, score_thresh: float = 0.05, nms_iou: float = 0.5) -> dict[int, Detections]:
    """Detections keyed by image id, on canonical (un-augmented) images."""
    out: dict[int, Detections] = {}
    was_training = model.training
    model.eval()
    samples = list(dataset)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        for s, dets in zip(chunk, predict_batch(model, [s.image for s in chunk], score_thresh, nms_iou)):
            out[s.image_id] = dets
    model.train(was_training)
    return out

"""Anchor / proposal matching and the supervised detection loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torchvision.ops import box_iou

from . import codec
from .model import Detector, RawOutputs


@dataclass(frozen=True)
class MatchConfig:
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch_per_image: int = 256
    rpn_pos_fraction: float = 0.5
    roi_pos_iou: float = 0.5
    roi_batch_per_image: int = 64
    roi_pos_fraction: float = 0.25
    smooth_l1_beta: float = 1.0 / 9.0


@dataclass(frozen=True)
class LossWeights:
    rpn_objectness: float = 1.0
    rpn_localization: float = 1.0
    roi_classification: float = 1.0
    roi_localization: float = 1.0


@dataclass
class LossBreakdown:
    rpn_objectness: torch.Tensor
    rpn_localization: torch.Tensor
    roi_classification: torch.Tensor
    roi_localization: torch.Tensor
    weights: LossWeights = LossWeights()

    TERMS = ("rpn_objectness", "rpn_localization", "roi_classification", "roi_localization")

    @property
    def total(self) -> torch.Tensor:
        return sum(getattr(self.weights, t) * getattr(self, t) for t in self.TERMS)

    def as_floats(self) -> dict[str, float]:
        out = {t: float(getattr(self, t).detach()) for t in self.TERMS}
        out["total"] = float(self.total.detach())
        return out

    @classmethod
    def zeros(cls, like: torch.Tensor, weights: LossWeights = LossWeights()) -> "LossBreakdown":
        z = like.new_zeros(())
        return cls(z, z, z, z, weights)


@dataclass
class RPNTargets:
    labels: torch.Tensor  # (B, N) 1 positive, 0 negative, -1 ignored
    deltas: torch.Tensor  # (B, N, 4) encoded GT for positives, 0 elsewhere


@dataclass
class RoITargets:
    labels: torch.Tensor  # (R,) class index, background = K
    deltas: torch.Tensor  # (R, 4) encoded GT for foreground rows


@dataclass
class SupervisedTargets:
    rpn: RPNTargets
    roi: RoITargets


def _subsample(labels: torch.Tensor, n: int, pos_fraction: float, gen: torch.Generator, positive) -> torch.Tensor:
    """Keep at most ``n`` labelled entries, ``pos_fraction`` of them positive."""
    pos = torch.nonzero(positive(labels)).flatten()
    neg = torch.nonzero(~positive(labels) & (labels >= 0)).flatten()
    n_pos = min(len(pos), int(n * pos_fraction))
    n_neg = min(len(neg), n - n_pos)
    pos = pos[torch.randperm(len(pos), generator=gen)[:n_pos]]
    neg = neg[torch.randperm(len(neg), generator=gen)[:n_neg]]
    keep = torch.zeros_like(labels, dtype=torch.bool)
    keep[pos] = True
    keep[neg] = True
    return keep


def match_anchors(anchors: torch.Tensor, gt: torch.Tensor, gen: torch.Generator, cfg: MatchConfig = MatchConfig()):
    """Label anchors against GT boxes of one image; returns ``(labels, deltas)``.

    Positive: IoU >= ``rpn_pos_iou`` or the best anchor of some GT. Negative:
    max IoU < ``rpn_neg_iou``. Everything is then subsampled.
    """
    n = anchors.shape[0]
    if n == 0:
        raise ValueError("no anchors to match")
    labels = torch.full((n,), -1, dtype=torch.int64)
    deltas = torch.zeros(n, 4, dtype=anchors.dtype)
    if gt.numel() == 0:
        labels[:] = 0
    else:
        iou = box_iou(gt.to(anchors.dtype), anchors)  # (G, N)
        best, idx = iou.max(dim=0)
        labels[best < cfg.rpn_neg_iou] = 0
        labels[best >= cfg.rpn_pos_iou] = 1
        gt_best = iou.max(dim=1, keepdim=True).values
        lowq = torch.nonzero((iou == gt_best) & (gt_best > 0))[:, 1]
        labels[lowq] = 1
        pos = labels == 1
        deltas[pos] = codec.encode(gt.to(anchors.dtype)[idx[pos]], anchors[pos])
    keep = _subsample(labels, cfg.rpn_batch_per_image, cfg.rpn_pos_fraction, gen, lambda l: l == 1)
    labels = torch.where(keep, labels, torch.full_like(labels, -1))
    return labels, deltas


def sample_rois(
    proposals: torch.Tensor,
    gt: torch.Tensor,
    gt_classes: torch.Tensor,
    num_classes: int,
    gen: torch.Generator,
    cfg: MatchConfig = MatchConfig(),
):
    """Pick RoIs for the second stage of one image; returns ``(rois, labels, deltas)``.

    GT boxes are appended to the proposals so every object has a positive RoI.
    """
    gt = gt.to(proposals.dtype)
    cand = torch.cat([proposals, gt], dim=0)
    labels = torch.full((len(cand),), num_classes, dtype=torch.int64)
    deltas = torch.zeros(len(cand), 4, dtype=proposals.dtype)
    if len(gt):
        iou = box_iou(gt, cand)
        best, idx = iou.max(dim=0)
        fg = best >= cfg.roi_pos_iou
        labels[fg] = gt_classes[idx[fg]]
        deltas[fg] = codec.encode(gt[idx[fg]], cand[fg])
    keep = _subsample(labels, cfg.roi_batch_per_image, cfg.roi_pos_fraction, gen, lambda l: l < num_classes)
    keep_idx = torch.nonzero(keep).flatten()
    return cand[keep_idx], labels[keep_idx], deltas[keep_idx]


def supervised_forward(
    model: Detector,
    images: Sequence[torch.Tensor],
    gt_boxes: Sequence[torch.Tensor],
    gt_classes: Sequence[torch.Tensor],
    gen: torch.Generator,
    cfg: MatchConfig = MatchConfig(),
    fixed_rois: Optional[tuple[list[torch.Tensor], SupervisedTargets]] = None,
) -> tuple[RawOutputs, SupervisedTargets]:
    """Forward pass with training-time RoI sampling.

    Returns the outputs together with the matched targets. Passing the
    ``(outputs.rois, targets)`` of an earlier call through ``fixed_rois`` reuses
    that sampling, which keeps the loss a smooth function of the weights.
    """
    batch, sizes = model.preprocess(images)
    feats = model.backbone(batch)
    obj, rpn_deltas = model.rpn(feats)
    anchors = model.anchors(feats.shape[-2], feats.shape[-1], feats.dtype)
    props, scores = model.propose(obj.detach(), rpn_deltas.detach(), anchors, sizes)
    if fixed_rois is not None:
        rois, targets = fixed_rois
    else:
        rpn_labels, rpn_targets, rois, roi_labels, roi_targets = [], [], [], [], []
        for i in range(len(images)):
            gt = gt_boxes[i].to(anchors.dtype).reshape(-1, 4)
            l, d = match_anchors(anchors, gt, gen, cfg)
            rpn_labels.append(l)
            rpn_targets.append(d)
            r, rl, rd = sample_rois(props[i], gt, gt_classes[i].reshape(-1), model.num_classes, gen, cfg)
            rois.append(r)
            roi_labels.append(rl)
            roi_targets.append(rd)
        targets = SupervisedTargets(
            RPNTargets(torch.stack(rpn_labels), torch.stack(rpn_targets)),
            RoITargets(torch.cat(roi_labels), torch.cat(roi_targets)),
        )
    logits, roi_deltas = model.roi_head(feats, rois)
    out = RawOutputs(feats, obj, rpn_deltas, anchors, sizes, props, scores, list(rois), logits, roi_deltas)
    return out, targets


def smooth_l1(x: torch.Tensor, y: torch.Tensor, beta: float) -> torch.Tensor:
    return F.smooth_l1_loss(x, y, beta=beta, reduction="none")


def softmax_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, target, reduction="none")


def supervised_loss(
    outputs: RawOutputs,
    targets: SupervisedTargets,
    cfg: MatchConfig = MatchConfig(),
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Standard Faster R-CNN losses.

    Classification terms are means over sampled entries; localisation terms sum
    smooth-L1 over positives and divide by the same sample count, so they vanish
    when a batch has no positives.
    """
    rpn_l = targets.rpn.labels
    sampled = rpn_l >= 0
    if sampled.sum() == 0:
        raise ValueError("no sampled anchors")
    n_rpn = sampled.sum()
    obj = F.binary_cross_entropy_with_logits(
        outputs.objectness[sampled], (rpn_l[sampled] == 1).to(outputs.objectness.dtype), reduction="sum"
    ) / n_rpn
    pos = rpn_l == 1
    rpn_loc = smooth_l1(outputs.rpn_deltas[pos], targets.rpn.deltas[pos].to(outputs.rpn_deltas.dtype), cfg.smooth_l1_beta).sum() / n_rpn

    roi_l = targets.roi.labels
    k = outputs.roi_deltas.shape[1]
    n_roi = max(len(roi_l), 1)
    if len(roi_l):
        cls = softmax_cross_entropy(outputs.roi_logits, roi_l).mean()
    else:
        cls = outputs.roi_logits.sum() * 0.0
    fg = torch.nonzero(roi_l < k).flatten()
    if len(fg):
        pred = outputs.roi_deltas[fg, roi_l[fg]]
        roi_loc = smooth_l1(pred, targets.roi.deltas[fg].to(pred.dtype), cfg.smooth_l1_beta).sum() / n_roi
    else:
        roi_loc = outputs.roi_deltas.sum() * 0.0
    return LossBreakdown(obj, rpn_loc, cls, roi_loc, weights)

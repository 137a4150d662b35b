"""Two-stage detector: backbone -> RPN -> proposals -> RoI heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import batched_nms

from . import codec
from .backbones import NumericError, build_backbone, check_finite


@dataclass(frozen=True)
class AnchorConfig:
    sizes: tuple[float, ...] = (16.0, 24.0, 36.0)
    aspect_ratios: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if not self.sizes or not self.aspect_ratios:
            raise ValueError("anchor configuration must list at least one size and one ratio")

    @property
    def num_anchors(self) -> int:
        return len(self.sizes) * len(self.aspect_ratios)


@dataclass(frozen=True)
class DetectorConfig:
    backbone: str = "tiny_cnn"
    num_classes: int = 5
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    pixel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    pixel_std: tuple[float, float, float] = (0.25, 0.25, 0.25)
    rpn_channels: int = 64
    rpn_pre_nms_topk: int = 300
    rpn_post_nms_topk: int = 64
    rpn_nms_iou: float = 0.7
    min_proposal_size: float = 2.0
    roi_size: int = 7
    fc_dim: int = 256

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["anchors"] = AnchorConfig(**{k: tuple(v) for k, v in d.get("anchors", {}).items()})
        for k in ("pixel_mean", "pixel_std"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class RawOutputs:
    """Everything the heads produce for one batch, in the input view's frame.

    ``objectness`` is ``(B, h*w*A)`` ordered location-major then anchor;
    ``rpn_deltas`` is ``(B, h*w*A, 4)``; ``rois`` lists per-image boxes that the
    RoI head was run on and ``roi_logits`` / ``roi_deltas`` are concatenated over
    images (``(R, K+1)`` and ``(R, K, 4)``).
    """

    features: torch.Tensor
    objectness: torch.Tensor
    rpn_deltas: torch.Tensor
    anchors: torch.Tensor
    image_sizes: list[tuple[int, int]]
    proposals: list[torch.Tensor]
    proposal_scores: list[torch.Tensor]
    rois: list[torch.Tensor]
    roi_logits: torch.Tensor
    roi_deltas: torch.Tensor

    @property
    def roi_counts(self) -> list[int]:
        return [len(r) for r in self.rois]


def _interp_matrix(coords: torch.Tensor, length: int) -> torch.Tensor:
    """Linear interpolation weights ``(..., length)`` for edge-convention coords."""
    p = coords - 0.5
    i0 = torch.floor(p)
    w1 = p - i0
    grid = torch.arange(length, dtype=coords.dtype)
    i0 = i0.unsqueeze(-1)
    return (1 - w1).unsqueeze(-1) * (grid == i0) + w1.unsqueeze(-1) * (grid == i0 + 1)


def roi_pool_bilinear(features: torch.Tensor, rois: Sequence[torch.Tensor], size: int, stride: int, sampling: int = 2) -> torch.Tensor:
    """RoIAlign-style pooling: ``sampling**2`` bilinear samples averaged per bin.

    Bilinear sampling is separable, so each RoI is ``Wy @ F @ Wx.T`` with the
    sub-sample average folded into the weight matrices. Samples outside the
    feature map read zeros. Returns ``(R, C, size, size)``.
    """
    out = []
    fh, fw = features.shape[-2:]
    n = size * sampling
    steps = (torch.arange(n, dtype=features.dtype) + 0.5) / n
    for i, r in enumerate(rois):
        if len(r) == 0:
            continue
        r = r.to(features.dtype) / stride
        xs = r[:, 0:1] + steps * (r[:, 2:3] - r[:, 0:1])  # (m, n)
        ys = r[:, 1:2] + steps * (r[:, 3:4] - r[:, 1:2])
        wx = _interp_matrix(xs, fw).view(len(r), size, sampling, fw).mean(2)
        wy = _interp_matrix(ys, fh).view(len(r), size, sampling, fh).mean(2)
        out.append(torch.einsum("rih,chw,rjw->rcij", wy, features[i], wx))
    return torch.cat(out, dim=0)


class Detector(nn.Module):
    def __init__(self, config: DetectorConfig = DetectorConfig(), seed: int = 0, category_ids: Optional[Sequence[int]] = None):
        super().__init__()
        self.config = config
        k = config.num_classes
        self.category_ids = tuple(category_ids) if category_ids is not None else tuple(range(k))
        if len(self.category_ids) != k:
            raise ValueError("category_ids must list one id per class")
        self.backbone = build_backbone(config.backbone)
        c = self.backbone.out_channels
        a = config.anchors.num_anchors
        self.rpn_conv = nn.Conv2d(c, config.rpn_channels, 3, padding=1)
        self.rpn_objectness = nn.Conv2d(config.rpn_channels, a, 1)
        self.rpn_deltas = nn.Conv2d(config.rpn_channels, 4 * a, 1)
        self.fc1 = nn.Linear(c * config.roi_size**2, config.fc_dim)
        self.fc2 = nn.Linear(config.fc_dim, config.fc_dim)
        self.cls_score = nn.Linear(config.fc_dim, k + 1)
        self.bbox_pred = nn.Linear(config.fc_dim, 4 * k)
        self.register_buffer("pixel_mean", torch.tensor(config.pixel_mean).view(3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(config.pixel_std).view(3, 1, 1), persistent=False)
        self._anchor_cache: dict = {}
        self.reset_parameters(seed)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed))
        small = {
            self.rpn_objectness: 0.01,
            self.rpn_deltas: 0.01,
            self.cls_score: 0.01,
            self.bbox_pred: 0.001,
        }
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif "pos" == name.split(".")[-1]:
                    p.normal_(0.0, 0.02, generator=g)
                elif p.ndim >= 2:
                    fan_in = p[0].numel()
                    p.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=g)
                else:
                    p.fill_(1.0)
            for m, std in small.items():
                m.weight.normal_(0.0, std, generator=g)

    # ------------------------------------------------------------------ inputs

    def preprocess(self, images: Sequence[torch.Tensor]) -> tuple[torch.Tensor, list[tuple[int, int]]]:
        """Normalise and zero-pad (i.e. pad with the pixel mean) to a common size."""
        if len(images) == 0:
            raise ValueError("empty image batch")
        sizes = [(int(im.shape[-2]), int(im.shape[-1])) for im in images]
        div = self.backbone.size_divisibility
        h = -(-max(s[0] for s in sizes) // div) * div
        w = -(-max(s[1] for s in sizes) // div) * div
        dtype = self.cls_score.weight.dtype
        batch = torch.zeros(len(images), 3, h, w, dtype=dtype)
        for i, im in enumerate(images):
            im = im.to(dtype)
            batch[i, :, : im.shape[-2], : im.shape[-1]] = (im - self.pixel_mean.to(dtype)) / self.pixel_std.to(dtype)
        return batch, sizes

    def anchors(self, feat_h: int, feat_w: int, dtype=torch.float32) -> torch.Tensor:
        key = (feat_h, feat_w, dtype)
        if key not in self._anchor_cache:
            s = self.stride
            base = []
            for size in self.config.anchors.sizes:
                for ratio in self.config.anchors.aspect_ratios:
                    w = size / ratio**0.5
                    h = size * ratio**0.5
                    base.append([-w / 2, -h / 2, w / 2, h / 2])
            base = torch.tensor(base, dtype=torch.float64)
            ys = (torch.arange(feat_h, dtype=torch.float64) + 0.5) * s
            xs = (torch.arange(feat_w, dtype=torch.float64) + 0.5) * s
            cy, cx = torch.meshgrid(ys, xs, indexing="ij")
            shifts = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 1, 4)
            self._anchor_cache[key] = (shifts + base.view(1, -1, 4)).reshape(-1, 4).to(dtype)
        return self._anchor_cache[key]

    # ------------------------------------------------------------------ stages

    def rpn(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b = features.shape[0]
        t = F.silu(self.rpn_conv(features))
        obj = self.rpn_objectness(t).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = self.rpn_deltas(t)
        a = self.config.anchors.num_anchors
        deltas = deltas.view(b, a, 4, *deltas.shape[-2:]).permute(0, 3, 4, 1, 2).reshape(b, -1, 4)
        return check_finite(obj, "rpn objectness"), check_finite(deltas, "rpn deltas")

    @torch.no_grad()
    def propose(self, objectness, rpn_deltas, anchors, image_sizes):
        """Top-scoring, clipped, NMS-filtered proposals per image (no gradient)."""
        cfg = self.config
        props, scores = [], []
        for i, (h, w) in enumerate(image_sizes):
            logits = objectness[i]
            k = min(cfg.rpn_pre_nms_topk, logits.numel())
            order = torch.argsort(-logits, stable=True)[:k]
            boxes = codec.decode(rpn_deltas[i, order], anchors[order])
            boxes[:, 0::2] = boxes[:, 0::2].clamp(0, w)
            boxes[:, 1::2] = boxes[:, 1::2].clamp(0, h)
            s = logits[order]
            keep = ((boxes[:, 2] - boxes[:, 0]) >= cfg.min_proposal_size) & (
                (boxes[:, 3] - boxes[:, 1]) >= cfg.min_proposal_size
            )
            boxes, s = boxes[keep], s[keep]
            # rank-valued scores make NMS ties resolve by pre-NMS order
            rank = torch.arange(len(s), 0, -1, dtype=boxes.dtype)
            kept = batched_nms(boxes, rank, torch.zeros(len(s), dtype=torch.int64), cfg.rpn_nms_iou)
            kept = kept[: cfg.rpn_post_nms_topk]
            props.append(boxes[kept].detach())
            scores.append(torch.sigmoid(s[kept]).detach())
        return props, scores

    def roi_head(self, features: torch.Tensor, rois: Sequence[torch.Tensor]):
        k = self.num_classes
        rois = [r.to(features.dtype) for r in rois]
        n = sum(len(r) for r in rois)
        if n == 0:
            return features.new_zeros(0, k + 1), features.new_zeros(0, k, 4)
        pooled = roi_pool_bilinear(features, rois, self.config.roi_size, self.stride)
        x = F.silu(self.fc1(pooled.flatten(1)))
        x = F.silu(self.fc2(x))
        logits = check_finite(self.cls_score(x), "roi class logits")
        deltas = check_finite(self.bbox_pred(x), "roi box deltas").view(-1, k, 4)
        return logits, deltas

    def forward(self, images: Sequence[torch.Tensor], rois: Optional[Sequence[torch.Tensor]] = None) -> RawOutputs:
        """Full forward pass. When ``rois`` is given the RoI head runs on those
        boxes instead of the RPN proposals (training and distillation)."""
        batch, sizes = self.preprocess(images)
        feats = self.backbone(batch)
        obj, deltas = self.rpn(feats)
        anchors = self.anchors(feats.shape[-2], feats.shape[-1], feats.dtype)
        props, scores = self.propose(obj.detach(), deltas.detach(), anchors, sizes)
        if rois is None:
            rois = props
        if len(rois) != len(sizes):
            raise ValueError("need one RoI list per image")
        logits, roi_deltas = self.roi_head(feats, rois)
        return RawOutputs(feats, obj, deltas, anchors, sizes, props, scores, list(rois), logits, roi_deltas)


def forward(params: Detector, images: Sequence[torch.Tensor]) -> RawOutputs:
    return params(images)


__all__ = ["AnchorConfig", "DetectorConfig", "Detector", "RawOutputs", "NumericError", "forward"]

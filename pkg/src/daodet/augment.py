"""Weak / strong augmentation pipelines with reproducible records.

Three pipelines share one geometric family (flip + uniform scale):

* ``weak``          flip, scale (teacher input)
* ``strong_source`` flip, scale, colour jitter, cutout (student, source images)
* ``strong_target`` flip, scale, colour jitter, masked patches (student, target images)

A pipeline draw is captured in an :class:`AugRecord` so that the exact same
transform can be replayed on pixels (:func:`apply_aug`) and on boxes
(:func:`apply_aug_boxes`). Occlusion regions are stored in canonical image
coordinates and pushed through the record's view when applied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import AffineView, Box, map_boxes, map_boxes_array

Kind = Literal["weak", "strong_source", "strong_target"]
KINDS: tuple[str, ...] = ("weak", "strong_source", "strong_target")


@dataclass(frozen=True)
class AugConfig:
    flip_prob: float = 0.5
    scale_min: float = 0.8
    scale_max: float = 1.2
    jitter_min: float = 0.8
    jitter_max: float = 1.2
    cutout_min_count: int = 1
    cutout_max_count: int = 3
    cutout_min_area: float = 0.02
    cutout_max_area: float = 0.10
    mic_patch: int = 32
    mic_ratio: float = 0.5
    fill: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("aug.flip_prob must lie in [0, 1]")
        if not 0.0 < self.scale_min <= self.scale_max:
            raise ValueError("aug.scale_min/max must satisfy 0 < min <= max")
        if not 0.0 < self.jitter_min <= self.jitter_max:
            raise ValueError("aug.jitter_min/max must satisfy 0 < min <= max")
        if not 0 <= self.cutout_min_count <= self.cutout_max_count:
            raise ValueError("aug.cutout_min_count/max_count out of order")
        if not 0.0 < self.cutout_min_area <= self.cutout_max_area < 1.0:
            raise ValueError("aug.cutout_min_area/max_area must lie in (0, 1)")
        if self.mic_patch < 1:
            raise ValueError("aug.mic_patch must be >= 1")
        if not 0.0 <= self.mic_ratio <= 1.0:
            raise ValueError("aug.mic_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class Jitter:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0


@dataclass(frozen=True, eq=False)
class AugRecord:
    kind: str
    image_shape: tuple[int, int]
    view: AffineView
    out_shape: tuple[int, int]
    seed: int
    jitter: Optional[Jitter] = None
    cutouts: tuple[tuple[float, float, float, float], ...] = ()
    mic_mask: Optional[np.ndarray] = None
    mic_patch: int = 0
    fill: tuple[float, float, float] = (0.5, 0.5, 0.5)

    @property
    def masked_fraction(self) -> float:
        if self.mic_mask is None or self.mic_mask.size == 0:
            return 0.0
        return float(self.mic_mask.mean())

    def geometric_only(self) -> "AugRecord":
        return replace(self, jitter=None, cutouts=(), mic_mask=None, mic_patch=0)

    def __eq__(self, other):
        if not isinstance(other, AugRecord):
            return NotImplemented
        masks_equal = (self.mic_mask is None and other.mic_mask is None) or (
            self.mic_mask is not None
            and other.mic_mask is not None
            and np.array_equal(self.mic_mask, other.mic_mask)
        )
        return (
            self.kind == other.kind
            and self.image_shape == other.image_shape
            and self.view == other.view
            and self.out_shape == other.out_shape
            and self.seed == other.seed
            and self.jitter == other.jitter
            and self.cutouts == other.cutouts
            and masks_equal
            and self.mic_patch == other.mic_patch
            and self.fill == other.fill
        )

    def occlusion_rects(self) -> list[tuple[float, float, float, float]]:
        """All occluded rectangles in canonical coordinates."""
        rects = list(self.cutouts)
        if self.mic_mask is not None:
            p = self.mic_patch
            h, w = self.image_shape
            for gy, gx in zip(*np.nonzero(self.mic_mask)):
                rects.append((gx * p, gy * p, min((gx + 1) * p, w), min((gy + 1) * p, h)))
        return rects


def identity_record(image_shape: tuple[int, int], kind: str = "weak") -> AugRecord:
    h, w = image_shape
    return AugRecord(kind, (h, w), AffineView.identity(), (h, w), seed=0)


def _sample_geometry(rng: np.random.Generator, shape, cfg: AugConfig):
    h, w = shape
    flip = bool(rng.random() < cfg.flip_prob)
    s0 = float(rng.uniform(cfg.scale_min, cfg.scale_max))
    out_w = max(1, int(round(w * s0)))
    scale = out_w / w
    out_h = max(1, int(round(h * scale)))
    return AffineView.flip_scale(flip, scale, w), (out_h, out_w)


def sample_aug(
    kind: str,
    image_shape: tuple[int, int],
    rng_seed: int,
    config: AugConfig = AugConfig(),
    geometry_from: Optional[AugRecord] = None,
) -> AugRecord:
    """Draw one augmentation; a pure function of ``(kind, shape, seed, config)``.

    ``geometry_from`` reuses another record's view instead of drawing one, which
    keeps two views of the same image on a shared anchor grid.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown augmentation kind {kind!r}")
    h, w = (int(image_shape[0]), int(image_shape[1]))
    if h < 1 or w < 1:
        raise ValueError(f"invalid image shape {image_shape}")
    if kind == "strong_target" and (h < config.mic_patch or w < config.mic_patch):
        raise ValueError(
            f"image {h}x{w} is smaller than one masked patch ({config.mic_patch} px)"
        )
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), KINDS.index(kind)]))
    view, out_shape = _sample_geometry(rng, (h, w), config)
    if geometry_from is not None:
        if tuple(geometry_from.image_shape) != (h, w):
            raise ValueError("geometry_from record was sampled for a different image shape")
        view, out_shape = geometry_from.view, geometry_from.out_shape
    record = AugRecord(kind, (h, w), view, out_shape, int(rng_seed), fill=tuple(config.fill))
    if kind == "weak":
        return record

    jitter = Jitter(*(float(v) for v in rng.uniform(config.jitter_min, config.jitter_max, size=3)))
    if kind == "strong_source":
        n = int(rng.integers(config.cutout_min_count, config.cutout_max_count + 1))
        rects = []
        for _ in range(n):
            area = rng.uniform(config.cutout_min_area, config.cutout_max_area) * h * w
            aspect = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
            cw = int(min(w, max(1, round(math.sqrt(area * aspect)))))
            ch = int(min(h, max(1, round(area / cw))))
            x0 = int(rng.integers(0, w - cw + 1))
            y0 = int(rng.integers(0, h - ch + 1))
            rects.append((float(x0), float(y0), float(x0 + cw), float(y0 + ch)))
        return replace(record, jitter=jitter, cutouts=tuple(rects))

    p = config.mic_patch
    gh, gw = math.ceil(h / p), math.ceil(w / p)
    n_patches = gh * gw
    n_masked = int(config.mic_ratio * n_patches + 0.5)
    mask = np.zeros(n_patches, dtype=bool)
    mask[rng.permutation(n_patches)[:n_masked]] = True
    mask = mask.reshape(gh, gw)
    mask.setflags(write=False)
    return replace(record, jitter=jitter, mic_mask=mask, mic_patch=p)


def _as_chw_float(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        t = image
        if t.dtype == torch.uint8:
            t = t.float() / 255.0
        if t.ndim == 3 and t.shape[0] != 3 and t.shape[-1] == 3:
            t = t.permute(2, 0, 1)
        return t if t.is_floating_point() else t.float()
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {arr.shape}")
    if not arr.flags.writeable:
        arr = arr.copy()
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)
    if arr.dtype == np.uint8:
        return t.float() / 255.0
    return t.float()


def _gray(img: torch.Tensor) -> torch.Tensor:
    return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).unsqueeze(0)


def apply_photometric(img: torch.Tensor, jitter: Jitter) -> torch.Tensor:
    img = img * jitter.brightness
    mean = _gray(img).mean()
    img = mean + jitter.contrast * (img - mean)
    gray = _gray(img)
    img = gray + jitter.saturation * (img - gray)
    return img.clamp(0.0, 1.0)


def warp(img: torch.Tensor, view: AffineView, out_shape: tuple[int, int]) -> torch.Tensor:
    if view.flipped:
        img = torch.flip(img, dims=[-1])
    if tuple(img.shape[-2:]) != tuple(out_shape):
        img = F.interpolate(img.unsqueeze(0), size=out_shape, mode="bilinear", align_corners=False)[0]
    return img


def occlusion_mask(record: AugRecord) -> Optional[torch.Tensor]:
    """Boolean ``(H', W')`` mask of occluded view pixels (pixel-centre rule)."""
    rects = record.occlusion_rects()
    if not rects:
        return None
    oh, ow = record.out_shape
    mapped = record.view.apply_array(np.asarray(rects, dtype=np.float64))
    ys = torch.arange(oh, dtype=torch.float64) + 0.5
    xs = torch.arange(ow, dtype=torch.float64) + 0.5
    mask = torch.zeros(oh, ow, dtype=torch.bool)
    for x0, y0, x1, y1 in mapped:
        rows = (ys >= y0) & (ys < y1)
        cols = (xs >= x0) & (xs < x1)
        mask |= rows[:, None] & cols[None, :]
    return mask


def apply_aug(image, record: AugRecord) -> torch.Tensor:
    """Render ``record`` onto an image; returns a ``(3, H', W')`` float tensor in [0, 1].

    Geometry first, then photometric jitter, then occlusion fill.
    """
    img = _as_chw_float(image)
    if tuple(img.shape[-2:]) != tuple(record.image_shape):
        raise ValueError(
            f"image shape {tuple(img.shape[-2:])} does not match record shape {record.image_shape}"
        )
    img = warp(img, record.view, record.out_shape)
    if record.jitter is not None:
        img = apply_photometric(img, record.jitter)
    mask = occlusion_mask(record)
    if mask is not None:
        fill = torch.tensor(record.fill, dtype=img.dtype).view(3, 1, 1)
        img = torch.where(mask.unsqueeze(0), fill, img)
    return img


def apply_aug_boxes(boxes: Sequence[Box], record: AugRecord) -> list[Box]:
    return map_boxes(AffineView.identity(), record.view, boxes)


def apply_aug_box_array(boxes: np.ndarray, record: AugRecord) -> np.ndarray:
    return map_boxes_array(AffineView.identity(), record.view, boxes)

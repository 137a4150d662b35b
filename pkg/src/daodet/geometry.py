"""Axis-aligned boxes, IoU and coordinate transport between augmentation views.

Coordinates are continuous: pixel ``i`` covers ``[i, i + 1)``. A view frame is
described by an :class:`AffineView` that maps canonical image coordinates into
the view; only horizontal flips, uniform scales and translations are allowed so
that boxes survive the round trip exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates: {coords}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"box has max < min: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]


def iou(a: Box, b: Box) -> float:
    """Intersection over union. A zero-area union yields 0."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(*map(float, row)) for row in np.asarray(arr, dtype=np.float64).reshape(-1, 4)]


class AffineView:
    """2x3 affine map from canonical coordinates into a view frame.

    The admissible family is ``x' = a*x + tx, y' = |a|*y + ty`` with ``a != 0``:
    a uniform scale, optionally combined with a horizontal flip (``a < 0``),
    plus a translation. Vertical flips, shears and anisotropic scales are
    rejected at construction.
    """

    __slots__ = ("matrix",)

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64).reshape(2, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("affine view has non-finite entries")
        a, b, _ = m[0]
        c, d, _ = m[1]
        if b != 0.0 or c != 0.0:
            raise ValueError("affine view must not rotate or shear")
        if d <= 0.0:
            raise ValueError("affine view must have a positive vertical scale")
        if not math.isclose(abs(a), d, rel_tol=1e-12, abs_tol=0.0):
            raise ValueError("affine view scale must be uniform")
        m.setflags(write=False)
        self.matrix = m

    @classmethod
    def identity(cls) -> "AffineView":
        return cls([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    @classmethod
    def hflip(cls, width: float) -> "AffineView":
        """Mirror about the vertical centre line of an image ``width`` wide."""
        return cls([[-1.0, 0.0, float(width)], [0.0, 1.0, 0.0]])

    @classmethod
    def scaling(cls, factor: float) -> "AffineView":
        if factor <= 0:
            raise ValueError(f"scale factor must be positive, got {factor}")
        return cls([[factor, 0.0, 0.0], [0.0, factor, 0.0]])

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineView":
        return cls([[1.0, 0.0, tx], [0.0, 1.0, ty]])

    @classmethod
    def flip_scale(cls, flip: bool, scale: float, width: float) -> "AffineView":
        """Optional flip in the canonical frame followed by a uniform scale."""
        view = cls.hflip(width) if flip else cls.identity()
        return cls.scaling(scale).compose(view)

    @property
    def scale(self) -> float:
        return float(self.matrix[1, 1])

    @property
    def flipped(self) -> bool:
        return bool(self.matrix[0, 0] < 0)

    def _full(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def compose(self, inner: "AffineView") -> "AffineView":
        """Return the view applying ``inner`` first, then ``self``."""
        return AffineView((self._full() @ inner._full())[:2])

    def inverse(self) -> "AffineView":
        a, _, tx = self.matrix[0]
        _, d, ty = self.matrix[1]
        return AffineView([[1.0 / a, 0.0, -tx / a], [0.0, 1.0 / d, -ty / d]])

    def apply_points(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ self.matrix[:, :2].T + self.matrix[:, 2]

    def apply_array(self, boxes: np.ndarray) -> np.ndarray:
        """Map an ``(N, 4)`` corner-encoded array, re-normalising min/max."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        a, _, tx = self.matrix[0]
        _, d, ty = self.matrix[1]
        x1 = a * boxes[:, 0] + tx
        x2 = a * boxes[:, 2] + tx
        y1 = d * boxes[:, 1] + ty
        y2 = d * boxes[:, 3] + ty
        return np.stack([np.minimum(x1, x2), y1, np.maximum(x1, x2), y2], axis=1)

    def __eq__(self, other):
        return isinstance(other, AffineView) and np.array_equal(self.matrix, other.matrix)

    def is_close(self, other: "AffineView", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))

    def __hash__(self):
        return hash(self.matrix.tobytes())

    def __repr__(self):
        return f"AffineView({self.matrix.tolist()})"


def transport(src: AffineView, dst: AffineView) -> AffineView:
    """View taking coordinates in ``src``'s frame to ``dst``'s frame."""
    if src == dst:
        return AffineView.identity()
    return dst.compose(src.inverse())


def map_boxes(src: AffineView, dst: AffineView, boxes: Sequence[Box]) -> list[Box]:
    """Move boxes expressed in view ``src`` into view ``dst``."""
    if len(boxes) == 0:
        return []
    return array_to_boxes(map_boxes_array(src, dst, boxes_to_array(boxes)))


def map_boxes_array(src: AffineView, dst: AffineView, boxes: np.ndarray) -> np.ndarray:
    return transport(src, dst).apply_array(boxes)

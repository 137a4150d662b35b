"""Domain datasets: COCO ingestion, synthetic device-shift corpora, balanced batching.

Target-domain labels exist only for evaluation. Reading them is allowed inside
:func:`evaluation_context`; any other access raises :class:`LabelAccessError`.
"""
from __future__ import annotations

import contextlib
import contextvars
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from PIL import Image

from .geometry import Box

CATEGORY_CODES: tuple[str, ...] = ("DB", "PR", "LI", "KN", "SE", "PB", "UM", "GB", "SC", "LA")

Annotation = tuple[Box, int]


class DataError(Exception):
    """Base class for dataset problems."""


class MissingFileError(DataError, FileNotFoundError):
    pass


class MalformedAnnotationError(DataError, ValueError):
    pass


class UnknownReferenceError(DataError, KeyError):
    pass


class LabelAccessError(DataError, PermissionError):
    """Raised when training code tries to read target-domain labels."""


_EVALUATING = contextvars.ContextVar("daodet_evaluating", default=False)


@contextlib.contextmanager
def evaluation_context():
    token = _EVALUATING.set(True)
    try:
        yield
    finally:
        _EVALUATING.reset(token)


def in_evaluation_context() -> bool:
    return _EVALUATING.get()


class Sample:
    """One image with optional annotations.

    The image is either held in memory or loaded lazily from ``path``.
    """

    __slots__ = ("image_id", "role", "path", "_image", "_annotations", "_shape")

    def __init__(
        self,
        image_id: int,
        image: Optional[np.ndarray] = None,
        annotations: Optional[Sequence[Annotation]] = None,
        *,
        role: str = "source",
        path: Optional[Path] = None,
        shape: Optional[tuple[int, int]] = None,
    ):
        if image is None and path is None:
            raise ValueError("a sample needs pixels or a path to load them from")
        self.image_id = int(image_id)
        self.role = role
        self.path = Path(path) if path is not None else None
        self._image = None if image is None else np.ascontiguousarray(image, dtype=np.uint8)
        self._annotations = None if annotations is None else tuple(annotations)
        if shape is None and self._image is not None:
            shape = self._image.shape[:2]
        self._shape = None if shape is None else (int(shape[0]), int(shape[1]))

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            try:
                with Image.open(self.path) as im:
                    self._image = np.asarray(im.convert("RGB"), dtype=np.uint8)
            except FileNotFoundError as exc:
                raise MissingFileError(f"image file not found: {self.path}") from exc
            self._shape = self._image.shape[:2]
        return self._image

    @property
    def shape(self) -> tuple[int, int]:
        if self._shape is None:
            return self.image.shape[:2]
        return self._shape

    @property
    def labeled(self) -> bool:
        return self._annotations is not None

    @property
    def annotations(self) -> tuple[Annotation, ...]:
        if self._annotations is None:
            raise LabelAccessError(f"sample {self.image_id} carries no annotations")
        if self.role == "target" and not in_evaluation_context():
            raise LabelAccessError(
                f"target sample {self.image_id}: labels are only readable inside evaluation_context()"
            )
        return self._annotations

    def box_array(self) -> np.ndarray:
        return np.array([b.as_tuple() for b, _ in self.annotations], dtype=np.float64).reshape(-1, 4)

    def label_array(self) -> np.ndarray:
        return np.array([c for _, c in self.annotations], dtype=np.int64)

    def __repr__(self):
        n = len(self._annotations) if self._annotations is not None else None
        return f"Sample(id={self.image_id}, role={self.role}, annotations={n})"


@dataclass
class DomainDataset:
    role: str
    samples: list[Sample]
    categories: dict[int, str] = field(
        default_factory=lambda: {i: c for i, c in enumerate(CATEGORY_CODES)}
    )
    name: str = ""

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValueError(f"dataset role must be 'source' or 'target', got {self.role!r}")
        for s in self.samples:
            s.role = self.role
            if s._annotations is not None:
                for _, cat in s._annotations:
                    if cat not in self.categories:
                        raise UnknownReferenceError(
                            f"sample {s.image_id} references unknown category {cat}"
                        )

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def category_ids(self) -> list[int]:
        return list(self.categories)

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def class_index(self) -> dict[int, int]:
        """Category id -> contiguous class index used by the detector."""
        return {cid: i for i, cid in enumerate(self.categories)}

    def as_role(self, role: str) -> "DomainDataset":
        samples = [
            Sample(s.image_id, s._image, s._annotations, path=s.path, shape=s._shape)
            for s in self.samples
        ]
        return DomainDataset(role, samples, dict(self.categories), self.name)

    def mean_color(self) -> tuple[float, float, float]:
        if not self.samples:
            return (0.5, 0.5, 0.5)
        acc = np.zeros(3)
        for s in self.samples:
            acc += s.image.reshape(-1, 3).mean(axis=0)
        return tuple(float(v) for v in acc / len(self.samples) / 255.0)


@dataclass
class DomainBatch:
    source: list[Sample]
    target: list[Sample]
    source_indices: tuple[int, ...] = ()
    target_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.source) != len(self.target):
            raise ValueError(
                f"unequal domain batch: {len(self.source)} source vs {len(self.target)} target"
            )

    def __len__(self) -> int:
        return len(self.source)


# --------------------------------------------------------------------------- COCO


def _load_json(path: Path) -> dict:
    if not path.is_file():
        raise MissingFileError(f"annotation file not found: {path}")
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise MalformedAnnotationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not all(
        isinstance(doc.get(k), list) for k in ("images", "annotations", "categories")
    ):
        raise MalformedAnnotationError(
            f"{path}: expected top-level 'images', 'annotations' and 'categories' arrays"
        )
    return doc


def load_coco(annotation_path, image_root, role: str) -> DomainDataset:
    """Read a COCO detection file. Images are decoded lazily on first access."""
    annotation_path, image_root = Path(annotation_path), Path(image_root)
    doc = _load_json(annotation_path)
    try:
        categories = {int(c["id"]): str(c["name"]) for c in doc["categories"]}
        images = {int(im["id"]): im for im in doc["images"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedAnnotationError(f"{annotation_path}: bad image/category entry ({exc})") from exc

    per_image: dict[int, list[Annotation]] = {i: [] for i in images}
    for ann in sorted(doc["annotations"], key=lambda a: a.get("id", 0)):
        try:
            image_id, cat = int(ann["image_id"]), int(ann["category_id"])
            x, y, w, h = (float(v) for v in ann["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedAnnotationError(f"{annotation_path}: bad annotation {ann!r}") from exc
        if image_id not in images:
            raise UnknownReferenceError(f"annotation {ann.get('id')} references unknown image {image_id}")
        if cat not in categories:
            raise UnknownReferenceError(f"annotation {ann.get('id')} references unknown category {cat}")
        try:
            box = Box.from_xywh(x, y, w, h)
        except ValueError as exc:
            raise MalformedAnnotationError(f"annotation {ann.get('id')}: {exc}") from exc
        per_image[image_id].append((box, cat))

    samples = []
    for image_id in sorted(images):
        im = images[image_id]
        shape = (int(im["height"]), int(im["width"])) if "height" in im and "width" in im else None
        samples.append(
            Sample(image_id, None, per_image[image_id], path=image_root / im["file_name"], shape=shape)
        )
    return DomainDataset(role, samples, categories, name=annotation_path.stem)


def save_coco(dataset: DomainDataset, annotation_path, image_root) -> Path:
    """Write images as PNG plus one COCO JSON file. Target labels are written too."""
    annotation_path, image_root = Path(annotation_path), Path(image_root)
    image_root.mkdir(parents=True, exist_ok=True)
    annotation_path.parent.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    with evaluation_context():
        for s in dataset.samples:
            file_name = f"{s.image_id:06d}.png"
            Image.fromarray(s.image).save(image_root / file_name, optimize=False)
            h, w = s.shape
            images.append({"id": s.image_id, "file_name": file_name, "height": h, "width": w})
            if not s.labeled:
                continue
            for box, cat in s.annotations:
                annotations.append(
                    {
                        "id": ann_id,
                        "image_id": s.image_id,
                        "category_id": cat,
                        "bbox": box.to_xywh(),
                        "area": box.area,
                        "iscrowd": 0,
                    }
                )
                ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": k, "name": v} for k, v in dataset.categories.items()],
    }
    with open(annotation_path, "w") as f:
        json.dump(doc, f, indent=1)
    return annotation_path


# --------------------------------------------------------------------------- synthetic corpus


def _falloff(shape: tuple[int, int], strength: float, rng: np.random.Generator) -> np.ndarray:
    """Gain in [1 - strength, 1] along a random direction across the image."""
    h, w = shape
    theta = rng.uniform(0.0, 2 * math.pi)
    y, x = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    t = x * math.cos(theta) + y * math.sin(theta)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    return 1.0 - strength * t


@dataclass(frozen=True)
class DeviceProfile:
    """How a scanner renders a scene.

    ``x = clip(mix @ rgb)`` times an illumination falloff (a linear ramp in a
    random direction per image, dimming up to ``shading`` of the signal),
    optionally inverted (all channels, or a per-channel mask), contrast-scaled
    about 0.5,
    gamma-curved, blurred by a Gaussian point-spread function and finally
    corrupted with additive Gaussian noise.
    """

    channel_mix: tuple[tuple[float, float, float], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    noise_sigma: float = 0.0
    gamma: float = 1.0
    invert: bool | tuple[bool, bool, bool] = False
    contrast: float = 1.0
    blur_sigma: float = 0.0
    shading: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.channel_mix, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValueError("channel_mix must be a finite 3x3 matrix")
        if self.noise_sigma < 0 or self.gamma <= 0 or self.contrast <= 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be >= 0; gamma and contrast > 0")
        if not 0.0 <= self.shading < 1.0:
            raise ValueError("shading must lie in [0, 1)")
        if not isinstance(self.invert, bool) and len(self.invert) != 3:
            raise ValueError("invert must be a bool or three per-channel bools")

    @property
    def is_identity(self) -> bool:
        return (
            np.array_equal(np.asarray(self.channel_mix), np.eye(3))
            and self.noise_sigma == 0
            and self.gamma == 1.0
            and not np.any(self.invert)
            and self.contrast == 1.0
            and self.blur_sigma == 0
            and self.shading == 0
        )

    def render(self, radiance: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Map a float HxWx3 scene in [0, 1] to an 8-bit image."""
        if self.is_identity:
            out = radiance
        else:
            m = np.asarray(self.channel_mix, dtype=np.float64)
            out = np.clip(radiance @ m.T, 0.0, 1.0)
            if self.shading > 0:
                out = out * _falloff(out.shape[:2], self.shading, rng)[..., None]
            flip = np.broadcast_to(np.asarray(self.invert, dtype=bool), (3,))
            out = np.where(flip, 1.0 - out, out)
            out = np.clip(0.5 + self.contrast * (out - 0.5), 0.0, 1.0) ** self.gamma
            if self.blur_sigma > 0:
                out = gaussian_filter(out, sigma=(self.blur_sigma, self.blur_sigma, 0), mode="nearest")
            if self.noise_sigma > 0:
                out = out + rng.normal(0.0, self.noise_sigma, size=out.shape)
        return np.clip(np.round(np.clip(out, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


# Three scanner profiles for the built-in benchmark. Channel permutation alone
# is absorbed by the detector; the shift comes from the tone curve, which D2
# lifts (gamma < 1) and D3 crushes (gamma > 1) relative to the neutral D1.
_PERM_1 = ((0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (1.0, 0.0, 0.0))
_PERM_2 = ((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0))

DOMAIN_PROFILES: dict[str, DeviceProfile] = {
    "D1": DeviceProfile(noise_sigma=0.03),
    "D2": DeviceProfile(channel_mix=_PERM_1, noise_sigma=0.03, gamma=0.4),
    "D3": DeviceProfile(channel_mix=_PERM_2, noise_sigma=0.03, gamma=2.8),
}


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 96
    n_images: int = 200
    n_categories: int = 5
    clutter: float = 0.5
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 14
    max_size: int = 32
    source_profile: DeviceProfile = DOMAIN_PROFILES["D1"]
    target_profile: DeviceProfile = DOMAIN_PROFILES["D2"]

    def __post_init__(self):
        if self.n_categories < 1 or self.n_categories > len(SHAPES):
            raise ValueError(f"n_categories must lie in [1, {len(SHAPES)}]")
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        if self.image_size < self.max_size + 2:
            raise ValueError("image_size too small for max_size objects")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("min_objects/max_objects out of order")


def _shape_mask(kind: int, h: int, w: int) -> np.ndarray:
    ys = (np.arange(h) + 0.5) / h * 2 - 1
    xs = (np.arange(w) + 0.5) / w * 2 - 1
    y, x = np.meshgrid(ys, xs, indexing="ij")
    r2 = x * x + y * y
    if kind == 0:  # solid block
        m = np.ones((h, w), bool)
    elif kind == 1:  # disc
        m = r2 <= 1.0
    elif kind == 2:  # triangle, apex up
        m = np.abs(x) <= (y + 1) / 2
    elif kind == 3:  # plus
        m = (np.abs(x) <= 0.3) | (np.abs(y) <= 0.3)
    elif kind == 4:  # ring
        m = (r2 <= 1.0) & (r2 >= 0.35)
    elif kind == 5:  # L
        m = (x <= -0.35) | (y >= 0.35)
    elif kind == 6:  # diamond
        m = np.abs(x) + np.abs(y) <= 1.0
    elif kind == 7:  # frame
        m = (np.abs(x) >= 0.55) | (np.abs(y) >= 0.55)
    elif kind == 8:  # T
        m = (y <= -0.4) | (np.abs(x) <= 0.3)
    else:  # half disc
        m = (r2 <= 1.0) & (y >= -0.2)
    return m


SHAPES = tuple(range(10))

# organic / inorganic / metal pseudo-colours in the style of dual-energy scanners
_MATERIALS = np.array([[0.95, 0.55, 0.15], [0.35, 0.75, 0.25], [0.20, 0.35, 0.85]])
_BACKGROUND = np.array([0.93, 0.91, 0.82])


def render_scene(spec: SynthSpec, scene_seed: int) -> tuple[np.ndarray, list[Annotation]]:
    """Draw one scene as linear radiance in [0, 1] with exact tight boxes.

    Category ids are ``0 .. n_categories-1``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(scene_seed), 0xC0FFEE]))
    size = spec.image_size
    img = np.empty((size, size, 3))
    img[:] = _BACKGROUND
    # low-frequency illumination and clutter
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi, size=2)
    img *= (1.0 - 0.05 * (np.sin(2 * np.pi * xx + phase[0]) * np.cos(2 * np.pi * yy + phase[1]) + 1))[..., None]
    n_clutter = rng.poisson(6 * spec.clutter)
    for _ in range(n_clutter):
        cw, ch = rng.integers(4, size // 2, size=2)
        x0, y0 = rng.integers(0, size - cw), rng.integers(0, size - ch)
        blob = _shape_mask(int(rng.choice([1, 6])), int(ch), int(cw))
        colour = _MATERIALS[rng.integers(len(_MATERIALS))]
        alpha = rng.uniform(0.1, 0.3)
        region = img[y0 : y0 + ch, x0 : x0 + cw]
        region[blob] = (1 - alpha) * region[blob] + alpha * region[blob] * colour

    annotations: list[Annotation] = []
    placed: list[tuple[int, int, int, int]] = []
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(n_obj):
        for _attempt in range(20):
            cat = int(rng.integers(spec.n_categories))
            w = int(rng.integers(spec.min_size, spec.max_size + 1))
            aspect = rng.uniform(0.75, 1.33)
            h = int(np.clip(round(w * aspect), spec.min_size, spec.max_size))
            x0 = int(rng.integers(1, size - w))
            y0 = int(rng.integers(1, size - h))
            cand = (x0, y0, x0 + w, y0 + h)
            if all(_overlap(cand, p) < 0.15 for p in placed):
                break
        else:
            continue
        mask = _shape_mask(cat, h, w)
        colour = _MATERIALS[rng.integers(len(_MATERIALS))] * rng.uniform(0.55, 0.9)
        alpha = rng.uniform(0.75, 0.95)
        region = img[y0 : y0 + h, x0 : x0 + w]
        region[mask] = (1 - alpha) * region[mask] + alpha * colour
        rows, cols = np.nonzero(mask)
        box = Box(
            float(x0 + cols.min()), float(y0 + rows.min()), float(x0 + cols.max() + 1), float(y0 + rows.max() + 1)
        )
        placed.append(cand)
        annotations.append((box, cat))
    return np.clip(img, 0.0, 1.0), annotations


def _overlap(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0) * max(ih, 0)
    return inter / min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))


def synth_categories(n: int) -> dict[int, str]:
    return {i: CATEGORY_CODES[i] for i in range(n)}


def synth_domain(
    spec: SynthSpec,
    profile: DeviceProfile,
    seed: int,
    role: str,
    n_images: Optional[int] = None,
    first_id: int = 1,
    name: str = "",
) -> DomainDataset:
    """Render ``n_images`` independent scenes through ``profile``."""
    n = spec.n_images if n_images is None else n_images
    if n < 1:
        raise ValueError("a synthetic domain needs at least one image")
    samples = []
    for i in range(n):
        scene_seed = int(np.random.SeedSequence([int(seed), i]).generate_state(1)[0])
        radiance, anns = render_scene(spec, scene_seed)
        device_rng = np.random.default_rng(np.random.SeedSequence([scene_seed, 0xD1CE]))
        samples.append(Sample(first_id + i, profile.render(radiance, device_rng), anns))
    return DomainDataset(role, samples, synth_categories(spec.n_categories), name=name)


def synth_generate(spec: SynthSpec, seed: int) -> tuple[DomainDataset, DomainDataset]:
    """Source and target corpora drawn from the same scene distribution.

    The two domains use disjoint scene streams and differ in device profile.
    """
    if spec.n_categories < 1 or spec.n_images < 1:
        raise ValueError("synthetic corpus needs at least one category and one image")
    source = synth_domain(spec, spec.source_profile, seed * 2 + 0, "source", name="source")
    target = synth_domain(spec, spec.target_profile, seed * 2 + 1, "target", name="target")
    return source, target


# --------------------------------------------------------------------------- batching


def _wrapped_order(n: int, length: int, rng: np.random.Generator) -> list[int]:
    order: list[int] = []
    while len(order) < length:
        order.extend(int(i) for i in rng.permutation(n))
    return order[:length]


def balanced_batches(
    source: DomainDataset, target: DomainDataset, batch_size_per_domain: int, epoch_seed: int
) -> Iterator[DomainBatch]:
    """One epoch of paired batches with ``batch_size_per_domain`` images per domain.

    The epoch spans the larger dataset once; whichever side runs out is
    reshuffled and wrapped around so every batch is full on both sides.
    """
    if batch_size_per_domain < 1:
        raise ValueError("batch_size_per_domain must be >= 1")
    if len(source) == 0 or len(target) == 0:
        raise DataError("balanced batching needs non-empty source and target datasets")
    b = batch_size_per_domain
    n_batches = math.ceil(max(len(source), len(target)) / b)
    rng = np.random.default_rng(np.random.SeedSequence([int(epoch_seed), 0xBA7C4]))
    src_order = _wrapped_order(len(source), n_batches * b, rng)
    tgt_order = _wrapped_order(len(target), n_batches * b, rng)
    for k in range(n_batches):
        si = tuple(src_order[k * b : (k + 1) * b])
        ti = tuple(tgt_order[k * b : (k + 1) * b])
        yield DomainBatch([source[i] for i in si], [target[i] for i in ti], si, ti)


def batch_stream(
    source: DomainDataset, target: DomainDataset, batch_size_per_domain: int, seed: int
) -> Iterator[DomainBatch]:
    """Endless concatenation of epochs, epoch ``e`` seeded by ``(seed, e)``."""
    epoch = 0
    while True:
        epoch_seed = int(np.random.SeedSequence([int(seed), epoch]).generate_state(1)[0])
        yield from balanced_batches(source, target, batch_size_per_domain, epoch_seed)
        epoch += 1


def dataset_stats(dataset: DomainDataset) -> dict[str, int]:
    """Instances per category name, in category-table order."""
    counts = {cid: 0 for cid in dataset.categories}
    for s in dataset.samples:
        if not s.labeled:
            raise LabelAccessError(f"dataset {dataset.name or dataset.role!r} is unlabeled")
        for _, cat in s.annotations:
            counts[cat] += 1
    return {dataset.categories[cid]: n for cid, n in counts.items()}

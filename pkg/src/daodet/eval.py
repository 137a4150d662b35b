"""AP / mAP evaluation and transfer-matrix reports.

Matching is greedy in descending confidence: a detection claims the unmatched
ground-truth box (same image, same category) with the highest IoU, ties going
to the lower GT index; it is a true positive when that IoU reaches the
threshold. AP is the area under the all-point interpolated precision/recall
curve. mAP averages over categories that have at least one GT instance.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import DomainDataset, evaluation_context
from .detector.predict import Detection
from .geometry import Box

COCO_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


def _check_threshold(t: float) -> None:
    if not 0.0 < t <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {t}")


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return math.nan
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def _match(scored: list[tuple[float, int, np.ndarray]], gt: Mapping, thresholds: Sequence[float]) -> np.ndarray:
    """TP flags ``(len(thresholds), n_dets)`` for detections ``(score, image, box)``."""
    order = sorted(range(len(scored)), key=lambda i: -scored[i][0])
    flags = np.zeros((len(thresholds), len(scored)))
    gt_arrays = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in gt.items()}
    used = {k: np.zeros((len(thresholds), len(v)), dtype=bool) for k, v in gt_arrays.items()}
    for rank, i in enumerate(order):
        _, image_id, box = scored[i]
        g = gt_arrays.get(image_id)
        if g is None or len(g) == 0:
            continue
        ious = _iou_matrix(box[None, :], g)[0]
        for ti, t in enumerate(thresholds):
            cand = np.where(used[image_id][ti], -1.0, ious)
            j = int(np.argmax(cand))  # first maximum -> lower GT index on ties
            if cand[j] >= t:
                used[image_id][ti, j] = True
                flags[ti, rank] = 1.0
    return flags


def average_precision(detections: Sequence, ground_truth: Mapping[int, Sequence[Box]], iou_threshold: float) -> float:
    """AP of single-category ``detections`` given as ``(image_id, Box, score)``.

    ``ground_truth`` maps image id to that category's GT boxes. Returns NaN when
    there is no ground truth at all.
    """
    _check_threshold(iou_threshold)
    scored = [(float(s), img, np.asarray(b.as_tuple(), dtype=np.float64)) for img, b, s in detections]
    gt = {k: [b.as_tuple() for b in v] for k, v in ground_truth.items()}
    n_gt = sum(len(v) for v in gt.values())
    flags = _match(scored, gt, [iou_threshold])
    return _ap_from_flags(flags[0], n_gt)


@dataclass
class EvalResult:
    thresholds: tuple[float, ...]
    categories: dict[int, str]
    ap: dict[float, dict[int, float]]  # threshold -> category id -> AP (NaN if no GT)
    n_images: int
    n_gt: int
    n_detections: int

    def _mean(self, t: float) -> float:
        vals = [v for v in self.ap[t].values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def map50(self) -> float:
        return self._mean(0.5)

    @property
    def map5095(self) -> float:
        return float(np.mean([self._mean(t) for t in self.thresholds]))

    def per_category(self, threshold: float = 0.5) -> dict[str, float]:
        return {self.categories[c]: v for c, v in self.ap[threshold].items()}

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "map5095": self.map5095,
            "per_category": {k: (None if math.isnan(v) else v) for k, v in self.per_category().items()},
            "n_images": self.n_images,
            "n_gt": self.n_gt,
            "n_detections": self.n_detections,
        }


def evaluate(
    detections_per_image: Mapping[int, Sequence[Detection]],
    dataset: DomainDataset,
    thresholds: Sequence[float] = COCO_THRESHOLDS,
) -> EvalResult:
    """Per-category AP at each threshold over every image of ``dataset``.

    Images without an entry in ``detections_per_image`` count as having no
    detections; entries for unknown image ids are an error.
    """
    thresholds = tuple(float(t) for t in thresholds)
    for t in thresholds:
        _check_threshold(t)
    if 0.5 not in thresholds:
        thresholds = (0.5,) + thresholds
    known = {s.image_id for s in dataset}
    unknown = sorted(set(detections_per_image) - known)
    if unknown:
        raise KeyError(f"detections reference image ids not in the dataset: {unknown[:10]}")

    gt: dict[int, dict[int, list]] = {c: {} for c in dataset.categories}
    with evaluation_context():
        for s in dataset:
            for box, cat in s.annotations:
                gt[cat].setdefault(s.image_id, []).append(box.as_tuple())
    dets: dict[int, list] = {c: [] for c in dataset.categories}
    n_det = 0
    for image_id, items in detections_per_image.items():
        for d in items:
            n_det += 1
            if d.category_id in dets:
                dets[d.category_id].append((d.score, image_id, np.asarray(d.box.as_tuple(), dtype=np.float64)))

    ap: dict[float, dict[int, float]] = {t: {} for t in thresholds}
    n_gt = 0
    for cat in dataset.categories:
        count = sum(len(v) for v in gt[cat].values())
        n_gt += count
        flags = _match(dets[cat], gt[cat], thresholds)
        for ti, t in enumerate(thresholds):
            ap[t][cat] = _ap_from_flags(flags[ti], count)
    return EvalResult(thresholds, dict(dataset.categories), ap, len(dataset), n_gt, n_det)


# ------------------------------------------------------------------ detections file


def save_detections(detections_per_image: Mapping[int, Sequence[Detection]], path) -> Path:
    rows = [
        {"image_id": int(img), "category_id": int(d.category_id), "bbox": d.box.to_xywh(), "score": float(d.score)}
        for img in sorted(detections_per_image)
        for d in detections_per_image[img]
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(rows))
    return path


def load_detections(path) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for row in json.loads(Path(path).read_text()):
        out.setdefault(int(row["image_id"]), []).append(
            Detection(Box.from_xywh(*row["bbox"]), int(row["category_id"]), float(row["score"]))
        )
    return out


# ------------------------------------------------------------------ transfer reports


def pair_label(src: str, tgt: str) -> str:
    """``("D1", "D2") -> "D1→2"``; other names are joined verbatim."""
    if src[:1] == tgt[:1] == "D" and src[1:].isdigit() and tgt[1:].isdigit():
        return f"{src}→{tgt[1:]}"
    return f"{src}→{tgt}"


def ordered_pairs(domains: Sequence[str]) -> list[tuple[str, str]]:
    return [(s, t) for s in domains for t in domains if s != t]


@dataclass
class TransferReport:
    method: str
    domains: tuple[str, ...]
    values: dict[tuple[str, str], float]  # percent
    per_category: dict[str, float] = field(default_factory=dict)  # percent, category order kept

    @property
    def pairs(self) -> list[tuple[str, str]]:
        return ordered_pairs(self.domains)

    @property
    def overall(self) -> float:
        return float(np.mean([self.values[p] for p in self.pairs]))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "domains": list(self.domains),
            "pairs": [{"source": s, "target": t, "map50": self.values[(s, t)]} for s, t in self.pairs],
            "overall_avg": self.overall,
            "per_category": dict(self.per_category),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransferReport":
        return cls(
            d["method"],
            tuple(d["domains"]),
            {(p["source"], p["target"]): float(p["map50"]) for p in d["pairs"]},
            {k: float(v) for k, v in d.get("per_category", {}).items()},
        )


def transfer_matrix(
    per_pair_results: Mapping[tuple[str, str], object],
    domains: Sequence[str] = ("D1", "D2", "D3"),
    method: str = "adapted",
    per_category: Optional[Mapping[str, float]] = None,
) -> TransferReport:
    """Assemble a report over every ordered domain pair.

    Values may be percentages or :class:`EvalResult` objects (their mAP@0.5 is
    converted to percent).
    """
    domains = tuple(domains)
    if len(domains) < 2:
        raise ValueError("a transfer matrix needs at least two domains")
    missing = [pair_label(s, t) for s, t in ordered_pairs(domains) if (s, t) not in per_pair_results]
    if missing:
        raise KeyError(f"missing domain pairs: {', '.join(missing)}")
    values = {}
    for p in ordered_pairs(domains):
        v = per_pair_results[p]
        values[p] = 100.0 * v.map50 if isinstance(v, EvalResult) else float(v)
    return TransferReport(method, domains, values, dict(per_category or {}))


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"


def transfer_csv(reports: Sequence[TransferReport]) -> str:
    domains = reports[0].domains
    if any(r.domains != domains for r in reports):
        raise ValueError("all reports in one table must share the domain list")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [pair_label(s, t) for s, t in ordered_pairs(domains)] + ["overall_avg"])
    for r in reports:
        w.writerow([r.method] + [_fmt(r.values[p]) for p in r.pairs] + [_fmt(r.overall)])
    return buf.getvalue()


def per_category_csv(reports: Sequence[TransferReport], categories: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + list(categories))
    for r in reports:
        w.writerow([r.method] + [_fmt(r.per_category.get(c, math.nan)) for c in categories])
    return buf.getvalue()


def _plot(reports: Sequence[TransferReport], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [pair_label(s, t) for s, t in reports[0].pairs] + ["avg"]
    x = np.arange(len(labels))
    width = 0.8 / len(reports)
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for i, r in enumerate(reports):
        ax.bar(x + i * width, [r.values[p] for p in r.pairs] + [r.overall], width, label=r.method)
    ax.set_xticks(x + 0.4 - width / 2, labels)
    ax.set_ylabel("mAP@0.5 (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def emit_report(
    report,
    out_dir,
    formats: Sequence[str] = ("csv", "json", "plot"),
    categories: Optional[Sequence[str]] = None,
    stem: str = "transfer",
) -> list[Path]:
    """Write one or more reports as CSV / JSON / PNG. Output is deterministic."""
    reports = [report] if isinstance(report, TransferReport) else list(report)
    if not reports:
        raise ValueError("nothing to report")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    written = []
    for fmt in formats:
        if fmt == "csv":
            p = out_dir / f"{stem}.csv"
            p.write_text(transfer_csv(reports), encoding="utf-8")
            written.append(p)
            cats = categories or [c for c in reports[0].per_category]
            if cats:
                p = out_dir / f"{stem}_per_category.csv"
                p.write_text(per_category_csv(reports, cats), encoding="utf-8")
                written.append(p)
        elif fmt == "json":
            p = out_dir / f"{stem}.json"
            p.write_text(json.dumps([r.to_dict() for r in reports], indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
            written.append(p)
        elif fmt == "plot":
            p = out_dir / f"{stem}.png"
            _plot(reports, p)
            written.append(p)
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    return written


def load_report_json(path) -> list[TransferReport]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list) or not raw:
        raise ValueError("expected a non-empty list of method reports")
    return [TransferReport.from_dict(d) for d in raw]

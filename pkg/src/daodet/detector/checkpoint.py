"""Self-describing checkpoint archives for detectors and training runs."""
from __future__ import annotations

import io
from pathlib import Path
from typing import Optional

import torch

from .model import Detector, DetectorConfig

FORMAT = "daodet-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _state(model: Optional[Detector]):
    if model is None:
        return None
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def save_checkpoint(path, student: Detector, teacher: Optional[Detector] = None, step: int = 0, extra: Optional[dict] = None) -> Path:
    """Write student (and optionally teacher) weights with the detector config.

    The archive records backbone tag, anchor configuration, class table and
    step counter so it can be rebuilt without any other input.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "backbone": student.config.backbone,
        "anchors": {
            "sizes": list(student.config.anchors.sizes),
            "aspect_ratios": list(student.config.anchors.aspect_ratios),
        },
        "detector_config": student.config.to_dict(),
        "category_ids": list(student.category_ids),
        "dtype": str(student.cls_score.weight.dtype),
        "step": int(step),
        "student": _state(student),
        "teacher": _state(teacher),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def _build(payload, key) -> Optional[Detector]:
    state = payload[key]
    if state is None:
        return None
    model = Detector(DetectorConfig.from_dict(payload["detector_config"]), category_ids=payload["category_ids"])
    if payload.get("dtype") == str(torch.float64):
        model = model.double()
    model.load_state_dict(state)
    return model


def load_checkpoint(path, expect_backbone: Optional[str] = None) -> dict:
    """Returns ``{"student", "teacher", "step", "backbone", "extra"}``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(io.BytesIO(path.read_bytes()), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path} is not a readable checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} archive")
    if expect_backbone is not None and payload["backbone"] != expect_backbone:
        raise CheckpointError(
            f"checkpoint backbone {payload['backbone']!r} does not match configured {expect_backbone!r}"
        )
    return {
        "student": _build(payload, "student"),
        "teacher": _build(payload, "teacher"),
        "step": payload["step"],
        "backbone": payload["backbone"],
        "extra": payload["extra"],
    }

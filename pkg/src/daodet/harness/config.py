"""Experiment configuration: nested YAML document <-> typed dataclasses.

Unknown keys anywhere in the document are errors. ``seed`` and ``data.kind``
have no default; everything else does. :func:`dump_config` writes the resolved
form (all defaults filled in) which loads back to an equal config.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union, get_args, get_origin, get_type_hints

import yaml


class ConfigError(ValueError):
    pass


_REQUIRED = object()


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 96
    n_train: int = 200
    n_eval: int = 100
    n_categories: int = 5
    clutter: float = 0.5
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 14
    max_size: int = 32


@dataclass(frozen=True)
class DataConfig:
    kind: str = _REQUIRED  # "synth" or "coco"
    domains: tuple[str, ...] = ("D1", "D2", "D3")
    source: str = "D1"
    target: str = "D2"
    root: str = ""  # coco layout: <root>/<domain>/<split>/annotations.json
    synth: SynthConfig = SynthConfig()


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "tiny_cnn"


@dataclass(frozen=True)
class AugSection:
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


@dataclass(frozen=True)
class TrainConfig:
    burn_in_steps: int = 1000
    adapt_steps: int = 1000
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eval_every: int = 0  # 0 disables periodic snapshots


@dataclass(frozen=True)
class EmaConfig:
    alpha: float = 0.99


@dataclass(frozen=True)
class LossConfig:
    sup_weight: float = 1.0
    distill_weight: float = 1.0
    align_weight: float = 0.0


@dataclass(frozen=True)
class DistillSection:
    rpn_same_grid: bool = False


@dataclass(frozen=True)
class AlignConfig:
    enabled: bool = False
    grl_lambda: float = 1.0
    method: str = "adversarial"


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    batch_size: int = 16


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = _REQUIRED
    data: DataConfig = _REQUIRED
    out: str = "runs"
    device: str = "cpu"
    model: ModelConfig = ModelConfig()
    aug: AugSection = AugSection()
    train: TrainConfig = TrainConfig()
    ema: EmaConfig = EmaConfig()
    loss: LossConfig = LossConfig()
    distill: DistillSection = DistillSection()
    align: AlignConfig = AlignConfig()
    eval: EvalConfig = EvalConfig()

    def replace(self, **changes) -> "ExperimentConfig":
        """``replace(**{"train.adapt_steps": 0, "seed": 3})`` with dotted keys."""
        d = to_dict(self)
        for key, value in changes.items():
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return from_dict(d)


# ------------------------------------------------------------------ conversion


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        return _build(tp, value, path + ".")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        (inner, _) = get_args(tp) if len(get_args(tp)) == 2 else (get_args(tp)[0], None)
        return tuple(_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if origin is Union:
        inner = [a for a in get_args(tp) if a is not type(None)][0]
        return None if value is None else _coerce(value, inner, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, raw: dict, prefix: str = ""):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(f"{prefix}{k}" for k in unknown))
    kwargs = {}
    for f in dataclasses.fields(cls):
        path = f"{prefix}{f.name}"
        if f.name in raw:
            kwargs[f.name] = _coerce(raw[f.name], hints[f.name], path)
        elif f.default is _REQUIRED:
            raise ConfigError(f"missing required config key {path!r}")
    return cls(**kwargs)


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a mapping")
    cfg = _build(ExperimentConfig, raw)
    validate(cfg)
    return cfg


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def validate(cfg: ExperimentConfig) -> None:
    """Collect every problem before raising, so one run reports them all."""
    from ..augment import AugConfig
    from ..detector.backbones import BACKBONES

    problems = []
    d = cfg.data
    if d.kind not in ("synth", "coco"):
        problems.append(f"data.kind must be 'synth' or 'coco', got {d.kind!r}")
    if d.kind == "coco" and not d.root:
        problems.append("data.root is required when data.kind is 'coco'")
    if len(d.domains) < 2 or len(set(d.domains)) != len(d.domains):
        problems.append("data.domains needs at least two distinct names")
    if d.kind == "synth":
        from ..data import DOMAIN_PROFILES

        missing = [x for x in d.domains if x not in DOMAIN_PROFILES]
        if missing:
            problems.append(f"synthetic domains must be among {sorted(DOMAIN_PROFILES)}, got {missing}")
    for role in ("source", "target"):
        if getattr(d, role) not in d.domains:
            problems.append(f"data.{role} {getattr(d, role)!r} not in data.domains")
    if d.source == d.target:
        problems.append("data.source and data.target must differ")
    s = d.synth
    if s.n_train < 1 or s.n_eval < 1:
        problems.append("data.synth.n_train and n_eval must be >= 1")
    if not 1 <= s.n_categories <= 10:
        problems.append("data.synth.n_categories must lie in [1, 10]")
    if cfg.model.backbone not in BACKBONES:
        problems.append(f"model.backbone must be one of {sorted(BACKBONES)}, got {cfg.model.backbone!r}")
    try:
        AugConfig(**to_dict(cfg.aug))
    except ValueError as exc:
        problems.append(str(exc))
    t = cfg.train
    if t.burn_in_steps < 0 or t.adapt_steps < 0:
        problems.append("train.burn_in_steps and train.adapt_steps must be >= 0")
    if t.batch_size < 1:
        problems.append("train.batch_size must be >= 1")
    if t.lr <= 0:
        problems.append("train.lr must be > 0")
    if t.eval_every < 0:
        problems.append("train.eval_every must be >= 0")
    if not 0.0 <= cfg.ema.alpha <= 1.0:
        problems.append("ema.alpha must lie in [0, 1]")
    for k in ("sup_weight", "distill_weight", "align_weight"):
        if getattr(cfg.loss, k) < 0:
            problems.append(f"loss.{k} must be >= 0")
    if cfg.align.method not in ("adversarial", "image_to_image"):
        problems.append(f"align.method must be 'adversarial' or 'image_to_image', got {cfg.align.method!r}")
    if cfg.align.grl_lambda < 0:
        problems.append("align.grl_lambda must be >= 0")
    if not cfg.eval.thresholds or any(not 0 < x <= 1 for x in cfg.eval.thresholds):
        problems.append("eval.thresholds must be a non-empty list in (0, 1]")
    if cfg.device not in ("cpu", "accelerator"):
        problems.append(f"device must be 'cpu' or 'accelerator', got {cfg.device!r}")
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))


# ------------------------------------------------------------------ files


def load_config(path: Union[str, Path], overrides: Optional[dict] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a mapping")
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    return from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, allow_unicode=True)


def save_config(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path


def content_hash(cfg: ExperimentConfig, extra: bytes = b"") -> str:
    """Git-style blob hash of the canonical resolved config plus ``extra`` input bytes."""
    payload = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":")).encode() + extra
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()

"""Experiment orchestration: source-only baseline, adaptation runs, benchmarks.

Run directory layout under ``config.out``::

    so_<src>/            config.yaml, inputs.sha1, burn_in.pt, final.pt,
                         metrics_<src>-<tgt>.json, timing.json
    adapt_<src>-<tgt>/   config.yaml, inputs.sha1, final.pt, metrics.json, timing.json
    report/              transfer.{csv,json,png}, transfer_per_category.csv

``metrics*.json`` files are pure functions of the resolved config, so reruns
reproduce them byte for byte; wall-clock time lives in ``timing.json``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from ..align import AlignState
from ..augment import AugConfig
from ..data import DOMAIN_PROFILES, DomainDataset, SynthSpec, batch_stream, load_coco, synth_domain
from ..detector import Detector, DetectorConfig, load_checkpoint, predict_dataset, save_checkpoint
from ..distill import ADAPTATION, DistillConfig, TrainState, adaptation_step, burn_in, derive_seed, init_state, supervised_train
from ..eval import EvalResult, emit_report, evaluate, pair_label, transfer_matrix
from .config import ExperimentConfig, content_hash, save_config, to_dict

log = logging.getLogger(__name__)

SPLITS = ("train", "eval")
SOURCE_ONLY = "source_only"
ADAPTED = "adapted"


# ------------------------------------------------------------------ data


def _synth_spec(cfg: ExperimentConfig) -> SynthSpec:
    s = cfg.data.synth
    return SynthSpec(
        image_size=s.image_size,
        n_images=s.n_train,
        n_categories=s.n_categories,
        clutter=s.clutter,
        min_objects=s.min_objects,
        max_objects=s.max_objects,
        min_size=s.min_size,
        max_size=s.max_size,
    )


@lru_cache(maxsize=16)
def _synth_split(spec: SynthSpec, seed: int, domain: str, split: str, n: int) -> DomainDataset:
    names = sorted(DOMAIN_PROFILES)
    scene_seed = derive_seed(seed, 0xDA7A, names.index(domain), SPLITS.index(split))
    return synth_domain(spec, DOMAIN_PROFILES[domain], scene_seed, "source", n_images=n, name=f"{domain}/{split}")


def load_split(cfg: ExperimentConfig, domain: str, split: str, role: str) -> DomainDataset:
    """One split of one domain with the requested role.

    Synthetic domains share the scene distribution and differ only in device
    profile; each (domain, split) draws its own scenes from ``cfg.seed``.
    """
    if cfg.data.kind == "synth":
        n = cfg.data.synth.n_train if split == "train" else cfg.data.synth.n_eval
        return _synth_split(_synth_spec(cfg), cfg.seed, domain, split, n).as_role(role)
    d = Path(cfg.data.root) / domain / split
    return load_coco(d / "annotations.json", d, role)


def _data_digest(cfg: ExperimentConfig, domains: Sequence[str]) -> bytes:
    """Bytes of on-disk inputs (empty for synthetic data, which the config fully determines)."""
    if cfg.data.kind == "synth":
        return b""
    h = hashlib.sha1()
    for dom in domains:
        for split in SPLITS:
            d = Path(cfg.data.root) / dom / split
            for p in sorted(d.iterdir()):
                h.update(p.name.encode())
                h.update(p.read_bytes())
    return h.digest()


# ------------------------------------------------------------------ state


def build_state(cfg: ExperimentConfig, categories: dict[int, str], source_fill=None, target_fill=None) -> TrainState:
    """Fresh student/teacher/optimizer; occlusions are filled with each domain's mean colour."""
    if cfg.device == "accelerator" and not torch.cuda.is_available():
        log.warning("no accelerator available; running on cpu")
    dcfg = DetectorConfig(backbone=cfg.model.backbone, num_classes=len(categories))
    student = Detector(dcfg, seed=derive_seed(cfg.seed, 0x30DE1), category_ids=list(categories))
    align = None
    if cfg.align.enabled:
        align = AlignState(
            student.backbone.out_channels,
            enabled=True,
            grl_lambda=cfg.align.grl_lambda,
            method=cfg.align.method,
            seed=derive_seed(cfg.seed, 0xD15C),
        )
    return init_state(
        student,
        lr=cfg.train.lr,
        momentum=cfg.train.momentum,
        weight_decay=cfg.train.weight_decay,
        align=align,
        alpha=cfg.ema.alpha,
        sup_weight=cfg.loss.sup_weight,
        distill_weight=cfg.loss.distill_weight,
        align_weight=cfg.loss.align_weight,
        aug=AugConfig(**to_dict(cfg.aug)),
        distill=DistillConfig(rpn_same_grid=cfg.distill.rpn_same_grid),
        seed=cfg.seed,
        source_fill=source_fill,
        target_fill=target_fill,
    )


def save_state(path, state: TrainState) -> Path:
    extra = {"optimizer": state.optimizer.state_dict(), "phase": state.phase}
    if state.align is not None:
        extra["align"] = state.align.state_dict()
    return save_checkpoint(path, state.student, state.teacher, step=state.step, extra=extra)


def restore_state(state: TrainState, path, backbone: str) -> TrainState:
    """Load weights, optimizer and step from ``path`` into ``state`` in place."""
    ck = load_checkpoint(path, expect_backbone=backbone)
    state.student.load_state_dict(ck["student"].state_dict())
    state.teacher.load_state_dict((ck["teacher"] or ck["student"]).state_dict())
    if "optimizer" in ck["extra"]:
        # keep momentum buffers, but the config's hyperparameters win
        hyper = [{k: v for k, v in g.items() if k != "params"} for g in state.optimizer.param_groups]
        try:
            state.optimizer.load_state_dict(ck["extra"]["optimizer"])
        except ValueError:
            # e.g. alignment toggled since the checkpoint: parameter sets differ
            log.warning("optimizer state in %s does not fit this model; momentum restarts", path)
        for g, h in zip(state.optimizer.param_groups, hyper):
            g.update(h)
    if state.align is not None and "align" in ck["extra"]:
        state.align.load_state_dict(ck["extra"]["align"])
    state.step = int(ck["step"])
    return state


# ------------------------------------------------------------------ results


@dataclass
class RunResult:
    method: str
    pair: tuple[str, str]
    steps: int
    teacher: EvalResult
    student: EvalResult
    out_dir: Path
    checkpoint: Path
    snapshots: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    wallclock_s: float = 0.0

    @property
    def result(self) -> EvalResult:
        """The deployed model is the EMA teacher."""
        return self.teacher

    def metrics(self) -> dict:
        def block(r: EvalResult) -> dict:
            d = r.to_dict()
            return {"map50": d["map50"], "map5095": d["map5095"], "per_category": d["per_category"]}

        out = {"pair": pair_label(*self.pair), "method": self.method, "steps": self.steps, "model": "teacher"}
        out.update(block(self.teacher))
        out["counts"] = {k: self.teacher.to_dict()[k] for k in ("n_images", "n_gt", "n_detections")}
        out["student"] = block(self.student)
        if self.snapshots:
            out["snapshots"] = self.snapshots
        out.update(self.extra)
        return out


def _dump_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def _evaluate_model(model: Detector, ds: DomainDataset, cfg: ExperimentConfig) -> EvalResult:
    dets = predict_dataset(model, ds, cfg.eval.batch_size, cfg.eval.score_thresh, cfg.eval.nms_iou)
    return evaluate(dets, ds, cfg.eval.thresholds)


def _prepare_dir(cfg: ExperimentConfig, name: str, domains: Sequence[str]) -> Path:
    out = Path(cfg.out) / name
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    (out / "inputs.sha1").write_text(content_hash(cfg, _data_digest(cfg, domains)) + "\n")
    return out


# ------------------------------------------------------------------ runs


def run_source_only(config: ExperimentConfig, targets: Optional[Sequence[str]] = None) -> dict[str, RunResult]:
    """Supervised training on the source domain only, evaluated on each target.

    Trains for ``burn_in_steps + adapt_steps`` steps (the adaptation run's
    total budget) and stores the state at ``burn_in_steps`` as ``burn_in.pt``
    so that :func:`run_adapt` can start from it. Returns one result per target
    (default ``[config.data.target]``).
    """
    t0 = time.perf_counter()
    cfg = config
    src = cfg.data.source
    targets = [cfg.data.target] if targets is None else list(targets)
    out = _prepare_dir(cfg, f"so_{src}", [src, *targets])
    train = load_split(cfg, src, "train", "source")
    state = build_state(cfg, train.categories, source_fill=train.mean_color())
    supervised_train(state, train, cfg.train.burn_in_steps, cfg.train.batch_size)
    save_state(out / "burn_in.pt", state)
    supervised_train(state, train, cfg.train.adapt_steps, cfg.train.batch_size)
    ckpt = save_state(out / "final.pt", state)

    source_eval = _evaluate_model(state.teacher, load_split(cfg, src, "eval", "source"), cfg)
    results = {}
    timing = {"train_s": time.perf_counter() - t0}
    for tgt in targets:
        ds = load_split(cfg, tgt, "eval", "target")
        res = RunResult(
            SOURCE_ONLY,
            (src, tgt),
            state.step,
            _evaluate_model(state.teacher, ds, cfg),
            _evaluate_model(state.student, ds, cfg),
            out,
            ckpt,
            extra={"source_eval": {"map50": source_eval.map50, "map5095": source_eval.map5095}},
        )
        _dump_json(out / f"metrics_{src}-{tgt}.json", res.metrics())
        results[tgt] = res
    wall = time.perf_counter() - t0
    for r in results.values():
        r.wallclock_s = wall
    _dump_json(out / "timing.json", {**timing, "wallclock_s": wall})
    return results


def run_adapt(config: ExperimentConfig, source_checkpoint=None) -> RunResult:
    """Burn-in (or load it from ``source_checkpoint``) then adaptation steps.

    Both the EMA teacher (primary) and the student are evaluated on the target
    eval split. With ``train.eval_every > 0`` the teacher is also evaluated
    periodically and the snapshots are kept in the metrics.
    """
    t0 = time.perf_counter()
    cfg = config
    src, tgt = cfg.data.source, cfg.data.target
    out = _prepare_dir(cfg, f"adapt_{src}-{tgt}", [src, tgt])
    src_train = load_split(cfg, src, "train", "source")
    tgt_train = load_split(cfg, tgt, "train", "target")
    tgt_eval = load_split(cfg, tgt, "eval", "target")
    state = build_state(cfg, src_train.categories, src_train.mean_color(), tgt_train.mean_color())
    if source_checkpoint is not None:
        restore_state(state, source_checkpoint, cfg.model.backbone)
        if state.step != cfg.train.burn_in_steps:
            log.warning("checkpoint step %d differs from train.burn_in_steps %d", state.step, cfg.train.burn_in_steps)
        state.phase = ADAPTATION
    else:
        burn_in(state, src_train, cfg.train.burn_in_steps, cfg.train.batch_size)

    stream = batch_stream(src_train, tgt_train, cfg.train.batch_size, derive_seed(cfg.seed, 0xADA))
    snapshots = []
    for k in range(cfg.train.adapt_steps):
        batch = next(stream)
        if len(batch.source) != len(batch.target):
            raise AssertionError(f"unequal domain batch at adaptation step {k}")
        adaptation_step(state, batch)
        if cfg.train.eval_every and (k + 1) % cfg.train.eval_every == 0 and k + 1 < cfg.train.adapt_steps:
            snap = _evaluate_model(state.teacher, tgt_eval, cfg)
            snapshots.append({"step": state.step, "map50": snap.map50})
            log.info("step %d teacher map50 %.4f", state.step, snap.map50)
    ckpt = save_state(out / "final.pt", state)
    res = RunResult(
        ADAPTED,
        (src, tgt),
        state.step,
        _evaluate_model(state.teacher, tgt_eval, cfg),
        _evaluate_model(state.student, tgt_eval, cfg),
        out,
        ckpt,
        snapshots,
    )
    _dump_json(out / "metrics.json", res.metrics())
    res.wallclock_s = time.perf_counter() - t0
    _dump_json(out / "timing.json", {"wallclock_s": res.wallclock_s})
    return res


def evaluate_checkpoint(config: ExperimentConfig, checkpoint, domain: str, split: str = "eval", model: str = "teacher") -> EvalResult:
    ck = load_checkpoint(checkpoint, expect_backbone=config.model.backbone)
    net = ck[model] or ck["student"]
    return _evaluate_model(net, load_split(config, domain, split, "target"), config)


def run_benchmark(config: ExperimentConfig, methods: Sequence[str] = (SOURCE_ONLY, ADAPTED)) -> dict:
    """Every ordered pair of ``config.data.domains``: source-only and adapted runs.

    One source-only model is trained per source domain and evaluated on all
    other domains; each adaptation run starts from that model's burn-in
    checkpoint. Writes the transfer report; if any pair fails, writes
    ``benchmark.partial.json`` with what finished and re-raises.
    """
    domains = tuple(config.data.domains)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    per_method: dict[str, dict] = {m: {} for m in methods}
    per_cat: dict[str, dict] = {m: {} for m in methods}
    try:
        for s in domains:
            others = [t for t in domains if t != s]
            so = run_source_only(config.replace(**{"data.source": s, "data.target": others[0]}), targets=others)
            for t in others:
                if SOURCE_ONLY in per_method:
                    per_method[SOURCE_ONLY][(s, t)] = so[t].teacher
                if ADAPTED in per_method:
                    cfg = config.replace(**{"data.source": s, "data.target": t})
                    res = run_adapt(cfg, source_checkpoint=so[t].out_dir / "burn_in.pt")
                    per_method[ADAPTED][(s, t)] = res.teacher
    except BaseException:
        partial = {
            "partial": True,
            "completed": {
                m: {pair_label(*p): r.map50 * 100.0 for p, r in done.items()} for m, done in per_method.items()
            },
        }
        _dump_json(out / "benchmark.partial.json", partial)
        raise

    reports = []
    categories = None
    for m in methods:
        results = per_method[m]
        first = next(iter(results.values()))
        categories = [first.categories[c] for c in first.categories]
        cat_means = {}
        for code in categories:
            vals = [r.per_category()[code] for r in results.values()]
            vals = [v for v in vals if not np.isnan(v)]
            cat_means[code] = float(np.mean(vals)) * 100.0 if vals else float("nan")
        per_cat[m] = cat_means
        reports.append(transfer_matrix(results, domains, method=m, per_category=cat_means))
    files = emit_report(reports, out / "report", categories=categories)
    _dump_json(out / "benchmark.json", {"partial": False, "reports": [r.to_dict() for r in reports]})
    return {"reports": reports, "files": files}

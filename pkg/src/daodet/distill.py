"""Mean-teacher self-distillation: burn-in, EMA teacher, soft multi-task distillation.

One adaptation step (source half and target half of an equal-size batch):

    source --strong_source--> student --> supervised loss vs transported labels
    target --weak----------> teacher --> soft targets (no gradient)
    target --strong_target-> student --> distillation loss vs soft targets
    student <- one SGD update on the weighted sum;  teacher <- EMA(student)

Soft targets are the teacher's raw outputs after softmax/sigmoid. There is no
confidence threshold anywhere on this path; every teacher proposal is kept.
"""
from __future__ import annotations

import copy
from functools import lru_cache
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .align import AlignState, align_loss
from .augment import AugConfig, AugRecord, apply_aug, apply_aug_box_array, sample_aug
from .data import DomainBatch, DomainDataset, Sample
from .detector import (
    Detector,
    LossBreakdown,
    LossWeights,
    MatchConfig,
    NumericError,
    RawOutputs,
    supervised_forward,
    supervised_loss,
)
from .detector.loss import smooth_l1
from .geometry import AffineView, transport

BURN_IN = "burn_in"
ADAPTATION = "adaptation"


class PhaseError(RuntimeError):
    pass


class ViewMappingError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    """Distillation knobs. Deliberately has no confidence-threshold field."""

    rpn_same_grid: bool = False  # weak and strong scales drawn independently
    term_weights: LossWeights = LossWeights()


@dataclass
class TrainState:
    student: Detector
    teacher: Detector
    optimizer: torch.optim.Optimizer
    step: int = 0
    phase: str = BURN_IN
    alpha: float = 0.99
    sup_weight: float = 1.0
    distill_weight: float = 1.0
    align_weight: float = 0.0
    align: Optional[AlignState] = None
    aug: AugConfig = AugConfig()
    match: MatchConfig = MatchConfig()
    distill: DistillConfig = DistillConfig()
    seed: int = 0
    source_fill: Optional[tuple[float, float, float]] = None  # occlusion fill per domain (default aug.fill)
    target_fill: Optional[tuple[float, float, float]] = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.phase not in (BURN_IN, ADAPTATION):
            raise ValueError(f"unknown phase {self.phase!r}")
        assert_same_structure(self.teacher, self.student)


def assert_same_structure(a: torch.nn.Module, b: torch.nn.Module) -> None:
    sa, sb = a.state_dict(), b.state_dict()
    if list(sa) != list(sb) or any(sa[k].shape != sb[k].shape for k in sa):
        raise ValueError("teacher and student differ in structure")


def make_teacher(student: Detector) -> Detector:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher.eval()


def init_state(
    student: Detector,
    lr: float = 0.01,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    align: Optional[AlignState] = None,
    **kwargs,
) -> TrainState:
    """Fresh burn-in state: teacher is a frozen copy of the student."""
    params = list(student.parameters())
    if align is not None and align.enabled:
        params += list(align.parameters())
    opt = torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    return TrainState(student, make_teacher(student), opt, align=align, **kwargs)


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, alpha: float) -> torch.nn.Module:
    """In place: every floating tensor ``t <- alpha * t + (1 - alpha) * s``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA alpha must lie in [0, 1], got {alpha}")
    assert_same_structure(teacher, student)
    ss = student.state_dict()
    for name, t in teacher.state_dict().items():
        if t.is_floating_point():
            t.copy_(t * alpha + ss[name] * (1.0 - alpha))
    return teacher


# ---------------------------------------------------------------- seeding


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


_SRC, _WEAK, _STRONG, _SAMPLER = 1, 2, 3, 4


def _class_map(student: Detector) -> dict[int, int]:
    return {cid: i for i, cid in enumerate(student.category_ids)}


def _aug_for(state: TrainState, fill) -> AugConfig:
    return state.aug if fill is None else replace(state.aug, fill=tuple(float(v) for v in fill))


def source_views(samples: Sequence[Sample], state: TrainState, step: int):
    """Strong-source views of labelled samples with labels moved into each view."""
    cmap = _class_map(state.student)
    aug = _aug_for(state, state.source_fill)
    images, boxes, classes, records = [], [], [], []
    for i, s in enumerate(samples):
        rec = sample_aug("strong_source", s.shape, derive_seed(state.seed, step, i, _SRC), aug)
        images.append(apply_aug(s.image, rec))
        boxes.append(torch.from_numpy(apply_aug_box_array(s.box_array(), rec)))
        classes.append(torch.tensor([cmap[c] for c in s.label_array().tolist()], dtype=torch.int64))
        records.append(rec)
    return images, boxes, classes, records


def target_records(samples: Sequence[Sample], state: TrainState, step: int) -> tuple[list[AugRecord], list[AugRecord]]:
    aug = _aug_for(state, state.target_fill)
    weak, strong = [], []
    for i, s in enumerate(samples):
        w = sample_aug("weak", s.shape, derive_seed(state.seed, step, i, _WEAK), aug)
        geometry = w if state.distill.rpn_same_grid else None
        st = sample_aug("strong_target", s.shape, derive_seed(state.seed, step, i, _STRONG), aug, geometry_from=geometry)
        weak.append(w)
        strong.append(st)
    return weak, strong


def _sampler(state: TrainState, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(state.seed, step, 0, _SAMPLER))


def source_loss(state: TrainState, samples: Sequence[Sample], step: int) -> tuple[LossBreakdown, RawOutputs]:
    images, boxes, classes, _ = source_views(samples, state, step)
    out, targets = supervised_forward(state.student, images, boxes, classes, _sampler(state, step), state.match)
    return supervised_loss(out, targets, state.match), out


def _sgd_step(state: TrainState, total: torch.Tensor) -> None:
    if not torch.isfinite(total):
        raise NumericError(f"non-finite training loss at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()


def supervised_train(state: TrainState, source_dataset: DomainDataset, steps: int, batch_size: int = 4) -> TrainState:
    """``steps`` supervised updates with EMA tracking; phase is left untouched."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    for _ in range(steps):
        samples = source_batch(source_dataset, batch_size, state.seed, state.step)
        losses, _ = source_loss(state, samples, state.step)
        total = state.sup_weight * losses.total
        _sgd_step(state, total)
        ema_update(state.teacher, state.student, state.alpha)
        state.history.append({"step": state.step, "phase": state.phase, "sup": float(total.detach())})
        state.step += 1
    return state


def burn_in(state: TrainState, source_dataset: DomainDataset, steps: int, batch_size: int = 4) -> TrainState:
    """Supervised training on strongly augmented source images with an EMA teacher.

    Ends by switching the state to the adaptation phase.
    """
    if state.phase != BURN_IN:
        raise PhaseError("burn_in called outside the burn-in phase")
    supervised_train(state, source_dataset, steps, batch_size)
    state.phase = ADAPTATION
    return state


@lru_cache(maxsize=64)
def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(derive_seed(seed, 0xB0B, epoch)).permutation(n)


def source_batch(dataset: DomainDataset, batch_size: int, seed: int, step: int) -> list[Sample]:
    """Batch ``step`` of an endless sequence of shuffled epochs over ``dataset``."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty source dataset")
    out = []
    for j in range(step * batch_size, (step + 1) * batch_size):
        epoch, r = divmod(j, n)
        out.append(dataset[int(_epoch_order(seed, epoch, n)[r])])
    return out


# ---------------------------------------------------------------- soft targets


@dataclass(frozen=True)
class SoftTargets:
    """Teacher outputs on weak views; all tensors are detached.

    ``class_probs`` rows are softmax over ``K+1`` classes. Logits are kept next
    to probabilities so log-probabilities are computed exactly as the student's.
    """

    proposals: list[torch.Tensor]
    class_logits: torch.Tensor
    class_probs: torch.Tensor
    roi_deltas: torch.Tensor
    objectness_logits: torch.Tensor
    objectness_probs: torch.Tensor
    rpn_deltas: torch.Tensor
    records: list[AugRecord]
    image_sizes: list[tuple[int, int]]

    @property
    def num_proposals(self) -> int:
        return sum(len(p) for p in self.proposals)


@torch.no_grad()
def make_soft_targets(teacher: Detector, target_images: Sequence, weak_records: Sequence[AugRecord]) -> SoftTargets:
    """Run the teacher on weak views of target images; keep every proposal."""
    if len(target_images) != len(weak_records):
        raise ValueError("need one weak record per target image")
    views = []
    for img, rec in zip(target_images, weak_records):
        if rec.kind != "weak":
            raise ValueError(f"teacher views must be weak, got {rec.kind!r}")
        views.append(apply_aug(img, rec))
    was_training = teacher.training
    teacher.eval()
    out = teacher(views)
    teacher.train(was_training)
    return SoftTargets(
        proposals=[p.detach().clone() for p in out.rois],
        class_logits=out.roi_logits.detach(),
        class_probs=torch.softmax(out.roi_logits.detach(), dim=1),
        roi_deltas=out.roi_deltas.detach(),
        objectness_logits=out.objectness.detach(),
        objectness_probs=torch.sigmoid(out.objectness.detach()),
        rpn_deltas=out.rpn_deltas.detach(),
        records=list(weak_records),
        image_sizes=list(out.image_sizes),
    )


def _view_transports(targets: SoftTargets, strong_records: Sequence[AugRecord]) -> list[AffineView]:
    if len(strong_records) != len(targets.records):
        raise ViewMappingError("need one strong record per teacher view")
    return [transport(w.view, s.view) for w, s in zip(targets.records, strong_records)]


def student_rois(targets: SoftTargets, strong_records: Sequence[AugRecord]) -> list[torch.Tensor]:
    """Teacher proposals moved from each weak view into the matching strong view."""
    out = []
    for props, t in zip(targets.proposals, _view_transports(targets, strong_records)):
        mapped = t.apply_array(props.double().numpy())
        out.append(torch.from_numpy(mapped).to(props.dtype))
    return out


def soft_cross_entropy(student_logits: torch.Tensor, teacher_probs: torch.Tensor) -> torch.Tensor:
    """Per-row ``-sum p log q``."""
    return -(teacher_probs * F.log_softmax(student_logits, dim=1)).sum(dim=1)


def _categorical_kl(student_logits, teacher_logits, teacher_probs):
    return (teacher_probs * (F.log_softmax(teacher_logits, dim=1) - F.log_softmax(student_logits, dim=1))).sum(dim=1)


def _bernoulli_kl(student_logits, teacher_logits, teacher_probs):
    pos = F.logsigmoid(teacher_logits) - F.logsigmoid(student_logits)
    neg = F.logsigmoid(-teacher_logits) - F.logsigmoid(-student_logits)
    return teacher_probs * pos + (1.0 - teacher_probs) * neg


def distill_loss(
    student_out: RawOutputs,
    targets: SoftTargets,
    strong_records: Sequence[AugRecord],
    beta: float = MatchConfig().smooth_l1_beta,
    weights: LossWeights = LossWeights(),
    rpn_out: Optional[RawOutputs] = None,
) -> LossBreakdown:
    """Soft four-term distillation of RPN and RoI outputs.

    Classification terms are KL divergences from the teacher's distributions
    (the soft cross-entropy minus the teacher's entropy: same gradient, zero at
    agreement). Localisation terms are smooth-L1 to the teacher's deltas,
    weighted by the teacher's objectness / foreground probabilities.

    ``student_out`` must have been computed on ``student_rois(targets, strong_records)``.
    RPN terms pair anchors by index, so they use ``rpn_out`` (the student on the
    teacher's grid) when the strong views do not share the weak views' geometry.
    """
    expected = student_rois(targets, strong_records)
    if len(expected) != len(student_out.rois) or any(
        e.shape != r.shape or not torch.allclose(e.to(r.dtype), r, atol=1e-4) for e, r in zip(expected, student_out.rois)
    ):
        raise ViewMappingError("student RoIs are not the teacher proposals mapped into the strong views")
    transports = _view_transports(targets, strong_records)
    same_grid = all(t.is_close(AffineView.identity()) for t in transports)
    rpn_src = student_out if same_grid else rpn_out
    if rpn_src is None:
        raise ViewMappingError("strong and weak views differ; pass the student's RPN outputs on the teacher grid")
    if rpn_src.objectness.shape != targets.objectness_logits.shape:
        raise ViewMappingError("student and teacher anchor grids differ")

    obj = _bernoulli_kl(rpn_src.objectness, targets.objectness_logits.to(rpn_src.objectness.dtype), targets.objectness_probs.to(rpn_src.objectness.dtype)).mean()
    p_obj = targets.objectness_probs.to(rpn_src.rpn_deltas.dtype)
    rpn_sl1 = smooth_l1(rpn_src.rpn_deltas, targets.rpn_deltas.to(rpn_src.rpn_deltas.dtype), beta).sum(-1)
    rpn_loc = (p_obj * rpn_sl1).sum() / p_obj.sum().clamp(min=1.0)

    n = targets.num_proposals
    if n == 0:
        zero = student_out.roi_logits.sum() * 0.0
        return LossBreakdown(obj, rpn_loc, zero, zero, weights)
    dtype = student_out.roi_logits.dtype
    cls = _categorical_kl(student_out.roi_logits, targets.class_logits.to(dtype), targets.class_probs.to(dtype)).mean()

    flips = torch.cat([torch.full((len(p),), t.flipped) for p, t in zip(targets.proposals, transports)])
    teacher_deltas = targets.roi_deltas.to(dtype).clone()
    teacher_deltas[flips, :, 0] = -teacher_deltas[flips, :, 0]
    k = student_out.roi_deltas.shape[1]
    fg = targets.class_probs[:, :k].to(dtype)
    roi_sl1 = smooth_l1(student_out.roi_deltas, teacher_deltas, beta).sum(-1)  # (R, K)
    roi_loc = (fg * roi_sl1).sum() / fg.sum().clamp(min=1.0)
    return LossBreakdown(obj, rpn_loc, cls, roi_loc, weights)


def target_distill(state: TrainState, samples: Sequence[Sample], step: int):
    """Teacher soft targets and the student's distillation loss for target images."""
    weak, strong = target_records(samples, state, step)
    images = [s.image for s in samples]
    targets = make_soft_targets(state.teacher, images, weak)
    rois = student_rois(targets, strong)
    student_out = state.student([apply_aug(img, r) for img, r in zip(images, strong)], rois=rois)
    rpn_out = None
    if not state.distill.rpn_same_grid:
        regridded = [
            sample_aug("strong_target", r.image_shape, r.seed, _aug_for(state, state.target_fill), geometry_from=w) for r, w in zip(strong, weak)
        ]
        rpn_out = state.student([apply_aug(img, r) for img, r in zip(images, regridded)], rois=[p[:0] for p in targets.proposals])
    losses = distill_loss(student_out, targets, strong, state.match.smooth_l1_beta, state.distill.term_weights, rpn_out=rpn_out)
    return losses, student_out, targets


def adaptation_step(state: TrainState, batch: DomainBatch) -> TrainState:
    """One combined update: supervised source loss + target distillation (+ alignment)."""
    if state.phase != ADAPTATION:
        raise PhaseError("adaptation_step requires the adaptation phase (run burn_in first)")
    if len(batch.source) != len(batch.target):
        raise ValueError(f"unequal domain batch: {len(batch.source)} vs {len(batch.target)}")
    step = state.step
    sup, src_out = source_loss(state, batch.source, step)
    dist, tgt_out, _ = target_distill(state, batch.target, step)
    total = state.sup_weight * sup.total + state.distill_weight * dist.total
    record = {"step": step, "phase": ADAPTATION, "sup": float(sup.total.detach()), "distill": float(dist.total.detach())}
    if state.align is not None and state.align.enabled:
        la = align_loss(src_out.features, tgt_out.features, state.align)
        total = total + state.align_weight * la
        record["align"] = float(la.detach())
    _sgd_step(state, total)
    ema_update(state.teacher, state.student, state.alpha)
    state.history.append(record)
    state.step += 1
    return state

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The terminal summary (see conftest) lists every criterion's outcome.
"""
import ast
import copy
import json
import math
import re
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import daodet.distill as distill_mod
from daodet.align import AlignState, align_loss
from daodet.augment import AugRecord, apply_aug, identity_record
from daodet.data import CATEGORY_CODES, DOMAIN_PROFILES, DomainDataset, Sample, SynthSpec, save_coco, synth_domain
from daodet.detector import Detector, DetectorConfig, Detection, MatchConfig, supervised_forward, supervised_loss
from daodet.distill import distill_loss, ema_update, make_soft_targets, make_teacher, student_rois
from daodet.eval import COCO_THRESHOLDS, emit_report, evaluate, transfer_matrix
from daodet.geometry import AffineView, Box, iou, map_boxes
from daodet.harness import from_dict, load_config, run_adapt, run_benchmark
from daodet.harness import runner

from oracles import central_difference, ema_oracle, map_oracle
from test_eval import random_instance


def report(n, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# ------------------------------------------------------------------ 1


@pytest.mark.criterion(1, "evaluate() equals brute-force AP oracle (1e-9, 100 instances, < 1 min)")
def test_c01_evaluate_matches_oracle():
    rng = np.random.default_rng(20240101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        gt, dets = random_instance(rng, n_images=5, max_boxes=4, n_classes=3)
        img = np.zeros((4, 4, 3), dtype=np.uint8)
        ds = DomainDataset("target", [Sample(i, img, [(Box(*b), c) for b, c in a]) for i, a in gt.items()], {0: "DB", 1: "PR", 2: "LI"})
        res = evaluate({i: [Detection(Box(*b), c, s) for b, c, s in v] for i, v in dets.items()}, ds)
        per_t = [map_oracle(dets, gt, [0, 1, 2], t) for t in COCO_THRESHOLDS]
        worst = max(worst, abs(res.map50 - per_t[0]), abs(res.map5095 - float(np.mean(per_t))))
    elapsed = time.perf_counter() - t0
    report(1, worst <= 1e-9 and elapsed < 60, f"max |diff| {worst:.2e}, {elapsed:.1f}s")


# ------------------------------------------------------------------ 2


@pytest.mark.criterion(2, "EMA update exact for 1000 draws; alpha 0 and 1 exact")
def test_c02_ema_exact():
    rng = np.random.default_rng(2)
    bad = 0
    for k in range(1000):
        t, s = torch.nn.Linear(4, 3).double(), torch.nn.Linear(4, 3).double()
        alpha = [0.0, 1.0][k % 2] if k < 20 else float(rng.random())
        tw, sw = copy.deepcopy(t.state_dict()), s.state_dict()
        ema_update(t, s, alpha)
        for name, v in t.state_dict().items():
            expected = ema_oracle(tw[name], sw[name], alpha)
            if alpha == 0.0:
                expected = sw[name]
            elif alpha == 1.0:
                expected = tw[name]
            bad += int(not torch.equal(v, torch.as_tensor(expected)))
    report(2, bad == 0, f"{bad} mismatching tensors over 1000 draws")


# ------------------------------------------------------------------ 3


@pytest.mark.criterion(3, "distillation fixed point: every term <= 1e-8")
def test_c03_fixed_point():
    spec = SynthSpec()
    tgt = synth_domain(spec, DOMAIN_PROFILES["D2"], 33, "target", n_images=6)
    worst = 0.0
    for seed in range(3):
        teacher = make_teacher(Detector(DetectorConfig(), seed=seed))
        student = copy.deepcopy(teacher).eval()
        imgs = [s.image for s in tgt.samples[2 * seed:2 * seed + 2]]
        views = [identity_record(i.shape[:2]) for i in imgs]
        targets = make_soft_targets(teacher, imgs, views)
        out = student([apply_aug(i, r) for i, r in zip(imgs, views)], rois=student_rois(targets, views))
        terms = distill_loss(out, targets, views).as_floats()
        worst = max(worst, max(abs(v) for v in terms.values()))
    report(3, worst <= 1e-8, f"largest term {worst:.2e}")


# ------------------------------------------------------------------ 4


def _pick_coords(model, rng, n):
    params = [(name, p) for name, p in model.named_parameters() if p.requires_grad]
    out = []
    for _ in range(n):
        name, p = params[int(rng.integers(len(params)))]
        out.append((name, p, int(rng.integers(p.numel()))))
    return out


def _rel_err(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def _check(loss_fn, params, coords, sign=None):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for p in params.values()], allow_unused=True)
    grads = {n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(params, grads)}
    worst = 0.0
    for name, p, idx in coords:
        analytic = grads[name].reshape(-1)[idx].item()
        numeric = central_difference(lambda: loss_fn().item(), p, idx, h=1e-5)
        if sign is not None:
            numeric *= sign(name)
        worst = max(worst, _rel_err(analytic, numeric))
    return worst


@pytest.mark.criterion(4, "gradient checks of L_sup, L_distill, L_align (float64, h=1e-5, rel <= 1e-4)")
def test_c04_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    spec = SynthSpec(image_size=64, max_size=24)
    src = synth_domain(spec, DOMAIN_PROFILES["D1"], 41, "source", n_images=2)
    tgt = synth_domain(spec, DOMAIN_PROFILES["D2"], 42, "target", n_images=2)
    src_imgs = [apply_aug(s.image, identity_record(s.shape)).double() for s in src]
    tgt_imgs = [s.image for s in tgt]

    student = Detector(DetectorConfig(), seed=7).double()
    params = dict(student.named_parameters())
    results = {}

    # supervised: RoI sampling frozen so the loss is a smooth function of the weights
    boxes = [torch.from_numpy(s.box_array()).double() for s in src]
    classes = [torch.from_numpy(s.label_array()).long() for s in src]
    out, tg = supervised_forward(student, src_imgs, boxes, classes, torch.Generator().manual_seed(0))
    fixed = (out.rois, tg)

    def l_sup():
        o, t = supervised_forward(student, src_imgs, boxes, classes, torch.Generator().manual_seed(0), fixed_rois=fixed)
        return supervised_loss(o, t).total

    results["sup"] = _check(l_sup, params, _pick_coords(student, rng, 100))

    # distillation: a different teacher so the loss is away from its minimum
    teacher = make_teacher(Detector(DetectorConfig(), seed=8).double())
    weak = [identity_record(i.shape[:2]) for i in tgt_imgs]
    strong = [AugRecord("strong_target", r.image_shape, AffineView.identity(), r.out_shape, 0) for r in weak]
    targets = make_soft_targets(teacher, tgt_imgs, weak)
    rois = student_rois(targets, strong)
    views = [apply_aug(i, r).double() for i, r in zip(tgt_imgs, strong)]

    def l_distill():
        return distill_loss(student(views, rois=rois), targets, strong).total

    results["distill"] = _check(l_distill, params, _pick_coords(student, rng, 100))

    # alignment: the reversal layer flips the backbone gradient by -lambda
    lam = 0.7
    align = AlignState(student.backbone.out_channels, enabled=True, grl_lambda=lam, seed=9).double()
    both = {**{f"backbone.{n}": p for n, p in student.backbone.named_parameters()}, **{f"align.{n}": p for n, p in align.named_parameters()}}

    def l_align():
        fs = student.backbone(student.preprocess(src_imgs)[0])
        ft = student.backbone(student.preprocess(views)[0])
        return align_loss(fs, ft, align)

    pool = [(n, p) for n, p in both.items()]
    coords = []
    for _ in range(100):
        n, p = pool[int(rng.integers(len(pool)))]
        coords.append((n, p, int(rng.integers(p.numel()))))
    results["align"] = _check(l_align, both, coords, sign=lambda n: -lam if n.startswith("backbone.") else 1.0)

    elapsed = time.perf_counter() - t0
    worst = max(results.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in results.items()) + f", {elapsed:.0f}s"
    report(4, worst <= 1e-4 and elapsed < 300, detail)


# ------------------------------------------------------------------ 5


@pytest.mark.criterion(5, "view transport keeps IoU and round-trips (1000 draws, 1e-6)")
def test_c05_view_transport():
    rng = np.random.default_rng(5)
    worst_iou = worst_rt = 0.0
    canon = AffineView.identity()

    def random_view():
        return AffineView.flip_scale(bool(rng.integers(2)), float(rng.uniform(0.5, 2.0)), float(rng.uniform(32, 256)))

    def random_box():
        x, y = rng.uniform(0, 200, 2)
        w, h = rng.uniform(1, 80, 2)
        return Box(x, y, x + w, y + h)

    for _ in range(1000):
        a, b = random_box(), random_box()
        v1, v2 = random_view(), random_view()
        ma, mb = map_boxes(v1, v2, [a, b])
        worst_iou = max(worst_iou, abs(iou(ma, mb) - iou(a, b)))
        back = map_boxes(v1, canon, map_boxes(canon, v1, [a]))[0]
        worst_rt = max(worst_rt, float(np.max(np.abs(np.subtract(back.as_tuple(), a.as_tuple())))))
    report(5, worst_iou <= 1e-6 and worst_rt <= 1e-6, f"IoU drift {worst_iou:.1e}, round trip {worst_rt:.1e}")


# ------------------------------------------------------------------ 6


_THRESHOLD_NAME = re.compile(r"thresh|confidence|(^|_)conf($|_)|min_score|score_min", re.IGNORECASE)


def _threshold_names(path):
    tree = ast.parse(Path(path).read_text())
    found = []
    for node in ast.walk(tree):
        names = []
        if isinstance(node, ast.arg):
            names.append(node.arg)
        elif isinstance(node, ast.Name):
            names.append(node.id)
        elif isinstance(node, ast.Attribute):
            names.append(node.attr)
        elif isinstance(node, ast.AnnAssign) and isinstance(node.target, ast.Name):
            names.append(node.target.id)
        found += [n for n in names if _THRESHOLD_NAME.search(n)]
    return found


@pytest.mark.criterion(6, "no confidence threshold in the distill path; all proposals kept")
def test_c06_no_threshold():
    offenders = _threshold_names(distill_mod.__file__)
    spec = SynthSpec()
    tgt = synth_domain(spec, DOMAIN_PROFILES["D3"], 6, "target", n_images=4)
    mismatches = 0
    for seed in range(3):
        teacher = make_teacher(Detector(DetectorConfig(), seed=seed))
        imgs = [s.image for s in tgt]
        views = [identity_record(i.shape[:2]) for i in imgs]
        raw = teacher([apply_aug(i, r) for i, r in zip(imgs, views)])
        targets = make_soft_targets(teacher, imgs, views)
        mismatches += int(targets.num_proposals != sum(len(p) for p in raw.rois))
        mismatches += int(targets.class_probs.shape[0] != targets.num_proposals)
    report(6, not offenders and mismatches == 0, f"threshold names {offenders}, count mismatches {mismatches}")


# ------------------------------------------------------------------ 7


@pytest.mark.criterion(7, "equal-batch assertion never fires over 500 adaptation steps")
def test_c07_equal_batches(tmp_path, monkeypatch):
    # unequal domain sizes on disk so wrap-around is exercised
    spec = SynthSpec(image_size=64, max_size=24)
    for dom, n, seed in (("D1", 7, 1), ("D2", 13, 2)):
        for split in ("train", "eval"):
            ds = synth_domain(spec, DOMAIN_PROFILES[dom], seed + (split == "eval") * 10, "source", n_images=n if split == "train" else 3)
            save_coco(ds, tmp_path / "data" / dom / split / "annotations.json", tmp_path / "data" / dom / split)
    cfg = from_dict({
        "seed": 7,
        "out": str(tmp_path / "runs"),
        "data": {"kind": "coco", "root": str(tmp_path / "data"), "domains": ["D1", "D2"]},
        "train": {"burn_in_steps": 0, "adapt_steps": 500, "batch_size": 2},
    })
    sizes = []
    real_step = runner.adaptation_step

    def counting_step(state, batch):
        sizes.append((len(batch.source), len(batch.target)))
        return real_step(state, batch)

    monkeypatch.setattr(runner, "adaptation_step", counting_step)
    fired = None
    try:
        run_adapt(cfg)
    except AssertionError as exc:
        fired = str(exc)
    unequal = sum(a != b for a, b in sizes)
    report(7, fired is None and len(sizes) == 500 and unequal == 0, f"{len(sizes)} steps, {unequal} unequal, assertion {fired!r}")


# ------------------------------------------------------------------ 8


BENCHMARK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "benchmark.yaml"


@pytest.mark.slow
@pytest.mark.criterion(8, "adaptation beats source-only by >= 10 mAP@0.5 points on >= 5 of 6 pairs")
def test_c08_adaptation_gain(tmp_path):
    cfg = load_config(BENCHMARK_CONFIG).replace(out=str(tmp_path))
    result = run_benchmark(cfg)
    so, ad = result["reports"]
    gains = {p: ad.values[p] - so.values[p] for p in ad.pairs}
    for p in ad.pairs:
        print(f"  {p[0]}->{p[1]}: source-only {so.values[p]:.1f}  adapted {ad.values[p]:.1f}  gain {gains[p]:+.1f}")
    # per-pair time: the source run is shared by two pairs
    slowest = 0.0
    for s, t in ad.pairs:
        so_t = json.loads((tmp_path / f"so_{s}" / "timing.json").read_text())["wallclock_s"] / 2
        ad_t = json.loads((tmp_path / f"adapt_{s}-{t}" / "timing.json").read_text())["wallclock_s"]
        slowest = max(slowest, so_t + ad_t)
    wins = sum(g >= 10.0 for g in gains.values())
    report(8, wins >= 5 and slowest <= 1800, f"{wins}/6 pairs gain >= 10 points, slowest pair {slowest / 60:.1f} min")


# ------------------------------------------------------------------ 9

ADAPTED_ROW = [47.705, 59.681, 52.719, 61.142, 64.536, 52.618]
SO_ROW = [30.94, 42.00, 35.16, 45.79, 46.09, 41.14]
PAIRS = [("D1", "D2"), ("D1", "D3"), ("D2", "D1"), ("D2", "D3"), ("D3", "D1"), ("D3", "D2")]


@pytest.mark.criterion(9, "report fidelity: 56.4 and 40.19 averages, 10 category columns")
def test_c09_report_fidelity(tmp_path):
    cats = {c: float(i) for i, c in enumerate(CATEGORY_CODES)}
    ad = transfer_matrix(dict(zip(PAIRS, ADAPTED_ROW)), method="adapted", per_category=cats)
    so = transfer_matrix(dict(zip(PAIRS, SO_ROW)), method="source_only", per_category=cats)
    emit_report([so, ad], tmp_path, formats=("csv",), categories=CATEGORY_CODES)
    header = (tmp_path / "transfer_per_category.csv").read_text(encoding="utf-8").splitlines()[0].split(",")
    ok = f"{ad.overall:.1f}" == "56.4" and f"{so.overall:.2f}" == "40.19"
    ok = ok and header[1:] == ["DB", "PR", "LI", "KN", "SE", "PB", "UM", "GB", "SC", "LA"]
    report(9, ok, f"adapted {ad.overall:.3f}, source-only {so.overall:.4f}, columns {header[1:]}")


# ------------------------------------------------------------------ 10


@pytest.mark.criterion(10, "identical config and seed give byte-identical metrics JSON")
def test_c10_reproducible(tmp_path):
    cfg = from_dict({
        "seed": 10,
        "out": str(tmp_path),
        "data": {"kind": "synth", "synth": {"image_size": 64, "n_train": 8, "n_eval": 6, "max_size": 24}},
        "train": {"burn_in_steps": 4, "adapt_steps": 4, "batch_size": 2},
    })
    blobs = []
    for _ in range(2):
        res = run_adapt(cfg)
        blobs.append((res.out_dir / "metrics.json").read_bytes())
        runner._synth_split.cache_clear()
    report(10, blobs[0] == blobs[1], f"{len(blobs[0])} bytes, identical={blobs[0] == blobs[1]}")

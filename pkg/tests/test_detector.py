import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from daodet.detector import (
    BACKBONES,
    CheckpointError,
    Detector,
    DetectorConfig,
    MatchConfig,
    NumericError,
    decode_deltas,
    encode_deltas,
    grad,
    load_checkpoint,
    predict,
    save_checkpoint,
    supervised_forward,
    supervised_loss,
)
from daodet.detector import codec
from daodet.detector.backbones import build_backbone
from daodet.detector.loss import LossWeights, softmax_cross_entropy
from daodet.detector.model import roi_pool_bilinear
from daodet.detector.predict import nms_order
from daodet.geometry import Box

from oracles import nms_oracle


def _images(n=2, size=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand(3, size, size, generator=g) for _ in range(n)]


@pytest.fixture(scope="module")
def model():
    return Detector(DetectorConfig(), seed=1)


class TestForward:
    def test_objectness_count(self, model):
        out = model(_images(2, 64))  # 8x8 feature map, 3 anchors
        assert out.features.shape[-2:] == (8, 8)
        assert out.objectness.shape == (2, 192)
        assert out.rpn_deltas.shape == (2, 192, 4)
        assert len(out.anchors) == 192

    def test_proposal_cap_and_alignment(self, model):
        out = model(_images(2, 96))
        assert all(len(p) <= model.config.rpn_post_nms_topk for p in out.proposals)
        r = sum(len(x) for x in out.rois)
        assert out.roi_logits.shape == (r, model.num_classes + 1)
        assert out.roi_deltas.shape == (r, model.num_classes, 4)

    def test_zero_weights_uniform_posteriors(self):
        m = Detector(DetectorConfig(), seed=0)
        with torch.no_grad():
            for p in m.parameters():
                p.zero_()
        out = m(_images(1, 64), rois=[torch.tensor([[4.0, 4.0, 40.0, 40.0]])])
        assert torch.all(out.objectness == 0)
        probs = torch.softmax(out.roi_logits, dim=1)
        torch.testing.assert_close(probs, torch.full_like(probs, 1 / (m.num_classes + 1)))

    def test_deterministic(self):
        a = Detector(DetectorConfig(), seed=3)(_images(2, 64))
        b = Detector(DetectorConfig(), seed=3)(_images(2, 64))
        assert torch.equal(a.objectness, b.objectness) and torch.equal(a.roi_logits, b.roi_logits)

    def test_non_finite_reports_layer(self):
        m = Detector(DetectorConfig(), seed=0)
        with torch.no_grad():
            m.rpn_objectness.bias.fill_(math.nan)
        with pytest.raises(NumericError, match="objectness"):
            m(_images(1, 64))

    @settings(max_examples=10)
    @given(st.sampled_from(sorted(BACKBONES)), st.integers(1, 3), st.integers(2, 4), st.integers(2, 4))
    def test_shape_contract_all_backbones(self, kind, n, hb, wb):
        bb = build_backbone(kind)
        div = bb.size_divisibility
        h, w = hb * div, wb * div
        m = Detector(DetectorConfig(backbone=kind, rpn_post_nms_topk=8), seed=0)
        out = m([torch.rand(3, h, w) for _ in range(n)])
        fh, fw = out.features.shape[-2:]
        assert (fh, fw) == (h // m.stride, w // m.stride)
        assert out.objectness.shape == (n, fh * fw * m.config.anchors.num_anchors)

    def test_roi_pool_matches_torchvision(self):
        from torchvision.ops import roi_align

        g = torch.Generator().manual_seed(0)
        feats = torch.rand(1, 4, 12, 12, generator=g, dtype=torch.float64)
        rois = torch.tensor([[8.0, 8.0, 60.0, 50.0], [20.0, 30.0, 40.0, 88.0]], dtype=torch.float64)
        ours = roi_pool_bilinear(feats, [rois], 7, 8)
        ref = roi_align(feats, [rois], 7, spatial_scale=1 / 8, sampling_ratio=2, aligned=True)
        torch.testing.assert_close(ours, ref, atol=1e-12, rtol=0)


class TestCodec:
    def test_zero_deltas_return_anchor(self):
        a = Box(10, 20, 40, 60)
        assert decode_deltas([0, 0, 0, 0], a).as_tuple() == pytest.approx(a.as_tuple())

    def test_shift_by_width(self):
        a = Box(0, 0, 10, 20)
        d = encode_deltas(Box(10, 0, 20, 20), a)
        np.testing.assert_allclose(d, [1.0, 0.0, 0.0, 0.0], atol=1e-12)

    def test_bad_anchor(self):
        with pytest.raises(ValueError):
            encode_deltas(Box(0, 0, 1, 1), Box(0, 0, 0, 5))
        with pytest.raises(ValueError):
            decode_deltas([0, 0, 0, 0], Box(0, 0, 5, 0))

    @given(
        st.floats(-50, 50), st.floats(-50, 50), st.floats(1, 50), st.floats(1, 50),
        st.floats(-50, 50), st.floats(-50, 50), st.floats(1, 50), st.floats(1, 50),
    )
    def test_round_trip(self, x, y, w, h, ax, ay, aw, ah):
        # size ratios stay below exp(clamp)
        b, a = Box(x, y, x + w, y + h), Box(ax, ay, ax + aw, ay + ah)
        np.testing.assert_allclose(decode_deltas(encode_deltas(b, a), a).as_tuple(), b.as_tuple(), atol=1e-6)

    @given(st.lists(st.floats(-3.9, 3.9), min_size=4, max_size=4))
    def test_encode_decode_on_delta_space(self, d):
        a = torch.tensor([5.0, 5.0, 25.0, 35.0], dtype=torch.float64)
        d = torch.tensor(d, dtype=torch.float64)
        torch.testing.assert_close(codec.encode(codec.decode(d, a), a), d, atol=1e-9, rtol=0)


def _sup(model, images, boxes, classes, seed=0):
    out, t = supervised_forward(model, images, boxes, classes, torch.Generator().manual_seed(seed))
    return out, t, supervised_loss(out, t)


class TestSupervisedLoss:
    def test_closed_form_ce(self):
        ce = softmax_cross_entropy(torch.tensor([[10.0, -10.0]], dtype=torch.float64), torch.tensor([0]))
        assert float(ce) == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
        assert float(ce) == pytest.approx(2.06e-9, rel=1e-2)

    def test_nonnegative_terms(self, model):
        boxes = [torch.tensor([[10.0, 10.0, 40.0, 30.0]]), torch.tensor([[5.0, 30.0, 25.0, 60.0]])]
        classes = [torch.tensor([1]), torch.tensor([3])]
        _, _, loss = _sup(model, _images(2), boxes, classes)
        for k, v in loss.as_floats().items():
            assert v >= 0 and math.isfinite(v), k

    def test_no_ground_truth(self, model):
        _, t, loss = _sup(model, _images(1), [torch.zeros(0, 4)], [torch.zeros(0, dtype=torch.int64)])
        f = loss.as_floats()
        assert f["rpn_localization"] == 0 and f["roi_localization"] == 0
        assert not torch.any(t.rpn.labels == 1)
        assert f["rpn_objectness"] > 0

    def test_minimum_when_predictions_match_targets(self, model):
        boxes = [torch.tensor([[10.0, 10.0, 40.0, 30.0]])]
        out, t, _ = _sup(model, _images(1), boxes, [torch.tensor([2])])
        sign = torch.where(t.rpn.labels == 1, 1.0, -1.0)
        out.objectness = 20.0 * sign
        out.rpn_deltas = t.rpn.deltas.clone()
        k = model.num_classes
        out.roi_logits = torch.where(
            torch.nn.functional.one_hot(t.roi.labels, k + 1).bool(), torch.tensor(20.0), torch.tensor(-20.0)
        )
        d = torch.zeros(len(t.roi.labels), k, 4)
        fg = t.roi.labels < k
        d[fg, t.roi.labels[fg]] = t.roi.deltas[fg]
        out.roi_deltas = d
        assert supervised_loss(out, t).as_floats()["total"] <= 1e-6

    def test_weights(self, model):
        boxes = [torch.tensor([[10.0, 10.0, 40.0, 30.0]])]
        out, t, loss = _sup(model, _images(1), boxes, [torch.tensor([2])])
        w = LossWeights(2.0, 0.0, 1.0, 0.5)
        l2 = supervised_loss(out, t, weights=w)
        expected = 2 * loss.rpn_objectness + loss.roi_classification + 0.5 * loss.roi_localization
        assert l2.as_floats()["total"] == pytest.approx(float(expected.detach()), rel=1e-6)


class TestPredict:
    def test_high_threshold_empty(self, model):
        assert predict(model, _images(1)[0], score_thresh=1.01) == []

    def test_sorted_and_nms_respected(self, model):
        dets = predict(model, _images(1)[0], score_thresh=0.0)
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)
        from daodet.geometry import iou

        for i, a in enumerate(dets):
            for b in dets[i + 1:]:
                if a.category_id == b.category_id:
                    assert iou(a.box, b.box) <= 0.5 + 1e-9

    def test_nms_examples(self):
        boxes = torch.tensor([[0.0, 0, 10, 10], [0.0, 0, 10, 11.1]])
        assert nms_order(boxes, torch.tensor([0.9, 0.8]), torch.tensor([0, 0]), 0.5).tolist() == [0]
        assert sorted(nms_order(boxes, torch.tensor([0.9, 0.8]), torch.tensor([0, 1]), 0.5).tolist()) == [0, 1]

    def test_nms_tie_prefers_lower_index(self):
        boxes = torch.tensor([[0.0, 0, 10, 10], [0.0, 0, 10, 10.5]])
        assert nms_order(boxes, torch.tensor([0.5, 0.5]), torch.tensor([0, 0]), 0.5).tolist() == [0]

    @settings(max_examples=100)
    @given(st.integers(0, 10**6), st.integers(1, 12))
    def test_nms_matches_oracle(self, seed, n):
        rng = np.random.default_rng(seed)
        xy = rng.uniform(0, 30, size=(n, 2))
        wh = rng.uniform(2, 20, size=(n, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        scores = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=n)
        classes = rng.integers(0, 2, size=n)
        got = nms_order(torch.tensor(boxes), torch.tensor(scores), torch.tensor(classes), 0.5).tolist()
        assert got == nms_oracle(boxes.tolist(), scores.tolist(), classes.tolist(), 0.5)

    def test_nms_order_independent_with_distinct_scores(self):
        rng = np.random.default_rng(1)
        xy = rng.uniform(0, 30, size=(10, 2))
        boxes = torch.tensor(np.concatenate([xy, xy + 12], axis=1))
        scores = torch.tensor(rng.permutation(10) / 10.0)
        classes = torch.zeros(10, dtype=torch.int64)
        kept = nms_order(boxes, scores, classes, 0.5)
        perm = torch.tensor(rng.permutation(10))
        kept_p = perm[nms_order(boxes[perm], scores[perm], classes, 0.5)]
        assert kept.tolist() == kept_p.tolist()


class TestGrad:
    def test_constant_loss_zero(self, model):
        g = grad(model, torch.tensor(3.0))
        assert all(torch.count_nonzero(v) == 0 for v in g.values())

    def test_teacher_not_in_graph(self):
        from daodet.distill import make_teacher

        student = Detector(DetectorConfig(), seed=2)
        teacher = make_teacher(student)
        boxes = [torch.tensor([[10.0, 10.0, 40.0, 30.0]])]
        _, _, loss = _sup(student, _images(1), boxes, [torch.tensor([2])])
        for v in grad(teacher, loss.total).values():
            assert torch.count_nonzero(v) == 0
        assert any(torch.count_nonzero(v) > 0 for v in grad(student, loss.total).values())

    def test_non_finite_gradient_raises(self):
        p = torch.nn.Linear(1, 1)
        loss = (p.weight * torch.tensor(math.inf)).sum()
        with pytest.raises(NumericError):
            grad(p, loss)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, model):
        path = save_checkpoint(tmp_path / "c.pt", model, step=17)
        ck = load_checkpoint(path)
        assert ck["step"] == 17 and ck["backbone"] == "tiny_cnn"
        for (k, a), (_, b) in zip(model.state_dict().items(), ck["student"].state_dict().items()):
            assert torch.equal(a, b), k
        imgs = _images(1)
        assert torch.equal(model(imgs).roi_logits, ck["student"](imgs).roi_logits)

    def test_backbone_mismatch(self, tmp_path, model):
        path = save_checkpoint(tmp_path / "c.pt", model)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expect_backbone="vgg16")

    def test_not_a_checkpoint(self, tmp_path):
        p = tmp_path / "x.pt"
        torch.save({"a": 1}, p)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)

from __future__ import annotations

import numpy as np
import pytest

from ssladet import flops as F
from ssladet.boxes import box_iou, nms
from ssladet.detector import (
    VARIANTS,
    AsyncDetector,
    DenseRepresentation,
    DetectorConfig,
    SSLADet,
    backbone_forward,
    decode_detections,
    dense_matched,
    final_representation,
    input_embedding,
    load_checkpoint,
    predict_at,
    save_checkpoint,
    snapshot_indices,
    sparse_pool,
    temporal_dropout_mask,
)
from ssladet.errors import BoundsError, ConfigError, ParseError
from ssladet.events import SpatialDomain, SynthConfig, generate_synthetic
from ssladet.verify import detector_equivalence, random_stream


def naive_dropout(cells, ts, tau):
    keep, last = [], {}
    for c, t in zip(cells, ts):
        if c not in last or t - last[c] >= tau:
            keep.append(True)
            last[c] = t
        else:
            keep.append(False)
    return keep


def test_temporal_dropout_against_naive():
    rng = np.random.default_rng(0)
    xs, ys = rng.integers(0, 4, 300), rng.integers(0, 3, 300)
    ts = np.cumsum(rng.integers(0, 400, 300))
    for tau in (0, 1, 500, 2000):
        got = temporal_dropout_mask(xs, ys, ts, tau, 4)
        expect = naive_dropout(list(zip(xs.tolist(), ys.tolist())), ts.tolist(), tau) if tau else [True] * 300
        assert got.tolist() == expect


def test_temporal_dropout_refractory_example():
    # same cell at 0, 500, 1000, 1600 us with tau=1000: keep 0 and 1000
    keep = temporal_dropout_mask([0, 0, 0, 0], [0, 0, 0, 0], [0, 500, 1000, 1600], 1000, 1)
    assert keep.tolist() == [True, False, True, False]


def test_sparse_pool_halves():
    xs, ys = sparse_pool(np.array([0, 1, 2, 5]), np.array([3, 4, 7, 0]))
    assert xs.tolist() == [0, 0, 1, 2] and ys.tolist() == [1, 2, 3, 0]


def test_input_embedding():
    v = input_embedding([10, 10, 1500, 300_000], [1, -1, 1, -1])
    assert v.tolist() == [[1, 0], [-1, 0], [1, 1.49], [-1, 100.0]]


def test_variants_and_strides():
    for name, d1 in VARIANTS.items():
        cfg = DetectorConfig.variant(name)
        assert cfg.widths == (d1, 2 * d1, 4 * d1, 8 * d1)
        assert cfg.stride == 16
    assert DetectorConfig(widths=(4, 8), patch_sizes=(3, 3), taus_us=(0, 0)).stride == 4
    with pytest.raises(ConfigError):
        DetectorConfig.variant("XL")
    with pytest.raises(ConfigError):
        DetectorConfig(widths=(4,), patch_sizes=(3, 3), taus_us=(0,))


def test_stage_domains_ceil():
    cfg = DetectorConfig(width=48, height=36)
    assert [(d.width, d.height) for d in cfg.stage_domains()] == [(48, 36), (24, 18), (12, 9), (6, 5), (3, 3)]


def test_dense_matched_module_flops():
    cfg = DetectorConfig(widths=(4, 8, 16), patch_sizes=(3, 3, 3), taus_us=(1, 2, 4))
    dm = dense_matched(cfg)
    assert dm.widths == (12, 24, 48) and dm.dense
    model = SSLADet(dm)
    assert all(l.module.A == 1 for s in model.stages for l in s)


def test_equivalence_small_configs():
    rng = np.random.default_rng(1)
    dom = SpatialDomain(20, 14)
    for P in (1, 2, 3):
        cfg = DetectorConfig(width=20, height=14, widths=(4, 8, 8, 16), patch_sizes=(P,) * 4)
        assert detector_equivalence(cfg, random_stream(rng, dom, 1500), P) < 1e-10
    dense = dense_matched(DetectorConfig(width=20, height=14, widths=(2, 4), patch_sizes=(3, 3), taus_us=(0, 500)))
    assert detector_equivalence(dense, random_stream(rng, dom, 500), 0) < 1e-10


def test_snapshot_indices_naive():
    rng = np.random.default_rng(2)
    xs, ys = rng.integers(0, 3, 50), rng.integers(0, 2, 50)
    ts = np.cumsum(rng.integers(0, 10, 50))
    q = [0, 30, 100, 10_000]
    got = snapshot_indices(xs, ys, ts, q, 3, 2)
    for r, t in enumerate(q):
        for c in range(6):
            cand = [i for i in range(50) if ts[i] <= t and ys[i] * 3 + xs[i] == c]
            assert got[r, c] == (cand[-1] if cand else -1)


def test_predict_at_matches_async_snapshots():
    stream, _ = generate_synthetic(SynthConfig(duration_us=60_000), 3)
    cfg = DetectorConfig(widths=(4, 8, 8), patch_sizes=(3, 3, 3), taus_us=(1000, 2000, 4000))
    model = SSLADet(cfg, seed=1)
    out = backbone_forward(model, stream)
    qs = [20_000, 40_000]
    preds = predict_at(model, out, qs).value.reshape(2, -1, 7)
    det = AsyncDetector(model)
    r = 0
    for x, y, t, p in zip(stream.x.tolist(), stream.y.tolist(), stream.t.tolist(), stream.p.tolist()):
        while r < len(qs) and qs[r] < t:
            assert np.abs(det.preds - preds[r]).max() < 1e-10
            r += 1
        det.process(x, y, t, p)
    assert np.abs(final_representation(model, out) - det.R.grid).max() < 1e-10


def test_async_bounds_and_representation():
    model = SSLADet(DetectorConfig(width=8, height=8, widths=(2,), patch_sizes=(2,), taus_us=(0,)))
    det = AsyncDetector(model)
    with pytest.raises(BoundsError):
        det.process(8, 0, 0, 1)
    assert det.process(7, 7, 0, 1) == (3, 3)
    assert (3, 3) in det.R.dirty
    R = DenseRepresentation(2, 2, 1)
    with pytest.raises(BoundsError):
        R.update(2, 0, np.zeros(1))


def test_head_prior():
    model = SSLADet(DetectorConfig(widths=(4,), patch_sizes=(3,), taus_us=(0,)))
    b = model.head.b_out.value
    assert np.allclose(1 / (1 + np.exp(-b[:3])), 0.01)


def test_decode_and_class_aware_nms():
    C = 2
    preds = np.full((4, 5 + C), -10.0)
    preds[:, 3:] = 0.0  # tx ty tw th
    # cells 0 and 1 both strongly predict, same class, overlapping boxes -> one survives
    preds[0, 0], preds[0, 1] = 10, 10
    preds[1, 0], preds[1, 1] = 9, 10
    preds[0, 5] = preds[1, 5] = np.log(2.0)  # 2 cells wide
    # class 1 at cell 3 survives: suppression never crosses classes
    preds[3, 0], preds[3, 2] = 8, 10
    cx, cy = np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1])
    dets = decode_detections(preds, cx, cy, 16, C, score_thresh=0.5, nms_iou=0.3)
    assert [d.class_id for d in dets] == [0, 1]
    assert dets[0].box == (8.0, 8.0, 32.0, 16.0)


def test_nms_oracle():
    rng = np.random.default_rng(3)
    boxes = np.column_stack([rng.uniform(0, 30, (40, 2)), rng.uniform(3, 12, (40, 2))])
    scores = rng.random(40)
    keep = nms(boxes, scores, 0.4)
    iou = box_iou(boxes, boxes)
    for a in keep:
        for b in keep:
            if a != b:
                assert iou[a, b] <= 0.4
    for i in set(range(40)) - set(keep.tolist()):
        assert any(iou[i, k] > 0.4 and scores[k] >= scores[i] for k in keep)


def test_box_iou_values():
    assert box_iou(np.array([[0, 0, 2, 2]]), np.array([[1, 0, 2, 2]]))[0, 0] == pytest.approx(1 / 3)
    assert box_iou(np.array([[0, 0, 2, 2]]), np.array([[5, 5, 2, 2]]))[0, 0] == 0


def test_checkpoint_round_trip(tmp_path):
    cfg = DetectorConfig(widths=(4, 8), patch_sizes=(2, 3), taus_us=(0, 1000), pap_out=False)
    model = SSLADet(cfg, seed=4)
    save_checkpoint(model, tmp_path / "m.ckpt", {"step": 3})
    back, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert extra == {"step": 3}
    assert back.config == cfg
    for (n1, a), (n2, b) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(a.value, b.value)
    (tmp_path / "bad.ckpt").write_bytes(b"garbage!" + bytes(8))
    with pytest.raises(ParseError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_flop_counter_consistent_between_paths():
    stream, _ = generate_synthetic(SynthConfig(duration_us=50_000), 8)
    cfg = DetectorConfig(widths=(4, 8, 8), patch_sizes=(3, 2, 3), taus_us=(1000, 2000, 4000))
    model = SSLADet(cfg)
    c1, c2 = F.FlopCounter(), F.FlopCounter()
    backbone_forward(model, stream, counter=c1)
    AsyncDetector(model, counter=c2).run(stream)
    assert dict(c1.by_name) == dict(c2.by_name) and c1.events == c2.events

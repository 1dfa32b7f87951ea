"""FLOPs per event, recurrent-path latency and COCO-style detection AP."""
from __future__ import annotations

import gc
import time
from dataclasses import dataclass, field

import numpy as np

from . import flops as F
from .boxes import box_iou
from .detector import (
    AsyncDetector,
    Detection,
    SSLADet,
    backbone_forward,
    decode_detections,
    predict_at,
)
from .events import EventStream, GroundTruthBox
from .ssla import RecurrentSSLA, SSLAModule

COCO_IOUS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def count_flops_per_event(model: SSLADet, stream: EventStream) -> F.FlopCounter:
    """Instrumented parallel forward; ``counter.per_event()`` is the headline number."""
    counter = F.FlopCounter()
    backbone_forward(model, stream, counter=counter)
    return counter


def module_flops_per_event(module: SSLAModule) -> int:
    return F.ssla_event_flops(module.A, module.d_in, module.d_out, module.d_state)


# ------------------------------------------------------------------ latency


@dataclass
class LatencyReport:
    samples_us: np.ndarray
    resolution: tuple[int, int] = (0, 0)
    label: str = ""

    @property
    def median(self) -> float:
        return float(np.median(self.samples_us)) if len(self.samples_us) else float("nan")

    @property
    def p90(self) -> float:
        return float(np.percentile(self.samples_us, 90)) if len(self.samples_us) else float("nan")

    @property
    def p99(self) -> float:
        return float(np.percentile(self.samples_us, 99)) if len(self.samples_us) else float("nan")

    def summary(self) -> dict:
        return {"resolution": f"{self.resolution[0]}x{self.resolution[1]}", "label": self.label,
                "median_us": self.median, "p90_us": self.p90, "p99_us": self.p99,
                "n": int(len(self.samples_us))}


def _timed(steps, events, warmup: int) -> list[list[float]]:
    """Time each step function on each event; steps are interleaved per event
    so that machine noise hits every one of them alike."""
    clock = time.perf_counter_ns
    out: list[list[float]] = [[] for _ in steps]
    gc_was_on = gc.isenabled()
    gc.disable()
    try:
        for i, ev in enumerate(events):
            for j, step in enumerate(steps):
                t0 = clock()
                step(*ev)
                dt = clock() - t0
                if i >= warmup:
                    out[j].append(dt / 1000.0)
    finally:
        if gc_was_on:
            gc.enable()
    return out


def _event_tuples(stream: EventStream) -> list[tuple]:
    return list(zip(stream.x.tolist(), stream.y.tolist(), stream.t.tolist(), stream.p.tolist()))


def bench_latency_interleaved(models: list[SSLADet], stream: EventStream, warmup: int = 200,
                              reps: int = 1) -> list[LatencyReport]:
    """Per-event ``AsyncDetector.process`` time for several models fed the same events in lockstep.

    Every model must accept the stream's coordinates. Used to compare
    resolutions without run-to-run drift between them.
    """
    events = _event_tuples(stream)
    samples: list[list[float]] = [[] for _ in models]
    for _ in range(max(1, reps)):
        dets = [AsyncDetector(m) for m in models]
        for acc, got in zip(samples, _timed([d.process for d in dets], events, warmup)):
            acc += got
    return [LatencyReport(np.asarray(s), (m.config.width, m.config.height), label="detector")
            for m, s in zip(models, samples)]


def bench_latency(model: SSLADet, stream: EventStream, warmup: int = 200, reps: int = 1) -> LatencyReport:
    """Wall-clock time of each ``AsyncDetector.process`` call, excluding the first ``warmup`` events of a pass."""
    return bench_latency_interleaved([model], stream, warmup, reps)[0]


def bench_module_latency(module: SSLAModule, stream: EventStream, d_in: int | None = None,
                         warmup: int = 200, reps: int = 1, seed: int = 0) -> LatencyReport:
    """Per-event time of a single recurrent SSLA module fed random feature vectors."""
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(len(stream), d_in or module.d_in))
    events = list(zip(stream.x.tolist(), stream.y.tolist(), feats))
    samples: list[float] = []
    for _ in range(max(1, reps)):
        rec = RecurrentSSLA(module)
        samples += _timed([rec.step], events, warmup)[0]
    d = module.lookup.domain
    return LatencyReport(np.asarray(samples), (d.width, d.height), label="module")


# ---------------------------------------------------------------------- mAP


@dataclass
class EvalResult:
    ap: dict  # (class_id, iou) -> AP, only for classes with ground truth
    precision: dict  # (class_id, iou) -> interpolated precision at the 101 recall points
    iou_thresholds: tuple
    classes: tuple
    pr_curves: dict = field(default_factory=dict)  # (class_id, iou) -> (recall, precision) raw curves

    def ap_at(self, iou: float, class_id: int | None = None) -> float | None:
        iou = round(float(iou), 2)
        if class_id is not None:
            return self.ap.get((class_id, iou))
        vals = [v for (c, t), v in self.ap.items() if t == iou]
        return float(np.mean(vals)) if vals else None

    @property
    def ap50(self) -> float | None:
        return self.ap_at(0.5)

    @property
    def ap50_per_class(self) -> dict:
        return {c: v for (c, t), v in self.ap.items() if t == 0.5}

    @property
    def mAP(self) -> float | None:
        return float(np.mean(list(self.ap.values()))) if self.ap else None


def match_to_annotations(detection_times, annotation_times, window_us: int = 5000) -> dict[int, int]:
    """Map each annotation time to the nearest detection time within the window."""
    dts = np.sort(np.asarray(list(detection_times), dtype=np.int64))
    out = {}
    if len(dts) == 0:
        return out
    for ta in annotation_times:
        i = int(np.searchsorted(dts, ta))
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(dts) and abs(int(dts[j]) - ta) <= window_us:
                if best is None or abs(int(dts[j]) - ta) < abs(best - ta):
                    best = int(dts[j])
        if best is not None:
            out[int(ta)] = best
    return out


def interpolated_ap(tp: np.ndarray, n_gt: int) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """101-point AP from the TP flags of score-sorted detections."""
    tp = np.asarray(tp, dtype=float)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    env = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    # recall k/n can sit one ulp below the matching grid point; count that as reached
    idx = np.searchsorted(recall, RECALL_POINTS - 1e-12, side="left")
    p = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)] if len(env) else 0.0, 0.0)
    return float(p.mean()), p, recall, precision


def evaluate_map(detections_by_time: dict[int, list[Detection]], ground_truth: list[GroundTruthBox],
                 iou_thresholds=COCO_IOUS, window_us: int = 5000) -> EvalResult:
    """COCO-style AP per class and IoU threshold.

    Every annotation timestamp is an image; it takes the detections of the
    nearest detection timestamp within ``window_us``, or none. Classes without
    ground truth get no AP entry.
    """
    iou_thresholds = tuple(round(float(t), 2) for t in iou_thresholds)
    gt_by_time: dict[int, list[GroundTruthBox]] = {}
    for g in ground_truth:
        gt_by_time.setdefault(int(g.t), []).append(g)
    matched = match_to_annotations(detections_by_time.keys(), gt_by_time.keys(), window_us)
    classes = sorted({g.class_id for g in ground_truth})
    ap, prec, curves = {}, {}, {}
    for c in classes:
        # per image: gt boxes of class c, detections of class c
        dets = []  # (score, image, box)
        gts = {}
        for t, glist in gt_by_time.items():
            gts[t] = np.array([g.box for g in glist if g.class_id == c], dtype=float).reshape(-1, 4)
            if t in matched:
                for d in detections_by_time[matched[t]]:
                    if d.class_id == c:
                        dets.append((d.score, t, d.box))
        n_gt = sum(len(b) for b in gts.values())
        order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
        ious = [box_iou(np.asarray(dets[i][2]), gts[dets[i][1]])[0] if len(gts[dets[i][1]]) else np.zeros(0)
                for i in order]
        for thr in iou_thresholds:
            used = {t: np.zeros(len(b), dtype=bool) for t, b in gts.items()}
            tp = np.zeros(len(order))
            for r, i in enumerate(order):
                t = dets[i][1]
                cand = np.where(~used[t] & (ious[r] >= thr), ious[r], -1.0)
                if len(cand) and cand.max() >= 0:
                    used[t][int(np.argmax(cand))] = True
                    tp[r] = 1.0
            a, p, rec, pr = interpolated_ap(tp, n_gt)
            ap[(c, thr)], prec[(c, thr)], curves[(c, thr)] = a, p, (rec, pr)
    return EvalResult(ap, prec, iou_thresholds, tuple(classes), curves)


# --------------------------------------------------------- model evaluation


def clip_windows(n: int, clip_events: int) -> list[slice]:
    return [slice(s, min(n, s + clip_events)) for s in range(0, n, clip_events)]


def detect_parallel(model: SSLADet, stream: EventStream, query_times, score_thresh: float = 0.01,
                    nms_iou: float = 0.5) -> dict[int, list[Detection]]:
    """Detections at each query time from one whole-stream parallel forward."""
    query_times = [int(t) for t in query_times]
    if not query_times:
        return {}
    out = backbone_forward(model, stream)
    preds = predict_at(model, out, query_times).value
    cx, cy = model.cell_coords()
    n = len(cx)
    cfg = model.config
    return {t: decode_detections(preds[r * n:(r + 1) * n], cx, cy, cfg.stride, cfg.n_classes,
                                 score_thresh, nms_iou)
            for r, t in enumerate(query_times)}


def evaluate_model(model: SSLADet, data, clip_events: int = 5000, warmup_us: int = 20_000,
                   score_thresh: float = 0.01, iou_thresholds=COCO_IOUS) -> EvalResult:
    """Split each stream into consecutive clips processed from zero state, as in training.

    Only annotations at least ``warmup_us`` after a clip's first event are scored.
    """
    dets: dict[int, list[Detection]] = {}
    gts: list[GroundTruthBox] = []
    offset = 0
    for stream, boxes in data:
        by_t: dict[int, list[GroundTruthBox]] = {}
        for b in boxes:
            by_t.setdefault(int(b.t), []).append(b)
        for w in clip_windows(len(stream), clip_events):
            clip = stream.select(w)
            t0, t1 = int(clip.t[0]), int(clip.t[-1])
            times = sorted(t for t in by_t if t0 + warmup_us <= t <= t1)
            if not times:
                continue
            for t, d in detect_parallel(model, clip, times, score_thresh).items():
                dets[t + offset] = d
            for t in times:
                gts += [GroundTruthBox(t + offset, b.box, b.class_id) for b in by_t[t]]
        # keep timestamps of different streams apart
        offset += int(stream.t[-1]) + 10 * 5000 + 1 if len(stream) else 0
    return evaluate_map(dets, gts, iou_thresholds)

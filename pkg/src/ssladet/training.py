"""Loss, optimiser, augmentation and the toy training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tape, Tensor, make_output, value_of
from .detector import (
    DetectorConfig,
    SSLADet,
    backbone_forward,
    predict_at,
    save_checkpoint,
)
from .errors import ConfigError, DivergenceError
from .events import EventStream, GroundTruthBox, SynthConfig, generate_synthetic

log = logging.getLogger(__name__)

LOSS_WEIGHTS = (1.0, 1.0, 5.0)  # objectness, class, box


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _bce_with_logits(z, y):
    """Elementwise binary cross-entropy, stable for large |z|."""
    return np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))


@dataclass
class Targets:
    """Center-cell assignment for a batch of snapshots (rows of the prediction matrix)."""

    positive: np.ndarray  # (N,) bool
    class_id: np.ndarray  # (N,) int, valid where positive
    box: np.ndarray  # (N, 4) cx, cy, w, h in pixels, valid where positive
    cell_x: np.ndarray  # (N,) cell column of each row
    cell_y: np.ndarray
    stride: int

    @property
    def n_pos(self) -> int:
        return int(self.positive.sum())


def assign_targets(boxes_per_snapshot, grid_w: int, grid_h: int, stride: int) -> Targets:
    """Each box is positive at the cell containing its center; on collisions the larger box wins."""
    T = len(boxes_per_snapshot)
    n_cells = grid_w * grid_h
    N = T * n_cells
    positive = np.zeros(N, dtype=bool)
    class_id = np.zeros(N, dtype=np.int64)
    box = np.zeros((N, 4))
    area = np.zeros(N)
    for r, boxes in enumerate(boxes_per_snapshot):
        for b in boxes:
            cx, cy, w, h = b.box
            gx = min(max(int(cx // stride), 0), grid_w - 1)
            gy = min(max(int(cy // stride), 0), grid_h - 1)
            i = r * n_cells + gy * grid_w + gx
            if positive[i] and area[i] >= w * h:
                continue
            positive[i], class_id[i], box[i], area[i] = True, b.class_id, (cx, cy, w, h), w * h
    ys, xs = np.divmod(np.arange(n_cells), grid_w)
    return Targets(positive, class_id, box, np.tile(xs, T), np.tile(ys, T), stride)


def _iou_and_grad(pred: np.ndarray, tgt: np.ndarray):
    """IoU of (cx, cy, w, h) rows and its gradient w.r.t. the predicted box."""
    px1, px2 = pred[:, 0] - pred[:, 2] / 2, pred[:, 0] + pred[:, 2] / 2
    py1, py2 = pred[:, 1] - pred[:, 3] / 2, pred[:, 1] + pred[:, 3] / 2
    tx1, tx2 = tgt[:, 0] - tgt[:, 2] / 2, tgt[:, 0] + tgt[:, 2] / 2
    ty1, ty2 = tgt[:, 1] - tgt[:, 3] / 2, tgt[:, 1] + tgt[:, 3] / 2
    ix = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    iy = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    overlap = (ix > 0) & (iy > 0)
    ix, iy = np.clip(ix, 0, None), np.clip(iy, 0, None)
    inter = ix * iy
    ap = pred[:, 2] * pred[:, 3]
    union = ap + tgt[:, 2] * tgt[:, 3] - inter
    iou = inter / union
    d_inter = 1.0 / union + inter / union ** 2
    d_ap = -inter / union ** 2
    # d ix / d (x2, x1) where the predicted edge is the binding one
    dix_dx2 = (px2 < tx2).astype(float)
    dix_dx1 = -(px1 > tx1).astype(float)
    diy_dy2 = (py2 < ty2).astype(float)
    diy_dy1 = -(py1 > ty1).astype(float)
    dI_dx2, dI_dx1 = iy * dix_dx2 * overlap, iy * dix_dx1 * overlap
    dI_dy2, dI_dy1 = ix * diy_dy2 * overlap, ix * diy_dy1 * overlap
    g = np.zeros_like(pred)
    g[:, 0] = d_inter * (dI_dx2 + dI_dx1)
    g[:, 1] = d_inter * (dI_dy2 + dI_dy1)
    g[:, 2] = d_inter * 0.5 * (dI_dx2 - dI_dx1) + d_ap * pred[:, 3]
    g[:, 3] = d_inter * 0.5 * (dI_dy2 - dI_dy1) + d_ap * pred[:, 2]
    return iou, g


def detection_loss(preds, targets: Targets, n_classes: int, weights=LOSS_WEIGHTS) -> Tensor:
    """Objectness BCE over all cells, class BCE and (1 - IoU) at positive cells, divided by max(1, #positives)."""
    P = value_of(preds)
    C = n_classes
    pos = targets.positive
    norm = max(1, targets.n_pos)
    w_obj, w_cls, w_box = weights
    obj = P[:, 0]
    loss_obj = _bce_with_logits(obj, pos.astype(float)).sum()
    grad = np.zeros_like(P)
    grad[:, 0] = w_obj * (_sigmoid(obj) - pos)
    loss_cls = loss_box = 0.0
    idx = np.flatnonzero(pos)
    if len(idx):
        onehot = np.zeros((len(idx), C))
        onehot[np.arange(len(idx)), targets.class_id[idx]] = 1.0
        cl = P[idx, 1:1 + C]
        loss_cls = _bce_with_logits(cl, onehot).sum()
        grad[idx, 1:1 + C] = w_cls * (_sigmoid(cl) - onehot)
        t = P[idx, 1 + C:5 + C]
        s = targets.stride
        sx, sy = _sigmoid(t[:, 0]), _sigmoid(t[:, 1])
        ew, eh = np.exp(np.clip(t[:, 2], -20, 20)), np.exp(np.clip(t[:, 3], -20, 20))
        box = np.stack([(targets.cell_x[idx] + sx) * s, (targets.cell_y[idx] + sy) * s, ew * s, eh * s], axis=1)
        iou, g_iou = _iou_and_grad(box, targets.box[idx])
        loss_box = (1.0 - iou).sum()
        g_box = -g_iou
        inside = (np.abs(t[:, 2:4]) < 20).astype(float)
        grad[idx, 1 + C] = w_box * g_box[:, 0] * s * sx * (1 - sx)
        grad[idx, 2 + C] = w_box * g_box[:, 1] * s * sy * (1 - sy)
        grad[idx, 3 + C] = w_box * g_box[:, 2] * box[:, 2] * inside[:, 0]
        grad[idx, 4 + C] = w_box * g_box[:, 3] * box[:, 3] * inside[:, 1]
    value = (w_obj * loss_obj + w_cls * loss_cls + w_box * loss_box) / norm
    out, tape = make_output(np.asarray(value), (preds,))
    if tape is not None:
        def bw():
            if out.grad is not None:
                preds.accumulate(grad * (float(out.grad) / norm))
        tape.record(bw)
    return out


# --------------------------------------------------------------- optimiser


@dataclass
class OptimizerState:
    """AdamW with bias-corrected moments, decoupled weight decay and cosine learning-rate decay.

    Weight decay applies to matrices only (not decays, norms or biases).
    """

    lr: float = 1e-3
    weight_decay: float = 0.01
    total_steps: int = 1000
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.lr
        frac = min(step, self.total_steps) / self.total_steps
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def optimizer_step(opt: OptimizerState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> float:
    """One AdamW update in place; returns the learning rate used."""
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise DivergenceError(f"non-finite gradient in {bad[:5]} at step {opt.step}")
    lr = opt.lr_at(opt.step)
    opt.step += 1
    b1, b2 = opt.betas
    c1, c2 = 1 - b1 ** opt.step, 1 - b2 ** opt.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p.value)
            opt.v[name] = np.zeros_like(p.value)
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if opt.weight_decay and p.value.ndim >= 2:
            p.value = p.value * (1 - lr * opt.weight_decay)
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    for name, p in params.items():
        if name.endswith(".nu"):
            with np.errstate(over="ignore"):
                lam = np.exp(-np.exp(p.value))
            if not np.all((lam > 0) & (lam < 1)):
                raise DivergenceError(f"decay left (0, 1) in {name} at step {opt.step}")
    return lr


# ------------------------------------------------------------ augmentation


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    keep_ratio: tuple = (0.8, 1.0)


def flip_horizontal(stream: EventStream, boxes: list[GroundTruthBox]):
    W = stream.domain.width
    flipped = EventStream(stream.domain, W - 1 - stream.x, stream.y, stream.t, stream.p)
    fb = [GroundTruthBox(b.t, (W - b.box[0], b.box[1], b.box[2], b.box[3]), b.class_id) for b in boxes]
    return flipped, fb


def augment(stream: EventStream, boxes: list[GroundTruthBox], config: AugmentConfig, seed: int):
    """Random horizontal flip, then i.i.d. event dropout with a keep ratio drawn once per clip."""
    rng = np.random.default_rng(seed)
    if rng.random() < config.flip_prob:
        stream, boxes = flip_horizontal(stream, boxes)
    rho = rng.uniform(*config.keep_ratio)
    keep = rng.random(len(stream)) < rho
    return stream.select(keep), list(boxes)


# -------------------------------------------------------------- toy task


TOY_STREAM_US = 125_000


@dataclass
class ToyTask:
    """Seeded synthetic moving-shapes data: a training pool and a held-out evaluation pool.

    Many short streams rather than a few long ones: the number of distinct
    shape trajectories, not the event count, is what limits generalisation.
    """

    synth: SynthConfig = field(default_factory=lambda: SynthConfig(duration_us=TOY_STREAM_US))
    train_seeds: tuple = tuple(range(1001, 1033))
    eval_seeds: tuple = tuple(range(2001, 2007))

    def generate(self, seeds):
        return [generate_synthetic(self.synth, s) for s in seeds]

    def train_data(self):
        return self.generate(self.train_seeds)

    def eval_data(self):
        return self.generate(self.eval_seeds)


@dataclass
class TrainConfig:
    steps: int = 400
    clip_events: int = 5000
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup_us: int = 20_000  # annotations this early in a clip are not supervised
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    log_every: int = 50


def toy_model(**kw) -> DetectorConfig:
    """Two-stage detector at output stride 4; a 48x36 input gives a 12x9 grid for 6-14 px objects."""
    kw.setdefault("patch_sizes", (5, 5))
    return DetectorConfig(widths=(8, 16), taus_us=(1000, 2000), **kw)


TOY_TRAIN = dict(steps=2000, lr=3e-3)


def boxes_by_time(boxes: list[GroundTruthBox]) -> dict[int, list[GroundTruthBox]]:
    out: dict[int, list[GroundTruthBox]] = {}
    for b in boxes:
        out.setdefault(b.t, []).append(b)
    return out


def clip_snapshots(stream: EventStream, boxes: list[GroundTruthBox], warmup_us: int):
    """Annotation times that fall inside the clip after the warmup, with their boxes."""
    if len(stream) == 0:
        return [], []
    t0, t1 = int(stream.t[0]), int(stream.t[-1])
    grouped = boxes_by_time(boxes)
    times = sorted(t for t in grouped if t0 + warmup_us <= t <= t1)
    return times, [grouped[t] for t in times]


def clip_loss(model: SSLADet, stream: EventStream, boxes, warmup_us: int) -> Tensor | None:
    times, per_time = clip_snapshots(stream, boxes, warmup_us)
    if not times:
        return None
    out = backbone_forward(model, stream)
    preds = predict_at(model, out, times)
    d = model.out_domain
    targets = assign_targets(per_time, d.width, d.height, model.config.stride)
    return detection_loss(preds, targets, model.config.n_classes)


def sample_clip(data, clip_events: int, rng: np.random.Generator):
    stream, boxes = data[int(rng.integers(len(data)))]
    n = len(stream)
    if n <= clip_events:
        return stream, boxes
    start = int(rng.integers(0, n - clip_events + 1))
    return stream.select(slice(start, start + clip_events)), boxes


@dataclass
class TrainResult:
    model: SSLADet
    losses: list  # (step, loss, lr)

    def final_loss(self, window: int = 50) -> float:
        vals = [l for _, l, _ in self.losses[-window:]]
        return float(np.mean(vals)) if vals else float("nan")


MAX_EMPTY_CLIPS = 200


def train(model_config: DetectorConfig, data, seed: int, config: TrainConfig | None = None,
          out_dir=None) -> TrainResult:
    """Train from a seeded initialisation. Single-threaded runs are bit-reproducible."""
    config = config or TrainConfig()
    model = SSLADet(model_config, seed=seed)
    params = model.parameters()
    opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay, total_steps=config.steps)
    rng = np.random.default_rng([seed, 1])
    losses = []
    out_dir = Path(out_dir) if out_dir is not None else None
    step, empty = 0, 0
    while step < config.steps:
        stream, boxes = sample_clip(data, config.clip_events, rng)
        stream, boxes = augment(stream, boxes, config.augment, int(rng.integers(2 ** 63)))
        model.zero_grad()
        with Tape() as tape:
            loss = clip_loss(model, stream, boxes, config.warmup_us)
            if loss is None:
                empty += 1
                if empty >= MAX_EMPTY_CLIPS:
                    raise ConfigError(f"{empty} clips in a row had no annotation after the "
                                      f"{config.warmup_us} us warm-up; use longer clips")
                continue
            empty = 0
            if not np.isfinite(loss.value):
                _save_last_good(model, out_dir, step)
                raise DivergenceError(f"non-finite loss at step {step}")
            tape.backward(loss)
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        before = {n: p.value for n, p in params.items()}
        try:
            lr = optimizer_step(opt, params, grads)
        except DivergenceError:
            for n, p in params.items():
                p.value = before[n]
            _save_last_good(model, out_dir, step)
            raise
        losses.append((step, float(loss.value), lr))
        if config.log_every and step % config.log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, float(loss.value), lr)
        step += 1
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "model.ckpt", {"seed": seed, "steps": config.steps})
        write_loss_curve(losses, out_dir / "loss.csv")
    return TrainResult(model, losses)


def _save_last_good(model, out_dir, step):
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "last_good.ckpt", {"step": step})


def write_loss_curve(losses, path) -> None:
    with open(path, "w", newline="") as f:
        f.write("step,loss,lr\n")
        for step, loss, lr in losses:
            f.write(f"{step},{loss!r},{lr!r}\n")

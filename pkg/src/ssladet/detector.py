"""SSLA-Det: stacked SSLA layers, sparse pooling, temporal dropout and a 1x1 detection head.

Two execution paths share the same parameters:

* :func:`backbone_forward` processes a whole clip with the scatter-compute-gather
  kernels (and is differentiable under a :class:`~ssladet.autograd.Tape`);
* :class:`AsyncDetector` pushes one event at a time through per-layer patch
  state banks and refreshes the head prediction of the single output cell the
  event reaches.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import flops as F
from .autograd import Tensor, add, layer_norm, layer_norm_values, linear, param, silu, take_rows, value_of
from .boxes import nms
from .errors import BoundsError, ConfigError, ParseError
from .events import EventStream, SpatialDomain
from .geometry import PatchLookupTable, build_lookup_table, build_patch_grid, build_scatter_plan
from .ssla import RecurrentSSLA, SSLAModule, create_ssla, ssla_forward_parallel

VARIANTS = {"S": 12, "B": 16, "M": 24, "L": 32}
LN_EPS = 1e-5
PRIOR_PROB = 0.01


@dataclass
class DetectorConfig:
    width: int = 48
    height: int = 36
    widths: tuple = (12, 24, 48, 96)
    patch_sizes: tuple = (3, 3, 3, 3)
    taus_us: tuple = (1000, 2000, 4000, 8000)
    layers_per_stage: int = 2
    n_classes: int = 2
    pap_in: bool = True
    pap_out: bool = True
    dense: bool = False
    head_width: int | None = None
    dt_clip_us: int = 100_000

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.patch_sizes = tuple(int(p) for p in self.patch_sizes)
        self.taus_us = tuple(int(t) for t in self.taus_us)
        if not (len(self.widths) == len(self.patch_sizes) == len(self.taus_us)):
            raise ConfigError("widths, patch_sizes and taus_us need one entry per stage")
        if any(p < 1 for p in self.patch_sizes):
            raise ConfigError("patch size must be >= 1")
        if any(t < 0 for t in self.taus_us):
            raise ConfigError("temporal dropout window must be >= 0")
        if self.width < 1 or self.height < 1:
            raise ConfigError("zero-area domain")

    @classmethod
    def variant(cls, name: str, n_stages: int = 4, patch_size: int = 3, **kw) -> "DetectorConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        d1 = VARIANTS[name]
        kw.setdefault("taus_us", tuple(1000 * 2 ** s for s in range(n_stages)))
        return cls(widths=tuple(d1 * 2 ** s for s in range(n_stages)),
                   patch_sizes=(patch_size,) * n_stages, **kw)

    @property
    def n_stages(self) -> int:
        return len(self.widths)

    @property
    def stride(self) -> int:
        return 2 ** self.n_stages

    @property
    def input_width(self) -> int:
        return 2

    @property
    def feature_width(self) -> int:
        if self.layers_per_stage == 0 or not self.widths:
            return self.input_width
        return self.widths[-1]

    def stage_domains(self) -> list[SpatialDomain]:
        d = SpatialDomain(self.width, self.height)
        out = []
        for _ in range(self.n_stages + 1):
            out.append(d)
            d = d.halved()
        return out

    @property
    def out_domain(self) -> SpatialDomain:
        return self.stage_domains()[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def dense_matched(config: DetectorConfig) -> DetectorConfig:
    """Single-global-state baseline with per-stage widths scaled by P to match module FLOPs."""
    d = config.to_dict()
    d.update(dense=True, widths=tuple(w * p for w, p in zip(config.widths, config.patch_sizes)))
    return DetectorConfig.from_dict(d)


# ----------------------------------------------------------------- layers


@dataclass
class SSLALayer:
    module: SSLAModule
    ln_gain: Tensor
    ln_bias: Tensor
    res_proj: Tensor | None = None

    @property
    def d_in(self) -> int:
        return self.module.d_in

    @property
    def d_out(self) -> int:
        return self.module.d_out

    def named_parameters(self, prefix: str = ""):
        yield from self.module.named_parameters(prefix + "ssla.")
        yield prefix + "norm.gain", self.ln_gain
        yield prefix + "norm.bias", self.ln_bias
        if self.res_proj is not None:
            yield prefix + "res_proj", self.res_proj

    def flops_per_event(self) -> tuple[int, int]:
        """(module FLOPs, residual + norm FLOPs) for one event."""
        m = self.module
        return F.ssla_event_flops(m.A, m.d_in, m.d_out, m.d_state), F.layer_extra_flops(m.d_in, m.d_out)


def create_layer(domain, P, d_in, d_out, rng, table=None, pap_in=True, pap_out=True, dense=False) -> SSLALayer:
    module = create_ssla(domain, P, d_in, d_out, rng, pap_in=pap_in, pap_out=pap_out, dense=dense, table=table)
    res = None
    if d_in != d_out:
        b = 1.0 / math.sqrt(d_in)
        res = param(rng.uniform(-b, b, size=(d_out, d_in)))
    return SSLALayer(module, param(np.ones(d_out)), param(np.zeros(d_out)), res)


def ssla_layer_forward(layer: SSLALayer, xs, ys, v, plan=None) -> Tensor:
    """layernorm(residual(v) + ssla(v))."""
    r = v if layer.res_proj is None else linear(v, layer.res_proj)
    s = ssla_forward_parallel(layer.module, xs, ys, v, plan=plan)
    return layer_norm(add(r, s), layer.ln_gain, layer.ln_bias, LN_EPS)


def sparse_pool(xs, ys, factor: int = 2) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(xs) // factor, np.asarray(ys) // factor


def temporal_dropout_mask(xs, ys, ts, tau_us: int, width: int) -> np.ndarray:
    """Keep an event unless a kept event at the same cell lies less than ``tau_us`` before it."""
    n = len(xs)
    keep = np.zeros(n, dtype=bool)
    if tau_us <= 0:
        keep[:] = True
        return keep
    cells = (np.asarray(ys, dtype=np.int64) * width + np.asarray(xs, dtype=np.int64)).tolist()
    times = np.asarray(ts, dtype=np.int64).tolist()
    last: dict[int, int] = {}
    for i, (c, t) in enumerate(zip(cells, times)):
        lt = last.get(c)
        if lt is None or t - lt >= tau_us:
            keep[i] = True
            last[c] = t
    return keep


def temporal_dropout(xs, ys, ts, v, tau_us: int, width: int):
    """Apply :func:`temporal_dropout_mask`; returns the surviving (xs, ys, ts, v, index)."""
    idx = np.flatnonzero(temporal_dropout_mask(xs, ys, ts, tau_us, width))
    v_out = take_rows(v, idx) if isinstance(v, Tensor) else np.asarray(v)[idx]
    return np.asarray(xs)[idx], np.asarray(ys)[idx], np.asarray(ts)[idx], v_out, idx


def input_embedding(ts, ps, dt_clip_us: int = 100_000) -> np.ndarray:
    """[polarity, time since previous event in ms]; the first event gets 0."""
    ts = np.asarray(ts, dtype=np.int64)
    dt = np.zeros(len(ts))
    if len(ts) > 1:
        dt[1:] = np.diff(ts)
    dt = np.minimum(dt, dt_clip_us) / 1000.0
    return np.stack([np.asarray(ps, dtype=np.float64), dt], axis=1).reshape(-1, 2)


# ------------------------------------------------------------------- head


@dataclass
class HeadParams:
    """Shared 1x1 stem followed by objectness / class / box branches.

    The branch matrices are stacked row-wise: ``[obj | classes | tx ty tw th]``.
    """

    W_stem: Tensor
    b_stem: Tensor
    W_out: Tensor
    b_out: Tensor
    n_classes: int

    def named_parameters(self, prefix: str = "head."):
        yield prefix + "W_stem", self.W_stem
        yield prefix + "b_stem", self.b_stem
        yield prefix + "W_out", self.W_out
        yield prefix + "b_out", self.b_out

    @property
    def n_out(self) -> int:
        return 5 + self.n_classes

    def flops_per_cell(self) -> int:
        return F.head_cell_flops(self.W_stem.shape[1], self.W_stem.shape[0], self.n_out)


def create_head(rng, d_feat: int, d_hidden: int, n_classes: int) -> HeadParams:
    b1, b2 = 1.0 / math.sqrt(d_feat), 1.0 / math.sqrt(d_hidden)
    b_out = np.zeros(5 + n_classes)
    b_out[: 1 + n_classes] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
    return HeadParams(
        W_stem=param(rng.uniform(-b1, b1, size=(d_hidden, d_feat))),
        b_stem=param(np.zeros(d_hidden)),
        W_out=param(rng.uniform(-b2, b2, size=(5 + n_classes, d_hidden))),
        b_out=param(b_out),
        n_classes=n_classes,
    )


def head_forward(head: HeadParams, rows) -> Tensor:
    """Raw per-cell predictions (N, 5 + C) for feature rows (N, D)."""
    h = silu(linear(rows, head.W_stem, head.b_stem))
    return linear(h, head.W_out, head.b_out)


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def decode_boxes(preds: np.ndarray, cell_x: np.ndarray, cell_y: np.ndarray, stride: int, n_classes: int):
    """Boxes, class ids and scores for every row of raw predictions."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 5 + n_classes)
    obj = preds[:, 0]
    cls = preds[:, 1:1 + n_classes]
    t = preds[:, 1 + n_classes:]
    cls_id = np.argmax(cls, axis=1) if n_classes else np.zeros(len(preds), dtype=np.int64)
    score = _sigmoid(obj) * _sigmoid(cls[np.arange(len(preds)), cls_id])
    boxes = np.stack([
        (cell_x + _sigmoid(t[:, 0])) * stride,
        (cell_y + _sigmoid(t[:, 1])) * stride,
        np.exp(np.clip(t[:, 2], -20, 20)) * stride,
        np.exp(np.clip(t[:, 3], -20, 20)) * stride,
    ], axis=1)
    return boxes, cls_id, score


def decode_detections(preds, cell_x, cell_y, stride: int, n_classes: int,
                      score_thresh: float = 0.5, nms_iou: float = 0.5) -> list[Detection]:
    boxes, cls_id, score = decode_boxes(preds, np.asarray(cell_x), np.asarray(cell_y), stride, n_classes)
    keep = np.flatnonzero(score >= score_thresh)
    out: list[Detection] = []
    for c in np.unique(cls_id[keep]):
        sel = keep[cls_id[keep] == c]
        for i in sel[nms(boxes[sel], score[sel], nms_iou)]:
            out.append(Detection(tuple(float(v) for v in boxes[i]), int(c), float(score[i])))
    out.sort(key=lambda d: (-d.score, d.class_id, d.box))
    return out


# ---------------------------------------------------------- representation


class DenseRepresentation:
    """The output grid R; each backbone output overwrites its cell."""

    def __init__(self, width: int, height: int, d: int):
        self.width, self.height = width, height
        self.grid = np.zeros((height, width, d))
        self.dirty: set[tuple[int, int]] = set()

    def update(self, x: int, y: int, o: np.ndarray) -> None:
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise BoundsError(f"cell ({x}, {y}) outside {self.width}x{self.height} grid")
        self.grid[y, x] = o
        self.dirty.add((x, y))

    def read(self, x: int, y: int) -> np.ndarray:
        return self.grid[y, x]

    def rows(self) -> np.ndarray:
        return self.grid.reshape(-1, self.grid.shape[-1])


def update_representation(R: DenseRepresentation, cell, o) -> None:
    R.update(int(cell[0]), int(cell[1]), np.asarray(o))


def snapshot_indices(xs, ys, ts, query_times, width: int, height: int) -> np.ndarray:
    """Index of the last output written to each cell at or before each query time (-1 if none).

    Returns (T, height * width) in row-major cell order.
    """
    cells = np.asarray(ys, dtype=np.int64) * width + np.asarray(xs, dtype=np.int64)
    ts = np.asarray(ts, dtype=np.int64)
    q = np.asarray(query_times, dtype=np.int64)
    out = np.full((len(q), width * height), -1, dtype=np.int64)
    ends = np.searchsorted(ts, q, side="right")
    for r, n in enumerate(ends):
        np.maximum.at(out[r], cells[:n], np.arange(n))
    return out


# ------------------------------------------------------------------- model


@dataclass
class BackboneOutput:
    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    src: np.ndarray  # index of each output in the input stream
    o: Tensor
    stage_counts: list = field(default_factory=list)  # events entering each stage, then output count


class SSLADet:
    def __init__(self, config: DetectorConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        domains = config.stage_domains()
        self.tables: list[PatchLookupTable] = []
        self.stages: list[list[SSLALayer]] = []
        d_in = config.input_width
        for s in range(config.n_stages):
            dom, P = domains[s], config.patch_sizes[s]
            table = (PatchLookupTable.global_patch(dom) if config.dense
                     else build_lookup_table(build_patch_grid(dom, P)))
            self.tables.append(table)
            layers = []
            for _ in range(config.layers_per_stage):
                layers.append(create_layer(dom, P, d_in, config.widths[s], rng, table=table,
                                           pap_in=config.pap_in, pap_out=config.pap_out, dense=config.dense))
                d_in = config.widths[s]
            self.stages.append(layers)
        d_feat = config.feature_width
        self.head = create_head(rng, d_feat, config.head_width or d_feat, config.n_classes)

    def named_parameters(self):
        for s, layers in enumerate(self.stages):
            for l, layer in enumerate(layers):
                yield from layer.named_parameters(f"stage{s}.layer{l}.")
        yield from self.head.named_parameters()

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def n_parameters(self) -> int:
        return sum(p.value.size for _, p in self.named_parameters())

    @property
    def out_domain(self) -> SpatialDomain:
        return self.config.out_domain

    def cell_coords(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.out_domain
        ys, xs = np.divmod(np.arange(d.width * d.height), d.width)
        return xs, ys


def backbone_forward(model: SSLADet, stream: EventStream, counter: F.FlopCounter | None = None) -> BackboneOutput:
    """Whole-clip forward: per stage, the SSLA layers, then sparse pooling and temporal dropout."""
    cfg = model.config
    xs, ys = stream.x.copy(), stream.y.copy()
    ts = stream.t.astype(np.int64)
    v = Tensor(input_embedding(ts, stream.p, cfg.dt_clip_us))
    src = np.arange(len(stream))
    counts = []
    if counter is not None:
        counter.events += len(stream)
    domains = cfg.stage_domains()
    for s, layers in enumerate(model.stages):
        counts.append(len(xs))
        if layers:
            plan = build_scatter_plan(model.tables[s], xs, ys)
            for l, layer in enumerate(layers):
                v = ssla_layer_forward(layer, xs, ys, v, plan=plan)
                if counter is not None:
                    mod, extra = layer.flops_per_event()
                    counter.add(f"stage{s}.layer{l}.ssla", mod * len(xs))
                    counter.add(f"stage{s}.layer{l}.norm", extra * len(xs))
        xs, ys = sparse_pool(xs, ys)
        xs, ys, ts, v, idx = temporal_dropout(xs, ys, ts, v, cfg.taus_us[s], domains[s + 1].width)
        src = src[idx]
    counts.append(len(xs))
    if counter is not None:
        counter.add("head", model.head.flops_per_cell() * len(xs))
    return BackboneOutput(xs, ys, ts, src, v, counts)


def predict_at(model: SSLADet, out: BackboneOutput, query_times) -> Tensor:
    """Raw head predictions for every output cell at each query time, shape (T * cells, 5 + C)."""
    d = model.out_domain
    idx = snapshot_indices(out.xs, out.ys, out.ts, query_times, d.width, d.height)
    rows = take_rows(out.o, idx.reshape(-1))
    return head_forward(model.head, rows)


def final_representation(model: SSLADet, out: BackboneOutput) -> np.ndarray:
    d = model.out_domain
    idx = snapshot_indices(out.xs, out.ys, out.ts, [np.iinfo(np.int64).max], d.width, d.height)[0]
    R = np.zeros((d.width * d.height, value_of(out.o).shape[1] if len(out.xs) else model.config.feature_width))
    R[idx >= 0] = value_of(out.o)[idx[idx >= 0]]
    return R.reshape(d.height, d.width, -1)


class AsyncDetector:
    """Event-by-event inference with persistent per-layer patch state banks."""

    def __init__(self, model: SSLADet, counter: F.FlopCounter | None = None):
        self.model = model
        cfg = model.config
        self.counter = counter
        self.domains = cfg.stage_domains()
        self.layers = []
        for s, layers in enumerate(model.stages):
            stage = []
            for l, layer in enumerate(layers):
                stage.append((
                    RecurrentSSLA(layer.module),
                    None if layer.res_proj is None else layer.res_proj.value,
                    layer.ln_gain.value, layer.ln_bias.value,
                    layer.flops_per_event(), f"stage{s}.layer{l}",
                ))
            self.layers.append(stage)
        self.last_kept: list[dict[int, int]] = [dict() for _ in model.stages]
        self.prev_t: int | None = None
        od = model.out_domain
        self.R = DenseRepresentation(od.width, od.height, cfg.feature_width)
        self.preds = head_forward(model.head, self.R.rows()).value.copy()
        self._head_flops = model.head.flops_per_cell()

    def process(self, x: int, y: int, t: int, p: int) -> tuple[int, int] | None:
        """Feed one event; returns the output cell it updated, or None if dropped on the way."""
        cfg = self.model.config
        if not self.domains[0].contains(x, y):
            raise BoundsError(f"({x}, {y}) outside input domain")
        dt = 0 if self.prev_t is None else min(t - self.prev_t, cfg.dt_clip_us)
        self.prev_t = t
        v = np.array([float(p), dt / 1000.0])
        counter = self.counter
        if counter is not None:
            counter.events += 1
        for s, stage in enumerate(self.layers):
            for rec, res, gain, bias, (mod_f, extra_f), name in stage:
                r = v if res is None else res @ v
                z = r + rec.step(x, y, v)
                v = layer_norm_values(z, gain, bias, LN_EPS)[0]
                if counter is not None:
                    counter.add(name + ".ssla", mod_f)
                    counter.add(name + ".norm", extra_f)
            x, y = x // 2, y // 2
            tau = cfg.taus_us[s]
            if tau > 0:
                c = y * self.domains[s + 1].width + x
                lt = self.last_kept[s].get(c)
                if lt is not None and t - lt < tau:
                    return None
                self.last_kept[s][c] = t
        self.R.update(x, y, v)
        self.preds[y * self.R.width + x] = head_forward(self.model.head, v[None, :]).value[0]
        if counter is not None:
            counter.add("head", self._head_flops)
        return x, y

    def run(self, stream: EventStream) -> None:
        for x, y, t, p in zip(stream.x.tolist(), stream.y.tolist(), stream.t.tolist(), stream.p.tolist()):
            self.process(x, y, t, p)

    def detections(self, score_thresh: float = 0.5, nms_iou: float = 0.5) -> list[Detection]:
        xs, ys = self.model.cell_coords()
        return decode_detections(self.preds, xs, ys, self.model.config.stride,
                                 self.model.config.n_classes, score_thresh, nms_iou)


# -------------------------------------------------------------- checkpoint

_CKPT_MAGIC = b"SSLACKP1"


def save_checkpoint(model: SSLADet, path, extra: dict | None = None) -> None:
    """Magic, u64 header length, JSON header (config + tensor table), then little-endian float64 blobs."""
    blobs, table, offset = [], [], 0
    for name, p in model.named_parameters():
        data = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(p.value.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"config": model.config.to_dict(), "tensors": table, "extra": extra or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[SSLADet, dict]:
    data = open(path, "rb").read()
    if data[:8] != _CKPT_MAGIC:
        raise ParseError("not a checkpoint file", 0)
    (hlen,) = struct.unpack_from("<Q", data, 8)
    try:
        header = json.loads(data[16:16 + hlen])
    except ValueError as e:
        raise ParseError(f"bad checkpoint header: {e}", 16) from None
    model = SSLADet(DetectorConfig.from_dict(header["config"]))
    params = model.parameters()
    base = 16 + hlen
    for entry in header["tensors"]:
        p = params.get(entry["name"])
        shape = tuple(entry["shape"])
        if p is None or p.value.shape != shape:
            raise ParseError(f"tensor {entry['name']} does not match the configured model", base + entry["offset"])
        n = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=start)
        p.value = arr.reshape(shape).astype(np.float64)
    return model, header.get("extra", {})


def write_detections(rows, path) -> None:
    """``rows`` is an iterable of (t, Detection)."""
    with open(path, "w", newline="") as f:
        f.write("t,cx,cy,w,h,class,score\n")
        for t, d in rows:
            cx, cy, w, h = d.box
            f.write(f"{int(t)},{cx:.6f},{cy:.6f},{w:.6f},{h:.6f},{d.class_id},{d.score:.6f}\n")

"""Event stream types, file I/O and the synthetic moving-shapes generator.

Streams are stored columnar (one numpy array per field) so that the model code
can index them directly; :class:`Event` is the per-record view.
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

MAGIC = b"EVS1"
_HEADER = struct.Struct("<4sHHQ")
RECORD_DTYPE = np.dtype(
    [("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3"), ("t", "<u8")]
)
assert RECORD_DTYPE.itemsize == 16
CSV_HEADER = "x,y,p,t"
BOX_CSV_HEADER = "t,cx,cy,w,h,class"


class Polarity(IntEnum):
    ON = 1
    OFF = -1


@dataclass(frozen=True)
class SpatialDomain:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"domain must be at least 1x1, got {self.width}x{self.height}")

    def contains(self, x, y) -> np.ndarray | bool:
        return (x >= 0) & (x < self.width) & (y >= 0) & (y < self.height)

    def halved(self) -> "SpatialDomain":
        return SpatialDomain(-(-self.width // 2), -(-self.height // 2))


class Event(NamedTuple):
    x: tuple[int, int]  # (column, row)
    t: int  # microseconds
    p: Polarity


@dataclass
class EventStream:
    """An ordered event sequence on a fixed domain."""

    domain: SpatialDomain
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.int64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        self.t = np.ascontiguousarray(self.t, dtype=np.uint64)
        self.p = np.ascontiguousarray(self.p, dtype=np.int8)
        n = len(self.x)
        if not (len(self.y) == len(self.t) == len(self.p) == n):
            raise ValidationError("field arrays have different lengths")
        self.validate()

    @classmethod
    def empty(cls, domain: SpatialDomain) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(domain, z, z, z.astype(np.uint64), z.astype(np.int8))

    @classmethod
    def from_events(cls, domain: SpatialDomain, events: Sequence[Event]) -> "EventStream":
        if not events:
            return cls.empty(domain)
        x = [e.x[0] for e in events]
        y = [e.x[1] for e in events]
        return cls(domain, x, y, [e.t for e in events], [int(e.p) for e in events])

    def validate(self) -> None:
        if len(self) == 0:
            return
        inside = self.domain.contains(self.x, self.y)
        if not inside.all():
            i = int(np.argmin(inside))
            raise ValidationError(
                f"event {i} at ({self.x[i]}, {self.y[i]}) outside domain "
                f"{self.domain.width}x{self.domain.height}"
            )
        if np.any(self.t[1:] < self.t[:-1]):
            i = int(np.argmax(self.t[1:] < self.t[:-1])) + 1
            raise ValidationError(f"timestamps out of order at event {i}")
        if not np.isin(self.p, (1, -1)).all():
            raise ValidationError("polarity must be +1 or -1")

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, i: int) -> Event:
        return Event((int(self.x[i]), int(self.y[i])), int(self.t[i]), Polarity(int(self.p[i])))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    @property
    def events(self) -> list[Event]:
        return list(self)

    def select(self, mask_or_index) -> "EventStream":
        """Subsequence by boolean mask or sorted index array."""
        return EventStream(
            self.domain, self.x[mask_or_index], self.y[mask_or_index],
            self.t[mask_or_index], self.p[mask_or_index],
        )

    def equals(self, other: "EventStream") -> bool:
        return (
            self.domain == other.domain
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )


@dataclass(frozen=True)
class GroundTruthBox:
    t: int
    box: tuple[float, float, float, float]  # cx, cy, w, h in pixels
    class_id: int


# --------------------------------------------------------------------------- I/O


def _format_from_path(path, fmt):
    if fmt is not None:
        return fmt
    return "csv" if str(path).endswith(".csv") else "binary"


def write_stream(stream: EventStream, path, format: str | None = None) -> None:
    fmt = _format_from_path(path, format)
    if fmt == "binary":
        recs = np.zeros(len(stream), dtype=RECORD_DTYPE)
        recs["x"] = stream.x
        recs["y"] = stream.y
        recs["p"] = stream.p
        recs["t"] = stream.t
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, stream.domain.width, stream.domain.height, len(stream)))
            f.write(recs.tobytes())
    elif fmt == "csv":
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for x, y, p, t in zip(stream.x.tolist(), stream.y.tolist(), stream.p.tolist(), stream.t.tolist()):
            buf.write(f"{x},{y},{p},{t}\n")
        Path(path).write_text(buf.getvalue(), newline="\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def read_stream(path, format: str | None = None, domain: SpatialDomain | None = None) -> EventStream:
    """Read an event file.

    CSV files carry no domain; pass ``domain`` or the smallest domain holding
    every event is used.
    """
    fmt = _format_from_path(path, format)
    if fmt == "binary":
        return _read_binary(Path(path).read_bytes())
    if fmt == "csv":
        return _read_csv(Path(path).read_text(), domain)
    raise ValueError(f"unknown format {fmt!r}")


def _read_binary(data: bytes) -> EventStream:
    if len(data) < _HEADER.size:
        raise ParseError("truncated header", len(data))
    magic, width, height, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    body = len(data) - _HEADER.size
    if body != count * RECORD_DTYPE.itemsize:
        full = body // RECORD_DTYPE.itemsize
        raise ParseError(
            f"header declares {count} records but body holds {body} bytes",
            _HEADER.size + min(full, count) * RECORD_DTYPE.itemsize,
        )
    recs = np.frombuffer(data, dtype=RECORD_DTYPE, offset=_HEADER.size, count=count)

    def rec_offset(i):
        return _HEADER.size + int(i) * RECORD_DTYPE.itemsize

    bad_p = ~np.isin(recs["p"], (1, -1))
    if bad_p.any():
        i = int(np.argmax(bad_p))
        raise ParseError(f"invalid polarity {recs['p'][i]} in record {i}", rec_offset(i) + 4)
    raw = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size).reshape(count, RECORD_DTYPE.itemsize)
    pad = raw[:, 5:8]
    if pad.any():
        i = int(np.argmax(pad.any(axis=1)))
        raise ParseError(f"nonzero padding in record {i}", rec_offset(i) + 5)
    domain = SpatialDomain(width, height)
    try:
        return EventStream(domain, recs["x"], recs["y"], recs["t"], recs["p"])
    except ValidationError:
        raise
    except ConfigError as e:
        raise ParseError(str(e), 4) from e


def _read_csv(text: str, domain: SpatialDomain | None) -> EventStream:
    lines = text.split("\n")
    if not lines or lines[0].strip() != CSV_HEADER:
        raise ParseError(f"expected header {CSV_HEADER!r}", 1)
    cols: list[list[int]] = [[], [], [], []]
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, got {len(parts)}", lineno)
        try:
            vals = [int(s) for s in parts]
        except ValueError:
            raise ParseError(f"non-integer field in {line!r}", lineno) from None
        if vals[2] not in (1, -1):
            raise ParseError(f"invalid polarity {vals[2]}", lineno)
        if vals[0] < 0 or vals[1] < 0 or vals[3] < 0:
            raise ParseError("negative coordinate or timestamp", lineno)
        for c, v in zip(cols, vals):
            c.append(v)
    x, y, p, t = (np.asarray(c, dtype=np.int64) for c in cols)
    if domain is None:
        domain = SpatialDomain(int(x.max()) + 1 if len(x) else 1, int(y.max()) + 1 if len(y) else 1)
    return EventStream(domain, x, y, t.astype(np.uint64), p)


def write_boxes(boxes: Sequence[GroundTruthBox], path) -> None:
    with open(path, "w", newline="") as f:
        f.write(BOX_CSV_HEADER + "\n")
        for b in boxes:
            cx, cy, w, h = (repr(float(v)) for v in b.box)
            f.write(f"{b.t},{cx},{cy},{w},{h},{b.class_id}\n")


def read_boxes(path) -> list[GroundTruthBox]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or ",".join(header) != BOX_CSV_HEADER:
            raise ParseError(f"expected header {BOX_CSV_HEADER!r}", 1)
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append(GroundTruthBox(int(row[0]), tuple(float(v) for v in row[1:5]), int(row[5])))
            except (ValueError, IndexError):
                raise ParseError(f"malformed box row {row!r}", lineno) from None
    return out


# --------------------------------------------------------------------- synthetic

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def counter_uniform(*keys) -> np.ndarray:
    """Uniform [0, 1) values that depend only on the integer keys (broadcast)."""
    keys = np.broadcast_arrays(*[np.asarray(k, dtype=np.uint64) for k in keys])
    h = np.zeros(keys[0].shape, dtype=np.uint64)
    for k in keys:
        h = _splitmix64(h ^ k)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass
class SynthConfig:
    width: int = 48
    height: int = 36
    n_shapes: int = 3
    speed_range: tuple[float, float] = (20.0, 60.0)  # pixels / second
    event_rate: float = 500.0  # events / second per moving boundary pixel
    duration_us: int = 1_000_000
    step_us: int = 1000
    annotation_period_us: int = 10_000
    # per-class (w range, h range) in pixels
    class_sizes: tuple = (((10, 14), (6, 8)), ((6, 8), (10, 14)))

    @property
    def n_classes(self) -> int:
        return len(self.class_sizes)

    def check(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigError("zero-area domain")
        if self.duration_us <= 0:
            raise ConfigError("duration must be positive")
        if self.step_us <= 0 or self.annotation_period_us <= 0:
            raise ConfigError("step and annotation period must be positive")
        if self.n_shapes < 0:
            raise ConfigError("negative shape count")
        lo, hi = self.speed_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad speed range {self.speed_range}")


def _reflect(p: float, span: float) -> tuple[float, int]:
    """Position on [0, span] of a point bouncing between the ends, and the sign of its motion."""
    if span <= 0:
        return 0.0, 0
    m = math.fmod(p, 2 * span)
    if m < 0:
        m += 2 * span
    if m <= span:
        return m, 1
    return 2 * span - m, -1


@dataclass
class SynthShape:
    """An axis-aligned bright rectangle moving at constant velocity, bouncing off the domain edges."""

    w: int
    h: int
    x0: float
    y0: float
    vx: float  # pixels / second
    vy: float
    class_id: int
    domain: SpatialDomain = field(repr=False, default=None)

    def state_at(self, t_us: int) -> tuple[int, int, float, float]:
        """Integer top-left and current velocity at time ``t_us``."""
        ts = t_us * 1e-6
        px, dx = _reflect(self.x0 + self.vx * ts, self.domain.width - self.w)
        py, dy = _reflect(self.y0 + self.vy * ts, self.domain.height - self.h)
        return int(math.floor(px)), int(math.floor(py)), self.vx * dx, self.vy * dy

    def box_at(self, t_us: int) -> tuple[float, float, float, float]:
        x, y, _, _ = self.state_at(t_us)
        return (x + self.w / 2, y + self.h / 2, float(self.w), float(self.h))

    def boundary_polarity(self, t_us: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Boundary pixels at ``t_us`` with brightness-change sign (0 where the edge is not moving)."""
        x, y, vx, vy = self.state_at(t_us)
        xs, ys = np.meshgrid(np.arange(x, x + self.w), np.arange(y, y + self.h))
        xs, ys = xs.ravel(), ys.ravel()
        nx = (xs == x + self.w - 1).astype(int) - (xs == x).astype(int)
        ny = (ys == y + self.h - 1).astype(int) - (ys == y).astype(int)
        on_edge = (nx != 0) | (ny != 0)
        dot = vx * nx + vy * ny
        return xs[on_edge], ys[on_edge], np.sign(dot[on_edge]).astype(np.int8)


def synth_shapes(config: SynthConfig, seed: int) -> list[SynthShape]:
    config.check()
    rng = np.random.default_rng(seed)
    domain = SpatialDomain(config.width, config.height)
    shapes = []
    for _ in range(config.n_shapes):
        cls = int(rng.integers(config.n_classes))
        (wlo, whi), (hlo, hi) = config.class_sizes[cls]
        w = min(int(rng.integers(wlo, whi + 1)), config.width)
        h = min(int(rng.integers(hlo, hi + 1)), config.height)
        speed = rng.uniform(*config.speed_range)
        angle = rng.uniform(0, 2 * math.pi)
        shapes.append(SynthShape(
            w=w, h=h,
            x0=rng.uniform(0, config.width - w), y0=rng.uniform(0, config.height - h),
            vx=speed * math.cos(angle), vy=speed * math.sin(angle),
            class_id=cls, domain=domain,
        ))
    return shapes


def generate_synthetic(config: SynthConfig, seed: int) -> tuple[EventStream, list[GroundTruthBox]]:
    """Events on the moving edges of bouncing rectangles, plus per-period box annotations.

    Each boundary pixel whose edge moves fires at most once per step, with
    probability ``event_rate * step``; the draw is a hash of
    (seed, shape, step, pixel) so results do not depend on evaluation order.
    """
    config.check()
    domain = SpatialDomain(config.width, config.height)
    shapes = synth_shapes(config, seed)
    n_steps = -(-config.duration_us // config.step_us)
    prob = min(1.0, config.event_rate * config.step_us * 1e-6)
    xs, ys, ts, ps = [], [], [], []
    for n in range(n_steps):
        t0 = n * config.step_us
        for si, shape in enumerate(shapes):
            bx, by, pol = shape.boundary_polarity(t0)
            moving = pol != 0
            if not moving.any():
                continue
            bx, by, pol = bx[moving], by[moving], pol[moving]
            pix = by.astype(np.uint64) * np.uint64(config.width) + bx.astype(np.uint64)
            u = counter_uniform(seed, si, n, pix, 0)
            fire = u < prob
            if not fire.any():
                continue
            jitter = counter_uniform(seed, si, n, pix[fire], 1)
            t = t0 + np.minimum((jitter * config.step_us).astype(np.int64), config.step_us - 1)
            t = np.minimum(t, config.duration_us - 1)
            xs.append(bx[fire]); ys.append(by[fire]); ts.append(t); ps.append(pol[fire])
    if xs:
        x, y, t, p = (np.concatenate(a) for a in (xs, ys, ts, ps))
        order = np.argsort(t, kind="stable")
        stream = EventStream(domain, x[order], y[order], t[order].astype(np.uint64), p[order])
    else:
        stream = EventStream.empty(domain)
    boxes = []
    if config.n_shapes:
        for t_ann in range(0, config.duration_us, config.annotation_period_us):
            for shape in shapes:
                boxes.append(GroundTruthBox(t_ann, shape.box_at(t_ann), shape.class_id))
    return stream, boxes

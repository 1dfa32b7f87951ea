from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssladet.errors import ConfigError, ParseError, ValidationError
from ssladet.events import (
    MAGIC,
    Event,
    EventStream,
    GroundTruthBox,
    Polarity,
    SpatialDomain,
    SynthConfig,
    generate_synthetic,
    read_boxes,
    read_stream,
    synth_shapes,
    write_boxes,
    write_stream,
)


def random_stream(rng, n, w=64, h=48):
    return EventStream(
        SpatialDomain(w, h),
        rng.integers(0, w, n), rng.integers(0, h, n),
        np.cumsum(rng.integers(0, 1000, n)).astype(np.uint64),
        np.where(rng.random(n) < 0.5, 1, -1),
    )


def test_empty_body_gives_empty_stream(tmp_path):
    s = EventStream.empty(SpatialDomain(10, 8))
    p = tmp_path / "e.bin"
    write_stream(s, p)
    assert p.stat().st_size == 16  # header only
    back = read_stream(p)
    assert len(back) == 0 and back.domain == SpatialDomain(10, 8)


def test_single_record_round_trip(tmp_path):
    s = EventStream.from_events(SpatialDomain(8, 8), [Event((3, 4), 100, Polarity.ON)])
    for name in ("one.bin", "one.csv"):
        write_stream(s, tmp_path / name)
        back = read_stream(tmp_path / name, domain=SpatialDomain(8, 8))
        assert back[0] == Event((3, 4), 100, Polarity.ON)
        assert back.equals(s)


def test_binary_layout(tmp_path):
    s = EventStream.from_events(SpatialDomain(300, 200), [Event((258, 7), 2 ** 40 + 5, Polarity.OFF)])
    write_stream(s, tmp_path / "e.bin")
    raw = (tmp_path / "e.bin").read_bytes()
    assert raw[:4] == MAGIC
    assert int.from_bytes(raw[4:6], "little") == 300
    assert int.from_bytes(raw[6:8], "little") == 200
    assert int.from_bytes(raw[8:16], "little") == 1
    rec = raw[16:]
    assert len(rec) == 16
    assert int.from_bytes(rec[0:2], "little") == 258
    assert int.from_bytes(rec[2:4], "little") == 7
    assert rec[4] == 0xFF  # -1 as int8
    assert rec[5:8] == b"\0\0\0"
    assert int.from_bytes(rec[8:16], "little") == 2 ** 40 + 5


def test_csv_layout(tmp_path):
    s = EventStream.from_events(SpatialDomain(8, 8), [Event((1, 2), 5, Polarity.ON), Event((7, 0), 9, Polarity.OFF)])
    write_stream(s, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "x,y,p,t\n1,2,1,5\n7,0,-1,9\n"


def test_random_streams_round_trip_bytes(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(1000):
        s = random_stream(rng, int(rng.integers(0, 40)))
        p = tmp_path / f"s{i % 3}.bin"
        write_stream(s, p)
        first = p.read_bytes()
        write_stream(read_stream(p), p)
        assert p.read_bytes() == first


def test_large_stream_round_trip(tmp_path):
    s = random_stream(np.random.default_rng(1), 10_000)
    for name in ("big.bin", "big.csv"):
        write_stream(s, tmp_path / name)
        assert read_stream(tmp_path / name, domain=s.domain).equals(s)


def test_csv_domain_inferred_when_absent(tmp_path):
    (tmp_path / "e.csv").write_text("x,y,p,t\n4,2,1,0\n1,6,1,3\n")
    assert read_stream(tmp_path / "e.csv").domain == SpatialDomain(5, 7)


def test_out_of_order_rejected(tmp_path):
    (tmp_path / "e.csv").write_text("x,y,p,t\n0,0,1,10\n0,0,1,9\n")
    with pytest.raises(ValidationError, match="out of order"):
        read_stream(tmp_path / "e.csv")


def test_out_of_domain_rejected(tmp_path):
    s = random_stream(np.random.default_rng(2), 5, w=20, h=20)
    write_stream(s, tmp_path / "e.bin")
    raw = bytearray((tmp_path / "e.bin").read_bytes())
    raw[16:18] = (25).to_bytes(2, "little")
    (tmp_path / "e.bin").write_bytes(bytes(raw))
    with pytest.raises(ValidationError, match="outside domain"):
        read_stream(tmp_path / "e.bin")


def test_truncated_record_reports_offset(tmp_path):
    s = random_stream(np.random.default_rng(3), 4)
    write_stream(s, tmp_path / "e.bin")
    raw = (tmp_path / "e.bin").read_bytes()
    (tmp_path / "e.bin").write_bytes(raw[:-5])
    with pytest.raises(ParseError) as e:
        read_stream(tmp_path / "e.bin")
    assert e.value.offset == 16 + 3 * 16


def test_bad_polarity_and_padding(tmp_path):
    s = random_stream(np.random.default_rng(4), 3)
    write_stream(s, tmp_path / "e.bin")
    raw = bytearray((tmp_path / "e.bin").read_bytes())
    bad = bytearray(raw)
    bad[16 + 16 + 4] = 3
    (tmp_path / "p.bin").write_bytes(bytes(bad))
    with pytest.raises(ParseError) as e:
        read_stream(tmp_path / "p.bin")
    assert e.value.offset == 16 + 16 + 4
    bad = bytearray(raw)
    bad[16 + 6] = 1
    (tmp_path / "q.bin").write_bytes(bytes(bad))
    with pytest.raises(ParseError, match="padding"):
        read_stream(tmp_path / "q.bin")


def test_bad_magic(tmp_path):
    (tmp_path / "e.bin").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ParseError):
        read_stream(tmp_path / "e.bin")


def test_csv_malformed_line_number(tmp_path):
    (tmp_path / "e.csv").write_text("x,y,p,t\n0,0,1,1\n0,zero,1,2\n")
    with pytest.raises(ParseError) as e:
        read_stream(tmp_path / "e.csv")
    assert e.value.offset == 3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 15), st.integers(0, 9), st.sampled_from([1, -1]),
                          st.integers(0, 2 ** 63)), max_size=30))
def test_round_trip_property(tmp_path_factory, rows):
    rows = sorted(rows, key=lambda r: r[3])
    d = SpatialDomain(16, 10)
    s = EventStream(d, [r[0] for r in rows], [r[1] for r in rows], [r[3] for r in rows], [r[2] for r in rows])
    p = tmp_path_factory.mktemp("rt") / "s.bin"
    write_stream(s, p)
    assert read_stream(p).equals(s)


def test_boxes_round_trip(tmp_path):
    boxes = [GroundTruthBox(10, (1.5, 2.25, 3.0, 4.0), 1), GroundTruthBox(20, (0.1, 0.2, 0.3, 0.4), 0)]
    write_boxes(boxes, tmp_path / "b.csv")
    assert read_boxes(tmp_path / "b.csv") == boxes


# ------------------------------------------------------------------ synthetic


def test_zero_shapes_empty():
    s, b = generate_synthetic(SynthConfig(n_shapes=0, duration_us=50_000), 0)
    assert len(s) == 0 and b == []


def test_stationary_shape_no_events():
    s, b = generate_synthetic(SynthConfig(n_shapes=2, speed_range=(0.0, 0.0), duration_us=50_000), 3)
    assert len(s) == 0
    assert len(b) == 2 * 5


def test_same_seed_bit_identical():
    cfg = SynthConfig(duration_us=200_000)
    a, ba = generate_synthetic(cfg, 11)
    b, bb = generate_synthetic(cfg, 11)
    assert a.equals(b) and ba == bb
    c, _ = generate_synthetic(cfg, 12)
    assert not a.equals(c)


def test_events_on_boundary_with_edge_polarity():
    cfg = SynthConfig(duration_us=100_000)
    s, _ = generate_synthetic(cfg, 5)
    shapes = synth_shapes(cfg, 5)
    assert len(s) > 1000
    step = cfg.step_us
    for i in range(0, len(s), 37):
        x, y, t, p = int(s.x[i]), int(s.y[i]), int(s.t[i]), int(s.p[i])
        t0 = (t // step) * step
        ok = False
        for sh in shapes:
            bx, by, pol = sh.boundary_polarity(t0)
            hit = (bx == x) & (by == y) & (pol == p) & (pol != 0)
            ok |= bool(hit.any())
        assert ok, (x, y, t, p)


def test_leading_edge_positive():
    cfg = SynthConfig(n_shapes=1, duration_us=10_000)
    sh = synth_shapes(cfg, 0)[0]
    sh.vx, sh.vy = 30.0, 0.0
    bx, by, pol = sh.boundary_polarity(0)
    x, y, _, _ = sh.state_at(0)
    assert set(pol[bx == x + sh.w - 1]) == {1}
    assert set(pol[bx == x]) == {-1}
    assert set(pol[(bx > x) & (bx < x + sh.w - 1)]) == {0}


def test_temporal_order_and_box_period():
    cfg = SynthConfig(duration_us=100_000, annotation_period_us=20_000)
    s, b = generate_synthetic(cfg, 9)
    assert np.all(np.diff(s.t.astype(np.int64)) >= 0)
    assert sorted({x.t for x in b}) == [0, 20_000, 40_000, 60_000, 80_000]
    for box in b:
        cx, cy, w, h = box.box
        assert w > 0 and h > 0
        assert 0 <= cx - w / 2 and cx + w / 2 <= cfg.width


@pytest.mark.parametrize("kw", [dict(width=0), dict(duration_us=0), dict(speed_range=(5, 1))])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        generate_synthetic(SynthConfig(**kw), 0)

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssladet.errors import BoundsError, ConfigError
from ssladet.events import SpatialDomain
from ssladet.geometry import (
    PatchLookupTable,
    active_patches,
    build_lookup_table,
    build_patch_grid,
    build_scatter_plan,
)
from ssladet.verify import check_geometry, check_scatter_plan, random_stream


def table(w, h, P):
    return build_lookup_table(build_patch_grid(SpatialDomain(w, h), P))


def test_patch_count():
    g = build_patch_grid(SpatialDomain(4, 3), 3)
    assert g.K == 6 * 5
    assert g.A == 9


def test_patch_size_one_is_identity():
    t = table(5, 4, 1)
    assert t.A == 1
    ys, xs = np.mgrid[0:4, 0:5]
    assert np.array_equal(t.patch_ids[..., 0], ys * 5 + xs)
    assert not t.deltas.any()


def test_corner_pixel_3x3():
    t = table(4, 3, 3)
    got = active_patches(t, (0, 0))
    assert len(got) == 9
    # top-left corners (-2..0, -2..0); padded row length 6
    expect = sorted(((cy + 2) * 6 + (cx + 2), (-cx, -cy)) for cy in (-2, -1, 0) for cx in (-2, -1, 0))
    assert got == expect


def test_every_pixel_has_p_squared_distinct_patches():
    for P in range(1, 6):
        t = table(9, 7, P)
        ids = t.patch_ids.reshape(-1, P * P)
        assert all(len(set(r)) == P * P for r in ids.tolist())


def test_slot_delta_shared_by_all_pixels():
    t = table(6, 5, 3)
    flat = t.deltas[..., 1] * 3 + t.deltas[..., 0]
    assert np.array_equal(flat, np.broadcast_to(t.slot_delta, flat.shape))


def test_ids_sorted_and_round_trip():
    t = table(7, 5, 4)
    assert np.all(np.diff(t.patch_ids, axis=-1) > 0)
    cx, cy = t.grid.top_left(t.patch_ids)
    assert np.array_equal(cx + t.deltas[..., 0], np.broadcast_to(np.arange(7)[None, :, None], cx.shape))
    assert np.array_equal(cy + t.deltas[..., 1], np.broadcast_to(np.arange(5)[:, None, None], cy.shape))


@pytest.mark.parametrize("P", [1, 2, 3, 4, 5])
def test_exhaustive_oracle_small(P):
    assert check_geometry(11, 6, P) is None
    assert check_geometry(1, 1, P) is None


def test_out_of_bounds_lookup():
    t = table(4, 3, 2)
    with pytest.raises(BoundsError):
        active_patches(t, (4, 0))
    with pytest.raises(BoundsError):
        build_scatter_plan(t, np.array([0, 5]), np.array([0, 0]))


def test_bad_patch_size():
    with pytest.raises(ConfigError):
        build_patch_grid(SpatialDomain(4, 4), 0)


def test_global_patch_table():
    t = PatchLookupTable.global_patch(SpatialDomain(5, 4))
    assert t.A == 1 and t.K == 1 and not t.patch_ids.any()


# ------------------------------------------------------------- scatter plan


def test_plan_on_tiny_stream():
    t = table(3, 1, 2)  # 1 row, P=2 -> padded 4x2
    xs, ys = np.array([0, 2, 1]), np.array([0, 0, 0])
    plan = build_scatter_plan(t, xs, ys)
    naive = {}
    for i, (x, y) in enumerate(zip(xs, ys)):
        for k in t.patch_ids[y, x]:
            naive.setdefault(int(k), []).append(i)
    assert [plan.segment(s)[0] for s in range(len(plan.segment_ids))] == sorted(naive)
    for s in range(len(plan.segment_ids)):
        k, src = plan.segment(s)
        assert src.tolist() == naive[k]


def test_scatter_gather_inverse():
    rng = np.random.default_rng(0)
    t = table(10, 8, 3)
    s = random_stream(rng, SpatialDomain(10, 8), 50)
    plan = build_scatter_plan(t, s.x, s.y)
    payload = rng.normal(size=(plan.n_slots, 3))
    assert np.array_equal(plan.gather(plan.scatter(payload)), payload)
    assert np.array_equal(plan.scatter(plan.gather(payload)), payload)


def test_one_hot_cotangent_returns_to_source():
    """Scatter's adjoint is gather (and vice versa), so a one-hot comes back to its slot."""
    rng = np.random.default_rng(1)
    t = table(6, 6, 2)
    s = random_stream(rng, SpatialDomain(6, 6), 20)
    plan = build_scatter_plan(t, s.x, s.y)
    for j in rng.choice(plan.n_slots, 10, replace=False):
        e = np.zeros(plan.n_slots)
        e[j] = 1.0
        sorted_e = plan.scatter(e)
        r = int(np.flatnonzero(sorted_e)[0])
        assert plan.perm[r] == j
        back = plan.gather(sorted_e)
        assert np.array_equal(back, e)


def test_empty_stream_plan():
    plan = build_scatter_plan(table(4, 4, 3), np.zeros(0, int), np.zeros(0, int))
    assert plan.n_slots == 0 and len(plan.segment_ids) == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(1, 9), st.integers(1, 4), st.integers(0, 60), st.integers(0, 2 ** 32 - 1))
def test_plan_matches_naive_filter(w, h, P, n, seed):
    s = random_stream(np.random.default_rng(seed), SpatialDomain(w, h), n)
    assert check_scatter_plan(s, P) is None

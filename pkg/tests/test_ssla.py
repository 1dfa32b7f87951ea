from __future__ import annotations

import numpy as np
import pytest

from ssladet import flops as F
from ssladet.errors import BoundsError
from ssladet.events import Event, Polarity, SpatialDomain
from ssladet.ssla import (
    PatchStateBank,
    RecurrentSSLA,
    count_touched_states,
    create_ssla,
    pap_project_in,
    pap_project_out,
    ssla_forward_parallel,
    ssla_step_recurrent,
)
from ssladet.verify import corrupt_plan, module_equivalence, random_stream, translation_error
from ssladet.geometry import build_scatter_plan


def naive_ssla(module, xs, ys, v):
    """Direct per-event, per-patch evaluation from the matrices themselves."""
    P = module.P
    la = module.la
    lam = np.exp(-np.exp(la.nu.value))
    gam = np.sqrt(1 - lam ** 2)
    states = {}
    out = []
    W, H = module.lookup.domain.width, module.lookup.domain.height
    for x, y, vi in zip(xs, ys, v):
        o = np.zeros(module.d_out)
        patches = []
        for cy in range(y - P + 1, y + 1):
            for cx in range(x - P + 1, x + 1):
                k = (cy + P - 1) * (W + P - 1) + (cx + P - 1)
                patches.append((k, (x - cx, y - cy)))
        for k, delta in sorted(patches):
            u = pap_project_in(module.pap, vi, delta)
            s = lam * states.get(k, np.zeros(module.d_state)) + gam * (la.W_B.value @ u)
            states[k] = s
            o = o + pap_project_out(module.pap, la.W_C.value @ s + la.W_D.value @ u, delta)
        out.append(o)
    return np.array(out)


@pytest.mark.parametrize("P", [1, 2, 3])
def test_parallel_matches_naive(P):
    rng = np.random.default_rng(P)
    dom = SpatialDomain(9, 7)
    m = create_ssla(dom, P, 3, 4, rng)
    s = random_stream(rng, dom, 80)
    v = rng.normal(size=(80, 3))
    got = ssla_forward_parallel(m, s.x, s.y, v).value
    assert np.abs(got - naive_ssla(m, s.x.tolist(), s.y.tolist(), v)).max() < 1e-12


@pytest.mark.parametrize("pap_in,pap_out", [(False, False), (True, False), (False, True)])
def test_pap_off_shares_matrix(pap_in, pap_out):
    rng = np.random.default_rng(4)
    m = create_ssla(SpatialDomain(6, 6), 3, 2, 3, rng, pap_in=pap_in, pap_out=pap_out)
    assert m.pap.W_in.shape[0] == (9 if pap_in else 1)
    assert m.pap.W_out.shape[0] == (9 if pap_out else 1)
    s = random_stream(rng, SpatialDomain(6, 6), 40)
    v = rng.normal(size=(40, 2))
    got = ssla_forward_parallel(m, s.x, s.y, v).value
    assert np.abs(got - naive_ssla(m, s.x.tolist(), s.y.tolist(), v)).max() < 1e-12


def test_single_event_closed_form():
    """One event, empty bank: o = sum_a W_out[a] (W_C gamma W_B u_a + W_D u_a)."""
    rng = np.random.default_rng(0)
    m = create_ssla(SpatialDomain(5, 5), 2, 2, 3, rng)
    v = np.array([1.0, -0.5])
    lam = m.la.decay()
    gam = np.sqrt(1 - lam ** 2)
    o = np.zeros(3)
    for dy in range(2):
        for dx in range(2):
            u = m.pap.W_in.value[dy * 2 + dx] @ v
            y = m.la.W_C.value @ (gam * (m.la.W_B.value @ u)) + m.la.W_D.value @ u
            o += m.pap.W_out.value[dy * 2 + dx] @ y
    bank = PatchStateBank(m.d_state)
    got = ssla_step_recurrent(m, bank, Event((2, 3), 0, Polarity.ON), v)
    assert np.allclose(got, o, atol=1e-14)
    assert len(bank) == 4


def test_events_far_apart_are_independent():
    rng = np.random.default_rng(1)
    m = create_ssla(SpatialDomain(20, 20), 3, 2, 3, rng)
    v = rng.normal(size=(2, 2))
    both = ssla_forward_parallel(m, np.array([0, 10]), np.array([0, 10]), v).value
    alone = ssla_forward_parallel(m, np.array([10]), np.array([10]), v[1:]).value
    assert np.allclose(both[1], alone[0], rtol=0, atol=1e-14)


def test_recurrent_matches_parallel_long():
    rng = np.random.default_rng(5)
    err, _ = module_equivalence(3, 4, 8, random_stream(rng, SpatialDomain(64, 48), 5000), 7)
    assert err < 1e-10


def test_corrupted_permutation_detected():
    rng = np.random.default_rng(6)
    err, where = module_equivalence(2, 3, 4, random_stream(rng, SpatialDomain(16, 12), 500), 3, corrupt=True)
    assert err > 1e-6 and where >= 0


def test_corrupt_plan_keeps_inverse_consistent():
    rng = np.random.default_rng(2)
    m = create_ssla(SpatialDomain(8, 8), 2, 2, 2, rng)
    s = random_stream(rng, SpatialDomain(8, 8), 30)
    plan = corrupt_plan(build_scatter_plan(m.lookup, s.x, s.y), rng)
    assert np.array_equal(plan.perm[plan.inv_perm], np.arange(plan.n_slots))


def test_touched_states_and_bounds():
    m = create_ssla(SpatialDomain(10, 8), 4, 2, 3, np.random.default_rng(0))
    assert count_touched_states(m, (0, 0)) == 16
    assert count_touched_states(m, (9, 7)) == 16
    with pytest.raises(BoundsError):
        count_touched_states(m, (10, 0))
    with pytest.raises(BoundsError):
        RecurrentSSLA(m).step(-1, 0, np.zeros(2))


def test_bad_embedding_shape():
    m = create_ssla(SpatialDomain(4, 4), 2, 3, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ssla_forward_parallel(m, np.array([0]), np.array([0]), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        m.pap.in_matrix((2, 0))


def test_translation_exact():
    rng = np.random.default_rng(3)
    for P in (1, 2, 3, 4):
        err, _ = translation_error(rng, SpatialDomain(30, 20), P, 3, 4, 300)
        assert err <= 1e-12


def test_dense_mode_single_state():
    rng = np.random.default_rng(8)
    m = create_ssla(SpatialDomain(12, 9), 3, 2, 6, rng, dense=True)
    assert m.A == 1 and m.pap.W_in.shape[0] == 1
    s = random_stream(rng, SpatialDomain(12, 9), 50)
    v = rng.normal(size=(50, 2))
    rec = RecurrentSSLA(m)
    seq = np.stack([rec.step(x, y, v[i]) for i, (x, y) in enumerate(zip(s.x.tolist(), s.y.tolist()))])
    assert len(rec.bank) == 1
    assert np.abs(seq - ssla_forward_parallel(m, s.x, s.y, v).value).max() < 1e-12


def test_event_flops_closed_form():
    """P=3, D_in=2, D_out=12: 9 x (input matvec + LRU step + output matvec + accumulate)."""
    lru = 2 * 12 * 12 + 12 + 2 * 12 + 2 * 12 * 12 + 2 * 12 * 12 + 12
    per_slot = 2 * 12 * 2 + lru + 2 * 12 * 12 + 12
    assert F.ssla_event_flops(9, 2, 12, 12) == 9 * per_slot
    assert F.ssla_event_flops(16, 8, 8, 8) * 9 == F.ssla_event_flops(9, 8, 8, 8) * 16

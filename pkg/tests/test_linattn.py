from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssladet.linattn import (
    init_linattn,
    la_parallel,
    la_sequential,
    la_step,
    linear_scan,
    nu_from_decay,
    reverse_linear_scan,
    scan_combine,
)


def naive_scan(decay, inc):
    out = np.zeros_like(inc)
    s = np.zeros(inc.shape[1:])
    for j in range(len(inc)):
        s = decay[j] * s + inc[j]
        out[j] = s
    return out


@pytest.mark.parametrize("n", [0, 1, 2, 5, 32, 33, 100, 1000, 4099])
def test_scan_matches_fold(n):
    rng = np.random.default_rng(n)
    decay = rng.uniform(0, 1, size=(n, 3))
    decay[rng.random(n) < 0.1] = 0.0  # segment cuts
    inc = rng.normal(size=(n, 3))
    assert np.allclose(linear_scan(decay, inc), naive_scan(decay, inc), rtol=0, atol=1e-12)


def test_reverse_scan_is_adjoint():
    rng = np.random.default_rng(0)
    n = 200
    decay = rng.uniform(0, 1, size=(n, 2))
    inc, g = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    # <g, scan(inc)> == <reverse_scan(g), inc>
    lhs = (g * linear_scan(decay, inc)).sum()
    rhs = (reverse_linear_scan(decay, g) * inc).sum()
    assert abs(lhs - rhs) < 1e-10


def test_combine_associative():
    rng = np.random.default_rng(1)
    a, b, c = [(rng.uniform(size=3), rng.normal(size=3)) for _ in range(3)]
    left = scan_combine(scan_combine(a, b), c)
    right = scan_combine(a, scan_combine(b, c))
    assert np.allclose(left[0], right[0]) and np.allclose(left[1], right[1])


def test_zero_decay_and_zero_weights():
    p = init_linattn(np.random.default_rng(0), 3, 4, 2)
    p.decay_override = np.zeros(4)
    z = np.random.default_rng(1).normal(size=(5, 3))
    # lam = 0: each output depends on its own input only
    out = la_parallel(p, z)
    for i in range(5):
        assert np.allclose(out[i], la_parallel(p, z[i:i + 1])[0])
    p.W_B.value[:] = 0
    p.W_D.value[:] = 0
    assert not la_sequential(p, z).any()


def test_single_step_closed_form():
    p = init_linattn(np.random.default_rng(2), 2, 3, 2)
    z = np.array([0.5, -1.0])
    lam = np.exp(-np.exp(p.nu.value))
    s, o = la_step(p, np.zeros(3), z)
    S = np.sqrt(1 - lam ** 2) * (p.W_B.value @ z)
    assert np.allclose(s, S)
    assert np.allclose(o, p.W_C.value @ S + p.W_D.value @ z)


@pytest.mark.parametrize("P", [1, 2, 3, 4])
def test_sequential_parallel_agree(P):
    rng = np.random.default_rng(P)
    p = init_linattn(rng, 4, 6, 5)
    z = rng.normal(size=(1000 * P, 4))
    assert np.abs(la_parallel(p, z) - la_sequential(p, z)).max() < 1e-10


def test_shape_errors():
    p = init_linattn(np.random.default_rng(0), 3, 4, 2)
    with pytest.raises(ValueError):
        la_step(p, np.zeros(4), np.zeros(2))
    with pytest.raises(ValueError):
        la_step(p, np.zeros(3), np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(st.floats(-30, 6, allow_nan=False))
def test_decay_strictly_inside_unit_interval(nu):
    lam = np.exp(-np.exp(nu))
    assert 0 < lam < 1


def test_nu_from_decay_inverse():
    lam = np.array([0.5, 0.9, 0.999])
    assert np.allclose(np.exp(-np.exp(nu_from_decay(lam))), lam)


def test_init_decay_range():
    p = init_linattn(np.random.default_rng(3), 2, 64, 2)
    lam = p.decay()
    assert lam.min() >= 0.9 and lam.max() <= 0.999

"""Real-valued diagonal linear recurrent unit.

Per channel decay ``lam = exp(-exp(nu))`` keeps ``lam`` in (0, 1) for any
finite ``nu``; inputs are scaled by ``gamma = sqrt(1 - lam**2)``::

    S_i = lam * S_{i-1} + gamma * (W_B z_i)
    o_i = W_C S_i + W_D z_i

The recurrence is a fold of affine maps ``S -> a*S + b``; composing
``(a1, b1)`` then ``(a2, b2)`` gives ``(a1*a2, a2*b1 + b2)``, which is
associative and lets the whole sequence be evaluated by a parallel scan.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, param, value_of


@dataclass
class LinAttnParams:
    nu: Tensor  # (D_state,)
    W_B: Tensor  # (D_state, D_in)
    W_C: Tensor  # (D_out, D_state)
    W_D: Tensor  # (D_out, D_in)
    decay_override: np.ndarray | None = None  # test hook: force lam directly

    @property
    def d_state(self) -> int:
        return self.W_B.shape[0]

    @property
    def d_in(self) -> int:
        return self.W_B.shape[1]

    @property
    def d_out(self) -> int:
        return self.W_C.shape[0]

    def decay(self) -> np.ndarray:
        if self.decay_override is not None:
            return np.asarray(self.decay_override, dtype=np.float64)
        return np.exp(-np.exp(value_of(self.nu)))

    def gamma(self) -> np.ndarray:
        lam = self.decay()
        return np.sqrt(1.0 - lam * lam)

    def named_parameters(self, prefix: str = ""):
        yield prefix + "nu", self.nu
        yield prefix + "W_B", self.W_B
        yield prefix + "W_C", self.W_C
        yield prefix + "W_D", self.W_D


def nu_from_decay(lam) -> np.ndarray:
    return np.log(-np.log(np.asarray(lam, dtype=np.float64)))


def init_linattn(rng: np.random.Generator, d_in: int, d_state: int, d_out: int,
                 lam_range: tuple[float, float] = (0.9, 0.999)) -> LinAttnParams:
    lam = rng.uniform(*lam_range, size=d_state)

    def fan_in(shape):
        bound = 1.0 / math.sqrt(shape[1])
        return rng.uniform(-bound, bound, size=shape)

    return LinAttnParams(
        nu=param(nu_from_decay(lam)),
        W_B=param(fan_in((d_state, d_in))),
        W_C=param(fan_in((d_out, d_state))),
        W_D=param(fan_in((d_out, d_in))),
    )


def _check(params: LinAttnParams, z: np.ndarray) -> None:
    if z.shape[-1] != params.d_in:
        raise ValueError(f"input width {z.shape[-1]} != d_in {params.d_in}")


def la_step(params: LinAttnParams, state: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    _check(params, z)
    if state.shape != (params.d_state,):
        raise ValueError(f"state shape {state.shape} != ({params.d_state},)")
    new = params.decay() * state + params.gamma() * (value_of(params.W_B) @ z)
    return new, value_of(params.W_C) @ new + value_of(params.W_D) @ z


def la_sequential(params: LinAttnParams, z_seq: np.ndarray) -> np.ndarray:
    z_seq = np.asarray(z_seq, dtype=np.float64).reshape(-1, params.d_in)
    state = np.zeros(params.d_state)
    out = np.empty((len(z_seq), params.d_out))
    for i, z in enumerate(z_seq):
        state, out[i] = la_step(params, state, z)
    return out


def scan_combine(first, second):
    """Compose the affine maps ``first`` then ``second``."""
    a1, b1 = first
    a2, b2 = second
    return a1 * a2, a2 * b1 + b2


def linear_scan(decay: np.ndarray, inc: np.ndarray) -> np.ndarray:
    """Inclusive scan of ``S_j = decay_j * S_{j-1} + inc_j`` from ``S_{-1} = 0``.

    Two-level blocked scan: compose the affine pairs inside blocks of about
    sqrt(N) rows (one vectorised sweep across all blocks), scan the block
    totals recursively, then apply each block's carry-in. A zero decay cuts
    the dependency on everything before it, which is how independent patch
    segments share one buffer.
    """
    b = np.array(inc, dtype=np.float64)
    a = np.array(np.broadcast_to(decay, b.shape), dtype=np.float64)
    n = len(b)
    if n <= 32:
        for j in range(1, n):
            b[j] += a[j] * b[j - 1]
        return b
    c = int(math.isqrt(n))
    m = -(-n // c)
    pad = m * c - n
    tail = b.shape[1:]
    if pad:
        a = np.concatenate([a, np.ones((pad,) + tail)])
        b = np.concatenate([b, np.zeros((pad,) + tail)])
    # (c, m, ...) so that position-in-block slices are contiguous
    a = np.ascontiguousarray(a.reshape((m, c) + tail).swapaxes(0, 1))
    b = np.ascontiguousarray(b.reshape((m, c) + tail).swapaxes(0, 1))
    for j in range(1, c):
        b[j] += a[j] * b[j - 1]
        a[j] *= a[j - 1]
    carry = linear_scan(a[-1], b[-1])  # inclusive scan of block totals
    b[:, 1:] += a[:, 1:] * carry[None, :-1]
    return b.swapaxes(0, 1).reshape((m * c,) + tail)[:n]


def reverse_linear_scan(decay: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`linear_scan`: ``G_j = g_j + decay_{j+1} * G_{j+1}``."""
    a = np.broadcast_to(decay, g.shape)
    nxt = np.zeros_like(g)
    nxt[:-1] = a[1:]
    return linear_scan(nxt[::-1], g[::-1])[::-1]


def la_parallel(params: LinAttnParams, z_seq: np.ndarray) -> np.ndarray:
    z_seq = np.asarray(z_seq, dtype=np.float64).reshape(-1, params.d_in)
    _check(params, z_seq)
    if len(z_seq) == 0:
        return np.zeros((0, params.d_out))
    inc = params.gamma() * (z_seq @ value_of(params.W_B).T)
    S = linear_scan(params.decay(), inc)
    return S @ value_of(params.W_C).T + z_seq @ value_of(params.W_D).T

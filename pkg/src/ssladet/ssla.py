"""Spatially-sparse linear attention.

Every event at pixel x updates the A = P**2 patch states covering x. The
parallel path expands the sequence to L*A slots, stable-sorts slots by patch
id, runs one segmented linear scan, and un-sorts; the recurrent path updates a
sparse bank of patch states one event at a time. Both sum the A projected
interim outputs in ascending patch-id order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, make_output, param, value_of
from .errors import BoundsError
from .events import SpatialDomain
from .geometry import (
    PatchLookupTable,
    ScatterPlan,
    build_lookup_table,
    build_patch_grid,
    build_scatter_plan,
)
from .linattn import LinAttnParams, init_linattn, linear_scan, reverse_linear_scan


@dataclass
class PAPWeights:
    """Position-aware projections.

    ``W_in[m]`` / ``W_out[m]`` are indexed by flat relative position
    ``m = dy * P + dx``; with the projection disabled there is a single
    shared matrix and every position maps to it.
    """

    W_in: Tensor  # (n_in, D_out, D_in)
    W_out: Tensor  # (n_out, D_out, D_out)
    P: int

    @property
    def position_aware_in(self) -> bool:
        return self.W_in.shape[0] > 1 or self.P == 1

    @property
    def position_aware_out(self) -> bool:
        return self.W_out.shape[0] > 1 or self.P == 1

    def _index(self, W: Tensor, delta) -> int:
        dx, dy = delta
        if not (0 <= dx < self.P and 0 <= dy < self.P):
            raise ValueError(f"relative position {delta} outside 0..{self.P - 1}")
        return 0 if W.shape[0] == 1 else dy * self.P + dx

    def in_matrix(self, delta) -> np.ndarray:
        return self.W_in.value[self._index(self.W_in, delta)]

    def out_matrix(self, delta) -> np.ndarray:
        return self.W_out.value[self._index(self.W_out, delta)]


def init_pap(rng, P: int, d_in: int, d_out: int, position_in: bool = True,
             position_out: bool = True) -> PAPWeights:
    n_in = P * P if position_in else 1
    n_out = P * P if position_out else 1
    b_in, b_out = 1.0 / math.sqrt(d_in), 1.0 / math.sqrt(d_out)
    return PAPWeights(
        W_in=param(rng.uniform(-b_in, b_in, size=(n_in, d_out, d_in))),
        W_out=param(rng.uniform(-b_out, b_out, size=(n_out, d_out, d_out))),
        P=P,
    )


def pap_project_in(pap: PAPWeights, v, delta) -> np.ndarray:
    return pap.in_matrix(delta) @ np.asarray(v, dtype=np.float64)


def pap_project_out(pap: PAPWeights, o_interim, delta) -> np.ndarray:
    return pap.out_matrix(delta) @ np.asarray(o_interim, dtype=np.float64)


@dataclass
class SSLAModule:
    P: int
    pap: PAPWeights
    la: LinAttnParams
    lookup: PatchLookupTable
    dense: bool = False

    @property
    def A(self) -> int:
        return self.lookup.A

    @property
    def d_in(self) -> int:
        return self.pap.W_in.shape[2]

    @property
    def d_out(self) -> int:
        return self.pap.W_in.shape[1]

    @property
    def d_state(self) -> int:
        return self.la.d_state

    def named_parameters(self, prefix: str = ""):
        yield prefix + "pap.W_in", self.pap.W_in
        yield prefix + "pap.W_out", self.pap.W_out
        yield from self.la.named_parameters(prefix + "la.")

    def slot_matrices(self) -> "_SlotWeights":
        return _SlotWeights.build(self)


def create_ssla(domain: SpatialDomain, P: int, d_in: int, d_out: int, rng: np.random.Generator,
                pap_in: bool = True, pap_out: bool = True, dense: bool = False,
                table: PatchLookupTable | None = None) -> SSLAModule:
    """SSLA module with fresh weights; ``dense`` gives one global state with shared projections."""
    if dense:
        table = PatchLookupTable.global_patch(domain)
        P_eff = 1
    else:
        table = table or build_lookup_table(build_patch_grid(domain, P))
        P_eff = P
    pap = init_pap(rng, P_eff, d_in, d_out, pap_in and not dense, pap_out and not dense)
    la = init_linattn(rng, d_out, d_out, d_out)
    return SSLAModule(P_eff, pap, la, table, dense)


@dataclass
class _SlotWeights:
    """Projections laid out per table slot so a whole event is one matmul."""

    win_cat: np.ndarray  # (D_in, A*D_out): v @ win_cat -> u for all slots
    wout_cat: np.ndarray  # (A*D_out, D_out): y.reshape(A*D_out) @ wout_cat -> o
    in_index: np.ndarray  # (A,) matrix used by each slot
    out_index: np.ndarray
    lam: np.ndarray
    gamma: np.ndarray
    W_B: np.ndarray
    W_C: np.ndarray
    W_D: np.ndarray

    @classmethod
    def build(cls, m: SSLAModule) -> "_SlotWeights":
        sd = m.lookup.slot_delta
        in_index = sd if m.pap.W_in.shape[0] > 1 else np.zeros_like(sd)
        out_index = sd if m.pap.W_out.shape[0] > 1 else np.zeros_like(sd)
        Win = m.pap.W_in.value[in_index]  # (A, Do, Di)
        Wout = m.pap.W_out.value[out_index]  # (A, Do, Do) [a, o, e]
        A, Do, Di = Win.shape
        return cls(
            win_cat=Win.transpose(2, 0, 1).reshape(Di, A * Do),
            wout_cat=Wout.transpose(0, 2, 1).reshape(A * Do, Do),
            in_index=in_index, out_index=out_index,
            lam=m.la.decay(), gamma=m.la.gamma(),
            W_B=m.la.W_B.value, W_C=m.la.W_C.value, W_D=m.la.W_D.value,
        )


def _project_in(w: _SlotWeights, v: np.ndarray, A: int) -> np.ndarray:
    return (v @ w.win_cat).reshape(len(v), A, w.win_cat.shape[1] // A)


def ssla_forward_parallel(module: SSLAModule, xs, ys, v, plan: ScatterPlan | None = None,
                          interim_hook=None) -> Tensor:
    """Scatter-compute-gather forward over a whole ordered event sequence.

    ``v`` is (L, D_in). Patch states start at zero. ``plan`` may be passed to
    reuse (or, in tests, tamper with) the scatter permutation;
    ``interim_hook`` replaces the interim outputs (test hook).
    """
    vv = value_of(v)
    L, A = len(vv), module.A
    if len(xs) != L or len(ys) != L:
        raise ValueError(f"{L} embeddings for {len(xs)} events")
    if vv.ndim != 2 or vv.shape[1] != module.d_in:
        raise ValueError(f"embeddings must be (L, {module.d_in}), got {vv.shape}")
    if plan is None:
        plan = build_scatter_plan(module.lookup, xs, ys)
    w = module.slot_matrices()
    Do, Ds = module.d_out, module.d_state

    u = _project_in(w, vv, A)  # (L, A, Do)
    wbu = u @ w.W_B.T  # (L, A, Ds)
    inc = (w.gamma * wbu).reshape(L * A, Ds)
    starts = plan.segment_starts()
    decay = np.where(starts[:, None], 0.0, w.lam[None, :])
    S_sorted = linear_scan(decay, plan.scatter(inc))
    S = plan.gather(S_sorted).reshape(L, A, Ds)
    y = S @ w.W_C.T + u @ w.W_D.T  # (L, A, Do)
    if interim_hook is not None:
        y = np.asarray(interim_hook(y), dtype=np.float64)
    o = y.reshape(L, A * Do) @ w.wout_cat

    params = [t for _, t in module.named_parameters()]
    out, tape = make_output(o, [v] + params)
    if tape is None:
        return out

    def bw():
        go = out.grad
        if go is None:
            return
        la, pap = module.la, module.pap
        # gather + output projection
        g_wout_cat = y.reshape(L, A * Do).T @ go  # (A*Do, Do) [a*Do+e, o]
        gy = (go @ w.wout_cat.T).reshape(L, A, Do)
        _scatter_weight_grad(pap.W_out, g_wout_cat.reshape(A, Do, Do).transpose(0, 2, 1), w.out_index)
        # readout
        gy2 = gy.reshape(-1, Do)
        la.W_C.accumulate(gy2.T @ S.reshape(-1, Ds))
        la.W_D.accumulate(gy2.T @ u.reshape(-1, Do))
        gS = gy @ w.W_C
        gu = gy @ w.W_D
        # per-patch scan, run backwards on the sorted buffer
        G = reverse_linear_scan(decay, plan.scatter(gS.reshape(L * A, Ds)))
        S_prev = np.zeros_like(S_sorted)
        S_prev[1:] = S_sorted[:-1]
        g_lam = ((~starts)[:, None] * G * S_prev).sum(axis=0)
        g_inc = plan.gather(G).reshape(L, A, Ds)
        g_gamma = (g_inc * wbu).reshape(-1, Ds).sum(axis=0)
        g_wbu = w.gamma * g_inc
        la.W_B.accumulate(g_wbu.reshape(-1, Ds).T @ u.reshape(-1, Do))
        gu = gu + g_wbu @ w.W_B
        if la.decay_override is None:
            g_lam = g_lam - g_gamma * w.lam / w.gamma
            la.nu.accumulate(g_lam * (-np.exp(la.nu.value) * w.lam))
        # input projection
        gu2 = gu.reshape(L, A * Do)
        if isinstance(v, Tensor):
            v.accumulate(gu2 @ w.win_cat.T)
        g_win_cat = vv.T @ gu2  # (Di, A*Do)
        _scatter_weight_grad(pap.W_in, g_win_cat.reshape(-1, A, Do).transpose(1, 2, 0), w.in_index)

    tape.record(bw)
    return out


def _scatter_weight_grad(W: Tensor, per_slot: np.ndarray, index: np.ndarray) -> None:
    if not W.requires_grad:
        return
    g = np.zeros_like(W.value)
    np.add.at(g, index, per_slot)
    W.accumulate(g)


@dataclass
class PatchStateBank:
    """Sparse patch-id -> state map; absent patches hold the zero state."""

    d_state: int
    states: dict = field(default_factory=dict)

    def get(self, k: int) -> np.ndarray:
        s = self.states.get(k)
        return np.zeros(self.d_state) if s is None else s

    def __len__(self) -> int:
        return len(self.states)

    def __contains__(self, k) -> bool:
        return k in self.states


class RecurrentSSLA:
    """Event-by-event evaluation of one module against its own state bank."""

    def __init__(self, module: SSLAModule, bank: PatchStateBank | None = None):
        self.module = module
        self.w = module.slot_matrices()
        self.bank = bank if bank is not None else PatchStateBank(module.d_state)

    def step(self, x: int, y: int, v: np.ndarray) -> np.ndarray:
        m, w = self.module, self.w
        table = m.lookup
        if not (0 <= x < table.domain.width and 0 <= y < table.domain.height):
            raise BoundsError(f"({x}, {y}) outside {table.domain.width}x{table.domain.height} domain")
        A = m.A
        ks = table.patch_ids[y, x]
        u = _project_in(w, np.asarray(v, dtype=np.float64).reshape(1, -1), A)[0]  # (A, Do)
        inc = w.gamma * (u @ w.W_B.T)
        states = self.bank.states
        zero = None
        prev = []
        for k in ks.tolist():
            s = states.get(k)
            if s is None:
                if zero is None:
                    zero = np.zeros(m.d_state)
                s = zero
            prev.append(s)
        S = w.lam * np.stack(prev) + inc
        for a, k in enumerate(ks.tolist()):
            states[k] = S[a]
        y_int = S @ w.W_C.T + u @ w.W_D.T
        return y_int.reshape(-1) @ w.wout_cat


def ssla_step_recurrent(module: SSLAModule, bank: PatchStateBank, event, v) -> np.ndarray:
    """One asynchronous update; ``event`` is an :class:`~ssladet.events.Event` or an (x, y) pair."""
    x, y = event.x if hasattr(event, "x") else event
    return RecurrentSSLA(module, bank).step(int(x), int(y), v)


def count_touched_states(module: SSLAModule, event) -> int:
    x, y = event.x if hasattr(event, "x") else event
    if not module.lookup.domain.contains(x, y):
        raise BoundsError(f"({x}, {y}) outside domain")
    return module.A

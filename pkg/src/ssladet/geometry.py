"""Mixture-of-spaces patch geometry.

Patches are the P x P windows at stride 1 over the domain padded by P - 1 on
the top/left and bottom/right, so every pixel is covered by exactly P**2 of
them. Padding is virtual: only patch top-left corners leave the domain.

Patch ids are row-major over padded top-left corners::

    k = (c_y + P - 1) * (width + P - 1) + (c_x + P - 1)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError, ConfigError
from .events import SpatialDomain


@dataclass(frozen=True)
class PatchGrid:
    domain: SpatialDomain
    P: int

    @property
    def padded_width(self) -> int:
        return self.domain.width + self.P - 1

    @property
    def padded_height(self) -> int:
        return self.domain.height + self.P - 1

    @property
    def K(self) -> int:
        return self.padded_width * self.padded_height

    @property
    def A(self) -> int:
        return self.P * self.P

    def patch_id(self, cx, cy):
        return (cy + self.P - 1) * self.padded_width + (cx + self.P - 1)

    def top_left(self, k):
        """Inverse of :meth:`patch_id`."""
        cy, cx = np.divmod(k, self.padded_width)
        return cx - (self.P - 1), cy - (self.P - 1)


def build_patch_grid(domain: SpatialDomain, P: int) -> PatchGrid:
    if P < 1:
        raise ConfigError(f"patch size must be >= 1, got {P}")
    return PatchGrid(domain, int(P))


@dataclass(frozen=True)
class PatchLookupTable:
    """Dense per-pixel table of covering patches.

    ``patch_ids[y, x, a]`` is the a-th covering patch (ascending id) and
    ``deltas[y, x, a]`` the pixel's (dx, dy) offset from that patch's top-left.
    """

    grid: PatchGrid | None
    domain: SpatialDomain
    patch_ids: np.ndarray  # (H, W, A) int64
    deltas: np.ndarray  # (H, W, A, 2) int64, (dx, dy)
    slot_delta: np.ndarray  # (A,) flat delta index dy * P + dx of each slot, same for every pixel
    P: int
    K: int

    @property
    def A(self) -> int:
        return self.patch_ids.shape[-1]

    @classmethod
    def global_patch(cls, domain: SpatialDomain) -> "PatchLookupTable":
        """Single patch covering the whole domain (dense linear attention)."""
        H, W = domain.height, domain.width
        return cls(
            grid=None, domain=domain,
            patch_ids=np.zeros((H, W, 1), dtype=np.int64),
            deltas=np.zeros((H, W, 1, 2), dtype=np.int64),
            slot_delta=np.zeros(1, dtype=np.int64), P=1, K=1,
        )

    def check(self, x, y) -> None:
        inside = self.domain.contains(np.asarray(x), np.asarray(y))
        if not np.all(inside):
            raise BoundsError(f"coordinate outside {self.domain.width}x{self.domain.height} domain")


def build_lookup_table(grid: PatchGrid) -> PatchLookupTable:
    P, W, H = grid.P, grid.domain.width, grid.domain.height
    # ascending k <=> ascending (c_y, c_x) <=> descending (dy, dx)
    d = np.arange(P - 1, -1, -1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    dy, dx = dy.ravel(), dx.ravel()
    ys, xs = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    cx = xs[..., None] - dx
    cy = ys[..., None] - dy
    ids = grid.patch_id(cx, cy).astype(np.int64)
    deltas = np.stack(np.broadcast_arrays(dx, dy), axis=-1)
    deltas = np.broadcast_to(deltas, (H, W, P * P, 2)).copy()
    return PatchLookupTable(
        grid=grid, domain=grid.domain, patch_ids=ids, deltas=deltas,
        slot_delta=(dy * P + dx).astype(np.int64), P=P, K=grid.K,
    )


def active_patches(table: PatchLookupTable, x: tuple[int, int]) -> list[tuple[int, tuple[int, int]]]:
    """Covering patches of pixel ``x = (col, row)`` as ``(k, (dx, dy))`` sorted by k."""
    cx, cy = x
    if not table.domain.contains(cx, cy):
        raise BoundsError(f"{x} outside {table.domain.width}x{table.domain.height} domain")
    ids = table.patch_ids[cy, cx]
    ds = table.deltas[cy, cx]
    return [(int(k), (int(d[0]), int(d[1]))) for k, d in zip(ids, ds)]


@dataclass(frozen=True)
class ScatterPlan:
    """Expansion of L events into L*A slots and the stable patch-sorting permutation.

    Slot ``j = A*i + a`` holds event ``i``'s a-th covering patch.
    ``perm[r]`` is the slot at sorted position ``r``; ``inv_perm`` undoes it.
    Patch segment ``s`` spans sorted positions ``bounds[s]:bounds[s+1]``.
    """

    A: int
    src: np.ndarray  # (L*A,) source event of each slot
    patch: np.ndarray  # (L*A,) patch id of each slot
    slot: np.ndarray  # (L*A,) position a within the event's table row
    perm: np.ndarray
    inv_perm: np.ndarray
    segment_ids: np.ndarray  # (n_seg,) patch id of each segment, ascending
    bounds: np.ndarray  # (n_seg + 1,)

    @property
    def n_slots(self) -> int:
        return len(self.perm)

    @property
    def n_events(self) -> int:
        return self.n_slots // self.A if self.A else 0

    def segment_starts(self) -> np.ndarray:
        """Boolean mask over sorted positions marking the first slot of each patch segment."""
        starts = np.zeros(self.n_slots, dtype=bool)
        starts[self.bounds[:-1]] = True
        return starts

    def scatter(self, payload: np.ndarray) -> np.ndarray:
        return payload[self.perm]

    def gather(self, payload_sorted: np.ndarray) -> np.ndarray:
        return payload_sorted[self.inv_perm]

    def segment(self, s: int) -> tuple[int, np.ndarray]:
        """Patch id and source event indices of segment ``s`` in processing order."""
        lo, hi = self.bounds[s], self.bounds[s + 1]
        return int(self.segment_ids[s]), self.src[self.perm[lo:hi]]


def build_scatter_plan(table: PatchLookupTable, xs: np.ndarray, ys: np.ndarray) -> ScatterPlan:
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    table.check(xs, ys)
    A = table.A
    L = len(xs)
    patch = table.patch_ids[ys, xs].reshape(-1)
    src = np.repeat(np.arange(L, dtype=np.int64), A)
    slot = np.tile(np.arange(A, dtype=np.int64), L)
    perm = np.argsort(patch, kind="stable")
    inv_perm = np.empty_like(perm)
    inv_perm[perm] = np.arange(len(perm))
    sorted_ids = patch[perm]
    if len(sorted_ids):
        change = np.flatnonzero(np.diff(sorted_ids)) + 1
        starts = np.concatenate(([0], change))
        bounds = np.concatenate((starts, [len(sorted_ids)]))
        segment_ids = sorted_ids[starts]
    else:
        bounds = np.zeros(1, dtype=np.int64)
        segment_ids = np.zeros(0, dtype=np.int64)
    return ScatterPlan(A, src, patch, slot, perm, inv_perm, segment_ids, bounds.astype(np.int64))

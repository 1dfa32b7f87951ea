"""FLOP accounting.

Convention: one multiply-add is 2 FLOPs; a lone add or multiply is 1;
normalisation, sigmoid and exponential cost 4 per element. Lookups,
sorting, pooling and dropout are integer work and cost nothing.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field


def matvec(rows: int, cols: int) -> int:
    return 2 * rows * cols


def lru_step_flops(d_in: int, d_state: int, d_out: int) -> int:
    """One recurrent update and readout of the linear recurrent unit."""
    return (
        matvec(d_state, d_in)  # W_B z
        + d_state  # gamma scaling
        + 2 * d_state  # lam * S + inc
        + matvec(d_out, d_state)  # W_C S
        + matvec(d_out, d_in)  # W_D z
        + d_out  # sum of the two readouts
    )


def ssla_slot_flops(d_in: int, d_out: int, d_state: int) -> int:
    """Work for one (event, patch) pair: input projection, LRU step, output projection, accumulate."""
    return matvec(d_out, d_in) + lru_step_flops(d_out, d_state, d_out) + matvec(d_out, d_out) + d_out


def ssla_event_flops(A: int, d_in: int, d_out: int, d_state: int) -> int:
    return A * ssla_slot_flops(d_in, d_out, d_state)


def layer_extra_flops(d_in: int, d_out: int) -> int:
    """Residual path and layer norm around one SSLA module."""
    res = matvec(d_out, d_in) if d_in != d_out else 0
    return res + d_out + 4 * d_out


def head_cell_flops(d_feat: int, d_hidden: int, n_out: int) -> int:
    return (
        matvec(d_hidden, d_feat) + d_hidden  # stem + bias
        + 5 * d_hidden  # SiLU: sigmoid + product
        + matvec(n_out, d_hidden) + n_out  # branches + bias
    )


@dataclass
class FlopCounter:
    """Per-component FLOP tallies for one run; ``events`` is the number of input events."""

    by_name: dict = field(default_factory=lambda: defaultdict(int))
    events: int = 0

    def add(self, name: str, flops: int) -> None:
        self.by_name[name] += int(flops)

    @property
    def total(self) -> int:
        return sum(self.by_name.values())

    def total_matching(self, predicate) -> int:
        return sum(v for k, v in self.by_name.items() if predicate(k))

    @property
    def module_total(self) -> int:
        """FLOPs spent inside SSLA modules only."""
        return self.total_matching(lambda k: k.endswith(".ssla"))

    def per_event(self) -> float:
        return self.total / self.events if self.events else 0.0

    def module_per_event(self) -> float:
        return self.module_total / self.events if self.events else 0.0

    def by_stage(self) -> dict[str, int]:
        out: dict[str, int] = defaultdict(int)
        for k, v in self.by_name.items():
            out[k.split(".")[0]] += v
        return dict(out)

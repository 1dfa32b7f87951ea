"""Minimal reverse-mode differentiation over numpy arrays.

Each differentiable op computes its forward value eagerly and, when a
:class:`Tape` is active and some input requires a gradient, records a closure
that pushes the output cotangent back to its inputs. Ops are coarse (whole
layers), so the tape stays short.
"""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=np.float64).reshape(self.value.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.value.shape})"


def param(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


_tape_stack: list["Tape"] = []


class Tape:
    """Records backward closures for one forward pass."""

    def __init__(self):
        self.records: list[Callable[[], None]] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)

    def record(self, fn: Callable[[], None]) -> None:
        self.records.append(fn)

    def backward(self, loss: Tensor) -> None:
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {loss.value.shape}")
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for fn in reversed(self.records):
            fn()


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def backward(tape: Tape, loss: Tensor, params: dict[str, Tensor] | None = None) -> dict[str, np.ndarray] | None:
    """Run the tape backwards; if ``params`` is given return their gradients (zeros where unused)."""
    tape.backward(loss)
    if params is None:
        return None
    return {n: (p.grad if p.grad is not None else np.zeros_like(p.value)) for n, p in params.items()}


def make_output(value: np.ndarray, inputs: Iterable) -> tuple[Tensor, Tape | None]:
    """Wrap an op result; returns the tape to record on, or None when no gradient is needed."""
    tape = active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    return Tensor(value, requires_grad=needs), (tape if needs else None)


def _acc(t, g):
    if isinstance(t, Tensor) and t.requires_grad:
        t.accumulate(g)


# ----------------------------------------------------------------------- ops


def linear(x, W, b=None) -> Tensor:
    """``x @ W.T + b`` over the last axis."""
    xv, Wv = value_of(x), value_of(W)
    yv = xv @ Wv.T
    if b is not None:
        yv = yv + value_of(b)
    out, tape = make_output(yv, (x, W, b))
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            g2 = g.reshape(-1, g.shape[-1])
            _acc(x, g @ Wv)
            _acc(W, g2.T @ xv.reshape(-1, xv.shape[-1]))
            if b is not None:
                _acc(b, g2.sum(axis=0))
        tape.record(bw)
    return out


def add(a, b) -> Tensor:
    out, tape = make_output(value_of(a) + value_of(b), (a, b))
    if tape is not None:
        def bw():
            if out.grad is not None:
                _acc(a, out.grad)
                _acc(b, out.grad)
        tape.record(bw)
    return out


def mul(a, b) -> Tensor:
    """Elementwise product (same shapes)."""
    av, bv = value_of(a), value_of(b)
    out, tape = make_output(av * bv, (a, b))
    if tape is not None:
        def bw():
            if out.grad is not None:
                _acc(a, out.grad * bv)
                _acc(b, out.grad * av)
        tape.record(bw)
    return out


def total(x) -> Tensor:
    xv = value_of(x)
    out, tape = make_output(np.asarray(xv.sum()), (x,))
    if tape is not None:
        def bw():
            if out.grad is not None:
                _acc(x, np.full_like(xv, float(out.grad)))
        tape.record(bw)
    return out


def dot(w, x) -> Tensor:
    """Full inner product of two equally shaped arrays."""
    return total(mul(w, x))


def silu(x) -> Tensor:
    xv = value_of(x)
    s = 1.0 / (1.0 + np.exp(-xv))
    out, tape = make_output(xv * s, (x,))
    if tape is not None:
        def bw():
            if out.grad is not None:
                _acc(x, out.grad * (s * (1.0 + xv * (1.0 - s))))
        tape.record(bw)
    return out


def layer_norm_values(xv, gv, bv, eps: float = 1e-5):
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gv + bv, xhat, rstd


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise each row over the last axis. A constant row maps to ``bias``."""
    xv, gv = value_of(x), value_of(gain)
    yv, xhat, rstd = layer_norm_values(xv, gv, value_of(bias), eps)
    out, tape = make_output(yv, (x, gain, bias))
    if tape is not None:
        def bw():
            g = out.grad
            if g is None:
                return
            D = xv.shape[-1]
            _acc(gain, (g * xhat).reshape(-1, D).sum(axis=0))
            _acc(bias, g.reshape(-1, D).sum(axis=0))
            gh = g * gv
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            _acc(x, gx)
        tape.record(bw)
    return out


def take_rows(x, idx: np.ndarray) -> Tensor:
    """Rows of a 2-D tensor by index; index -1 yields a zero row."""
    xv = value_of(x)
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    yv = np.zeros((len(idx),) + xv.shape[1:])
    yv[valid] = xv[idx[valid]]
    out, tape = make_output(yv, (x,))
    if tape is not None:
        def bw():
            if out.grad is None:
                return
            gx = np.zeros_like(xv)
            np.add.at(gx, idx[valid], out.grad[valid])
            _acc(x, gx)
        tape.record(bw)
    return out

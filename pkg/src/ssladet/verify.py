"""Randomised property suites shared by the test-suite and ``ssladet verify``.

Each suite returns a :class:`SuiteResult`; the first failing instance is kept
as a JSON-serialisable counterexample.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tape, Tensor, layer_norm, linear, param, silu, take_rows, total, mul
from .detector import AsyncDetector, DetectorConfig, SSLADet, backbone_forward, predict_at
from .events import EventStream, SpatialDomain, SynthConfig, generate_synthetic
from .geometry import ScatterPlan, build_lookup_table, build_patch_grid, build_scatter_plan
from .ssla import RecurrentSSLA, create_ssla, ssla_forward_parallel

SUITES = ("equivalence", "geometry", "gradient", "translation")


@dataclass
class SuiteResult:
    name: str
    passed: bool
    checked: int = 0
    worst: float = 0.0
    seconds: float = 0.0
    counterexample: dict | None = None
    notes: list = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.checked} instances, worst {self.worst:.3g}, {self.seconds:.1f}s"


def random_stream(rng: np.random.Generator, domain: SpatialDomain, n: int,
                  region: tuple[int, int] | None = None) -> EventStream:
    """Uniform random events; ``region`` restricts coordinates to the top-left corner."""
    w, h = region or (domain.width, domain.height)
    xs = rng.integers(0, w, n).astype(np.uint16)
    ys = rng.integers(0, h, n).astype(np.uint16)
    ts = np.cumsum(rng.integers(0, 50, n)).astype(np.uint64)
    ps = np.where(rng.random(n) < 0.5, 1, -1).astype(np.int8)
    return EventStream(domain, xs, ys, ts, ps)


def corrupt_plan(plan: ScatterPlan, rng: np.random.Generator) -> ScatterPlan:
    """Swap two slots of different patches in the sorted order (negative control)."""
    if len(plan.bounds) < 3:
        return plan
    perm = plan.perm.copy()
    r1 = int(rng.integers(plan.bounds[0], plan.bounds[1]))
    r2 = int(rng.integers(plan.bounds[-2], plan.bounds[-1]))
    perm[r1], perm[r2] = perm[r2], perm[r1]
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return dataclasses.replace(plan, perm=perm, inv_perm=inv)


# ------------------------------------------------------------- equivalence


def module_equivalence(P: int, d_in: int, d_out: int, stream: EventStream, seed: int,
                       corrupt: bool = False) -> tuple[float, int]:
    """Max |parallel - recurrent| for one module and the first event where they differ most."""
    rng = np.random.default_rng(seed)
    module = create_ssla(stream.domain, P, d_in, d_out, rng)
    v = rng.normal(size=(len(stream), d_in))
    plan = build_scatter_plan(module.lookup, stream.x, stream.y)
    if corrupt:
        plan = corrupt_plan(plan, rng)
    par = ssla_forward_parallel(module, stream.x, stream.y, v, plan=plan).value
    rec = RecurrentSSLA(module)
    seq = np.stack([rec.step(x, y, v[i]) for i, (x, y) in enumerate(zip(stream.x.tolist(), stream.y.tolist()))]) \
        if len(stream) else np.zeros_like(par)
    diff = np.abs(par - seq).max(axis=1) if len(stream) else np.zeros(0)
    if not len(diff):
        return 0.0, -1
    i = int(np.argmax(diff))
    return float(diff[i]), i


def detector_equivalence(config: DetectorConfig, stream: EventStream, seed: int) -> float:
    """Max deviation between whole-clip and event-by-event detector outputs (representation and head)."""
    model = SSLADet(config, seed=seed)
    out = backbone_forward(model, stream)
    det = AsyncDetector(model)
    worst = 0.0
    k = 0
    o = out.o.value
    for i, (x, y, t, p) in enumerate(zip(stream.x.tolist(), stream.y.tolist(), stream.t.tolist(), stream.p.tolist())):
        cell = det.process(x, y, t, p)
        if cell is None:
            continue
        if k >= len(out.src) or out.src[k] != i or (out.xs[k], out.ys[k]) != cell:
            return float("inf")
        worst = max(worst, float(np.abs(det.R.read(*cell) - o[k]).max()))
        k += 1
    if k != len(out.src):
        return float("inf")
    if len(stream):
        preds = predict_at(model, out, [int(stream.t[-1])]).value
        worst = max(worst, float(np.abs(preds - det.preds).max()))
    return worst


def equivalence_suite(seed: int = 0, n_configs: int = 20, n_events: int = 10_000,
                      domain: SpatialDomain = SpatialDomain(64, 48), patch_sizes=(1, 2, 3, 4),
                      widths=(4, 8, 12), tol: float = 1e-10, detector: bool = True,
                      corrupt: bool = False) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    res = SuiteResult("equivalence", True)
    for c in range(n_configs):
        P = int(patch_sizes[c % len(patch_sizes)])
        w = int(rng.choice(widths))
        d_in = int(rng.choice(widths))
        s = int(rng.integers(2 ** 31))
        stream = random_stream(rng, domain, n_events)
        err, where = module_equivalence(P, d_in, w, stream, s, corrupt=corrupt)
        res.checked += 1
        res.worst = max(res.worst, err)
        if not err <= tol:
            res.passed = False
            res.counterexample = {"kind": "module", "P": P, "d_in": d_in, "d_out": w, "seed": s,
                                  "event": where, "event_xy": [int(stream.x[where]), int(stream.y[where])],
                                  "error": err}
            break
        if detector:
            cfg = DetectorConfig(width=domain.width, height=domain.height, widths=(w, 2 * w, 4 * w, 8 * w),
                                 patch_sizes=(P,) * 4)
            err = detector_equivalence(cfg, stream, s)
            res.worst = max(res.worst, err)
            if not err <= tol:
                res.passed = False
                res.counterexample = {"kind": "detector", "P": P, "width": w, "seed": s, "error": err}
                break
    res.seconds = time.perf_counter() - t0
    return res


# ----------------------------------------------------------------- geometry


def all_windows(W: int, H: int, P: int) -> np.ndarray:
    """Every P x P window with top-left in [-(P-1), W-1] x [-(P-1), H-1], as rows (k, tx, ty), k row-major."""
    ty, tx = np.meshgrid(np.arange(-(P - 1), H), np.arange(-(P - 1), W), indexing="ij")
    tx, ty = tx.reshape(-1), ty.reshape(-1)
    k = (ty + P - 1) * (W + P - 1) + (tx + P - 1)
    return np.stack([k, tx, ty], axis=1)


def enumerate_covering_patches(windows: np.ndarray, P: int, x: int, y: int) -> list[tuple[int, int, int]]:
    """Brute force over all windows: (k, dx, dy) of those containing (x, y), sorted by k."""
    k, tx, ty = windows.T
    hit = (tx <= x) & (x < tx + P) & (ty <= y) & (y < ty + P)
    return [(int(a), x - int(b), y - int(c)) for a, b, c in windows[hit]]


def check_geometry(W: int, H: int, P: int) -> dict | None:
    table = build_lookup_table(build_patch_grid(SpatialDomain(W, H), P))
    if table.patch_ids.shape != (H, W, P * P):
        return {"W": W, "H": H, "P": P, "reason": "shape"}
    windows = all_windows(W, H, P)
    for y in range(H):
        for x in range(W):
            expect = enumerate_covering_patches(windows, P, x, y)
            got = sorted((int(k), int(d[0]), int(d[1])) for k, d in zip(table.patch_ids[y, x], table.deltas[y, x]))
            if got != expect or len(expect) != P * P:
                return {"W": W, "H": H, "P": P, "pixel": [x, y], "expected": expect[:4], "got": got[:4]}
    return None


def geometry_suite(seed: int = 0, n_domains: int = 6, max_domain=(64, 48), patch_sizes=range(1, 6)) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    res = SuiteResult("geometry", True)
    domains = [(1, 1), max_domain] + [(int(rng.integers(1, max_domain[0] + 1)), int(rng.integers(1, max_domain[1] + 1)))
                                      for _ in range(max(0, n_domains - 2))]
    for W, H in domains:
        for P in patch_sizes:
            res.checked += 1
            bad = check_geometry(W, H, int(P))
            if bad is not None:
                res.passed, res.counterexample, res.worst = False, bad, 1.0
                res.seconds = time.perf_counter() - t0
                return res
    res.seconds = time.perf_counter() - t0
    return res


def check_scatter_plan(stream: EventStream, P: int) -> dict | None:
    """Each segment must equal the naive filter of the expanded sequence, in increasing source order."""
    table = build_lookup_table(build_patch_grid(stream.domain, P))
    plan = build_scatter_plan(table, stream.x, stream.y)
    expanded = [(i, int(k)) for i in range(len(stream)) for k in table.patch_ids[stream.y[i], stream.x[i]]]
    naive: dict[int, list[int]] = {}
    for i, k in expanded:
        naive.setdefault(k, []).append(i)
    if list(plan.segment_ids) != sorted(naive):
        return {"P": P, "reason": "segment ids"}
    for s in range(len(plan.segment_ids)):
        k, srcs = plan.segment(s)
        srcs = srcs.tolist()
        if srcs != naive[k] or any(b <= a for a, b in zip(srcs, srcs[1:])):
            return {"P": P, "patch": k, "expected": naive[k][:8], "got": srcs[:8]}
    return None


# ----------------------------------------------------------------- gradient


def relative_error(g, fd, floor: float = 1e-6) -> np.ndarray:
    g, fd = np.asarray(g), np.asarray(fd)
    return np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)


def finite_difference_check(loss_fn, tensors: dict[str, Tensor], h: float = 1e-5,
                            max_entries: int | None = None, rng=None) -> tuple[float, dict | None]:
    """Compare tape gradients of the scalar ``loss_fn()`` with central differences.

    Returns the worst relative error and a description of where it occurred.
    """
    for t in tensors.values():
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    grads = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value)) for n, t in tensors.items()}
    worst, where = 0.0, None
    for name, t in tensors.items():
        flat = t.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for j in idx:
            old = flat[j]
            flat[j] = old + h
            lp = float(loss_fn().value)
            flat[j] = old - h
            lm = float(loss_fn().value)
            flat[j] = old
            fd = (lp - lm) / (2 * h)
            g = grads[name].reshape(-1)[j]
            err = float(relative_error(g, fd))
            if err > worst:
                worst, where = err, {"tensor": name, "index": int(j), "analytic": float(g), "numeric": fd}
    return worst, where


def _weighted(out: Tensor, rng) -> Tensor:
    return total(mul(out, Tensor(rng.normal(size=out.shape))))


def gradient_cases(seed: int = 0):
    """(name, loss_fn, tensors) for every parameterised op and the end-to-end detection loss."""
    from .training import assign_targets, clip_loss, detection_loss
    from .detector import HeadParams, create_head, head_forward

    rng = np.random.default_rng(seed)
    cases = []
    dom = SpatialDomain(7, 5)
    for P, pap_in, pap_out, dense in [(1, True, True, False), (2, True, True, False), (3, True, False, False),
                                      (3, False, True, False), (3, False, False, False), (3, True, True, True)]:
        d_in, d_out = int(rng.integers(1, 5)), int(rng.integers(2, 7))
        m = create_ssla(dom, P, d_in, d_out, rng, pap_in=pap_in, pap_out=pap_out, dense=dense)
        s = random_stream(rng, dom, 60)
        v = param(rng.normal(size=(len(s), d_in)))
        wts = Tensor(rng.normal(size=(len(s), d_out)))
        tensors = dict(m.named_parameters())
        tensors["input"] = v
        cases.append((f"ssla P={P} pap={int(pap_in)}{int(pap_out)} dense={int(dense)}",
                      lambda m=m, s=s, v=v, wts=wts: total(mul(ssla_forward_parallel(m, s.x, s.y, v), wts)), tensors))
    x = param(rng.normal(size=(6, 5)))
    W, b = param(rng.normal(size=(4, 5))), param(rng.normal(size=4))
    wl = Tensor(rng.normal(size=(6, 4)))
    cases.append(("linear", lambda: total(mul(linear(x, W, b), wl)), {"x": x, "W": W, "b": b}))
    g, bb = param(rng.normal(size=5)), param(rng.normal(size=5))
    wn = Tensor(rng.normal(size=(6, 5)))
    cases.append(("layer_norm", lambda: total(mul(layer_norm(x, g, bb), wn)), {"x": x, "gain": g, "bias": bb}))
    cases.append(("silu", lambda: total(mul(silu(x), wn)), {"x": x}))
    idx = np.array([2, -1, 0, 2, 5])
    wt = Tensor(rng.normal(size=(5, 5)))
    cases.append(("take_rows", lambda: total(mul(take_rows(x, idx), wt)), {"x": x}))
    head = create_head(rng, 5, 6, 2)
    wh = Tensor(rng.normal(size=(6, 7)))
    cases.append(("head", lambda: total(mul(head_forward(head, x), wh)), dict(head.named_parameters())))
    from .events import GroundTruthBox
    preds = param(rng.normal(size=(2 * 6, 7)) * 0.5)
    tg = assign_targets([[GroundTruthBox(0, (12.0, 5.0, 11.0, 7.0), 0), GroundTruthBox(0, (40.0, 20.0, 7.0, 12.0), 1)],
                         [GroundTruthBox(1, (30.0, 9.0, 13.0, 6.0), 1)]], 3, 2, 16)
    cases.append(("detection_loss", lambda: detection_loss(preds, tg, 2), {"preds": preds}))
    # end-to-end: detector on a short synthetic clip
    stream, boxes = generate_synthetic(SynthConfig(duration_us=40_000, n_shapes=2), seed + 7)
    stream = stream.select(slice(0, 100))
    boxes = [dataclasses.replace(b, t=int(stream.t[-1])) for b in boxes[:2]]
    cfg = DetectorConfig(widths=(4, 8), patch_sizes=(3, 2), taus_us=(1000, 2000))
    model = SSLADet(cfg, seed=seed)
    cases.append(("end-to-end loss", lambda: clip_loss(model, stream, boxes, 0), model.parameters()))
    return cases


def gradient_suite(seed: int = 0, tol: float = 1e-4, h: float = 1e-5, max_entries: int | None = 6) -> SuiteResult:
    t0 = time.perf_counter()
    res = SuiteResult("gradient", True)
    rng = np.random.default_rng(seed)
    for name, fn, tensors in gradient_cases(seed):
        worst, where = finite_difference_check(fn, tensors, h=h, max_entries=max_entries, rng=rng)
        res.checked += 1
        res.worst = max(res.worst, worst)
        res.notes.append((name, worst))
        if not worst <= tol:
            res.passed = False
            res.counterexample = {"case": name, **(where or {}), "relative_error": worst}
            break
    res.seconds = time.perf_counter() - t0
    return res


# -------------------------------------------------------------- translation


def translation_error(rng: np.random.Generator, domain: SpatialDomain, P: int, d_in: int, d_out: int,
                      n: int) -> tuple[float, tuple[int, int]]:
    rw, rh = int(rng.integers(1, domain.width)), int(rng.integers(1, domain.height))
    stream = random_stream(rng, domain, n, region=(rw, rh))
    dx, dy = int(rng.integers(0, domain.width - rw + 1)), int(rng.integers(0, domain.height - rh + 1))
    shifted = EventStream(domain, (stream.x + dx).astype(np.uint16), (stream.y + dy).astype(np.uint16),
                          stream.t, stream.p)
    module = create_ssla(domain, P, d_in, d_out, rng)
    v = rng.normal(size=(n, d_in))
    a = ssla_forward_parallel(module, stream.x, stream.y, v).value
    b = ssla_forward_parallel(module, shifted.x, shifted.y, v).value
    return float(np.abs(a - b).max()) if n else 0.0, (dx, dy)


def translation_suite(seed: int = 0, n_streams: int = 100, n_events: int = 500, tol: float = 1e-12,
                      domain: SpatialDomain = SpatialDomain(64, 48), patch_sizes=(1, 2, 3, 4)) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    res = SuiteResult("translation", True)
    for i in range(n_streams):
        P = int(patch_sizes[i % len(patch_sizes)])
        err, shift = translation_error(rng, domain, P, int(rng.integers(1, 9)), int(rng.integers(1, 9)), n_events)
        res.checked += 1
        res.worst = max(res.worst, err)
        if not err <= tol:
            res.passed = False
            res.counterexample = {"P": P, "shift": list(shift), "error": err, "stream": i}
            break
    res.seconds = time.perf_counter() - t0
    return res


def run_suites(names=SUITES, seed: int = 0, patch_size: int | None = None, quick: bool = False,
               corrupt: bool = False) -> list[SuiteResult]:
    """Run the named suites; ``patch_size`` pins every geometry-dependent suite to one P."""
    ps = (patch_size,) if patch_size else None
    out = []
    for name in names:
        if name == "equivalence":
            kw = dict(n_configs=4, n_events=2000) if quick else {}
            out.append(equivalence_suite(seed, patch_sizes=ps or (1, 2, 3, 4), corrupt=corrupt,
                                         detector=not corrupt, **kw))
        elif name == "geometry":
            kw = dict(n_domains=3, max_domain=(20, 15)) if quick else {}
            out.append(geometry_suite(seed, patch_sizes=ps or range(1, 6), **kw))
        elif name == "gradient":
            out.append(gradient_suite(seed))
        elif name == "translation":
            kw = dict(n_streams=20) if quick else {}
            out.append(translation_suite(seed, patch_sizes=ps or (1, 2, 3, 4), **kw))
        else:
            raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return out

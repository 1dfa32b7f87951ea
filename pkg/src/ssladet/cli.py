"""Command line: gen-data, train, infer, verify, bench, ablate.

Exit codes: 0 success, 1 verification failure or divergence, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .detector import (
    VARIANTS,
    AsyncDetector,
    DetectorConfig,
    SSLADet,
    decode_detections,
    load_checkpoint,
    save_checkpoint,
    write_detections,
)
from .errors import ConfigError, DivergenceError, ParseError, ValidationError
from .events import EventStream, SpatialDomain, SynthConfig, generate_synthetic, read_boxes, read_stream, write_boxes, write_stream

log = logging.getLogger("ssladet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None


def _threads(n: int | None):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def model_config(args, width: int, height: int) -> DetectorConfig:
    """Build the detector config from --variant/--widths, --stages, --patch-size and the PAP flags."""
    n = args.stages
    extra = dict(width=width, height=height, pap_in=not args.no_pap_in, pap_out=not args.no_pap_out,
                 dense=args.dense)
    if args.widths:
        widths = args.widths
        n = len(widths)
    else:
        d1 = VARIANTS[args.variant]
        widths = tuple(d1 * 2 ** s for s in range(n))
    taus = args.taus or tuple(1000 * 2 ** s for s in range(n))
    if len(taus) != n:
        raise ConfigError(f"{len(taus)} temporal dropout windows for {n} stages")
    return DetectorConfig(widths=widths, patch_sizes=(args.patch_size,) * n, taus_us=taus, **extra)


def _boxes_path(events_path: Path) -> Path:
    return events_path.with_name(events_path.stem + "_boxes.csv")


def load_data(paths, boxes_paths=None):
    data = []
    for i, p in enumerate(paths):
        p = Path(p)
        bp = Path(boxes_paths[i]) if boxes_paths else _boxes_path(p)
        if not p.exists():
            raise UsageError(f"event file {p} not found")
        if not bp.exists():
            raise UsageError(f"ground-truth file {bp} not found")
        data.append((read_stream(p), read_boxes(bp)))
    return data


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(width=args.width, height=args.height, n_shapes=args.shapes,
                      duration_us=int(args.duration_ms * 1000), event_rate=args.rate)
    cfg.check()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".csv" if args.format == "csv" else ".bin"
    written = []
    for i in range(args.streams):
        stream, boxes = generate_synthetic(cfg, args.seed + i)
        name = f"events_{i:03d}{ext}" if args.streams > 1 else f"events{ext}"
        path = out / name
        write_stream(stream, path, args.format)
        write_boxes(boxes, _boxes_path(path))
        written.append((path, len(stream), len(boxes)))
    for path, n, nb in written:
        print(f"{path}: {n} events, {nb} boxes, {cfg.width}x{cfg.height}")
    return EXIT_OK


def _toy_data(args):
    from .training import ToyTask
    return ToyTask().train_data()


def cmd_train(args) -> int:
    from .training import TrainConfig, train
    data = load_data(args.events, args.boxes) if args.events else _toy_data(args)
    d = data[0][0].domain
    cfg = model_config(args, d.width, d.height)
    tc = TrainConfig(steps=args.steps, clip_events=args.clip_events, lr=args.lr, weight_decay=args.weight_decay)
    try:
        result = train(cfg, data, args.seed, tc, out_dir=args.out)
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_FAIL
    print(f"trained {args.steps} steps, final loss {result.final_loss():.4f}; wrote {Path(args.out) / 'model.ckpt'}")
    return EXIT_OK


def query_times(stream: EventStream, boxes_path, period_us: int) -> list[int]:
    if boxes_path:
        return sorted({b.t for b in read_boxes(boxes_path)})
    if len(stream) == 0:
        return []
    t0, t1 = int(stream.t[0]), int(stream.t[-1])
    first = -(-t0 // period_us) * period_us
    return list(range(first, t1 + 1, period_us))


def infer_recurrent(model: SSLADet, stream: EventStream, times, score_thresh, nms_iou):
    """Detections at each query time from event-by-event processing."""
    det = AsyncDetector(model)
    rows = []
    qi = 0
    times = list(times)
    for x, y, t, p in zip(stream.x.tolist(), stream.y.tolist(), stream.t.tolist(), stream.p.tolist()):
        while qi < len(times) and times[qi] < t:
            rows += [(times[qi], d) for d in det.detections(score_thresh, nms_iou)]
            qi += 1
        det.process(x, y, t, p)
    for q in times[qi:]:
        rows += [(q, d) for d in det.detections(score_thresh, nms_iou)]
    return rows


def infer_parallel(model: SSLADet, stream: EventStream, times, score_thresh, nms_iou):
    from .detector import backbone_forward, predict_at
    if not times:
        return []
    out = backbone_forward(model, stream)
    preds = predict_at(model, out, times).value
    cx, cy = model.cell_coords()
    n = len(cx)
    cfg = model.config
    rows = []
    for r, q in enumerate(times):
        rows += [(q, d) for d in decode_detections(preds[r * n:(r + 1) * n], cx, cy, cfg.stride, cfg.n_classes,
                                                   score_thresh, nms_iou)]
    return rows


def cmd_infer(args) -> int:
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    model, _ = load_checkpoint(args.checkpoint)
    stream = read_stream(args.events, domain=SpatialDomain(model.config.width, model.config.height))
    times = query_times(stream, args.boxes, args.period_us)
    fn = infer_recurrent if args.mode == "recurrent" else infer_parallel
    rows = fn(model, stream, times, args.score_thresh, args.nms_iou)
    write_detections(rows, args.out)
    print(f"{args.mode}: {len(rows)} detections at {len(times)} query times -> {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites
    names = [s.strip() for s in args.suites.split(",")] if args.suites else list(SUITES)
    unknown = [s for s in names if s not in SUITES]
    if unknown:
        raise UsageError(f"unknown suite(s) {unknown}; choose from {', '.join(SUITES)}")
    results = run_suites(names, seed=args.seed, patch_size=args.patch_size_verify, quick=args.quick,
                         corrupt=args.corrupt_permutation)
    failed = None
    for r in results:
        print(r.line())
        if not r.passed and failed is None:
            failed = r
    if failed is not None:
        print("counterexample: " + json.dumps({"suite": failed.name, **failed.counterexample}, sort_keys=True))
        return EXIT_FAIL
    return EXIT_OK


BENCH_HEADER = ["resolution", "variant", "median_us", "p90_us", "p99_us", "flops_per_event"]


def bench_rows(variants, resolutions, n_events: int, warmup: int, reps: int, seed: int, patch_size: int = 3,
               stages: int = 4):
    """Latency and FLOPs per event for each variant at each resolution on one fixed event stream.

    The stream is generated on the smallest resolution and reused unchanged on
    the larger ones, so only the domain size differs between rows. For each
    variant the resolutions are timed in lockstep, event by event.
    """
    from .metrics import bench_latency_interleaved, count_flops_per_event
    w0, h0 = min(resolutions, key=lambda r: r[0] * r[1])
    stream, _ = generate_synthetic(SynthConfig(width=w0, height=h0), seed)
    stream = stream.select(slice(0, n_events))
    rows = []
    for v in variants:
        models = [SSLADet(DetectorConfig.variant(v, n_stages=stages, patch_size=patch_size, width=w, height=h),
                          seed=seed) for w, h in resolutions]
        reports = bench_latency_interleaved(models, stream, warmup=warmup, reps=reps)
        for (w, h), model, rep in zip(resolutions, models, reports):
            s = EventStream(SpatialDomain(w, h), stream.x, stream.y, stream.t, stream.p)
            fpe = count_flops_per_event(model, s).per_event()
            rows.append({"resolution": f"{w}x{h}", "variant": v, "median_us": rep.median, "p90_us": rep.p90,
                         "p99_us": rep.p99, "flops_per_event": fpe})
    order = {f"{w}x{h}": i for i, (w, h) in enumerate(resolutions)}
    rows.sort(key=lambda r: order[r["resolution"]])
    return rows


def _write_csv(rows, header, path) -> None:
    f = open(path, "w", newline="") if path and path != "-" else sys.stdout
    try:
        w = csv.DictWriter(f, fieldnames=header, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if f is not sys.stdout:
            f.close()


def cmd_bench(args) -> int:
    variants = [v.strip() for v in args.variants.split(",")]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s) {bad}")
    rows = bench_rows(variants, args.resolutions, args.events, args.warmup, args.reps, args.seed,
                      args.patch_size, args.stages)
    _write_csv(rows, BENCH_HEADER, args.out)
    if args.out and args.out != "-":
        for r in rows:
            print(f"{r['resolution']:>9} {r['variant']}  median {r['median_us']:.1f} us  "
                  f"p90 {r['p90_us']:.1f}  p99 {r['p99_us']:.1f}  {r['flops_per_event']:.0f} FLOPs/ev")
    return EXIT_OK


ABLATE_HEADER = ["pap_in", "pap_out", "patch_size", "params", "flops_per_event", "module_flops_per_event",
                 "final_loss", "ap50", "map"]


def cmd_ablate(args) -> int:
    from .metrics import count_flops_per_event, evaluate_model
    from .training import ToyTask, TrainConfig, train
    task = ToyTask()
    data = load_data(args.events, args.boxes) if args.events else task.train_data()
    if args.eval_events:
        held_out = load_data(args.eval_events)
    else:
        held_out = data if args.events else task.eval_data()
    d = data[0][0].domain
    tc = TrainConfig(steps=args.steps, clip_events=args.clip_events, lr=args.lr, weight_decay=args.weight_decay,
                     log_every=0)
    rows = []
    for pap_in in (True, False):
        for pap_out in (True, False):
            for P in (2, 3, 4):
                args.patch_size, args.no_pap_in, args.no_pap_out = P, not pap_in, not pap_out
                cfg = model_config(args, d.width, d.height)
                try:
                    res = train(cfg, data, args.seed, tc)
                except DivergenceError as e:
                    print(f"diverged: {e}", file=sys.stderr)
                    return EXIT_FAIL
                counter = count_flops_per_event(res.model, held_out[0][0])
                ev = evaluate_model(res.model, held_out, clip_events=args.clip_events)
                rows.append({"pap_in": int(pap_in), "pap_out": int(pap_out), "patch_size": P,
                             "params": res.model.n_parameters(), "flops_per_event": counter.per_event(),
                             "module_flops_per_event": counter.module_per_event(),
                             "final_loss": res.final_loss(), "ap50": ev.ap50 if ev.ap50 is not None else float("nan"),
                             "map": ev.mAP if ev.mAP is not None else float("nan")})
                log.info("ablate %s", rows[-1])
    _write_csv(rows, ABLATE_HEADER, args.out)
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=sorted(VARIANTS), default="S", help="first-stage width S=12 B=16 M=24 L=32")
    p.add_argument("--widths", type=_ints, default=None, help="explicit per-stage widths, overrides --variant")
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--patch-size", type=int, default=3)
    p.add_argument("--taus", type=_ints, default=None, help="temporal dropout windows per stage, microseconds")
    p.add_argument("--no-pap-in", action="store_true")
    p.add_argument("--no-pap-out", action="store_true")
    p.add_argument("--dense", action="store_true", help="single global state baseline")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--events", nargs="*", default=None, help="event files; ground truth read from <stem>_boxes.csv")
    p.add_argument("--boxes", nargs="*", default=None)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--clip-events", type=int, default=5000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (0 leaves the default)")
    common.add_argument("--config", default=None, help="JSON file of flag defaults; explicit flags win")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ssladet", description="Spatially sparse linear attention event detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic event streams and ground truth")
    p.add_argument("--out", default="data")
    p.add_argument("--width", type=int, default=48)
    p.add_argument("--height", type=int, default=36)
    p.add_argument("--shapes", type=int, default=3)
    p.add_argument("--duration-ms", type=float, default=1000.0)
    p.add_argument("--rate", type=float, default=500.0, help="events per boundary pixel per second")
    p.add_argument("--streams", type=int, default=1)
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a detector")
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--out", default="run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="run a checkpoint over an event file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--boxes", default=None, help="query at these annotation times instead of every --period-us")
    p.add_argument("--period-us", type=int, default=10_000)
    p.add_argument("--mode", choices=("recurrent", "parallel"), default="recurrent")
    p.add_argument("--score-thresh", type=float, default=0.5)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--out", default="detections.csv")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("verify", parents=[common], help="run property suites")
    p.add_argument("--suites", default=None, help="comma list of equivalence,geometry,gradient,translation")
    p.add_argument("--patch-size", dest="patch_size_verify", type=int, default=None,
                   help="pin P for the geometry-dependent suites")
    p.add_argument("--quick", action="store_true", help="fewer and smaller instances")
    p.add_argument("--corrupt-permutation", action="store_true",
                   help="negative control: tamper with the scatter permutation")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", parents=[common], help="per-event latency and FLOPs")
    p.add_argument("--variants", default="S,B,M,L")
    p.add_argument("--resolutions", type=_resolution, nargs="+", default=[(64, 48), (256, 192)])
    p.add_argument("--patch-size", type=int, default=3)
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--events", type=int, default=3000)
    p.add_argument("--warmup", type=int, default=500)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", parents=[common], help="PAP on/off x patch size grid")
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--eval-events", nargs="*", default=None,
                   help="held-out event files (default: the toy evaluation set, or --events when given)")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_ablate)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as f:
                overrides = json.load(f)
        except (OSError, ValueError) as e:
            parser.error(f"cannot read config {args.config}: {e}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        bad = sorted(set(overrides) - known)
        if bad:
            parser.error(f"unknown config keys {bad}")
        sub.set_defaults(**overrides)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _threads(args.threads):
            return args.func(args)
    except (UsageError, ConfigError, ValidationError, ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

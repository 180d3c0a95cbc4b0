"""Command-line interface.

Exit status: 0 on success, 2 for usage and input errors, 3 when an internal
invariant breaks.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import stream
from .errors import FormatError, HQError, NestingError, ScheduleError
from .latent import (
    GaussianParams,
    SourceConfig,
    load_latent,
    read_importance,
    sample_source,
    store_latent,
    trit_schedule,
    validate_schedule,
)
from .optimize import LossConfig, fit_schedule
from .quant import DEFAULT_THRESHOLD
from .schedfile import read_schedule, write_schedule

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INTERNAL = 3


class UsageError(Exception):
    pass


def _threads():
    raw = os.environ.get("HQSTREAM_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"HQSTREAM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("HQSTREAM_THREADS must be at least 1")
    return n


def _read(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p.read_bytes()


def _parse_source(text, seed):
    """``default`` or comma-separated ``key=value`` pairs, e.g.
    ``shape=4x64x64,sigma=0.1:10,spread=channel``."""
    kw = {"seed": seed}
    if text and text != "default":
        for item in text.split(","):
            if "=" not in item:
                raise UsageError(f"bad --source item {item!r}; expected key=value")
            key, value = (s.strip() for s in item.split("=", 1))
            try:
                if key == "shape":
                    kw["shape"] = tuple(int(v) for v in value.lower().split("x"))
                elif key == "sigma":
                    lo, hi = value.split(":")
                    kw["sigma_range"] = (float(lo), float(hi))
                elif key == "spread":
                    kw["sigma_spread"] = value
                elif key == "jitter":
                    kw["jitter"] = float(value)
                elif key == "mu":
                    kw["mu_scale"] = float(value)
                else:
                    raise UsageError(f"unknown --source key {key!r}")
            except ValueError as exc:
                raise UsageError(f"bad --source value for {key}: {exc}") from None
    try:
        return SourceConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_schedule(path, n_channels=None):
    if path is None:
        raise UsageError("--schedule is required")
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path}")
    schedule, extras = read_schedule(path)
    validate_schedule(schedule, n_channels=n_channels)
    return schedule, extras


def _points(text):
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"bad point list {text!r}") from None


# -- subcommands ------------------------------------------------------------------


def _encode_one(src, dst, schedule, T):
    data = Path(src).read_bytes()
    latent, params = load_latent(data)
    importance = read_importance(data)
    validate_schedule(schedule, n_channels=latent.shape[0])
    container, trace = stream.encode_with_trace(latent, params, schedule, T, importance)
    Path(dst).write_bytes(container)
    sizes = [lt.payload_bytes for lt in trace.layers]
    return len(container), trace.header_bytes, sizes


def cmd_encode(args):
    schedule, extras = _load_schedule(args.schedule)
    T = args.threshold if args.threshold is not None else float(extras.get("T", DEFAULT_THRESHOLD))
    src = Path(args.input)
    if src.is_dir():
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        files = sorted(src.glob("*.hql"))
        if not files:
            raise UsageError(f"no .hql files in {src}")
        dsts = [out / (f.stem + ".hqs") for f in files]
        with ProcessPoolExecutor(max_workers=min(_threads(), len(files))) as pool:
            futures = [pool.submit(_encode_one, f, d, schedule, T) for f, d in zip(files, dsts)]
            for f, fut in zip(files, futures):
                total, head, sizes = fut.result()
                print(f"{f.name}: {total} bytes (header {head}, layers {' '.join(map(str, sizes))})")
        return EXIT_OK
    _read(src)
    total, head, sizes = _encode_one(src, args.output, schedule, T)
    print(f"wrote {args.output}: {total} bytes (header {head}, layers {' '.join(map(str, sizes))})")
    return EXIT_OK


def _prefix(data, point, budget):
    if budget is not None:
        if budget < 0:
            raise UsageError("--bytes must be non-negative")
        return stream.truncate(data, budget=budget)
    if point is not None:
        if point < 0:
            raise UsageError("--point must be non-negative")
        return stream.truncate(data, point=point)
    return data


def cmd_decode(args):
    data = _read(args.input)
    prefix = _prefix(data, args.point, args.bytes)
    latent, achieved = stream.decode(prefix)
    header, _ = stream.parse_header(data)
    params = header.params
    Path(args.output).write_bytes(store_latent(latent, GaussianParams(params.mu, params.sigma)))
    print(f"achieved point {achieved:.6g}")
    return EXIT_OK


def cmd_truncate(args):
    data = _read(args.input)
    if (args.point is None) == (args.bytes is None):
        raise UsageError("give exactly one of --point or --bytes")
    prefix = _prefix(data, args.point, args.bytes)
    Path(args.output).write_bytes(prefix)
    _, achieved = stream.decode(prefix)
    print(f"wrote {args.output}: {len(prefix)} bytes, point {achieved:.6g}")
    return EXIT_OK


def cmd_fit(args):
    cfg = LossConfig(lambda_base=args.lambda_base, mode=args.mode, seed=args.seed, T=args.threshold)
    if args.latent is not None:
        latent, params = load_latent(_read(args.latent))
        data = (latent, params)
    else:
        data = _parse_source(args.source, args.seed)
    init = None
    if args.init is not None:
        init, _ = _load_schedule(args.init)
    res = fit_schedule(
        data,
        args.layers,
        cfg,
        init=init,
        max_sweeps=args.sweeps,
        time_budget=args.time_budget,
    )
    write_schedule(
        args.output,
        res.schedule,
        T=repr(float(np.float32(args.threshold))),
        lambda_base=repr(args.lambda_base),
        mode=args.mode,
        seed=args.seed,
        source=args.source if args.latent is None else None,
    )
    print(
        f"wrote {args.output}: loss {res.report.total:.6g} "
        f"(start {res.start_report.total:.6g}, trit {res.trit_report.total:.6g}, "
        f"{res.evaluations} evaluations)"
    )
    if res.diagnostic:
        print(f"note: {res.diagnostic}", file=sys.stderr)
    return EXIT_OK


def cmd_trit(args):
    schedule = trit_schedule(args.layers, args.channels, finest=args.finest)
    write_schedule(args.output, schedule, T=repr(DEFAULT_THRESHOLD))
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_sample(args):
    cfg = _parse_source(args.source, args.seed)
    latent, params = sample_source(cfg)
    Path(args.output).write_bytes(store_latent(latent, params))
    print(f"wrote {args.output}: shape {'x'.join(map(str, latent.shape))}")
    return EXIT_OK


def cmd_rdcurve(args):
    data = _read(args.latent)
    latent, params = load_latent(data)
    if args.container is not None:
        container = _read(args.container)
    else:
        schedule, extras = _load_schedule(args.schedule, n_channels=latent.shape[0])
        T = float(extras.get("T", DEFAULT_THRESHOLD))
        container = stream.encode(latent, params, schedule, T, read_importance(data))
    header, _ = stream.parse_header(container)
    points = _points(args.points) if args.points else None
    rows = stream.measure(container, latent, points)
    if args.format == "csv":
        lines = [",".join(stream.CSV_FIELDS)] + [r.to_csv() for r in rows]
    else:
        lines = [
            f"# rate in bits per latent component ({header.n_components} components); "
            f"header {rows[0].header_bytes if rows else 0} bytes not counted"
        ]
        lines += [
            f"point {r.point:8.4f}  bpp {r.bpp:10.5f}  msqe {r.msqe:12.6g}  "
            f"selected {r.selection_ratio:6.3f}  payload {r.payload_bytes} B"
            for r in rows
        ]
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_inspect(args):
    info = stream.inspect_container(_read(args.input))
    if args.format == "json":
        print(json.dumps(info, indent=2))
        return EXIT_OK
    C, H, W = info["shape"]
    segs = info["segments"]
    print(f"shape      {C}x{H}x{W}")
    print(f"layers     {info['layers']}")
    print(f"K          {info['K']}")
    print(f"T          {info['T']:.6g}")
    print(f"importance {'plane' if info['importance_plane'] else 'from sigma'}")
    print(f"header     {info['header_bytes']} bytes")
    print(f"total      {info['total_bytes']} bytes")
    print(f"segments   {info['complete_segments']} complete of {info['layers']}"
          + (" (truncated)" if info["truncated"] else ""))
    for l, s in enumerate(segs, 1):
        print(f"  layer {l}: {s['available']}/{s['declared']} bytes")
    for l in range(info["layers"]):
        print(f"  delta.{l + 1} = " + " ".join(f"{v:.6g}" for v in info["delta"][l]))
    print("  gamma = " + " ".join(f"{g:.6g}" for g in info["gamma"]))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="hqstream", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("encode", help="encode a .hql latent (or a directory of them)")
    e.add_argument("input")
    e.add_argument("-o", "--output", required=True)
    e.add_argument("--schedule", required=True)
    e.add_argument("--threshold", type=float, default=None, help="boundary adjustment T")
    e.set_defaults(func=cmd_encode)

    for name, func, helptext in (
        ("decode", cmd_decode, "decode a container to a .hql latent"),
        ("truncate", cmd_truncate, "cut a container to a progress point or byte budget"),
    ):
        d = sub.add_parser(name, help=helptext)
        d.add_argument("input")
        d.add_argument("-o", "--output", required=True)
        g = d.add_mutually_exclusive_group()
        g.add_argument("--point", type=float, help="progress point in [0, L]")
        g.add_argument("--bytes", type=int, help="payload bytes kept after the header")
        d.set_defaults(func=func)

    f = sub.add_parser("fit", help="optimize a step schedule")
    src = f.add_mutually_exclusive_group()
    src.add_argument("--source", default="default", help="synthetic source spec")
    src.add_argument("--latent", help="fit to this .hql latent instead")
    f.add_argument("-o", "--output", required=True)
    f.add_argument("--layers", type=int, default=8)
    f.add_argument("--lambda-base", type=float, default=0.2)
    f.add_argument("--mode", choices=("exact", "surrogate"), default="exact")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    f.add_argument("--sweeps", type=int, default=4)
    f.add_argument("--time-budget", type=float, default=None, help="seconds")
    f.add_argument("--init", help="starting schedule file")
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("trit", help="write a trit ladder schedule")
    t.add_argument("-o", "--output", required=True)
    t.add_argument("--layers", type=int, default=8)
    t.add_argument("--channels", type=int, required=True)
    t.add_argument("--finest", type=float, default=1.0)
    t.set_defaults(func=cmd_trit)

    s = sub.add_parser("sample", help="draw a synthetic .hql latent")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--source", default="default")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("rd-curve", help="rate/MSQE at progress points as CSV")
    r.add_argument("latent", help="reference .hql latent")
    how = r.add_mutually_exclusive_group(required=True)
    how.add_argument("--schedule", help="encode the latent with this schedule")
    how.add_argument("--container", help="measure an existing container")
    r.add_argument("--points", help="comma-separated points (default: every layer)")
    r.add_argument("--format", choices=("csv", "human"), default="csv")
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_rdcurve)

    i = sub.add_parser("inspect", help="dump container header and segments")
    i.add_argument("input")
    i.add_argument("--format", choices=("human", "json"), default="human")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScheduleError as exc:
        where = ""
        if exc.layer is not None:
            where = f" (layer {exc.layer}" + (f", channel {exc.channel})" if exc.channel is not None else ")")
        print(f"hqstream: invalid schedule{where}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, FormatError, OSError) as exc:
        print(f"hqstream: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NestingError as exc:
        print(f"hqstream: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except (HQError, ValueError) as exc:
        print(f"hqstream: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - last-resort status for scripts
        print(f"hqstream: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

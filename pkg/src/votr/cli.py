"""Command-line entry point: ``votr {run,bench,gradcheck,dump-config}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, BackboneParams, backbone_forward
from .exceptions import (ConfigError, EmptyVoxelSetError, LookupMismatchError, PointFileError,
                         TableFullError)
from .grid import read_points, voxelize
from .io import RunReport, load_weights, save_weights

logger = logging.getLogger("votr")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_EMPTY = 4


def _setup_logging() -> None:
    level = os.environ.get("VOTR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _set_threads(n: int) -> None:
    if n and n > 0:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def build_run_report(source: str, config: BackboneConfig, params: BackboneParams, points,
                     seed: int | None) -> RunReport:
    timing = {}
    t0 = time.perf_counter()
    voxels = voxelize(points, config.grid)
    timing["voxelize_ms"] = 1e3 * (time.perf_counter() - t0)
    trace = []
    t1 = time.perf_counter()
    scales = backbone_forward(voxels, config, params, trace)
    timing["backbone_ms"] = 1e3 * (time.perf_counter() - t1)

    hist = np.zeros(config.budget + 1, dtype=np.int64)
    modules = []
    for k, m in enumerate(trace, 1):
        hist += np.bincount(m.attendee_counts, minlength=config.budget + 1)
        timing[f"module{k}_ms"] = 1e3 * m.seconds
        modules.append({
            "module": k, "kind": m.kind, "n_in": m.n_in, "n_out": m.n_out,
            "n_dropped": m.n_dropped,
            "attendees_mean": float(m.attendee_counts.mean()) if len(m.attendee_counts) else 0.0,
            "attendees_max": int(m.attendee_counts.max()) if len(m.attendee_counts) else 0,
            "table": m.table_stats or {},
        })
    checksums = {}
    for s, vs in enumerate(scales):
        checksums[f"scale{s}.indices"] = _digest(vs.indices)
        checksums[f"scale{s}.features"] = _digest(vs.features)
    return RunReport(
        input=source, seed=seed, budget=config.budget,
        scale_counts=[len(s) for s in scales],
        scale_channels=[s.n_channels for s in scales],
        modules=modules, attendee_histogram=hist.tolist(), checksums=checksums, timing=timing,
    )


def cmd_run(args) -> int:
    config = BackboneConfig.load(args.config) if args.config else BackboneConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.input:
        points = read_points(args.input, args.format)
        source = str(args.input)
    elif args.synthetic:
        from .scene import random_points
        points = random_points(args.synthetic, config.grid, rng=config.seed)
        source = f"synthetic:{args.synthetic}"
    else:
        print("run: one of --input or --synthetic is required", file=sys.stderr)
        return EXIT_USAGE
    if args.weights:
        params = BackboneParams.from_tensors(load_weights(args.weights), config)
    else:
        params = BackboneParams.init(config)
    if args.save_weights:
        save_weights(args.save_weights, params.tensors())
    report = build_run_report(source, config, params, points, None if args.weights else config.seed)
    if args.dump_table:
        from .hashing import build_table
        build_table(voxelize(points, config.grid).indices, config.n_hash).dump_csv(args.dump_table)
    _emit(report.to_json(include_timing=not args.no_timing), args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import run_bench
    if args.queries < 1:
        print("bench: --queries must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if args.n_sparse < 1 or args.n_sparse >= args.n_hash:
        print("bench: need 1 <= --n-sparse < --n-hash", file=sys.stderr)
        return EXIT_USAGE
    report = run_bench(args.n_sparse, args.queries, args.n_hash, args.per_query, args.seed or 0)
    _emit(report.to_json(), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck
    if args.trials < 1:
        print("gradcheck: --trials must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    seed = args.seed or 0
    results = run_gradcheck(args.trials, seed, zero_weights=args.zero_weights)
    worst = max(results, key=lambda r: r.max_error)
    passed = worst.max_error < TOLERANCE
    summary = {
        "trials": len(results),
        "seed": seed,
        "tolerance": TOLERANCE,
        "passed": passed,
        "n_failed": sum(r.max_error >= TOLERANCE for r in results),
        "max_relative_error": worst.max_error,
        "worst": {"trial": worst.trial, "tensor": worst.worst, "d_model": worst.d_model,
                  "n_attendees": worst.n_attendees},
    }
    _emit(json.dumps(summary, indent=2, sort_keys=True), args.out)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_dump_config(args) -> int:
    config = BackboneConfig.load(args.config) if args.config else BackboneConfig()
    if args.seed is not None:
        config.seed = args.seed
    _emit(config.dump(), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="votr", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=0, help="0 = hardware default")
    common.add_argument("--out", help="write output here instead of stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="voxelize a scan and run the backbone")
    run.add_argument("--input", help="point file")
    run.add_argument("--format", choices=["bin", "ascii"], default=None)
    run.add_argument("--synthetic", type=int, default=0, metavar="N",
                     help="generate a random scene with N occupied voxels instead of --input")
    run.add_argument("--config", help="backbone config JSON")
    run.add_argument("--weights", help="votrw-v1 weight file")
    run.add_argument("--save-weights", help="write the parameters used to this file")
    run.add_argument("--dump-table", help="write the input-scale hash table as CSV")
    run.add_argument("--no-timing", action="store_true", help="omit wall-clock fields")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", parents=[common], help="hash lookup vs. linear scan")
    bench.add_argument("--n-sparse", type=int, default=90_000)
    bench.add_argument("--queries", type=int, default=90_000)
    bench.add_argument("--n-hash", type=int, default=400_000)
    bench.add_argument("--per-query", type=int, default=48)
    bench.set_defaults(func=cmd_bench)

    grad = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    grad.add_argument("--trials", type=int, default=100)
    grad.add_argument("--zero-weights", action="store_true")
    grad.set_defaults(func=cmd_gradcheck)

    dump = sub.add_parser("dump-config", parents=[common], help="print the backbone config")
    dump.add_argument("--config", help="config to normalize instead of the defaults")
    dump.set_defaults(func=cmd_dump_config)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    try:
        return args.func(args)
    except EmptyVoxelSetError as exc:
        print(f"votr: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (PointFileError, ConfigError, TableFullError) as exc:
        print(f"votr: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except LookupMismatchError as exc:
        print(f"votr: lookup mismatch: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"votr: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

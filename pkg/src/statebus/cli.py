"""Command-line front end.

Exit codes: 0 success, 2 config error, 3 runtime block error, 4 schema mismatch.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from statebus.blocks import RunReport, StepTrace
from statebus.config import WorkflowConfig, apply_override, format_workflow, load_workflow
from statebus.errors import (
    BenchError,
    BlockPanic,
    GraphError,
    NoCommonLabels,
    ParseError,
    PlatformError,
    ReplayError,
    SchemaMismatch,
    StateError,
)
from statebus.runtime import build_runtime

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BLOCK = 3
EXIT_SCHEMA = 4

DEFAULT_RECORD_LABELS = ("q", "dq", "q_des", "dq_des", "tau_ff")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (SchemaMismatch, NoCommonLabels)):
        return EXIT_SCHEMA
    if isinstance(exc, BlockPanic):
        return EXIT_SCHEMA if isinstance(exc.cause, SchemaMismatch) else EXIT_BLOCK
    if isinstance(exc, BenchError):
        return EXIT_BLOCK
    return EXIT_CONFIG


_HANDLED = (ParseError, PlatformError, GraphError, StateError, ReplayError, BenchError, OSError, ValueError)


def _fail(exc: BaseException, err) -> int:
    code = exit_code_for(exc)
    if isinstance(exc, ParseError) and exc.line:
        message = f"parse error at line {exc.line}, column {exc.col}: {exc.message}"
    else:
        message = f"{type(exc).__name__}: {exc}"
    print(f"error: {message}", file=err)
    return code


def load_config(config_path, overrides=(), *, backend=None, rate=None, ticks=None) -> WorkflowConfig:
    config = load_workflow(config_path)
    for assignment in overrides:
        apply_override(config, assignment)
    if backend is not None:
        config.run.backend = backend
    if rate is not None:
        config.run.rate = float(rate)
    if ticks is not None:
        config.run.max_ticks = int(ticks)
    return config


def _format_report(report: RunReport) -> str:
    return (
        f"ticks={report.ticks} wall={report.wall_time:.3f}s overruns={report.overruns} "
        f"worst_tick={report.worst_tick_s * 1e3:.3f}ms done={report.done}"
    )


def _recorder_extra(labels, out_path):
    from statebus.replay import record

    def make(ctx):
        chosen = list(labels) if labels else [l for l in DEFAULT_RECORD_LABELS if l in ctx.space]
        if not chosen:
            chosen = [label for label in ctx.space.labels if "." not in label]
        return record(ctx.space, chosen, out_path)

    return make


def _execute(config: WorkflowConfig, base_dir, *, trace_path=None, recording=None, extra=(), out=None,
             err=None) -> tuple[int, RunReport | None]:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        runtime = build_runtime(config, base_dir, recording=recording, extra=extra)
    except _HANDLED as exc:
        return _fail(exc, err), None
    trace = StepTrace() if trace_path else None
    report = None
    code = EXIT_OK
    try:
        report = runtime.run(trace=trace)
    except BlockPanic as exc:
        report = exc.report
        code = _fail(exc, err)
    except _HANDLED as exc:
        code = _fail(exc, err)
    finally:
        runtime.close()
        if trace is not None:
            Path(trace_path).write_text(trace.export())
    if report is not None:
        print(_format_report(report), file=out)
    return code, report


def cmd_run(config_path, overrides=(), *, backend=None, rate=None, ticks=None, trace_path=None,
            out=None, err=None) -> tuple[int, RunReport | None]:
    try:
        config = load_config(config_path, overrides, backend=backend, rate=rate, ticks=ticks)
    except _HANDLED as exc:
        return _fail(exc, err or sys.stderr), None
    return _execute(config, Path(config_path).parent, trace_path=trace_path, out=out, err=err)


def cmd_record(config_path, labels, out_path, overrides=(), *, backend=None, rate=None, ticks=None,
               trace_path=None, out=None, err=None) -> tuple[int, RunReport | None]:
    """Run a config with a recorder of ``labels`` zipped after its graph."""
    try:
        config = load_config(config_path, overrides, backend=backend, rate=rate, ticks=ticks)
    except _HANDLED as exc:
        return _fail(exc, err or sys.stderr), None
    return _execute(config, Path(config_path).parent, trace_path=trace_path,
                    extra=[_recorder_extra(labels, out_path)], out=out, err=err)


def cmd_replay(recording_path, config_path, overrides=(), *, record_labels=None, out_path=None,
               backend=None, rate=None, ticks=None, trace_path=None, out=None,
               err=None) -> tuple[int, RunReport | None]:
    """Run a config whose ``replayer`` block reads ``recording_path``; optionally record the result."""
    try:
        config = load_config(config_path, overrides, backend=backend, rate=rate, ticks=ticks)
    except _HANDLED as exc:
        return _fail(exc, err or sys.stderr), None
    if not _has_block(config.graph, "replayer"):
        print("error: the replay config has no block(replayer ...)", file=err or sys.stderr)
        return EXIT_CONFIG, None
    extra = [_recorder_extra(record_labels, out_path)] if out_path else []
    return _execute(config, Path(config_path).parent, trace_path=trace_path, recording=recording_path,
                    extra=extra, out=out, err=err)


def _has_block(node, name: str) -> bool:
    if node.kind == "block":
        return node.name == name
    return any(_has_block(child, name) for child in node.children)


def cmd_analyze(recording_a, recording_b, max_shift=None, out_dir=None, *, squared=False,
                out=None, err=None):
    from statebus.replay import analyze, load_trajectory

    out = out or sys.stdout
    try:
        report = analyze(load_trajectory(recording_a), load_trajectory(recording_b), max_shift, squared=squared)
        if out_dir is not None:
            report.write(out_dir)
    except _HANDLED as exc:
        return _fail(exc, err or sys.stderr), None
    print(report.to_text(), file=out, end="")
    return EXIT_OK, report


def cmd_bench(backends=("inproc", "shm", "socket"), platform="loopback", n=10_000, out_dir=None, *,
              e2e_samples=500, rate=50.0, out=None, err=None):
    from statebus.bench import run_suite

    out = out or sys.stdout
    try:
        report = run_suite(list(backends), n, platform_kind=platform, e2e_samples=e2e_samples,
                           e2e_rate_hz=rate, out_dir=out_dir)
    except _HANDLED as exc:
        return _fail(exc, err or sys.stderr), None
    print(report.to_text(), file=out, end="")
    return EXIT_OK, report


def cmd_validate(config_path, overrides=(), *, out=None, err=None) -> int:
    """Parse, build and validate without stepping; prints the canonical config."""
    out = out or sys.stdout
    try:
        config = load_config(config_path, overrides)
        runtime = build_runtime(config, Path(config_path).parent)
        runtime.close()
    except _HANDLED as exc:
        return _fail(exc, err or sys.stderr)
    print(format_workflow(config), file=out, end="")
    return EXIT_OK


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=["inproc", "shm", "socket"], help="state backend (overrides [run] backend)")
    p.add_argument("--rate", type=float, help="control rate in Hz")
    p.add_argument("--ticks", type=int, help="stop after this many ticks")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a [run] or [platform] setting; repeatable")
    p.add_argument("--trace", dest="trace_path", metavar="PATH", help="write the tick,block trace here")


def _labels(text):
    return [s for s in text.split(",") if s] if text else None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="statebus", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a workflow config")
    p.add_argument("config")
    _run_flags(p)

    p = sub.add_parser("record", help="run a workflow and record labels to a trajectory file")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="trajectory file to write")
    p.add_argument("--labels", help="comma-separated labels (default: joint state and command)")
    _run_flags(p)

    p = sub.add_parser("replay", help="drive a workflow's replayer block from a recording")
    p.add_argument("recording")
    p.add_argument("config")
    p.add_argument("--out", help="record the replayed run to this file")
    p.add_argument("--labels", help="labels to record with --out")
    _run_flags(p)

    p = sub.add_parser("analyze", help="stepwise and shift-tolerant error between two recordings")
    p.add_argument("recording_a")
    p.add_argument("recording_b")
    p.add_argument("--max-shift", type=int, help="largest shift considered (default: min(n/4, 50))")
    p.add_argument("--squared", action="store_true", help="use squared frame distances")
    p.add_argument("--out", help="directory for report.txt and per-label CSVs")

    p = sub.add_parser("bench", help="latency microbenchmarks per backend")
    p.add_argument("--backend", action="append", choices=["inproc", "shm", "socket"],
                   help="backend to measure; repeatable (default: all)")
    p.add_argument("--platform", default="loopback", choices=["loopback", "sim"])
    p.add_argument("-n", type=int, default=10_000, help="samples per operation")
    p.add_argument("--e2e-samples", type=int, default=500, help="control cycles for end-to-end latency (0 skips)")
    p.add_argument("--rate", type=float, default=50.0, help="control rate for end-to-end cycles")
    p.add_argument("--out", help="directory for report.txt and raw sample dumps")

    p = sub.add_parser("validate", help="parse and build a config without running it")
    p.add_argument("config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {}
    if args.command in ("run", "record", "replay"):
        flags = dict(backend=args.backend, rate=args.rate, ticks=args.ticks, trace_path=args.trace_path)
    if args.command == "run":
        code, _ = cmd_run(args.config, args.overrides, **flags)
    elif args.command == "record":
        code, _ = cmd_record(args.config, _labels(args.labels), args.out, args.overrides, **flags)
    elif args.command == "replay":
        code, _ = cmd_replay(args.recording, args.config, args.overrides, record_labels=_labels(args.labels),
                             out_path=args.out, **flags)
    elif args.command == "analyze":
        code, _ = cmd_analyze(args.recording_a, args.recording_b, args.max_shift, args.out, squared=args.squared)
    elif args.command == "bench":
        code, _ = cmd_bench(args.backend or ("inproc", "shm", "socket"), args.platform, args.n, args.out,
                            e2e_samples=args.e2e_samples, rate=args.rate)
    else:
        code = cmd_validate(args.config, args.overrides)
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Latency harness: Recv, Send and end-to-end timings per backend.

Recv is the wall time of one ``read`` of a label a producer keeps updating,
Send the wall time of one ``write``. End-to-end is, per control cycle, the
time between sending a command and the platform timestamp of the state it was
computed from. Platform stamps come from another clock, so they are shifted
by an offset inferred with the minimum-delta method: the smallest observed
``local_receive - remote_stamp`` bounds the offset from above by the minimal
one-way delay, which is the estimator's bias and keeps every corrected
sample non-negative.
"""

from __future__ import annotations

import gc
import threading
import time
import uuid
from contextlib import ExitStack, contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from statebus.blocks import ControlBlock, Zip, run
from statebus.errors import BenchError, OffsetUnavailable, ProducerSilent, TooFewSamples, UnknownLabel
from statebus.library import identity_control
from statebus.state import SharedMemory, Socket, StateSpace

OPS = ("Recv", "Send", "EndToEnd")
ROW_NAMES = {"Recv": "Recv", "Send": "Send", "EndToEnd": "End-to-end"}
MIN_OFFSET_PAIRS = 100
DEFAULT_WARMUP = 1000


@dataclass
class LatencyStats:
    mean_ns: float
    std_ns: float
    p50_ns: float
    p99_ns: float
    n: int

    def __str__(self):
        return f"{self.mean_ns / 1e3:.1f} ± {self.std_ns / 1e3:.1f}"


def summarize(samples) -> LatencyStats:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.size == 0:
        raise BenchError("no samples to summarize")
    p50, p99 = np.percentile(arr, [50, 99])
    return LatencyStats(float(arr.mean()), float(arr.std()), float(p50), float(p99), int(arr.size))


@contextmanager
def _quiet_gc():
    enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


def _check_count(n_samples: int, warmup: int) -> None:
    if n_samples <= 0:
        raise BenchError("n_samples must be positive; an empty report is not a measurement")
    if warmup < 0:
        raise BenchError("warmup must be >= 0")


def bench_recv(space: StateSpace, label: str, n_samples: int, warmup: int = DEFAULT_WARMUP,
               producer_timeout: float = 1.0) -> np.ndarray:
    """Time ``n_samples`` reads of ``label`` (ns), after ``warmup`` discarded reads.

    Raises :class:`ProducerSilent` if the label's seq does not move within
    ``producer_timeout`` seconds.
    """
    _check_count(n_samples, warmup)
    first = space.read(label).seq
    deadline = time.monotonic() + producer_timeout
    while space.read(label).seq == first:
        if time.monotonic() > deadline:
            raise ProducerSilent(f"{label!r} did not change within {producer_timeout}s")
        time.sleep(0.0005)
    read = space.read
    clock = time.perf_counter_ns
    out = np.empty(n_samples, dtype=np.int64)
    with _quiet_gc():
        for _ in range(warmup):
            read(label)
        for i in range(n_samples):
            t0 = clock()
            read(label)
            out[i] = clock() - t0
    return out


def bench_send(space: StateSpace, label: str, n_samples: int, warmup: int = DEFAULT_WARMUP,
               values=None) -> np.ndarray:
    """Time ``n_samples`` writes of ``values`` (default: the current value) to ``label``."""
    _check_count(n_samples, warmup)
    if label not in space:
        raise UnknownLabel(label)
    if values is None:
        values = np.array(space.read(label).values)
    write = space.write
    clock = time.perf_counter_ns
    out = np.empty(n_samples, dtype=np.int64)
    with _quiet_gc():
        for _ in range(warmup):
            write(label, values)
        for i in range(n_samples):
            t0 = clock()
            write(label, values)
            out[i] = clock() - t0
    return out


def infer_offset(pairs) -> int:
    """Clock offset from ``(local_recv_ns, remote_stamp_ns)`` pairs: ``min(local - remote)``."""
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(arr) < MIN_OFFSET_PAIRS:
        raise TooFewSamples(f"need at least {MIN_OFFSET_PAIRS} pairs, got {len(arr)}")
    return int((arr[:, 0] - arr[:, 1]).min())


@dataclass
class EndToEnd:
    samples: np.ndarray
    offset_ns: int
    raw: np.ndarray = field(repr=False)  # columns: send_local, state_stamp, recv_local
    pairs: np.ndarray = field(repr=False)
    overruns: int = 0


def collect_offset_pairs(space: StateSpace, label: str, n_pairs: int, timeout: float = 5.0) -> np.ndarray:
    """Poll ``label`` and pair the local time a new seq was first seen with its stamp."""
    pairs = []
    last = space.read(label).seq
    deadline = time.monotonic() + timeout
    while len(pairs) < n_pairs:
        snap = space.read(label)
        if snap.seq != last:
            pairs.append((time.monotonic_ns(), snap.timestamp_ns))
            last = snap.seq
        elif time.monotonic() > deadline:
            break
        else:
            time.sleep(0.0001)
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def bench_e2e(space: StateSpace, platform, n_samples: int, rate_hz: float = 50.0, warmup: int = 5,
              calibration_pairs: int = 200) -> EndToEnd:
    """Run identity position control (``q_des = q``) and time command vs. state stamp.

    For a threaded platform the offset is calibrated first by polling its
    state label; every control cycle also contributes its own pair.
    """
    _check_count(n_samples, warmup)
    pairs = []
    if platform.threaded:
        pairs.extend(collect_offset_pairs(space, platform.state_label, calibration_pairs).tolist())
    rows = []

    def probe(_space) -> bool:
        rows.append((platform.last_send_ns, platform.last_state_stamp, platform.last_recv_ns))
        return False

    graph = Zip(
        platform.recv_block,
        identity_control(),
        platform.send_block,
        ControlBlock("e2e_probe", probe, stateful=True),
    )
    report = run(graph, space, rate_hz, max_ticks=n_samples + warmup)
    raw = np.array(rows[warmup:], dtype=np.int64).reshape(-1, 3)
    pairs.extend(raw[:, [2, 1]].tolist())
    try:
        offset = infer_offset(pairs)
    except TooFewSamples as exc:
        raise OffsetUnavailable(str(exc)) from exc
    samples = raw[:, 0] - (raw[:, 1] + offset)
    return EndToEnd(samples, offset, raw, np.array(pairs, dtype=np.int64), report.overruns)


@dataclass
class LatencyReport:
    stats: dict[str, dict[str, LatencyStats]]
    samples: dict[str, dict[str, np.ndarray]] = field(repr=False)
    config: dict = field(default_factory=dict)
    inferred_offset_ns: dict[str, int] = field(default_factory=dict)

    def to_text(self) -> str:
        """Table of ``mean ± std`` in microseconds: operations as rows, backends as columns."""
        backends = list(self.stats)
        width = max(14, *(len(b) + 2 for b in backends))
        lines = [
            "Operation latency (us, mean ± std)",
            "Operation".ljust(12) + "".join(b.rjust(width) for b in backends),
        ]
        for op in OPS:
            cells = [str(self.stats[b][op]) if op in self.stats[b] else "-" for b in backends]
            lines.append(ROW_NAMES[op].ljust(12) + "".join(c.rjust(width) for c in cells))
        lines.append("")
        lines.append("p50 / p99 (us)")
        for op in OPS:
            cells = [
                f"{self.stats[b][op].p50_ns / 1e3:.1f}/{self.stats[b][op].p99_ns / 1e3:.1f}"
                if op in self.stats[b] else "-"
                for b in backends
            ]
            lines.append(ROW_NAMES[op].ljust(12) + "".join(c.rjust(width) for c in cells))
        if self.inferred_offset_ns:
            lines.append("")
            for backend, offset in self.inferred_offset_ns.items():
                lines.append(f"inferred clock offset [{backend}]: {offset} ns")
        for key, value in self.config.items():
            lines.append(f"{key}: {value}")
        return "\n".join(lines) + "\n"

    def dump_csv(self, out_dir) -> list[Path]:
        """Raw samples, one ``samples_<backend>.csv`` of ``op,tick,value_ns`` per backend."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for backend, per_op in self.samples.items():
            path = out / f"samples_{backend}.csv"
            with open(path, "w") as f:
                f.write("op,tick,value_ns\n")
                for op, values in per_op.items():
                    f.writelines(f"{op},{tick},{value}\n" for tick, value in enumerate(values.tolist()))
            paths.append(path)
        return paths


def load_dump(path) -> dict[str, np.ndarray]:
    out: dict[str, list[int]] = {}
    with open(path) as f:
        if next(f).strip() != "op,tick,value_ns":
            raise BenchError(f"{path} is not a raw sample dump")
        for line in f:
            op, _, value = line.rstrip("\n").split(",")
            out.setdefault(op, []).append(int(value))
    return {op: np.array(v, dtype=np.int64) for op, v in out.items()}


class Producer:
    """Background writer updating one label at a fixed rate."""

    def __init__(self, space: StateSpace, label: str, rate_hz: float = 500.0):
        self.space = space
        self.label = label
        self.period = 1.0 / rate_hz
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._loop, daemon=True, name=f"producer-{label}")
        self.writes = 0

    def _loop(self) -> None:
        entry = self.space[self.label]
        start = time.perf_counter()
        k = 0
        while not self._stop.is_set():
            k += 1
            self.space.write(self.label, np.full(entry.shape, k % 1000, dtype=entry.np_dtype))
            self.writes += 1
            delay = start + k * self.period - time.perf_counter()
            if delay > 0:
                time.sleep(delay)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._stop.set()
        self._thread.join(timeout=2.0)


@contextmanager
def backend_pair(backend: str, labels=(("state", "f32", (12,)), ("cmd", "f32", (12,)))):
    """Yield ``(consumer_space, producer_space)`` sharing storage on ``backend``.

    In-process both are the same object. Shared memory attaches a second
    space to the same segment; the socket backend connects a subscriber to a
    listening publisher.
    """
    if backend == "inproc":
        spaces = [StateSpace("inproc")]
        spaces.append(spaces[0])
    elif backend == "shm":
        kind = SharedMemory(f"sb_bench_{uuid.uuid4().hex[:10]}")
        spaces = [StateSpace(kind), StateSpace(kind)]
    elif backend == "socket":
        publisher = StateSpace(Socket("127.0.0.1:0", listen=True))
        spaces = [StateSpace(Socket(publisher.backend.endpoint, listen=False)), publisher]
    else:
        raise BenchError(f"unknown backend {backend!r}")
    try:
        for space in dict.fromkeys(spaces):
            for label, dtype, shape in labels:
                space.register(label, dtype, shape)
        if backend == "socket":
            spaces[1].backend.wait_for_peers(1)
        yield spaces[0], spaces[1]
    finally:
        # consumer first so the segment owner unlinks last
        for space in reversed(list(dict.fromkeys(spaces))):
            space.close()


def bench_backend(backend: str, n_samples: int = 10_000, warmup: int = DEFAULT_WARMUP,
                  producer_hz: float = 500.0) -> dict[str, np.ndarray]:
    """Recv and Send samples for one backend with a live producer on ``state``."""
    with backend_pair(backend) as (consumer, producer_space):
        with Producer(producer_space, "state", producer_hz):
            recv = bench_recv(consumer, "state", n_samples, warmup)
            send = bench_send(consumer, "cmd", n_samples, warmup)
    return {"Recv": recv, "Send": send}


def bench_backends(backends=("inproc", "shm", "socket"), n_samples: int = 10_000,
                   warmup: int = DEFAULT_WARMUP, rounds: int = 10,
                   producer_hz: float = 500.0) -> dict[str, dict[str, np.ndarray]]:
    """Recv and Send samples for several backends, measured round-robin.

    All backends stay open with live producers while ``n_samples`` is split
    into ``rounds`` chunks taken in turn, so slow drift of the host (frequency
    scaling, neighbours) lands on every backend alike instead of on whichever
    ran last.
    """
    _check_count(n_samples, warmup)
    rounds = max(1, min(rounds, n_samples))
    sizes = [len(c) for c in np.array_split(np.arange(n_samples), rounds)]
    chunks: dict[str, dict[str, list[np.ndarray]]] = {b: {"Recv": [], "Send": []} for b in backends}
    with ExitStack() as stack:
        pairs = {}
        for backend in backends:
            consumer, producer_space = stack.enter_context(backend_pair(backend))
            stack.enter_context(Producer(producer_space, "state", producer_hz))
            pairs[backend] = consumer
        for r, size in enumerate(sizes):
            chunk_warmup = warmup if r == 0 else min(warmup, 50)
            for backend, consumer in pairs.items():
                chunks[backend]["Recv"].append(bench_recv(consumer, "state", size, chunk_warmup))
                chunks[backend]["Send"].append(bench_send(consumer, "cmd", size, chunk_warmup))
    return {b: {op: np.concatenate(parts) for op, parts in ops.items()} for b, ops in chunks.items()}


def bench_platform_e2e(backend: str, platform_kind: str = "loopback", n_samples: int = 500,
                       rate_hz: float = 50.0, clock_offset_ns: int = 0, spec=None) -> EndToEnd:
    """End-to-end samples against a threaded platform producer on ``backend``."""
    from statebus.platforms import make_platform, register_workflow_labels
    from statebus.samples import sample_platform_spec

    spec = spec or sample_platform_spec()
    with backend_pair(backend, labels=()) as (space, _):
        register_workflow_labels(space, spec.dof)
        platform = make_platform(
            spec, space, platform_kind, threaded=True, control_rate_hz=rate_hz,
            clock_offset_ns=clock_offset_ns,
        )
        try:
            return bench_e2e(space, platform, n_samples, rate_hz)
        finally:
            platform.shutdown()


def run_suite(backends=("inproc", "shm", "socket"), n_samples: int = 10_000,
              warmup: int = DEFAULT_WARMUP, platform_kind: str = "loopback",
              e2e_samples: int = 500, e2e_rate_hz: float = 50.0, out_dir=None) -> LatencyReport:
    """Benchmark every backend; optionally write ``report.txt`` and the raw sample dumps."""
    stats: dict[str, dict[str, LatencyStats]] = {}
    samples: dict[str, dict[str, np.ndarray]] = {}
    offsets: dict[str, int] = {}
    measured = bench_backends(backends, n_samples, warmup)
    for backend in backends:
        per_op = measured[backend]
        if e2e_samples:
            e2e = bench_platform_e2e(backend, platform_kind, e2e_samples, e2e_rate_hz)
            per_op["EndToEnd"] = e2e.samples
            offsets[backend] = e2e.offset_ns
        samples[backend] = per_op
        stats[backend] = {op: summarize(v) for op, v in per_op.items()}
    report = LatencyReport(
        stats, samples,
        config={
            "samples": n_samples, "warmup": warmup, "platform": platform_kind,
            "e2e_samples": e2e_samples, "control_rate_hz": e2e_rate_hz,
        },
        inferred_offset_ns=offsets,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report.to_text())
        report.dump_csv(out)
    return report

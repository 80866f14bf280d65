"""Trajectory recording, replay and reality-gap metrics.

Recording file, little-endian::

    b"UCTRJ1" u32 label_count
    per label: u16 name_len, name, u8 dtype_code, u8 ndim, u32 dims[ndim]
    frames:    u64 tick, u64 timestamp_ns, payloads concatenated in label order
    footer:    b"UCEND" u64 frame_count

Frames are appended and flushed one at a time, so a crashed recorder leaves a
readable prefix; a missing footer is tolerated and the frame count rebuilt by
scanning.
"""

from __future__ import annotations

import io
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from statebus.blocks import ControlBlock
from statebus.errors import (
    FileCorrupt,
    IoFailure,
    LengthMismatch,
    NoCommonLabels,
    SchemaMismatch,
    SpecInvalid,
    UnknownLabel,
    WindowTooLarge,
)
from statebus.state.space import DTYPE_CODES, DTYPE_NAMES, DTYPES

FILE_MAGIC = b"UCTRJ1"
FOOTER_MAGIC = b"UCEND"
_FRAME_HEAD = struct.Struct("<QQ")
_FOOTER = struct.Struct("<5sQ")


@dataclass
class Trajectory:
    """Columnar recording: ``data[label]`` has shape ``(n_frames, *shape)``."""

    labels: list[tuple[str, str, tuple[int, ...]]]
    ticks: np.ndarray
    timestamps: np.ndarray
    data: dict[str, np.ndarray]
    rate_hz: float = 0.0

    def __post_init__(self):
        self.ticks = np.asarray(self.ticks, dtype=np.uint64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.uint64)
        n = len(self.ticks)
        if len(self.timestamps) != n:
            raise LengthMismatch("ticks and timestamps differ in length")
        if n > 1 and not (np.diff(self.ticks.astype(np.int64)) > 0).all():
            raise FileCorrupt("frame ticks must be strictly increasing")
        for label, dtype, shape in self.labels:
            arr = self.data.get(label)
            if arr is None or arr.shape != (n, *shape) or arr.dtype != DTYPES[dtype]:
                raise LengthMismatch(f"column {label!r} does not match ({n}, {shape}) {dtype}")
        if not self.rate_hz and n > 1:
            span = (int(self.timestamps[-1]) - int(self.timestamps[0])) / 1e9
            self.rate_hz = (n - 1) / span if span > 0 else 0.0

    def __len__(self):
        return len(self.ticks)

    @property
    def label_names(self) -> list[str]:
        return [label for label, _, _ in self.labels]

    def schema(self, label: str) -> tuple[str, tuple[int, ...]]:
        for name, dtype, shape in self.labels:
            if name == label:
                return dtype, shape
        raise UnknownLabel(label)

    def flat(self, label: str) -> np.ndarray:
        """``(n_frames, n_elements)`` view of one label."""
        arr = self.data[label]
        return arr.reshape(len(arr), -1)

    def frames(self):
        for i in range(len(self)):
            yield int(self.ticks[i]), int(self.timestamps[i]), {k: v[i] for k, v in self.data.items()}

    @classmethod
    def from_frames(cls, labels, frames, rate_hz: float = 0.0) -> "Trajectory":
        labels = [(name, dtype, tuple(shape)) for name, dtype, shape in labels]
        frames = list(frames)
        data = {
            name: np.array([f[2][name] for f in frames], dtype=DTYPES[dtype]).reshape(len(frames), *shape)
            for name, dtype, shape in labels
        }
        return cls(labels, [f[0] for f in frames], [f[1] for f in frames], data, rate_hz)

    def save(self, path) -> None:
        with TrajectoryWriter(path, self.labels) as writer:
            for i in range(len(self)):
                writer.append(int(self.ticks[i]), int(self.timestamps[i]),
                              [self.data[name][i] for name in self.label_names])


def _encode_header(labels) -> bytes:
    out = [FILE_MAGIC, struct.pack("<I", len(labels))]
    for name, dtype, shape in labels:
        encoded = name.encode()
        out.append(struct.pack("<H", len(encoded)) + encoded)
        out.append(struct.pack("<BB", DTYPE_CODES[dtype], len(shape)))
        out.append(struct.pack(f"<{len(shape)}I", *shape))
    return b"".join(out)


class TrajectoryWriter:
    def __init__(self, path, labels):
        self.path = Path(path)
        self.labels = [(name, dtype, tuple(shape)) for name, dtype, shape in labels]
        self._dtypes = [DTYPES[dtype] for _, dtype, _ in self.labels]
        self._sizes = [math.prod(shape) for _, _, shape in self.labels]
        self.frame_count = 0
        try:
            self._file = open(self.path, "wb")
            self._file.write(_encode_header(self.labels))
            self._file.flush()
        except OSError as exc:
            raise IoFailure(f"cannot write {self.path}: {exc}") from exc

    def append(self, tick: int, timestamp_ns: int, values) -> None:
        parts = [_FRAME_HEAD.pack(tick, timestamp_ns)]
        for arr, dtype, size in zip(values, self._dtypes, self._sizes):
            arr = np.ascontiguousarray(arr, dtype=dtype)
            if arr.size != size:
                raise LengthMismatch(f"frame value has {arr.size} elements, schema says {size}")
            parts.append(arr.tobytes())
        try:
            self._file.write(b"".join(parts))
            self._file.flush()
        except (OSError, ValueError) as exc:
            raise IoFailure(f"cannot append to {self.path}: {exc}") from exc
        self.frame_count += 1

    def close(self) -> None:
        if self._file.closed:
            return
        try:
            self._file.write(_FOOTER.pack(FOOTER_MAGIC, self.frame_count))
        finally:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _read_header(f) -> list[tuple[str, str, tuple[int, ...]]]:
    def need(n):
        chunk = f.read(n)
        if len(chunk) != n:
            raise FileCorrupt("truncated header")
        return chunk

    if need(len(FILE_MAGIC)) != FILE_MAGIC:
        raise FileCorrupt("not a trajectory file")
    (count,) = struct.unpack("<I", need(4))
    labels = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2))
        name = need(name_len).decode()
        code, ndim = struct.unpack("<BB", need(2))
        if code not in DTYPE_NAMES:
            raise FileCorrupt(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", need(4 * ndim))
        labels.append((name, DTYPE_NAMES[code], tuple(shape)))
    return labels


def load_trajectory(path) -> Trajectory:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    f = io.BytesIO(raw)
    labels = _read_header(f)
    start = f.tell()
    sizes = [math.prod(shape) * DTYPES[dtype].itemsize for _, dtype, shape in labels]
    frame_size = _FRAME_HEAD.size + sum(sizes)
    body = len(raw) - start
    footer_count = None
    if body >= _FOOTER.size and raw[-_FOOTER.size :].startswith(FOOTER_MAGIC):
        candidate = _FOOTER.unpack(raw[-_FOOTER.size :])[1]
        if (body - _FOOTER.size) == candidate * frame_size:
            footer_count = candidate
    if footer_count is not None:
        n = footer_count
    else:
        # no valid footer: keep every complete frame (crash-truncated recording)
        n = body // frame_size
        if body % frame_size and raw[-_FOOTER.size :].startswith(FOOTER_MAGIC):
            raise FileCorrupt("footer frame count disagrees with file length")
    record = np.dtype(
        [("tick", "<u8"), ("ts", "<u8")]
        + [(f"f{i}", DTYPES[dtype], shape) for i, (_, dtype, shape) in enumerate(labels)]
    )
    table = np.frombuffer(raw, dtype=record, count=n, offset=start)
    data = {name: table[f"f{i}"].copy().reshape(n, *shape) for i, (name, _, shape) in enumerate(labels)}
    return Trajectory(labels, table["tick"].copy(), table["ts"].copy(), data)


def record(space, labels, path) -> ControlBlock:
    """Recorder block: appends one frame of ``labels`` per step; never done.

    The footer is written by the block's ``close`` hook.
    """
    labels = list(labels)
    if not labels:
        raise SpecInvalid("a recorder needs at least one label")
    for label in labels:
        if label not in space:
            raise UnknownLabel(label)
    schema = [(label, space[label].dtype, space[label].shape) for label in labels]
    writer = TrajectoryWriter(path, schema)
    state = {"tick": 0, "last_ts": 0}

    def step(view) -> bool:
        values = [view.read(label).values for label in labels]
        ts = max(time.monotonic_ns(), state["last_ts"])
        writer.append(state["tick"], ts, values)
        state["tick"] += 1
        state["last_ts"] = ts
        return False

    blk = ControlBlock("recorder", step, reads=frozenset(labels), stateful=True, close=writer.close)
    blk.writer = writer
    return blk


def replay(path, space, labels=None) -> ControlBlock:
    """Replay block: writes frame ``k`` on its ``k``-th step, done once the last frame is out.

    ``labels`` restricts replay to a subset of the recorded labels.
    """
    traj = load_trajectory(path) if not isinstance(path, Trajectory) else path
    chosen = traj.label_names if labels is None else list(labels)
    for label in chosen:
        dtype, shape = traj.schema(label)
        if label not in space:
            raise SchemaMismatch(f"recorded label {label!r} is not registered")
        entry = space[label]
        if entry.dtype != dtype or entry.shape != shape:
            raise SchemaMismatch(
                f"{label!r} recorded as {dtype}{list(shape)}, registered as {entry.dtype}{list(entry.shape)}"
            )
    cursor = {"k": 0}

    def step(view) -> bool:
        k = cursor["k"]
        if k >= len(traj):
            return True
        for label in chosen:
            view.write(label, traj.data[label][k])
        cursor["k"] = k + 1
        return cursor["k"] >= len(traj)

    def reset():
        cursor["k"] = 0

    blk = ControlBlock("replayer", step, writes=frozenset(chosen), stateful=True, reset=reset)
    blk.trajectory = traj
    return blk


# metrics ---------------------------------------------------------------------


def _pair(T: Trajectory, T_hat: Trajectory, label: str) -> tuple[np.ndarray, np.ndarray]:
    if T.schema(label) != T_hat.schema(label):
        raise SchemaMismatch(f"{label!r} differs in dtype or shape between trajectories")
    return T.flat(label).astype(np.float64), T_hat.flat(label).astype(np.float64)


def _as_columns(T, label):
    if isinstance(T, Trajectory):
        return T.flat(label).astype(np.float64)
    arr = np.asarray(T, dtype=np.float64)
    return arr.reshape(len(arr), -1)


def stepwise_mse(T, T_hat, label: str | None = None) -> tuple[np.ndarray, float]:
    """Per-element and aggregate mean squared error of frame-aligned trajectories."""
    if isinstance(T, Trajectory) and isinstance(T_hat, Trajectory):
        a, b = _pair(T, T_hat, label)
    else:
        a, b = _as_columns(T, label), _as_columns(T_hat, label)
    if a.shape != b.shape:
        raise LengthMismatch(f"cannot compare {a.shape} with {b.shape} frame by frame")
    per_element = ((a - b) ** 2).mean(axis=0)
    return per_element, float(per_element.mean())


def shifted_terms(T, T_hat, max_shift: int, squared: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Mean per-frame distance for every shift ``0..max_shift`` in both directions.

    ``forward[j]`` compares ``T[i + j]`` with ``T_hat[i]`` and ``backward[j]``
    compares ``T[i]`` with ``T_hat[i + j]``, each averaged over the frames
    where both indices exist.
    """
    a = np.asarray(T, dtype=np.float64)
    b = np.asarray(T_hat, dtype=np.float64)
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if not len(a) or not len(b):
        raise WindowTooLarge("trajectories must be nonempty")
    if not 0 <= max_shift < min(len(a), len(b)):
        raise WindowTooLarge(f"max shift {max_shift} needs to be in [0, {min(len(a), len(b)) - 1}]")

    def frame_dist(x, y):
        d = x - y
        sq = np.einsum("ij,ij->i", d, d)
        return sq if squared else np.sqrt(sq)

    forward = np.empty(max_shift + 1)
    backward = np.empty(max_shift + 1)
    for j in range(max_shift + 1):
        n_f = min(len(a) - j, len(b))
        forward[j] = frame_dist(a[j : j + n_f], b[:n_f]).mean()
        n_b = min(len(a), len(b) - j)
        backward[j] = frame_dist(a[:n_b], b[j : j + n_b]).mean()
    return forward, backward


def default_max_shift(n_frames: int) -> int:
    return int(min(n_frames // 4, 50))


def unfolded_loss(T, T_hat, label: str | None = None, max_shift: int | None = None,
                  squared: bool = False) -> tuple[float, int, int]:
    """Shift-tolerant two-sided gap: ``min_j forward[j] + min_j backward[j]``.

    Returns ``(loss, best forward shift, best backward shift)``; ties go to
    the smallest shift. ``squared`` switches the per-frame distance from the
    L2 norm to its square.
    """
    if isinstance(T, Trajectory) and isinstance(T_hat, Trajectory):
        a, b = _pair(T, T_hat, label)
    else:
        a, b = _as_columns(T, label), _as_columns(T_hat, label)
    if max_shift is None:
        max_shift = default_max_shift(min(len(a), len(b)))
    forward, backward = shifted_terms(a, b, max_shift, squared)
    j_f = int(np.argmin(forward))
    j_b = int(np.argmin(backward))
    return float(forward[j_f] + backward[j_b]), j_f, j_b


@dataclass
class LabelGap:
    per_element_mse: np.ndarray
    stepwise_mse: float
    unfolded_loss: float
    best_shift_forward: int
    best_shift_backward: int
    forward_terms: np.ndarray = field(repr=False)
    backward_terms: np.ndarray = field(repr=False)
    abs_error: np.ndarray = field(repr=False)

    def ranking(self) -> list[int]:
        """Element indices, largest per-element MSE first."""
        return [int(i) for i in np.argsort(-self.per_element_mse, kind="stable")]


@dataclass
class GapReport:
    per_label: dict[str, LabelGap]
    n_frames_compared: int
    max_shift: int
    ticks: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, np.uint64))

    def to_text(self) -> str:
        lines = [f"frames compared: {self.n_frames_compared}", f"max shift: {self.max_shift}", ""]
        for label, gap in self.per_label.items():
            lines.append(f"[{label}]")
            lines.append(f"stepwise_mse = {gap.stepwise_mse:.6e}")
            lines.append(f"unfolded_loss = {gap.unfolded_loss:.6e}")
            lines.append(f"best_shift_forward = {gap.best_shift_forward}")
            lines.append(f"best_shift_backward = {gap.best_shift_backward}")
            per = " ".join(f"{v:.6e}" for v in gap.per_element_mse)
            lines.append(f"per_element_mse = {per}")
            lines.append("worst_elements = " + " ".join(map(str, gap.ranking()[:5])))
            lines.append("")
        return "\n".join(lines)

    def write(self, out_dir) -> list[Path]:
        """Write ``report.txt`` plus one ``<label>_<element>.csv`` of ``tick,abs_error`` per channel."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.txt"]
        written[0].write_text(self.to_text())
        for label, gap in self.per_label.items():
            safe = label.replace("/", "_")
            for e in range(gap.abs_error.shape[1]):
                path = out / f"{safe}_{e}.csv"
                rows = "".join(f"{int(t)},{float(v)!r}\n" for t, v in zip(self.ticks, gap.abs_error[:, e]))
                path.write_text("tick,abs_error\n" + rows)
                written.append(path)
        return written


def analyze(T: Trajectory, T_hat: Trajectory, max_shift: int | None = None,
            squared: bool = False) -> GapReport:
    """Compare every label the two trajectories share.

    Stepwise metrics and the absolute-error series use the common prefix of
    frames; the unfolded loss uses both trajectories in full.
    """
    common = [label for label in T.label_names if label in T_hat.label_names]
    if not common:
        raise NoCommonLabels("trajectories share no labels")
    n = min(len(T), len(T_hat))
    if max_shift is None:
        max_shift = default_max_shift(n)
    per_label = {}
    for label in common:
        a, b = _pair(T, T_hat, label)
        per_element, aggregate = stepwise_mse(a[:n], b[:n])
        forward, backward = shifted_terms(a, b, max_shift, squared)
        j_f, j_b = int(np.argmin(forward)), int(np.argmin(backward))
        per_label[label] = LabelGap(
            per_element_mse=per_element,
            stepwise_mse=aggregate,
            unfolded_loss=float(forward[j_f] + backward[j_b]),
            best_shift_forward=j_f,
            best_shift_backward=j_b,
            forward_terms=forward,
            backward_terms=backward,
            abs_error=np.abs(a[:n] - b[:n]),
        )
    return GapReport(per_label, n, max_shift, T.ticks[:n].copy())

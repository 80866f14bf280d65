"""Labeled vectorized state arrays and the space that owns them."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from statebus.errors import (
    DuplicateLabel,
    GatherOutOfBounds,
    LengthMismatch,
    ShapeInvalid,
    StateError,
    UnknownLabel,
)

# Wire/file dtype codes are positional; never reorder.
DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "u8": np.dtype("u1"),
    "bool": np.dtype("?"),
}
DTYPE_CODES = {name: code for code, name in enumerate(DTYPES)}
DTYPE_NAMES = {code: name for name, code in DTYPE_CODES.items()}


def dtype_name(dtype) -> str:
    """Normalize a dtype spelling (``"f32"``, ``np.float32``, ...) to its short name."""
    if isinstance(dtype, str) and dtype in DTYPES:
        return dtype
    try:
        np_dtype = np.dtype(dtype).newbyteorder("<")
    except TypeError as exc:
        raise ShapeInvalid(f"unsupported dtype {dtype!r}") from exc
    for name, candidate in DTYPES.items():
        if candidate == np_dtype or (name == "bool" and np_dtype.kind == "b"):
            return name
    raise ShapeInvalid(f"unsupported dtype {dtype!r}")


class Snapshot(NamedTuple):
    """One committed write: values (read-only), monotonic timestamp, sequence number."""

    values: np.ndarray
    timestamp_ns: int
    seq: int


@dataclass(frozen=True)
class StateArray:
    """Schema of one label plus a handle back to its space."""

    label: str
    dtype: str
    shape: tuple[int, ...]
    space: "StateSpace" = field(repr=False, compare=False)

    @property
    def np_dtype(self) -> np.dtype:
        return DTYPES[self.dtype]

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.size * self.np_dtype.itemsize

    def read(self) -> Snapshot:
        return self.space.read(self.label)

    def write(self, values, timestamp_ns=None) -> int:
        return self.space.write(self.label, values, timestamp_ns)

    @property
    def values(self) -> np.ndarray:
        return self.space.read(self.label).values

    @property
    def seq(self) -> int:
        return self.space.read(self.label).seq

    @property
    def timestamp_ns(self) -> int:
        return self.space.read(self.label).timestamp_ns


@dataclass(frozen=True)
class IndexMap:
    """Gather with optional per-element affine transform.

    ``target[i] = source[gather[i]] * scale[i] + offset[i]``, indices taken over
    the flattened source.
    """

    source_label: str
    target_label: str
    gather: np.ndarray
    scale: np.ndarray | None = None
    offset: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "gather", np.asarray(self.gather, dtype=np.intp).reshape(-1))
        n = self.gather.size
        for name in ("scale", "offset"):
            value = getattr(self, name)
            if value is not None:
                value = np.broadcast_to(np.asarray(value, dtype=np.float64), (n,)).copy()
                object.__setattr__(self, name, value)

    @classmethod
    def identity(cls, source_label: str, target_label: str, n: int) -> "IndexMap":
        return cls(source_label, target_label, np.arange(n))

    @classmethod
    def permutation(cls, source_label: str, target_label: str, order) -> "IndexMap":
        return cls(source_label, target_label, np.asarray(order))

    @property
    def is_affine(self) -> bool:
        return self.scale is not None or self.offset is not None

    def inverse(self) -> "IndexMap":
        """Inverse of a pure permutation map (labels swapped)."""
        if self.is_affine:
            raise ValueError("only pure permutation maps are invertible")
        n = self.gather.size
        if sorted(self.gather.tolist()) != list(range(n)):
            raise ValueError("gather is not a permutation")
        inv = np.empty(n, dtype=np.intp)
        inv[self.gather] = np.arange(n)
        return IndexMap(self.target_label, self.source_label, inv)

    def check(self, source_size: int) -> None:
        if self.gather.size and (self.gather.min() < 0 or self.gather.max() >= source_size):
            raise GatherOutOfBounds(
                f"gather for {self.target_label!r} indexes outside source of size {source_size}"
            )

    def apply(self, source: np.ndarray, dtype=None) -> np.ndarray:
        """Apply to a source array; pure gather keeps the source dtype bit-exact."""
        flat = np.asarray(source).reshape(-1)
        self.check(flat.size)
        out = flat[self.gather]
        if self.is_affine:
            out = out.astype(np.float64)
            if self.scale is not None:
                out = out * self.scale
            if self.offset is not None:
                out = out + self.offset
        if dtype is not None:
            out = out.astype(dtype, copy=False)
        return out


class StateSpace:
    """Registry of labeled arrays on a single storage backend.

    Writes publish, reads return the latest committed snapshot. Every label has
    a fixed dtype and shape from registration on.
    """

    def __init__(self, backend=None):
        from statebus.state.backends import make_backend

        self.backend = make_backend(backend)
        self.created_at_ns = time.monotonic_ns()
        self._entries: dict[str, StateArray] = {}

    def __repr__(self):
        return f"StateSpace({type(self.backend).__name__}, labels={list(self._entries)})"

    def __contains__(self, label) -> bool:
        return label in self._entries

    def __getitem__(self, label) -> StateArray:
        try:
            return self._entries[label]
        except KeyError:
            raise UnknownLabel(label) from None

    def __iter__(self):
        return iter(self._entries.values())

    @property
    def labels(self) -> list[str]:
        return list(self._entries)

    def register(self, label: str, dtype, shape, init=None) -> StateArray:
        if label in self._entries:
            raise DuplicateLabel(f"label {label!r} already registered")
        if not isinstance(label, str) or not label or any(c.isspace() for c in label):
            raise ShapeInvalid(f"invalid label {label!r}")
        shape = (shape,) if isinstance(shape, int) else tuple(int(d) for d in shape)
        if not shape or any(d < 1 for d in shape):
            raise ShapeInvalid(f"shape {shape} for {label!r} must be nonempty with dims >= 1")
        entry = StateArray(label, dtype_name(dtype), shape, self)
        if init is None:
            initial = np.zeros(shape, dtype=entry.np_dtype)
        else:
            initial = self._coerce(entry, init)
        self.backend.allocate(entry, initial, time.monotonic_ns())
        self._entries[label] = entry
        return entry

    @staticmethod
    def _coerce(entry: StateArray, values) -> np.ndarray:
        arr = np.asarray(values, dtype=entry.np_dtype)
        if arr.size != entry.size:
            raise LengthMismatch(
                f"{entry.label!r} expects {entry.size} values, got {arr.size}"
            )
        return arr.reshape(entry.shape)

    def write(self, label: str, values, timestamp_ns: int | None = None) -> int:
        """Commit ``values`` to ``label`` and return the new sequence number.

        ``timestamp_ns`` lets a producer stamp data with its own clock; it
        defaults to this process's monotonic clock.
        """
        entry = self._entries.get(label)
        if entry is None:
            raise UnknownLabel(label)
        arr = self._coerce(entry, values)
        ts = time.monotonic_ns() if timestamp_ns is None else int(timestamp_ns)
        return self.backend.store(entry, arr, ts)

    def read(self, label: str) -> Snapshot:
        try:
            return self.backend.load(label)
        except KeyError:
            raise UnknownLabel(label) from None

    def apply_map(self, imap: IndexMap) -> int:
        source = self[imap.source_label]
        target = self[imap.target_label]
        imap.check(source.size)
        if target.size != imap.gather.size:
            raise LengthMismatch(
                f"map into {target.label!r} has {imap.gather.size} entries, target holds {target.size}"
            )
        values = imap.apply(self.read(source.label).values, dtype=target.np_dtype)
        return self.write(target.label, values)

    def close(self) -> None:
        self.backend.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def wait_for_seq(space: StateSpace, label: str, seq: int, timeout: float = 5.0) -> Snapshot:
    """Poll until ``label`` reaches at least ``seq``; raise StateError on timeout."""
    deadline = time.monotonic() + timeout
    while True:
        snap = space.read(label)
        if snap.seq >= seq:
            return snap
        if time.monotonic() > deadline:
            raise StateError(f"{label!r} stuck at seq {snap.seq}, wanted {seq}")
        time.sleep(0.0005)

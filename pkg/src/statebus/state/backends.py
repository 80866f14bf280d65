"""Storage backends behind a StateSpace.

A backend implements ``allocate(entry, initial, ts)``, ``store(entry, values, ts)
-> seq``, ``load(label) -> Snapshot`` (``KeyError`` when unknown) and ``close()``.
"""

from __future__ import annotations

import os
import struct
import time
import uuid
from dataclasses import dataclass, field
from multiprocessing import resource_tracker, shared_memory

import numpy as np

from statebus.errors import ShapeInvalid, StateError, TornRead
from statebus.state.space import DTYPE_CODES, DTYPE_NAMES, Snapshot, StateArray


@dataclass(frozen=True)
class InProcess:
    pass


@dataclass(frozen=True)
class SharedMemory:
    segment_name: str = field(default_factory=lambda: f"sb_{uuid.uuid4().hex[:12]}")
    capacity: int = 1 << 20


@dataclass(frozen=True)
class Socket:
    endpoint: str = "127.0.0.1:0"
    listen: bool = True


BackendKind = InProcess | SharedMemory | Socket


def parse_backend(text: str) -> BackendKind:
    """Parse ``inproc``, ``shm[:name]``, ``socket[:host:port]`` or ``socket+connect:host:port``."""
    head, _, rest = text.partition(":")
    if head == "inproc" and not rest:
        return InProcess()
    if head == "shm":
        name = rest or os.environ.get("UNICON_SHM_NAME")
        return SharedMemory(name) if name else SharedMemory()
    if head == "socket":
        return Socket(rest or "127.0.0.1:0", listen=True)
    if head == "socket+connect" and rest:
        return Socket(rest, listen=False)
    raise ValueError(f"unknown backend {text!r}")


def make_backend(kind):
    if kind is None:
        return InProcessBackend()
    if isinstance(kind, str):
        kind = parse_backend(kind)
    if isinstance(kind, InProcess):
        return InProcessBackend()
    if isinstance(kind, SharedMemory):
        return SharedMemoryBackend(kind.segment_name, kind.capacity)
    if isinstance(kind, Socket):
        from statebus.state.socket import SocketBackend

        return SocketBackend(kind.endpoint, listen=kind.listen)
    if hasattr(kind, "store") and hasattr(kind, "load"):
        return kind
    raise TypeError(f"not a backend: {kind!r}")


def _frozen_copy(values: np.ndarray) -> np.ndarray:
    # frombuffer over immutable bytes is read-only already; cheaper than flipping the flag
    out = np.frombuffer(values.tobytes(), dtype=values.dtype)
    return out if values.ndim == 1 else out.reshape(values.shape)


_new_snapshot = tuple.__new__


class InProcessBackend:
    """Copy-on-write cells; a read hands out the committed array without copying."""

    kind = InProcess()

    def __init__(self):
        self._cells: dict[str, Snapshot] = {}

    def allocate(self, entry: StateArray, initial: np.ndarray, ts: int) -> None:
        self._cells[entry.label] = Snapshot(_frozen_copy(initial), ts, 0)

    def store(self, entry: StateArray, values: np.ndarray, ts: int) -> int:
        cells = self._cells
        label = entry.label
        seq = cells[label][2] + 1
        frozen = np.frombuffer(values.tobytes(), dtype=values.dtype)
        if values.ndim != 1:
            frozen = frozen.reshape(values.shape)
        # single reference swap: concurrent readers see either the old or the new cell
        cells[label] = _new_snapshot(Snapshot, (frozen, ts, seq))
        return seq

    def load(self, label: str) -> Snapshot:
        return self._cells[label]

    def close(self) -> None:
        pass


# Segment layout:
#   [0, 64)        header: magic[8] u32 layout u32 label_count u64 used u64 capacity
#   [64, 64+256*128) directory entries
#   regions, 64-byte aligned: [u64 version][u64 seq][u64 timestamp_ns][payload]
_MAGIC = b"SBSHM001"
_HEADER = struct.Struct("<8sIIQQ")
_DIR_OFFSET = 64
_DIR_ENTRY = struct.Struct("<64sBBHI8IQQ8x")
_MAX_LABELS = 256
_MAX_DIMS = 8
_DATA_OFFSET = _DIR_OFFSET + _MAX_LABELS * _DIR_ENTRY.size
_REGION_HEADER = 24
_Q = struct.Struct("<Q")
_QQ = struct.Struct("<QQ")

MAX_READ_RETRIES = 64


def _align(n: int, to: int = 64) -> int:
    return (n + to - 1) // to * to


def _attach_untracked(name: str) -> shared_memory.SharedMemory:
    # On 3.10 every attaching process registers the segment with its resource
    # tracker, which unlinks it when that process exits; only the creator may own it.
    original = resource_tracker.register
    resource_tracker.register = lambda *args, **kwargs: None
    try:
        return shared_memory.SharedMemory(name=name)
    finally:
        resource_tracker.register = original


class _Region:
    __slots__ = ("offset", "payload")

    def __init__(self, offset: int, payload: np.ndarray):
        self.offset = offset
        self.payload = payload


class SharedMemoryBackend:
    """Single-writer-per-label, multi-reader seqlock regions in a POSIX segment.

    The writer bumps the version to odd, copies the payload, stores seq and
    timestamp, then bumps the version to even. A reader retries while the
    version is odd or changed across its copy. Relies on x86-style store and
    load ordering, which plain memory access from CPython provides there.
    """

    def __init__(self, name: str, capacity: int = 1 << 20):
        self.kind = SharedMemory(name, capacity)
        self.name = name
        try:
            self._shm = shared_memory.SharedMemory(
                name=name, create=True, size=_DATA_OFFSET + capacity
            )
            self.owner = True
            _HEADER.pack_into(self._shm.buf, 0, _MAGIC, 1, 0, _DATA_OFFSET, _DATA_OFFSET + capacity)
        except FileExistsError:
            self._shm = _attach_untracked(name)
            self.owner = False
            if bytes(self._shm.buf[:8]) != _MAGIC:
                self._shm.close()
                raise StateError(f"segment {name!r} is not a state segment")
        self._buf = self._shm.buf
        self._regions: dict[str, _Region] = {}
        self._closed = False

    def _header(self):
        _, _, count, used, total = _HEADER.unpack_from(self._buf, 0)
        return count, used, total

    def directory(self) -> list[tuple[str, str, tuple[int, ...], int]]:
        """(label, dtype, shape, region offset) for every label in the segment."""
        count, _, _ = self._header()
        out = []
        for i in range(count):
            raw = _DIR_ENTRY.unpack_from(self._buf, _DIR_OFFSET + i * _DIR_ENTRY.size)
            name = raw[0].rstrip(b"\0").decode()
            ndim = raw[2]
            dims = tuple(raw[5 : 5 + ndim])
            out.append((name, DTYPE_NAMES[raw[1]], dims, raw[13]))
        return out

    def allocate(self, entry: StateArray, initial: np.ndarray, ts: int) -> None:
        for name, dtype, shape, offset in self.directory():
            if name == entry.label:
                if dtype != entry.dtype or shape != entry.shape:
                    raise ShapeInvalid(
                        f"segment holds {name!r} as {dtype}{list(shape)}, "
                        f"registration asks {entry.dtype}{list(entry.shape)}"
                    )
                self._map(entry, offset)
                return
        encoded = entry.label.encode()
        if len(encoded) > 64 or len(entry.shape) > _MAX_DIMS:
            raise ShapeInvalid(f"label {entry.label!r} too long or too many dims for the segment")
        count, used, total = self._header()
        if count >= _MAX_LABELS:
            raise StateError("shared-memory directory full")
        offset = _align(used)
        end = offset + _REGION_HEADER + entry.nbytes
        if end > total:
            raise StateError(f"segment {self.name!r} out of space ({total} bytes)")
        dims = list(entry.shape) + [0] * (_MAX_DIMS - len(entry.shape))
        _DIR_ENTRY.pack_into(
            self._buf, _DIR_OFFSET + count * _DIR_ENTRY.size,
            encoded, DTYPE_CODES[entry.dtype], len(entry.shape), 0, 0, *dims, offset, entry.nbytes,
        )
        region = self._map(entry, offset)
        _Q.pack_into(self._buf, offset, 0)
        _QQ.pack_into(self._buf, offset + 8, 0, ts)
        np.copyto(region.payload, initial)
        # publish the directory entry last
        struct.pack_into("<I", self._buf, 12, count + 1)
        struct.pack_into("<Q", self._buf, 16, end)

    def _map(self, entry: StateArray, offset: int) -> _Region:
        payload = np.ndarray(
            entry.shape, dtype=entry.np_dtype, buffer=self._buf, offset=offset + _REGION_HEADER
        )
        region = self._regions[entry.label] = _Region(offset, payload)
        return region

    def store(self, entry: StateArray, values: np.ndarray, ts: int) -> int:
        region = self._regions[entry.label]
        buf = self._buf
        off = region.offset
        version = _Q.unpack_from(buf, off)[0]
        # an odd version left by a crashed writer must stay odd while we write
        begin = version + 1 if version % 2 == 0 else version + 2
        seq = _Q.unpack_from(buf, off + 8)[0] + 1
        _Q.pack_into(buf, off, begin)
        np.copyto(region.payload, values)
        _QQ.pack_into(buf, off + 8, seq, ts)
        _Q.pack_into(buf, off, begin + 1)
        return seq

    def load(self, label: str) -> Snapshot:
        region = self._regions[label]
        buf = self._buf
        off = region.offset
        for _ in range(MAX_READ_RETRIES):
            v1 = _Q.unpack_from(buf, off)[0]
            if v1 % 2 == 0:
                seq, ts = _QQ.unpack_from(buf, off + 8)
                values = region.payload.copy()
                if _Q.unpack_from(buf, off)[0] == v1:
                    # the copy is private to the caller, so it stays writable
                    return Snapshot(values, ts, seq)
            # one core: the writer may be descheduled mid-write, let it run
            os.sched_yield()
        raise TornRead(f"no consistent snapshot of {label!r} after {MAX_READ_RETRIES} attempts")

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._regions.clear()
        self._buf = None
        try:
            self._shm.close()
        except BufferError:
            # a caller still holds a view into the segment; the mapping dies with the process
            pass
        if self.owner:
            try:
                self._shm.unlink()
            except FileNotFoundError:
                pass

"""Labeled vectorized state with publish-on-write, latest-on-read backends."""

from statebus.state.backends import (
    BackendKind,
    InProcess,
    InProcessBackend,
    SharedMemory,
    SharedMemoryBackend,
    Socket,
    make_backend,
    parse_backend,
)
from statebus.state.space import (
    DTYPES,
    IndexMap,
    Snapshot,
    StateArray,
    StateSpace,
    dtype_name,
    wait_for_seq,
)

__all__ = [
    "BackendKind",
    "DTYPES",
    "InProcess",
    "InProcessBackend",
    "IndexMap",
    "SharedMemory",
    "SharedMemoryBackend",
    "Snapshot",
    "Socket",
    "StateArray",
    "StateSpace",
    "dtype_name",
    "make_backend",
    "parse_backend",
    "wait_for_seq",
]

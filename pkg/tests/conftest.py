import time
import uuid
from contextlib import contextmanager

import pytest

from statebus.state import SharedMemory, Socket, StateSpace


def wait_until(predicate, timeout=5.0):
    deadline = time.monotonic() + timeout
    while not predicate():
        if time.monotonic() > deadline:
            raise AssertionError("condition not reached in time")
        time.sleep(0.002)


def shm_name():
    return f"sb_test_{uuid.uuid4().hex[:10]}"


@contextmanager
def linked_pair(backend):
    """(writer_space, reader_space) sharing storage on ``backend``."""
    if backend == "inproc":
        space = StateSpace()
        try:
            yield space, space
        finally:
            space.close()
        return
    if backend == "shm":
        kind = SharedMemory(shm_name())
        writer, reader = StateSpace(kind), StateSpace(kind)
    else:
        writer = StateSpace(Socket("127.0.0.1:0"))
        reader = StateSpace(Socket(writer.backend.endpoint, listen=False))
    try:
        yield writer, reader
    finally:
        reader.close()
        writer.close()


@pytest.fixture(params=["inproc", "shm", "socket"])
def backend_name(request):
    return request.param


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

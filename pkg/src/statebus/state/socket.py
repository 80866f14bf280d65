"""TCP backend: every write is one framed message, readers keep the latest frame.

Wire format (little-endian)::

    handshake line  b"LABEL <id> <name> <dtype> <d0,d1,...>\\n"
    frame           b"UC" u16 label_id u64 seq u64 timestamp_ns u32 payload_len payload

Label ids are the sender's registration indices. Both ends of a connection
announce their labels on connect and whenever a label is registered later,
then follow with the latest frame of every label already written, so a late
subscriber starts from current values. Handshake lines start with ``L`` and
frames with ``U``; the two interleave freely on one stream.
"""

from __future__ import annotations

import logging
import select
import socket
import struct
import threading
import time

import numpy as np

from statebus.errors import BackendDown
from statebus.state.space import DTYPES, Snapshot, StateArray

log = logging.getLogger(__name__)

FRAME_MAGIC = b"UC"
FRAME_HEADER = struct.Struct("<2sHQQI")
SEND_TIMEOUT_S = 2.0


def split_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


def encode_label_line(label_id: int, entry: StateArray) -> bytes:
    dims = ",".join(str(d) for d in entry.shape)
    return f"LABEL {label_id} {entry.label} {entry.dtype} {dims}\n".encode()


def parse_label_line(line: bytes) -> tuple[int, str, str, tuple[int, ...]]:
    parts = line.decode().split()
    if len(parts) != 5 or parts[0] != "LABEL" or parts[3] not in DTYPES:
        raise ValueError(f"bad handshake line {line!r}")
    return int(parts[1]), parts[2], parts[3], tuple(int(d) for d in parts[4].split(","))


def encode_frame(label_id: int, seq: int, timestamp_ns: int, payload: bytes) -> bytes:
    return FRAME_HEADER.pack(FRAME_MAGIC, label_id, seq, timestamp_ns, len(payload)) + payload


class FrameDecoder:
    """Incremental parser for the byte stream; yields ``("label", ...)`` / ``("frame", ...)``."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        self._buf += data
        buf = self._buf
        while buf:
            if buf[:1] == b"L":
                end = buf.find(b"\n")
                if end < 0:
                    return
                yield ("label", parse_label_line(bytes(buf[:end])))
                del buf[: end + 1]
            elif buf[:1] == b"U":
                if len(buf) < FRAME_HEADER.size:
                    return
                magic, label_id, seq, ts, length = FRAME_HEADER.unpack_from(buf)
                if magic != FRAME_MAGIC:
                    raise ValueError(f"bad frame magic {bytes(magic)!r}")
                end = FRAME_HEADER.size + length
                if len(buf) < end:
                    return
                yield ("frame", (label_id, seq, ts, bytes(buf[FRAME_HEADER.size : end])))
                del buf[:end]
            else:
                raise ValueError(f"unexpected byte {bytes(buf[:1])!r} in stream")


class _Peer:
    def __init__(self, sock: socket.socket, backend: "SocketBackend"):
        self.sock = sock
        self.backend = backend
        self.send_lock = threading.Lock()
        self.rx_lock = threading.Lock()
        self.remote: dict[int, tuple[str, str, tuple[int, ...]]] = {}
        self.alive = True
        self._decoder = FrameDecoder()
        # poll objects refuse concurrent use, so the rx thread and readers get one each
        self._rx_poll = select.poll()
        self._rx_poll.register(sock, select.POLLIN)
        self._read_poll = select.poll()
        self._read_poll.register(sock, select.POLLIN)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.settimeout(SEND_TIMEOUT_S)
        self.thread = threading.Thread(target=self._receive, daemon=True, name="statebus-socket-rx")

    def send(self, data: bytes) -> None:
        with self.send_lock:
            if not self.alive:
                return
            try:
                self.sock.sendall(data)
            except OSError:
                self.alive = False

    def _pump(self, poller) -> None:
        # caller holds rx_lock; recv only what is already queued
        while self.alive and poller.poll(0):
            data = self.sock.recv(1 << 16)
            if not data:
                self.alive = False
                return
            for kind, item in self._decoder.feed(data):
                if kind == "label":
                    self.remote[item[0]] = item[1:]
                else:
                    self.backend._deliver(self, *item)

    def _receive(self) -> None:
        try:
            while self.alive:
                if not self._rx_poll.poll(100):
                    continue
                with self.rx_lock:
                    self._pump(self._rx_poll)
        except (OSError, ValueError) as exc:
            if self.alive and not self.backend._closing:
                log.warning("socket peer dropped: %s", exc)
        finally:
            self.alive = False

    def drain_pending(self) -> None:
        """Apply frames already queued in the kernel; skipped if the rx thread is busy."""
        try:
            if not self._read_poll.poll(0) or not self.rx_lock.acquire(blocking=False):
                return
        except RuntimeError:
            return
        try:
            self._pump(self._read_poll)
        except (OSError, ValueError):
            self.alive = False
        finally:
            self.rx_lock.release()

    def close(self) -> None:
        self.alive = False
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class SocketBackend:
    """Latest-value pub/sub over TCP.

    A listening backend accepts any number of peers; a connecting backend has
    exactly one and reports :class:`BackendDown` on write once it is gone.
    A background thread per peer swaps received frames into the cache. A read
    additionally applies frames already sitting in the kernel buffer when the
    receive thread is not mid-update: under the GIL that thread can lag a busy
    reader by a whole switch interval, longer than a 500 Hz producer period.
    The drain never waits, so reads stay wait-free.
    """

    def __init__(self, endpoint: str = "127.0.0.1:0", listen: bool = True, connect_timeout: float = 5.0):
        from statebus.state.backends import Socket

        self.listen = listen
        # label -> latest encoded frame, including header
        self._frames: dict[str, bytes] = {}
        self._entries: dict[str, tuple[int, StateArray]] = {}
        # frames for labels a peer announced before we registered them
        self._unclaimed: dict[str, tuple[str, tuple, int, int, bytes]] = {}
        self._peers: list[_Peer] = []
        self._lock = threading.Lock()
        self._closing = False
        host, port = split_endpoint(endpoint)
        if listen:
            self._server = socket.create_server((host, port))
            self.endpoint = "%s:%d" % self._server.getsockname()[:2]
            self._acceptor = threading.Thread(target=self._accept, daemon=True, name="statebus-socket-accept")
            self._acceptor.start()
        else:
            self._server = None
            self.endpoint = endpoint
            sock = self._connect(host, port, connect_timeout)
            self._add_peer(sock)
        self.kind = Socket(self.endpoint, listen)

    @staticmethod
    def _connect(host: str, port: int, timeout: float) -> socket.socket:
        deadline = time.monotonic() + timeout
        while True:
            try:
                return socket.create_connection((host, port), timeout=timeout)
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise BackendDown(f"cannot reach {host}:{port}: {exc}") from exc
                time.sleep(0.02)

    def _accept(self) -> None:
        while not self._closing:
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            self._add_peer(sock)

    def _add_peer(self, sock: socket.socket) -> None:
        peer = _Peer(sock, self)
        with self._lock:
            hello = [encode_label_line(i, e) for i, e in self._entries.values()]
            for label, (label_id, _) in self._entries.items():
                frame = self._frames[label]
                if FRAME_HEADER.unpack_from(frame)[2] > 0:
                    hello.append(frame)
            peer.send(b"".join(hello))
            self._peers.append(peer)
        peer.thread.start()

    @property
    def peer_count(self) -> int:
        return sum(p.alive for p in self._peers)

    def wait_for_peers(self, n: int = 1, timeout: float = 5.0) -> None:
        deadline = time.monotonic() + timeout
        while self.peer_count < n:
            if time.monotonic() > deadline:
                raise BackendDown(f"only {self.peer_count} of {n} peers connected")
            time.sleep(0.005)

    def _check_link(self) -> None:
        if not self.listen and not self._peers[0].alive:
            raise BackendDown(f"connection to {self.endpoint} lost")

    def allocate(self, entry: StateArray, initial: np.ndarray, ts: int) -> None:
        with self._lock:
            label_id = len(self._entries)
            self._entries[entry.label] = (label_id, entry)
            self._frames[entry.label] = encode_frame(label_id, 0, ts, np.ascontiguousarray(initial).tobytes())
            held = self._unclaimed.pop(entry.label, None)
            if held is not None:
                dtype, shape, seq, held_ts, payload = held
                if dtype == entry.dtype and shape == entry.shape and len(payload) == entry.nbytes:
                    self._frames[entry.label] = encode_frame(label_id, seq, held_ts, payload)
            peers = list(self._peers)
        line = encode_label_line(label_id, entry)
        for peer in peers:
            peer.send(line)

    def store(self, entry: StateArray, values: np.ndarray, ts: int) -> int:
        label_id, _ = self._entries[entry.label]
        self._check_link()
        seq = FRAME_HEADER.unpack_from(self._frames[entry.label])[2] + 1
        frame = encode_frame(label_id, seq, ts, np.ascontiguousarray(values).tobytes())
        self._frames[entry.label] = frame
        # copy the peer list only after the cell swap so a peer joining
        # concurrently gets this value either in its hello or as this frame
        with self._lock:
            peers = list(self._peers)
        for peer in peers:
            peer.send(frame)
        return seq

    def _deliver(self, peer: _Peer, label_id: int, seq: int, ts: int, payload: bytes) -> None:
        # the cache keeps frames in local label-id space so hellos can forward them
        remote = peer.remote.get(label_id)
        if remote is None:
            log.warning("frame for unannounced label id %d dropped", label_id)
            return
        name, dtype, shape = remote
        local = self._entries.get(name)
        if local is None:
            with self._lock:
                if name not in self._entries:
                    self._unclaimed[name] = (dtype, shape, seq, ts, payload)
                    return
            local = self._entries[name]
        entry = local[1]
        if dtype != entry.dtype or shape != entry.shape or len(payload) != entry.nbytes:
            log.warning("frame for %r does not match local schema, dropped", name)
            return
        self._frames[name] = encode_frame(local[0], seq, ts, payload)

    def load(self, label: str) -> Snapshot:
        for peer in self._peers:
            if peer.alive:
                peer.drain_pending()
        frame = self._frames[label]
        entry = self._entries[label][1]
        _, _, seq, ts, _ = FRAME_HEADER.unpack_from(frame)
        values = np.frombuffer(frame, dtype=entry.np_dtype, offset=FRAME_HEADER.size).reshape(entry.shape)
        return Snapshot(values, ts, seq)

    def close(self) -> None:
        if self._closing:
            return
        self._closing = True
        if self._server is not None:
            self._server.close()
        for peer in self._peers:
            peer.close()
        for peer in self._peers:
            if peer.thread.is_alive():
                peer.thread.join(timeout=1.0)

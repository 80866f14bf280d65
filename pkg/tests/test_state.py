import multiprocessing as mp
import struct
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import linked_pair, shm_name, wait_until
from statebus.errors import (
    BackendDown,
    DuplicateLabel,
    GatherOutOfBounds,
    LengthMismatch,
    ShapeInvalid,
    TornRead,
    UnknownLabel,
)
from statebus.state import (
    InProcess,
    IndexMap,
    SharedMemory,
    SharedMemoryBackend,
    Socket,
    StateSpace,
    parse_backend,
    wait_for_seq,
)
from statebus.state.socket import (
    FRAME_HEADER,
    FrameDecoder,
    encode_frame,
    encode_label_line,
    parse_label_line,
)


# registration, read, write -----------------------------------------------------


def test_register_zero_fills_with_seq_zero():
    space = StateSpace()
    arr = space.register("q", "f32", [12])
    snap = space.read("q")
    assert snap.values.dtype == np.float32
    assert snap.values.shape == (12,)
    assert not snap.values.any()
    assert snap.seq == 0
    assert arr.seq == 0


def test_register_twice_is_duplicate():
    space = StateSpace()
    space.register("q", "f32", [12])
    with pytest.raises(DuplicateLabel):
        space.register("q", "f32", [12])


@pytest.mark.parametrize("shape", [[], [0], [3, 0], [-1]])
def test_register_rejects_bad_shape(shape):
    with pytest.raises(ShapeInvalid):
        StateSpace().register("x", "f64", shape)


def test_register_with_init_stores_verbatim():
    space = StateSpace()
    space.register("quat", "f32", [4], init=[1, 0, 0, 0])
    assert space.read("quat").values.tolist() == [1.0, 0.0, 0.0, 0.0]


def test_write_then_read():
    space = StateSpace()
    space.register("q", "f32", [12])
    seq = space.write("q", [0.1] * 12)
    snap = space.read("q")
    assert seq == 1 and snap.seq == 1
    np.testing.assert_array_equal(snap.values, np.full(12, 0.1, dtype=np.float32))


def test_sequential_writes_increment_seq_and_timestamps():
    space = StateSpace()
    space.register("q", "f64", [3])
    assert space.write("q", [1, 2, 3]) == 1
    t1 = space.read("q").timestamp_ns
    assert space.write("q", [4, 5, 6]) == 2
    assert space.read("q").timestamp_ns >= t1


def test_write_wrong_length():
    space = StateSpace()
    space.register("q", "f32", [12])
    with pytest.raises(LengthMismatch):
        space.write("q", [0.0] * 11)


def test_unknown_label():
    space = StateSpace()
    with pytest.raises(UnknownLabel):
        space.read("nope")
    with pytest.raises(UnknownLabel):
        space.write("nope", [1])


def test_snapshot_is_not_aliased_to_later_writes():
    space = StateSpace()
    space.register("x", "f64", [2])
    space.write("x", [1, 2])
    snap = space.read("x")
    space.write("x", [3, 4])
    assert snap.values.tolist() == [1, 2]
    with pytest.raises(ValueError):
        snap.values[0] = 9


def test_multi_dim_shape_keeps_layout():
    space = StateSpace()
    space.register("m", "i32", [2, 3])
    space.write("m", np.arange(6))
    np.testing.assert_array_equal(space.read("m").values, np.arange(6).reshape(2, 3))


def test_explicit_timestamp():
    space = StateSpace()
    space.register("x", "f64", [1])
    space.write("x", [1], timestamp_ns=123)
    assert space.read("x").timestamp_ns == 123


def test_parse_backend(monkeypatch):
    assert parse_backend("inproc") == InProcess()
    assert parse_backend("shm:seg1") == SharedMemory("seg1")
    monkeypatch.setenv("UNICON_SHM_NAME", "from_env")
    assert parse_backend("shm").segment_name == "from_env"
    assert parse_backend("socket:127.0.0.1:9000") == Socket("127.0.0.1:9000", True)
    assert parse_backend("socket+connect:h:1") == Socket("h:1", False)
    with pytest.raises(ValueError):
        parse_backend("carrier-pigeon")


# IndexMap --------------------------------------------------------------------------


def test_apply_map_permutation():
    space = StateSpace()
    space.register("src", "f64", [3], init=[10, 20, 30])
    space.register("dst", "f64", [3])
    space.apply_map(IndexMap("src", "dst", [2, 0, 1]))
    assert space.read("dst").values.tolist() == [30, 10, 20]


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_identity_map_bit_identical(dtype):
    rng = np.random.default_rng(0)
    values = rng.standard_normal(64)
    space = StateSpace()
    space.register("src", dtype, [64], init=values)
    space.register("dst", dtype, [64])
    space.apply_map(IndexMap.identity("src", "dst", 64))
    a, b = space.read("src").values, space.read("dst").values
    assert a.tobytes() == b.tobytes()


def test_affine_map():
    space = StateSpace()
    space.register("deg", "f64", [2], init=[180, 90])
    space.register("rad", "f64", [2])
    space.apply_map(IndexMap("deg", "rad", [0, 1], scale=np.pi / 180, offset=[0, 1]))
    np.testing.assert_allclose(space.read("rad").values, [np.pi, np.pi / 2 + 1])


def test_gather_out_of_bounds():
    space = StateSpace()
    space.register("src", "f64", [3])
    space.register("dst", "f64", [2])
    with pytest.raises(GatherOutOfBounds):
        space.apply_map(IndexMap("src", "dst", [0, 3]))
    with pytest.raises(UnknownLabel):
        space.apply_map(IndexMap("src", "ghost", [0]))


def test_map_length_must_match_target():
    space = StateSpace()
    space.register("src", "f64", [3])
    space.register("dst", "f64", [2])
    with pytest.raises(LengthMismatch):
        space.apply_map(IndexMap("src", "dst", [0, 1, 2]))


@settings(max_examples=200, deadline=None)
@given(st.permutations(list(range(9))), st.lists(st.floats(allow_nan=False, width=64), min_size=9, max_size=9))
def test_permutation_round_trip_is_identity(order, values):
    forward = IndexMap.permutation("a", "b", order)
    back = forward.inverse()
    x = np.array(values)
    assert back.apply(forward.apply(x)).tobytes() == x.tobytes()
    np.testing.assert_array_equal(forward.gather[back.gather], np.arange(9))


def test_inverse_rejects_non_permutation():
    with pytest.raises(ValueError):
        IndexMap("a", "b", [0, 0]).inverse()
    with pytest.raises(ValueError):
        IndexMap("a", "b", [1, 0], scale=2.0).inverse()


# all backends ---------------------------------------------------------------------


def test_read_after_write_every_backend(backend_name):
    with linked_pair(backend_name) as (writer, reader):
        for space in {id(writer): writer, id(reader): reader}.values():
            space.register("v", "f64", [4])
        last = None
        for k in range(1, 21):
            last = np.arange(4) * k
            seq = writer.write("v", last)
        snap = wait_for_seq(reader, "v", seq)
        np.testing.assert_array_equal(snap.values, last)
        assert snap.seq == 20


def test_backend_equivalence_of_final_values():
    script = [np.random.default_rng(i).standard_normal(6) for i in range(30)]
    finals = {}
    for backend in ("inproc", "shm", "socket"):
        with linked_pair(backend) as (writer, reader):
            for space in {id(writer): writer, id(reader): reader}.values():
                space.register("v", "f64", [6])
            for values in script:
                seq = writer.write("v", values)
            finals[backend] = wait_for_seq(reader, "v", seq).values.tobytes()
    assert finals["inproc"] == finals["shm"] == finals["socket"] == script[-1].tobytes()


def test_inproc_and_shm_replay_same_sequence():
    script = [np.full(3, k, dtype=np.float64) for k in range(10)]
    seen = {}
    for backend in ("inproc", "shm"):
        with linked_pair(backend) as (writer, reader):
            for space in {id(writer): writer, id(reader): reader}.values():
                space.register("v", "f64", [3])
            out = []
            for values in script:
                writer.write("v", values)
                snap = reader.read("v")
                out.append((snap.seq, snap.values.tolist()))
            seen[backend] = out
    assert seen["inproc"] == seen["shm"]


# shared memory ----------------------------------------------------------------------


def test_shm_second_space_attaches_and_sees_writes():
    kind = SharedMemory(shm_name())
    with StateSpace(kind) as a, StateSpace(kind) as b:
        a.register("x", "u8", [5])
        b.register("x", "u8", [5])
        a.write("x", [1, 2, 3, 4, 5])
        assert b.read("x").values.tolist() == [1, 2, 3, 4, 5]
        assert b.read("x").seq == 1


def test_shm_schema_mismatch_on_attach():
    kind = SharedMemory(shm_name())
    with StateSpace(kind) as a, StateSpace(kind) as b:
        a.register("x", "f32", [4])
        with pytest.raises(ShapeInvalid):
            b.register("x", "f32", [5])


def test_shm_directory_lists_labels():
    with StateSpace(SharedMemory(shm_name())) as space:
        space.register("a", "f64", [2, 3])
        space.register("b", "bool", [1])
        names = [(n, d, s) for n, d, s, _ in space.backend.directory()]
    assert names == [("a", "f64", (2, 3)), ("b", "bool", (1,))]


def test_shm_forced_odd_version_reports_torn_read():
    with StateSpace(SharedMemory(shm_name())) as space:
        space.register("x", "f64", [4])
        backend: SharedMemoryBackend = space.backend
        offset = backend._regions["x"].offset
        struct.pack_into("<Q", backend._buf, offset, 7)
        with pytest.raises(TornRead):
            space.read("x")
        # the next write closes the odd version and reads recover
        space.write("x", [1, 1, 1, 1])
        assert space.read("x").values.tolist() == [1, 1, 1, 1]


def _hammer(name, stop_after, counter):
    space = StateSpace(SharedMemory(name))
    space.register("k", "f64", [64])
    deadline = time.monotonic() + stop_after
    k = 0
    while time.monotonic() < deadline:
        k += 1
        space.write("k", np.full(64, float(k)))
    counter.value = k
    space.close()


def test_shm_snapshots_never_mix_writes_across_processes():
    name = shm_name()
    with StateSpace(SharedMemory(name)) as reader:
        reader.register("k", "f64", [64])
        counter = mp.Value("q", 0)
        proc = mp.get_context("fork").Process(target=_hammer, args=(name, 1.0, counter))
        proc.start()
        torn, reads, last_seq = 0, 0, 0
        deadline = time.monotonic() + 1.5
        while proc.is_alive() and time.monotonic() < deadline:
            snap = reader.read("k")
            reads += 1
            assert snap.seq >= last_seq
            last_seq = snap.seq
            torn += int((snap.values != snap.values[0]).any())
        proc.join(5)
        final = reader.read("k")
    assert torn == 0
    assert reads > 100
    assert final.values[0] == counter.value and final.seq == counter.value


def test_shm_reads_match_some_committed_write_under_threaded_writer():
    import threading

    kind = SharedMemory(shm_name())
    with StateSpace(kind) as writer, StateSpace(kind) as reader:
        writer.register("k", "f64", [16])
        reader.register("k", "f64", [16])
        committed = {0: 0.0}
        stop = threading.Event()

        def produce():
            k = 0
            while not stop.is_set():
                k += 1
                committed[writer.write("k", np.full(16, k * 0.5))] = k * 0.5
                time.sleep(0.002)

        t = threading.Thread(target=produce)
        t.start()
        snaps = []
        for _ in range(50):
            snaps.append(reader.read("k"))
            time.sleep(0.02)
        stop.set()
        t.join()
    seqs = [s.seq for s in snaps]
    assert seqs == sorted(seqs)
    for s in snaps:
        assert (s.values == committed[s.seq]).all()


# socket ----------------------------------------------------------------------------


def test_frame_wire_layout():
    frame = encode_frame(3, 7, 99, b"\x01\x02")
    assert frame[:2] == b"UC"
    assert FRAME_HEADER.unpack_from(frame) == (b"UC", 3, 7, 99, 2)
    assert frame[FRAME_HEADER.size :] == b"\x01\x02"
    assert len(frame) == 2 + 2 + 8 + 8 + 4 + 2


def test_label_line_round_trip():
    space = StateSpace()
    entry = space.register("joint.q", "f32", [2, 6])
    line = encode_label_line(4, entry)
    assert line == b"LABEL 4 joint.q f32 2,6\n"
    assert parse_label_line(line.strip()) == (4, "joint.q", "f32", (2, 6))


def test_decoder_handles_arbitrary_chunking():
    space = StateSpace()
    entry = space.register("x", "f64", [2])
    stream = encode_label_line(0, entry) + encode_frame(0, 1, 5, np.array([1.0, 2.0]).tobytes())
    stream += encode_frame(0, 2, 6, np.array([3.0, 4.0]).tobytes())
    for chunk in (1, 3, 7, len(stream)):
        decoder = FrameDecoder()
        events = []
        for i in range(0, len(stream), chunk):
            events.extend(decoder.feed(stream[i : i + chunk]))
        assert [e[0] for e in events] == ["label", "frame", "frame"]
        assert events[2][1][:3] == (0, 2, 6)


def test_decoder_rejects_garbage():
    with pytest.raises(ValueError):
        list(FrameDecoder().feed(b"Zjunk"))


def test_socket_late_subscriber_starts_from_latest_value():
    with StateSpace(Socket("127.0.0.1:0")) as pub:
        pub.register("x", "i64", [3])
        pub.write("x", [1, 2, 3])
        pub.write("x", [4, 5, 6])
        with StateSpace(Socket(pub.backend.endpoint, listen=False)) as sub:
            sub.register("x", "i64", [3])
            wait_until(lambda: sub.read("x").seq == 2)
            assert sub.read("x").values.tolist() == [4, 5, 6]


def test_socket_is_bidirectional():
    with linked_pair("socket") as (pub, sub):
        for space in (pub, sub):
            space.register("up", "f64", [1])
            space.register("down", "f64", [1])
        pub.backend.wait_for_peers(1)
        pub.write("down", [1.5])
        sub.write("up", [2.5])
        wait_until(lambda: sub.read("down").seq == 1 and pub.read("up").seq == 1)
        assert sub.read("down").values[0] == 1.5
        assert pub.read("up").values[0] == 2.5


def test_socket_drops_frames_with_mismatched_schema():
    with linked_pair("socket") as (pub, sub):
        pub.register("x", "f64", [2])
        sub.register("x", "f64", [3])
        pub.register("ok", "f64", [1])
        sub.register("ok", "f64", [1])
        pub.backend.wait_for_peers(1)
        pub.write("x", [1, 2])
        pub.write("ok", [1])
        wait_until(lambda: sub.read("ok").seq == 1)
        assert sub.read("x").seq == 0


def test_socket_write_after_publisher_gone_is_backend_down():
    pub = StateSpace(Socket("127.0.0.1:0"))
    sub = StateSpace(Socket(pub.backend.endpoint, listen=False))
    sub.register("x", "f64", [1])
    pub.close()
    wait_until(lambda: sub.backend.peer_count == 0)
    with pytest.raises(BackendDown):
        sub.write("x", [1.0])
    sub.close()


def test_socket_connect_timeout_is_short():
    from statebus.state.socket import SocketBackend

    t0 = time.monotonic()
    with pytest.raises(BackendDown):
        SocketBackend("127.0.0.1:1", listen=False, connect_timeout=0.2)
    assert time.monotonic() - t0 < 3

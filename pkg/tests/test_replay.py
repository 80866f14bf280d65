import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from statebus import StateSpace
from statebus.blocks import Zip, run
from statebus.errors import (
    FileCorrupt,
    LengthMismatch,
    NoCommonLabels,
    SchemaMismatch,
    SpecInvalid,
    WindowTooLarge,
)
from statebus.library import counter
from statebus.replay import (
    FOOTER_MAGIC,
    Trajectory,
    TrajectoryWriter,
    analyze,
    load_trajectory,
    record,
    replay,
    shifted_terms,
    stepwise_mse,
    unfolded_loss,
)


def brute_unfolded(T, T_hat, J, squared=False):
    """Scalar loops over (j, i, element), normalizing each shift by its overlap length."""
    T = [list(map(float, row)) for row in np.asarray(T).reshape(len(T), -1)]
    H = [list(map(float, row)) for row in np.asarray(T_hat).reshape(len(T_hat), -1)]

    def dist(x, y):
        s = 0.0
        for a, b in zip(x, y):
            s += (a - b) * (a - b)
        return s if squared else math.sqrt(s)

    def term(A, B, j):
        total, count = 0.0, 0
        for i in range(len(B)):
            if i + j < len(A):
                total += dist(A[i + j], B[i])
                count += 1
        return total / count

    fwd = [term(T, H, j) for j in range(J + 1)]
    bwd = [term(H, T, j) for j in range(J + 1)]
    jf = min(range(J + 1), key=lambda j: (fwd[j], j))
    jb = min(range(J + 1), key=lambda j: (bwd[j], j))
    return fwd[jf] + bwd[jb], jf, jb, fwd, bwd


def brute_mse(T, T_hat):
    n, d = len(T), len(T[0])
    per = [sum((float(T[i][e]) - float(T_hat[i][e])) ** 2 for i in range(n)) / n for e in range(d)]
    return per, sum(per) / d


def counter_space():
    space = StateSpace()
    space.register("c", "f64", [1])
    space.register("v", "f32", [2, 2])
    return space


# file format ----------------------------------------------------------------------------


def test_record_counter_ten_ticks(tmp_path):
    space = counter_space()
    path = tmp_path / "c.traj"
    rec = record(space, ["c"], path)
    graph = Zip(counter("c"), rec)
    run(graph, space, math.inf, 10)
    graph.close()
    traj = load_trajectory(path)
    assert len(traj) == 10
    assert traj.data["c"][:, 0].tolist() == list(range(1, 11))
    assert traj.ticks.tolist() == list(range(10))
    assert (np.diff(traj.timestamps.astype(np.int64)) >= 0).all()


def test_record_without_labels(tmp_path):
    with pytest.raises(SpecInvalid):
        record(counter_space(), [], tmp_path / "x.traj")


def test_file_layout(tmp_path):
    labels = [("c", "f64", (1,))]
    path = tmp_path / "t.traj"
    with TrajectoryWriter(path, labels) as w:
        w.append(0, 5, [np.array([1.5])])
    raw = path.read_bytes()
    assert raw.startswith(b"UCTRJ1")
    assert raw[-13:-8] == FOOTER_MAGIC
    assert int.from_bytes(raw[-8:], "little") == 1


def test_save_load_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(1)
    labels = [("a", "f32", (3,)), ("b", "i64", (2, 2)), ("flag", "bool", (1,))]
    frames = [
        (k, 1000 * k, {"a": rng.standard_normal(3).astype(np.float32),
                       "b": rng.integers(-9, 9, (2, 2)), "flag": [k % 2 == 0]})
        for k in range(17)
    ]
    traj = Trajectory.from_frames(labels, frames)
    traj.save(tmp_path / "r.traj")
    back = load_trajectory(tmp_path / "r.traj")
    assert back.labels == traj.labels
    for name in traj.label_names:
        assert back.data[name].tobytes() == traj.data[name].tobytes()
    assert back.timestamps.tolist() == traj.timestamps.tolist()


def test_crashed_recording_keeps_complete_prefix(tmp_path):
    labels = [("x", "f64", (4,))]
    path = tmp_path / "crash.traj"
    w = TrajectoryWriter(path, labels)
    for k in range(5):
        w.append(k, k, [np.full(4, k, dtype=np.float64)])
    w._file.close()  # no footer, as after a crash
    with open(path, "ab") as f:
        f.write(b"\x01\x02\x03")  # half-written sixth frame
    traj = load_trajectory(path)
    assert len(traj) == 5
    assert traj.data["x"][-1].tolist() == [4.0] * 4


def test_corrupt_files(tmp_path):
    bad = tmp_path / "bad.traj"
    bad.write_bytes(b"NOTATRAJ")
    with pytest.raises(FileCorrupt):
        load_trajectory(bad)
    labels = [("x", "f64", (1,))]
    path = tmp_path / "lying_footer.traj"
    with TrajectoryWriter(path, labels) as w:
        w.append(0, 0, [np.zeros(1)])
        w.append(1, 0, [np.zeros(1)])
    raw = bytearray(path.read_bytes())
    raw[-8:] = (7).to_bytes(8, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(FileCorrupt):
        load_trajectory(path)


def test_writer_rejects_wrong_frame_size(tmp_path):
    with TrajectoryWriter(tmp_path / "w.traj", [("x", "f64", (3,))]) as w:
        with pytest.raises(LengthMismatch):
            w.append(0, 0, [np.zeros(2)])


# replay ----------------------------------------------------------------------------------


def test_record_then_replay_reproduces_values(tmp_path):
    space = counter_space()
    path = tmp_path / "r.traj"

    def wiggle(s):
        c = s.read("c").values[0]
        s.write("v", np.array([[c, -c], [c / 3, c * c]]))
        return False

    from statebus.blocks import ControlBlock

    rec = record(space, ["c", "v"], path)
    graph = Zip(counter("c"), ControlBlock("wiggle", wiggle, reads={"c"}, writes={"v"}), rec)
    run(graph, space, math.inf, 12)
    graph.close()
    original = load_trajectory(path)

    fresh = counter_space()
    seen = []
    player = replay(path, fresh)
    from statebus.blocks import ControlBlock as CB

    probe = CB("probe", lambda s: seen.append(s.read("v").values.tobytes()) and False, reads={"v"})
    report = run(Zip(player, probe), fresh, math.inf)
    assert report.ticks == 12 and report.done
    assert seen == [row.tobytes() for row in original.data["v"]]


def test_replay_empty_recording_is_done_at_once(tmp_path):
    path = tmp_path / "empty.traj"
    TrajectoryWriter(path, [("c", "f64", (1,))]).close()
    space = counter_space()
    player = replay(path, space)
    assert player(space) is True
    assert space.read("c").seq == 0


def test_replay_dtype_mismatch(tmp_path):
    path = tmp_path / "q.traj"
    with TrajectoryWriter(path, [("q", "f32", (3,))]) as w:
        w.append(0, 0, [np.zeros(3)])
    space = StateSpace()
    space.register("q", "f64", [3])
    with pytest.raises(SchemaMismatch):
        replay(path, space)
    with pytest.raises(SchemaMismatch):
        replay(path, StateSpace())


# stepwise MSE --------------------------------------------------------------------------------


def test_mse_identical_is_zero():
    T = np.random.default_rng(0).standard_normal((9, 4))
    per, agg = stepwise_mse(T, T.copy())
    assert agg == 0 and not per.any()


def test_mse_constant_offset():
    per, agg = stepwise_mse(np.zeros((6, 3)), np.full((6, 3), 0.5))
    assert per.tolist() == [0.25] * 3 and agg == 0.25


def test_mse_matches_brute_force():
    rng = np.random.default_rng(7)
    T, H = rng.standard_normal((7, 3)), rng.standard_normal((7, 3))
    per, agg = stepwise_mse(T, H)
    per_ref, agg_ref = brute_mse(T, H)
    np.testing.assert_allclose(per, per_ref, rtol=1e-13)
    assert agg == pytest.approx(agg_ref, rel=1e-13)


def test_mse_length_mismatch():
    with pytest.raises(LengthMismatch):
        stepwise_mse(np.zeros((3, 2)), np.zeros((4, 2)))


# unfolded loss ----------------------------------------------------------------------------------


def test_unfolded_identical_is_zero():
    T = np.random.default_rng(3).standard_normal((20, 5))
    assert unfolded_loss(T, T, max_shift=4) == (0.0, 0, 0)


def test_unfolded_hand_example():
    T = np.array([[0.0], [1.0], [2.0], [3.0]])
    H = np.array([[1.0], [2.0], [3.0], [4.0]])
    fwd, bwd = shifted_terms(T, H, 1)
    assert fwd.tolist() == [1.0, 0.0]
    # backward: |T[i] - H[i+j]| = 1 + j over every overlapping frame
    assert bwd.tolist() == [1.0, 2.0]
    loss, jf, jb = unfolded_loss(T, H, max_shift=1)
    assert (loss, jf, jb) == (1.0, 1, 0)


def test_unfolded_ramp_advanced_by_two_finds_forward_shift():
    T = np.arange(30, dtype=np.float64).reshape(-1, 1)
    H = np.concatenate([T[2:], np.full((2, 1), T[-1, 0])])  # advanced by two, tail held
    loss, jf, jb = unfolded_loss(T, H, max_shift=5)
    fwd, _ = shifted_terms(T, H, 5)
    assert jf == 2 and fwd[2] == 0.0
    ref = brute_unfolded(T, H, 5)
    assert (loss, jf, jb) == pytest.approx(ref[:3], rel=1e-12)


def test_unfolded_window_too_large():
    with pytest.raises(WindowTooLarge):
        unfolded_loss(np.zeros((4, 1)), np.zeros((4, 1)), max_shift=4)


def test_default_window():
    T = np.zeros((400, 1))
    loss, jf, jb = unfolded_loss(T, T)
    fwd, _ = shifted_terms(T, T, 50)
    assert len(fwd) == 51 and loss == 0


def instance():
    return st.tuples(st.integers(2, 32), st.integers(1, 8), st.integers(0, 8), st.integers(0, 2**32 - 1))


@settings(max_examples=200, deadline=None)
@given(instance(), st.booleans())
def test_unfolded_matches_brute_force(params, squared):
    n, d, J, seed = params
    J = min(J, n - 1)
    rng = np.random.default_rng(seed)
    n_hat = int(rng.integers(J + 1, 33))
    T, H = rng.standard_normal((n, d)), rng.standard_normal((n_hat, d))
    loss, jf, jb = unfolded_loss(T, H, max_shift=min(J, n_hat - 1), squared=squared)
    ref_loss, ref_jf, ref_jb, _, _ = brute_unfolded(T, H, min(J, n_hat - 1), squared)
    assert loss == pytest.approx(ref_loss, rel=1e-12)
    assert (jf, jb) == (ref_jf, ref_jb)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(3, 24), st.integers(1, 4)), elements=st.floats(-100, 100)),
       arrays(np.float64, st.tuples(st.integers(3, 24), st.integers(1, 4)), elements=st.floats(-100, 100)))
def test_unfolded_symmetric(T, H):
    if T.shape[1] != H.shape[1]:
        H = np.resize(H, (len(H), T.shape[1]))
    J = min(len(T), len(H)) - 1
    a, jf, jb = unfolded_loss(T, H, max_shift=J)
    b, jf2, jb2 = unfolded_loss(H, T, max_shift=J)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)
    assert (jf, jb) == (jb2, jf2)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 30), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_unfolded_bounded_by_unshifted_terms(n, d, seed):
    rng = np.random.default_rng(seed)
    T, H = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    loss, _, _ = unfolded_loss(T, H, max_shift=min(3, n - 1))
    l2_at_zero = float(np.linalg.norm(T - H, axis=1).mean())
    assert loss <= 2 * l2_at_zero + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 8), st.integers(0, 2**32 - 1))
def test_shift_recovered_per_direction(s, seed):
    rng = np.random.default_rng(seed)
    base = np.cumsum(rng.standard_normal((40 + s, 3)), axis=0)
    T, H = base[:40], base[s : 40 + s]
    fwd, bwd = shifted_terms(T, H, 8)
    _, jf, _ = unfolded_loss(T, H, max_shift=8)
    _, _, jb = unfolded_loss(H, T, max_shift=8)
    assert jf == s and fwd[s] == 0.0
    assert jb == s


# analyzer ------------------------------------------------------------------------------------------


def traj(labels, data, n):
    return Trajectory(labels, np.arange(n), np.arange(n) * 20_000_000, data)


def test_analyze_disjoint_labels():
    a = traj([("x", "f64", (1,))], {"x": np.zeros((3, 1))}, 3)
    b = traj([("y", "f64", (1,))], {"y": np.zeros((3, 1))}, 3)
    with pytest.raises(NoCommonLabels):
        analyze(a, b)


def test_analyze_ranks_perturbed_element(tmp_path):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((20, 6))
    y = x.copy()
    y[:, 3] += 0.5
    a = traj([("q", "f64", (6,))], {"q": x}, 20)
    b = traj([("q", "f64", (6,))], {"q": y}, 20)
    report = analyze(a, b, 5)
    assert report.per_label["q"].ranking()[0] == 3
    files = report.write(tmp_path / "gap")
    assert (tmp_path / "gap" / "report.txt") in files
    rows = (tmp_path / "gap" / "q_3.csv").read_text().splitlines()
    assert rows[0] == "tick,abs_error"
    assert len(rows) == 21 and float(rows[1].split(",")[1]) == pytest.approx(0.5)


def test_analyze_self_is_zero():
    x = np.random.default_rng(2).standard_normal((30, 4))
    a = traj([("q", "f64", (4,))], {"q": x}, 30)
    report = analyze(a, a, 5)
    gap = report.per_label["q"]
    assert gap.stepwise_mse == 0 and gap.unfolded_loss == 0
    assert not gap.per_element_mse.any()


def test_analyze_schema_mismatch():
    a = traj([("q", "f64", (2,))], {"q": np.zeros((4, 2))}, 4)
    b = traj([("q", "f64", (3,))], {"q": np.zeros((4, 3))}, 4)
    with pytest.raises(SchemaMismatch):
        analyze(a, b, 1)

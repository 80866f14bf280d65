"""Platform adapters exposing recv/send/close blocks over a state space.

Each platform owns two raw labels in its native joint order:

* ``<name>.state`` f64 ``[3, dof]`` rows ``q, dq, tau``, stamped with the
  platform's own clock (the only writer is the platform).
* ``<name>.cmd`` f64 ``[5, dof]`` rows ``q_des, dq_des, tau_ff, kp, kd``
  (the only writer is the send block on the executor thread).

``recv`` copies the latest state into the workflow's ``q``/``dq`` labels and
``send`` packs the workflow's command labels into ``<name>.cmd``, both through
the joint-order gather produced by :func:`align_params`.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from statebus.blocks import ControlBlock
from statebus.errors import JointMismatch, NonFiniteInput, ParseError, SpecInvalid
from statebus.state import IndexMap, StateSpace

WORKFLOW_LABELS = ("q", "dq", "q_des", "dq_des", "tau_ff", "kp", "kd")
COMMAND_LABELS = ("q_des", "dq_des", "tau_ff", "kp", "kd")


def _per_joint(value, dof: int, what: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(dof, float(arr))
    if arr.shape != (dof,):
        raise SpecInvalid(f"{what} needs {dof} entries, got shape {arr.shape}")
    return arr


@dataclass
class PlatformSpec:
    name: str
    joint_names: list[str]
    kp: np.ndarray
    kd: np.ndarray
    torque_limit: np.ndarray
    position_limits: np.ndarray
    state_rate_hz: float = 500.0
    inertia: np.ndarray | float = 1.0
    damping: np.ndarray | float = 0.1
    joint_order_map: IndexMap | None = None

    def __post_init__(self):
        self.joint_names = list(self.joint_names)
        dof = len(self.joint_names)
        if dof == 0:
            raise SpecInvalid("platform has no joints")
        if len(set(self.joint_names)) != dof:
            raise SpecInvalid("duplicate joint names")
        self.kp = _per_joint(self.kp, dof, "kp")
        self.kd = _per_joint(self.kd, dof, "kd")
        self.torque_limit = _per_joint(self.torque_limit, dof, "torque_limit")
        self.inertia = _per_joint(self.inertia, dof, "inertia")
        self.damping = _per_joint(self.damping, dof, "damping")
        limits = np.asarray(self.position_limits, dtype=np.float64)
        if limits.shape != (dof, 2):
            raise SpecInvalid(f"position_limits needs shape ({dof}, 2), got {limits.shape}")
        self.position_limits = limits
        if (self.kp < 0).any() or (self.kd < 0).any():
            raise SpecInvalid("gains must be non-negative")
        if (self.torque_limit <= 0).any():
            raise SpecInvalid("torque limits must be positive")
        if (self.inertia <= 0).any() or (self.damping < 0).any():
            raise SpecInvalid("inertia must be positive and damping non-negative")
        if not (limits[:, 0] < limits[:, 1]).all():
            raise SpecInvalid("each position limit needs lo < hi")
        if not self.state_rate_hz > 0:
            raise SpecInvalid("state_rate_hz must be positive")

    @property
    def dof(self) -> int:
        return len(self.joint_names)

    @classmethod
    def parse(cls, text: str) -> "PlatformSpec":
        section = None
        header: dict[str, str] = {}
        joints: list[tuple[str, list[float]]] = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            col = raw.index(line[0]) + 1
            if line.startswith("["):
                if line not in ("[platform]", "[joints]"):
                    raise ParseError(f"unknown section {line}", lineno, col)
                section = line[1:-1]
            elif section == "platform":
                key, sep, value = line.partition("=")
                key = key.strip()
                if not sep or key not in ("name", "state_rate_hz", "inertia", "damping"):
                    raise ParseError(f"unknown platform key {key!r}", lineno, col)
                header[key] = value.strip()
            elif section == "joints":
                parts = line.split()
                if len(parts) != 6:
                    raise ParseError("joint line needs: name kp kd tau_max lo hi", lineno, col)
                try:
                    joints.append((parts[0], [float(p) for p in parts[1:]]))
                except ValueError as exc:
                    raise ParseError(str(exc), lineno, col) from None
            else:
                raise ParseError("content outside a section", lineno, col)
        if "name" not in header:
            raise ParseError("[platform] needs a name", 0, 0)
        values = np.array([v for _, v in joints], dtype=np.float64).reshape(-1, 5)
        try:
            return cls(
                name=header["name"],
                joint_names=[n for n, _ in joints],
                kp=values[:, 0],
                kd=values[:, 1],
                torque_limit=values[:, 2],
                position_limits=values[:, 3:5],
                state_rate_hz=float(header.get("state_rate_hz", 500.0)),
                inertia=float(header.get("inertia", 1.0)),
                damping=float(header.get("damping", 0.1)),
            )
        except ValueError as exc:
            raise ParseError(str(exc), 0, 0) from None

    @classmethod
    def load(cls, path) -> "PlatformSpec":
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        lines = ["[platform]", f"name = {self.name}", f"state_rate_hz = {self.state_rate_hz:g}"]
        if np.ptp(self.inertia) == 0 and np.ptp(self.damping) == 0:
            lines += [f"inertia = {float(self.inertia[0])!r}", f"damping = {float(self.damping[0])!r}"]
        lines += ["", "[joints]", "# name kp kd tau_max lo hi"]
        for i, name in enumerate(self.joint_names):
            row = (self.kp[i], self.kd[i], self.torque_limit[i], *self.position_limits[i])
            lines.append(" ".join([name, *(repr(float(v)) for v in row)]))
        return "\n".join(lines) + "\n"


@dataclass
class SimJointState:
    q: np.ndarray
    dq: np.ndarray
    tau_applied: np.ndarray
    sim_time_ns: int = 0

    @classmethod
    def rest(cls, dof: int, q=None) -> "SimJointState":
        q = np.zeros(dof) if q is None else np.asarray(q, dtype=np.float64).copy()
        return cls(q, np.zeros(dof), np.zeros(dof), 0)


def sim_step(state: SimJointState, spec: PlatformSpec, q_des, dq_des, tau_ff, dt: float,
             kp=None, kd=None) -> SimJointState:
    """One semi-implicit Euler step of independent PD-driven joints.

    The PD torque is clamped to the torque limit, velocity is integrated
    first and the new velocity moves the position. A joint that reaches a
    position limit is pinned there with zero velocity.
    """
    if not dt > 0:
        raise NonFiniteInput(f"dt must be positive, got {dt}")
    kp = spec.kp if kp is None else np.asarray(kp, dtype=np.float64)
    kd = spec.kd if kd is None else np.asarray(kd, dtype=np.float64)
    q_des = np.asarray(q_des, dtype=np.float64)
    dq_des = np.asarray(dq_des, dtype=np.float64)
    tau_ff = np.asarray(tau_ff, dtype=np.float64)
    for arr in (q_des, dq_des, tau_ff, kp, kd, state.q, state.dq):
        if not np.isfinite(arr).all():
            raise NonFiniteInput("non-finite value in joint state or command")
    tau = kp * (q_des - state.q) + kd * (dq_des - state.dq) + tau_ff
    tau = np.clip(tau, -spec.torque_limit, spec.torque_limit)
    dq = state.dq + (tau - spec.damping * state.dq) / spec.inertia * dt
    q = state.q + dq * dt
    lo, hi = spec.position_limits[:, 0], spec.position_limits[:, 1]
    stopped = (q < lo) | (q > hi)
    q = np.clip(q, lo, hi)
    dq = np.where(stopped, 0.0, dq)
    return SimJointState(q, dq, tau, state.sim_time_ns + int(round(dt * 1e9)))


@dataclass
class Alignment:
    """Result of matching workflow joint names to a platform's joints."""

    spec: PlatformSpec
    to_platform: IndexMap
    to_workflow: IndexMap
    kp: np.ndarray = field(repr=False)
    kd: np.ndarray = field(repr=False)
    torque_limit: np.ndarray = field(repr=False)
    position_limits: np.ndarray = field(repr=False)


def align_params(workflow, platform: PlatformSpec) -> Alignment:
    """Build joint-order gathers between a workflow's joint order and the platform's.

    ``workflow`` is a list of joint names or any object with ``joint_names``.
    Gains and limits are reported in workflow order.
    """
    names = list(getattr(workflow, "joint_names", workflow))
    if set(names) != set(platform.joint_names) or len(names) != platform.dof:
        raise JointMismatch(
            missing=set(names) - set(platform.joint_names),
            extra=set(platform.joint_names) - set(names),
        )
    wf_index = {name: i for i, name in enumerate(names)}
    pf_index = {name: i for i, name in enumerate(platform.joint_names)}
    to_platform = IndexMap("workflow", platform.name, [wf_index[n] for n in platform.joint_names])
    to_workflow = IndexMap(platform.name, "workflow", [pf_index[n] for n in names])
    g = to_workflow.gather
    return Alignment(
        spec=replace(platform, joint_order_map=to_platform),
        to_platform=to_platform,
        to_workflow=to_workflow,
        kp=platform.kp[g],
        kd=platform.kd[g],
        torque_limit=platform.torque_limit[g],
        position_limits=platform.position_limits[g],
    )


def _ensure_label(space: StateSpace, label: str, dtype: str, shape) -> None:
    if label in space:
        entry = space[label]
        if entry.dtype != dtype or entry.shape != tuple(shape):
            raise SpecInvalid(f"{label!r} already registered as {entry.dtype}{list(entry.shape)}")
    else:
        space.register(label, dtype, shape)


class Platform:
    """Base adapter; subclasses define how a command turns into the next state."""

    kind = "base"

    def __init__(self, spec: PlatformSpec, space: StateSpace, *, workflow_joints=None,
                 threaded: bool = False, control_rate_hz: float = 50.0,
                 clock_offset_ns: int = 0, publish_gains: bool = True):
        self.spec = spec
        self.space = space
        dof = spec.dof
        for label in WORKFLOW_LABELS:
            if label not in space:
                raise SpecInvalid(f"workflow label {label!r} is not registered")
            if space[label].shape != (dof,):
                raise SpecInvalid(f"{label!r} has shape {list(space[label].shape)}, platform needs [{dof}]")
        if workflow_joints is not None:
            alignment = align_params(workflow_joints, spec)
            to_platform, to_workflow = alignment.to_platform.gather, alignment.to_workflow.gather
        elif spec.joint_order_map is not None:
            to_platform = spec.joint_order_map.gather
            to_workflow = spec.joint_order_map.inverse().gather
        else:
            to_platform = to_workflow = np.arange(dof)
        self.to_platform = np.asarray(to_platform)
        self.to_workflow = np.asarray(to_workflow)
        self.state_label = f"{spec.name}.state"
        self.command_label = f"{spec.name}.cmd"
        _ensure_label(space, self.state_label, "f64", (3, dof))
        _ensure_label(space, self.command_label, "f64", (5, dof))
        self.threaded = threaded
        self.substeps = max(1, int(round(spec.state_rate_hz / control_rate_hz)))
        self.dt = 1.0 / spec.state_rate_hz
        self.clock_offset_ns = int(clock_offset_ns)
        self.last_state_stamp: int | None = None
        self.last_recv_ns: int | None = None
        self.last_send_ns: int | None = None
        self.steps = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()

        if publish_gains:
            space.write("kp", spec.kp[self.to_workflow])
            space.write("kd", spec.kd[self.to_workflow])
        self._initial_command()
        self._publish()

        self.recv_block = ControlBlock(
            f"{spec.name}.recv", self._recv, reads={self.state_label}, writes={"q", "dq"},
        )
        self.send_block = ControlBlock(
            f"{spec.name}.send", self._send, reads=set(COMMAND_LABELS), writes={self.command_label},
        )
        self.close_block = ControlBlock(f"{spec.name}.close", self._close_step, stateful=True)
        if threaded:
            self.start()

    # clocks ----------------------------------------------------------------
    def platform_clock_ns(self) -> int:
        return time.monotonic_ns() + self.clock_offset_ns

    # blocks ----------------------------------------------------------------
    @property
    def blocks(self) -> tuple[ControlBlock, ControlBlock, ControlBlock]:
        return self.recv_block, self.send_block, self.close_block

    def _recv(self, space) -> bool:
        snap = space.read(self.state_label)
        self.last_recv_ns = time.monotonic_ns()
        self.last_state_stamp = snap.timestamp_ns
        state = snap.values
        space.write("q", state[0][self.to_workflow])
        space.write("dq", state[1][self.to_workflow])
        return False

    def _send(self, space) -> bool:
        rows = [space.read(label).values[self.to_platform] for label in COMMAND_LABELS]
        space.write(self.command_label, np.stack(rows).astype(np.float64))
        self.last_send_ns = time.monotonic_ns()
        if not self.threaded:
            with self._lock:
                self.advance(self.substeps)
        return False

    def _close_step(self, space) -> bool:
        self.shutdown()
        return True

    # platform side -----------------------------------------------------------
    def _initial_command(self) -> None:
        dof = self.spec.dof
        self.space.write(
            self.command_label,
            np.stack([self.initial_q(), np.zeros(dof), np.zeros(dof), self.spec.kp, self.spec.kd]),
        )

    def initial_q(self) -> np.ndarray:
        return np.zeros(self.spec.dof)

    def command(self) -> np.ndarray:
        return self.space.read(self.command_label).values

    def advance(self, steps: int) -> None:
        for _ in range(steps):
            self.physics_step(self.command())
            self.steps += 1
        self._publish()

    def physics_step(self, cmd: np.ndarray) -> None:
        raise NotImplementedError

    def native_state(self) -> np.ndarray:
        raise NotImplementedError

    def _publish(self) -> None:
        self.space.write(self.state_label, self.native_state(), timestamp_ns=self.platform_clock_ns())

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._produce, daemon=True, name=f"{self.spec.name}-producer")
        self._thread.start()

    def _produce(self) -> None:
        period = self.dt
        start = time.perf_counter()
        n = 0
        while not self._stop.is_set():
            n += 1
            delay = start + n * period - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            with self._lock:
                self.advance(1)

    def shutdown(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
            self._thread = None

    close = shutdown


class SimPlatform(Platform):
    """Independent PD-driven joints integrated at ``state_rate_hz``."""

    kind = "sim"

    def __init__(self, spec: PlatformSpec, space: StateSpace, *, init_noise: float = 0.0,
                 seed: int = 0, q0=None, **kwargs):
        rng = np.random.default_rng(seed)
        base = np.zeros(spec.dof) if q0 is None else np.asarray(q0, dtype=np.float64)
        q = base + rng.uniform(-init_noise, init_noise, spec.dof) if init_noise else base.copy()
        q = np.clip(q, spec.position_limits[:, 0], spec.position_limits[:, 1])
        self.state = SimJointState.rest(spec.dof, q)
        super().__init__(spec, space, **kwargs)

    def initial_q(self) -> np.ndarray:
        return self.state.q.copy()

    def physics_step(self, cmd: np.ndarray) -> None:
        self.state = sim_step(self.state, self.spec, cmd[0], cmd[1], cmd[2], self.dt, kp=cmd[3], kd=cmd[4])

    def native_state(self) -> np.ndarray:
        return np.stack([self.state.q, self.state.dq, self.state.tau_applied])


class LoopbackPlatform(Platform):
    """Echoes commands back as state: ``q, dq, tau`` = ``q_des, dq_des, tau_ff``.

    ``echo_delay`` counts platform ticks between a command reaching the
    platform and showing up in its state.
    """

    kind = "loopback"

    def __init__(self, spec: PlatformSpec, space: StateSpace, *, echo_delay: int = 0, **kwargs):
        if echo_delay < 0:
            raise SpecInvalid("echo_delay must be >= 0")
        self.echo_delay = echo_delay
        self._pipeline: deque = deque(maxlen=echo_delay + 1)
        self._echo = np.zeros((3, spec.dof))
        super().__init__(spec, space, **kwargs)

    def physics_step(self, cmd: np.ndarray) -> None:
        self._pipeline.append(np.array(cmd[:3]))
        if len(self._pipeline) == self._pipeline.maxlen:
            self._echo = self._pipeline[0]

    def native_state(self) -> np.ndarray:
        return self._echo


PLATFORM_KINDS = {"sim": SimPlatform, "loopback": LoopbackPlatform}


def make_platform(spec: PlatformSpec, space: StateSpace, kind: str = "sim", **kwargs) -> Platform:
    """Create a platform adapter; its ``recv_block``/``send_block``/``close_block`` go into a graph."""
    try:
        cls = PLATFORM_KINDS[kind]
    except KeyError:
        raise SpecInvalid(f"unknown platform kind {kind!r}; known: {sorted(PLATFORM_KINDS)}") from None
    return cls(spec, space, **kwargs)


def register_workflow_labels(space: StateSpace, dof: int, dtype: str = "f64") -> None:
    """Register the seven per-joint workflow labels a platform expects."""
    for label in WORKFLOW_LABELS:
        if label not in space:
            space.register(label, dtype, [dof])

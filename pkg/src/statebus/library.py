"""Builtin control blocks addressable by name from workflow configs."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from statebus.blocks import ControlBlock
from statebus.errors import SpecInvalid


def counter(label: str = "c", limit: float | None = None, step: float = 1) -> ControlBlock:
    """``label += step`` each tick; done once every element reaches ``limit``."""

    def run(space) -> bool:
        value = space.read(label).values + step
        space.write(label, value)
        return limit is not None and bool((value >= limit).all())

    return ControlBlock(f"counter:{label}", run, reads={label}, writes={label})


def identity_control() -> ControlBlock:
    """Hold position: ``q_des = q``, zero velocity target and feed-forward torque."""

    def run(space) -> bool:
        q = space.read("q").values
        space.write("q_des", q)
        space.write("dq_des", np.zeros_like(q))
        space.write("tau_ff", np.zeros_like(q))
        return False

    return ControlBlock("identity_control", run, reads={"q"}, writes={"q_des", "dq_des", "tau_ff"})


def sine_control(amp: float = 0.2, freq: float = 0.5, rate: float = 50.0) -> ControlBlock:
    """Open-loop sinusoid around the first observed ``q``; joint ``i`` lags by ``i/4`` rad."""
    state = {"k": 0, "q0": None}

    def run(space) -> bool:
        if state["q0"] is None:
            state["q0"] = np.array(space.read("q").values, dtype=np.float64)
        q0 = state["q0"]
        t = state["k"] / rate
        phase = np.arange(q0.size) * 0.25
        omega = 2 * math.pi * freq
        space.write("q_des", q0 + amp * np.sin(omega * t + phase))
        space.write("dq_des", amp * omega * np.cos(omega * t + phase))
        space.write("tau_ff", np.zeros_like(q0))
        state["k"] += 1
        return False

    def reset():
        state["k"] = 0
        state["q0"] = None

    return ControlBlock(
        "sine_control", run, reads={"q"}, writes={"q_des", "dq_des", "tau_ff"}, stateful=True, reset=reset
    )


def set_flag(label: str, value: float = 1) -> ControlBlock:
    """Write ``value`` into every element of ``label`` and finish immediately."""

    def run(space) -> bool:
        space.write(label, np.full(space[label].shape, value))
        return True

    return ControlBlock(f"set:{label}", run, writes={label})


BlockFactory = Callable[..., ControlBlock]
_REGISTRY: dict[str, BlockFactory] = {}


def register_block(name: str, factory: BlockFactory) -> None:
    """Make ``factory(ctx, **args)`` available to configs as ``block(name ...)``."""
    _REGISTRY[name] = factory


def lookup_block(name: str) -> BlockFactory:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise SpecInvalid(f"unknown block {name!r}; known: {sorted(_REGISTRY)}") from None


def known_blocks() -> list[str]:
    return sorted(_REGISTRY)


def _num(args, key, default=None):
    return float(args[key]) if key in args else default


def _platform(ctx):
    if ctx.platform is None:
        raise SpecInvalid("this block needs a [platform] section")
    return ctx.platform


def _path(ctx, value):
    from pathlib import Path

    path = Path(value)
    return path if path.is_absolute() else ctx.base_dir / path


register_block("counter", lambda ctx, **a: counter(a.get("label", "c"), _num(a, "limit"), _num(a, "step", 1)))
register_block("identity_control", lambda ctx, **a: identity_control())
register_block(
    "sine_control",
    lambda ctx, **a: sine_control(_num(a, "amp", 0.2), _num(a, "freq", 0.5), _num(a, "rate", ctx.rate_hz)),
)
register_block("set", lambda ctx, **a: set_flag(a["label"], _num(a, "value", 1)))
register_block("recv", lambda ctx, **a: _platform(ctx).recv_block)
register_block("send", lambda ctx, **a: _platform(ctx).send_block)
register_block("close", lambda ctx, **a: _platform(ctx).close_block)


def _recorder(ctx, **a):
    from statebus.replay import record

    return record(ctx.space, [s for s in a["labels"].split(",") if s], _path(ctx, a["path"]))


def _replayer(ctx, **a):
    from statebus.replay import replay

    labels = a["labels"].split(",") if "labels" in a else None
    if "path" in a:
        path = _path(ctx, a["path"])
    elif getattr(ctx, "recording", None) is not None:
        path = ctx.recording
    else:
        raise SpecInvalid("replayer needs path=... or a recording given on the command line")
    return replay(path, ctx.space, labels)


register_block("recorder", _recorder)
register_block("replayer", _replayer)

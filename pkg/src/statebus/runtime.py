"""Turn a parsed workflow config into a live space, platform and execution graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from statebus import library
from statebus.blocks import Chain, Leaf, Loop, Node, RunReport, StepTrace, Zip, run, validate
from statebus.config import NodeSpec, WorkflowConfig
from statebus.errors import GraphError, SpecInvalid
from statebus.platforms import Platform, PlatformSpec, make_platform, register_workflow_labels
from statebus.state import StateSpace, make_backend, parse_backend


@dataclass
class BuildContext:
    """What block factories may look at while a graph is being built."""

    space: StateSpace
    platform: Platform | None
    rate_hz: float
    base_dir: Path
    recording: Path | None = None
    blocks: list = field(default_factory=list)


@dataclass
class Runtime:
    config: WorkflowConfig
    space: StateSpace
    platform: Platform | None
    graph: Node
    context: BuildContext

    def run(self, trace: StepTrace | None = None, max_ticks: int | None = None) -> RunReport:
        ticks = max_ticks if max_ticks is not None else self.config.run.max_ticks
        return run(self.graph, self.space, self.config.run.rate, ticks, trace=trace)

    def close(self) -> None:
        try:
            self.graph.close()
        finally:
            if self.platform is not None:
                self.platform.shutdown()
            self.space.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _build_node(spec: NodeSpec, ctx: BuildContext) -> Node:
    if spec.kind == "block":
        blk = library.lookup_block(spec.name)(ctx, **spec.args)
        ctx.blocks.append(blk)
        return Leaf(blk)
    children = [_build_node(child, ctx) for child in spec.children]
    if spec.kind == "loop":
        try:
            return Loop(children[0], spec.until)
        except ValueError as exc:
            raise SpecInvalid(f"line {spec.line}: {exc}") from None
    return Zip(*children) if spec.kind == "zip" else Chain(*children)


def _make_space(config: WorkflowConfig) -> StateSpace:
    try:
        kind = parse_backend(config.run.backend)
    except ValueError as exc:
        raise SpecInvalid(str(exc)) from None
    space = StateSpace(make_backend(kind))
    for decl in config.states:
        init = None
        if decl.init is not None:
            size = int(np.prod(decl.shape))
            init = np.asarray(decl.init)
            if init.size == 1:
                init = np.full(size, init[0])
            elif init.size != size:
                space.close()
                raise SpecInvalid(f"{decl.label}: init has {init.size} values, shape needs {size}")
        space.register(decl.label, decl.dtype, decl.shape, init=init)
    return space


def _make_platform(config: WorkflowConfig, space: StateSpace, base_dir: Path) -> Platform:
    pc = config.platform
    spec_path = Path(pc.spec)
    if not spec_path.is_absolute():
        spec_path = base_dir / spec_path
    spec = PlatformSpec.load(spec_path)
    register_workflow_labels(space, spec.dof)
    kwargs = dict(
        workflow_joints=list(pc.joints) if pc.joints else None,
        threaded=pc.threaded,
        control_rate_hz=config.run.rate,
        clock_offset_ns=pc.clock_offset_us * 1000,
    )
    if pc.kind == "sim":
        kwargs.update(seed=pc.seed, init_noise=pc.init_noise)
    elif pc.kind == "loopback":
        kwargs.update(echo_delay=pc.echo_delay)
    return make_platform(spec, space, pc.kind, **kwargs)


def build_runtime(config: WorkflowConfig, base_dir=".", *, recording=None, extra=()) -> Runtime:
    """Build everything a config describes; ``extra`` nodes are zipped after the graph.

    Raises :class:`GraphError` when the built graph does not validate.
    """
    base_dir = Path(base_dir)
    space = _make_space(config)
    platform = None
    try:
        if config.platform is not None:
            platform = _make_platform(config, space, base_dir)
        ctx = BuildContext(space, platform, config.run.rate, base_dir,
                           Path(recording) if recording is not None else None)
        graph = _build_node(config.graph, ctx)
        for make_extra in extra:
            graph = Zip(graph, make_extra(ctx))
        issues = validate(graph, space)
        if issues:
            graph.close()
            raise GraphError("graph does not validate: " + ", ".join(map(str, issues)))
    except BaseException:
        if platform is not None:
            platform.shutdown()
        space.close()
        raise
    return Runtime(config, space, platform, graph, ctx)

"""Control blocks and the loop/zip/chain combinators that compose them.

A control block reads some labels of the state space, writes others and
returns ``True`` once it is done. Graph nodes nest blocks:

* ``Loop(child, until)`` steps ``child`` every tick until the predicate holds
  after the child's step; a child that finishes first is reset and restarted.
* ``Zip(a, b, ...)`` steps every child once per tick in declaration order and
  is done on the first tick any child is done.
* ``Chain(a, b, ...)`` steps the current child until it is done, then moves
  on to the next one on the following tick.

The executor in :func:`run` steps the root once per period on one thread.
"""

from __future__ import annotations

import inspect
import math
import operator
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, NamedTuple

from statebus.errors import BlockPanic, GraphError, RateInvalid, UndeclaredAccess, UnknownLabel


def _arity(fn: Callable) -> int:
    try:
        params = inspect.signature(fn).parameters.values()
    except (TypeError, ValueError):
        return 1
    return sum(
        1 for p in params
        if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD) and p.default is p.empty
    )


def _bind_space(fn: Callable) -> Callable:
    """Accept both ``fn(space)`` and parameter-less ``fn()`` callables."""
    if _arity(fn) == 0:
        return lambda space: fn()
    return fn


@dataclass(eq=False)
class ControlBlock:
    """A steppable unit: ``step(space) -> done``.

    ``reads``/``writes`` declare the labels the block touches. Blocks that
    keep internal state between steps (file cursors, counters) set
    ``stateful`` and may provide ``reset`` and ``close`` hooks.
    """

    name: str
    step: Callable
    reads: frozenset = frozenset()
    writes: frozenset = frozenset()
    stateful: bool = False
    reset: Callable[[], None] | None = None
    close: Callable[[], None] | None = None

    def __post_init__(self):
        self.reads = frozenset(self.reads)
        self.writes = frozenset(self.writes)
        self._call = _bind_space(self.step)

    def __call__(self, space) -> bool:
        return bool(self._call(space))


def block(name=None, *, reads=(), writes=(), stateful=False):
    """Decorator turning a function into a :class:`ControlBlock`."""

    def wrap(fn):
        return ControlBlock(name or fn.__name__, fn, frozenset(reads), frozenset(writes), stateful)

    return wrap


class StepTrace:
    """Ordered ``(tick, block_name)`` record of every leaf step."""

    def __init__(self):
        self.entries: list[tuple[int, str]] = []

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def names(self) -> list[str]:
        return [name for _, name in self.entries]

    def export(self) -> str:
        return "".join(f"{tick},{name}\n" for tick, name in self.entries)

    @classmethod
    def parse(cls, text: str) -> "StepTrace":
        trace = cls()
        for line in text.splitlines():
            if line.strip():
                tick, name = line.split(",", 1)
                trace.entries.append((int(tick), name))
        return trace


@dataclass
class TickContext:
    tick: int = 0
    trace: StepTrace | None = None
    check_access: bool = False


class ScopedSpace:
    """View of a space that rejects access outside a block's declared labels."""

    def __init__(self, space, blk: ControlBlock):
        self._space = space
        self._block = blk

    def read(self, label):
        if label not in self._block.reads:
            raise UndeclaredAccess(f"block {self._block.name!r} read undeclared label {label!r}")
        return self._space.read(label)

    def write(self, label, values, timestamp_ns=None):
        if label not in self._block.writes:
            raise UndeclaredAccess(f"block {self._block.name!r} wrote undeclared label {label!r}")
        return self._space.write(label, values, timestamp_ns)

    def apply_map(self, imap):
        self.read(imap.source_label)
        if imap.target_label not in self._block.writes:
            raise UndeclaredAccess(
                f"block {self._block.name!r} wrote undeclared label {imap.target_label!r}"
            )
        return self._space.apply_map(imap)

    def __getitem__(self, label):
        return self._space[label]

    def __contains__(self, label):
        return label in self._space


class Node:
    """Base of graph nodes; composites hold children, leaves hold a block."""

    children: tuple["Node", ...] = ()

    def step(self, space, ctx: TickContext | None = None) -> bool:
        raise NotImplementedError

    def reset(self) -> None:
        for child in self.children:
            child.reset()

    def close(self) -> None:
        for child in self.children:
            child.close()

    def leaves(self) -> Iterator["Leaf"]:
        for child in self.children:
            yield from child.leaves()

    def reads(self) -> set[str]:
        return set().union(*(child.reads() for child in self.children))

    def writes(self) -> set[str]:
        return set().union(*(child.writes() for child in self.children))

    def depth(self) -> int:
        return 1 + max((child.depth() for child in self.children), default=0)


def as_node(item) -> Node:
    if isinstance(item, Node):
        return item
    if isinstance(item, ControlBlock):
        return Leaf(item)
    if callable(item):
        return Leaf(ControlBlock(getattr(item, "__name__", "block"), item))
    raise TypeError(f"cannot use {item!r} as a graph node")


class Leaf(Node):
    def __init__(self, blk: ControlBlock):
        self.block = blk

    def __repr__(self):
        return f"Leaf({self.block.name})"

    def step(self, space, ctx=None) -> bool:
        ctx = ctx or TickContext()
        if ctx.trace is not None:
            ctx.trace.entries.append((ctx.tick, self.block.name))
        view = ScopedSpace(space, self.block) if ctx.check_access else space
        try:
            return self.block(view)
        except (UndeclaredAccess, BlockPanic):
            raise
        except Exception as exc:
            raise BlockPanic(self.block.name, ctx.tick, exc) from exc

    def reset(self) -> None:
        if self.block.reset is not None:
            self.block.reset()

    def close(self) -> None:
        if self.block.close is not None:
            self.block.close()

    def leaves(self):
        yield self

    def reads(self):
        return set(self.block.reads)

    def writes(self):
        return set(self.block.writes)

    def depth(self):
        return 0


_COMPARE = {
    "==": operator.eq, "!=": operator.ne, "<": operator.lt,
    "<=": operator.le, ">": operator.gt, ">=": operator.ge,
}
_PREDICATE = re.compile(r"^\s*([^\s=!<>]+)\s*(?:(==|!=|<=|>=|<|>)\s*(\S+))?\s*$")


class LabelPredicate:
    """``"flag"`` (all elements truthy) or ``"label OP number"`` (all elements satisfy)."""

    def __init__(self, expr: str):
        match = _PREDICATE.match(expr)
        if not match:
            raise ValueError(f"bad predicate {expr!r}")
        self.expr = expr
        self.label, op, value = match.groups()
        self.op = _COMPARE[op] if op else None
        self.value = float(value) if op else None

    def __call__(self, space) -> bool:
        values = space.read(self.label).values
        if self.op is None:
            return bool(values.all())
        return bool(self.op(values, self.value).all())


class Loop(Node):
    def __init__(self, child, until):
        self.children = (as_node(child),)
        if isinstance(until, str):
            self.predicate = LabelPredicate(until)
        elif callable(until):
            self.predicate = until
        else:
            raise TypeError("loop predicate must be a label expression or a callable")
        self._check = _bind_space(self.predicate)

    @property
    def child(self) -> Node:
        return self.children[0]

    def __repr__(self):
        return f"Loop({self.child!r}, {getattr(self.predicate, 'expr', self.predicate)!r})"

    def step(self, space, ctx=None) -> bool:
        if self.child.step(space, ctx):
            self.child.reset()
        return bool(self._check(space))

    def reads(self):
        extra = {self.predicate.label} if isinstance(self.predicate, LabelPredicate) else set()
        return self.child.reads() | extra


class Zip(Node):
    def __init__(self, *children):
        self.children = tuple(as_node(c) for c in children)

    def __repr__(self):
        return f"Zip{self.children!r}"

    def step(self, space, ctx=None) -> bool:
        done = False
        for child in self.children:
            if child.step(space, ctx):
                done = True
        return done


class Chain(Node):
    def __init__(self, *children):
        self.children = tuple(as_node(c) for c in children)
        self._index = 0

    def __repr__(self):
        return f"Chain{self.children!r}"

    @property
    def current(self) -> int:
        return self._index

    def step(self, space, ctx=None) -> bool:
        if self._index >= len(self.children):
            self.reset()
        if self.children[self._index].step(space, ctx):
            self._index += 1
        return self._index >= len(self.children)

    def reset(self) -> None:
        self._index = 0
        super().reset()


class Issue(NamedTuple):
    kind: str
    detail: str

    def __str__(self):
        return f"{self.kind}({self.detail!r})"


def validate(graph, space) -> list[Issue]:
    """Diagnose a graph against a space without stepping it."""
    root = as_node(graph)
    issues: list[Issue] = []
    seen: set[str] = set()

    def visit(node: Node):
        if isinstance(node, Leaf):
            labels = sorted(node.reads() | node.writes())
        elif isinstance(node, Loop):
            labels = sorted(node.reads() - node.child.reads())
        else:
            labels = []
        for label in labels:
            if label not in space and label not in seen:
                seen.add(label)
                issues.append(Issue("UnknownLabel", label))
        if isinstance(node, (Zip, Chain)) and not node.children:
            issues.append(Issue("EmptyComposite", type(node).__name__))
        if isinstance(node, Zip):
            claimed: dict[str, int] = {}
            for i, child in enumerate(node.children):
                for label in sorted(child.writes()):
                    if label in claimed and claimed[label] != i:
                        issues.append(Issue("DuplicateWriter", label))
                    claimed.setdefault(label, i)
        for child in node.children:
            visit(child)

    visit(root)
    return issues


@dataclass
class RunReport:
    ticks: int = 0
    wall_time: float = 0.0
    overruns: int = 0
    done: bool = False
    rate_hz: float = math.inf
    worst_tick_s: float = 0.0
    error: BaseException | None = field(default=None, repr=False)


def run(
    graph,
    space,
    rate_hz: float,
    max_ticks: int | None = None,
    *,
    trace: StepTrace | None = None,
    check_access: bool = False,
    stop: Callable[[], bool] | None = None,
    on_tick: Callable[[int], None] | None = None,
) -> RunReport:
    """Step ``graph`` once per ``1/rate_hz`` seconds until it is done or ``max_ticks``.

    Deadlines are absolute (``start + n * period``); a late tick is not
    skipped, later ticks start immediately until the schedule catches up. A
    tick counts as an overrun when it finishes after its deadline. Pass
    ``rate_hz=math.inf`` to step back to back.
    """
    if not rate_hz > 0 or math.isnan(rate_hz):
        raise RateInvalid(f"rate must be positive, got {rate_hz}")
    root = as_node(graph)
    issues = validate(root, space)
    if issues:
        raise GraphError("graph does not validate: " + ", ".join(map(str, issues)))
    period = 0.0 if math.isinf(rate_hz) else 1.0 / rate_hz
    report = RunReport(rate_hz=rate_hz)
    ctx = TickContext(trace=trace, check_access=check_access)
    clock = time.perf_counter
    start = clock()
    tick = 0
    try:
        while max_ticks is None or tick < max_ticks:
            if stop is not None and stop():
                break
            if period:
                delay = start + tick * period - clock()
                if delay > 0:
                    time.sleep(delay)
            began = clock()
            ctx.tick = tick + 1
            done = root.step(space, ctx)
            ended = clock()
            tick += 1
            report.ticks = tick
            report.worst_tick_s = max(report.worst_tick_s, ended - began)
            if period and ended > start + tick * period:
                report.overruns += 1
            if on_tick is not None:
                on_tick(tick)
            if done:
                report.done = True
                break
    except BlockPanic as exc:
        report.error = exc
        exc.report = report
        raise
    finally:
        report.wall_time = clock() - start
    return report


def leaf_blocks(graph) -> Iterable[ControlBlock]:
    return [leaf.block for leaf in as_node(graph).leaves()]

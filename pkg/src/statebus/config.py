"""Text workflow format.

Line-oriented sections; ``#`` starts a comment::

    [states]
    q       f32 [12]
    quat    f32 [4] = 1,0,0,0

    [platform]
    kind = sim                # or loopback
    spec = h1_legs.platform   # relative to this file

    [graph]
    chain(
      loop(
        zip( block(recv) block(identity_control) block(send) block(counter label=c) )
        until "c >= 100"
      )
      block(close)
    )

    [run]
    rate = 50
    max_ticks = 200
    backend = inproc

Graph nodes are ``block(NAME key=value ...)``, ``loop(NODE until "EXPR")``,
``zip(NODE ...)`` and ``chain(NODE ...)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from statebus.errors import ParseError
from statebus.state.space import DTYPES

NODE_KINDS = ("block", "loop", "zip", "chain")
_BARE = re.compile(r"[A-Za-z0-9_.,/:+\-*]+")


@dataclass
class StateDecl:
    label: str
    dtype: str
    shape: tuple[int, ...]
    init: tuple[float, ...] | None = None


@dataclass
class PlatformConfig:
    kind: str = "sim"
    spec: str = ""
    threaded: bool = False
    echo_delay: int = 0
    clock_offset_us: int = 0
    seed: int = 0
    init_noise: float = 0.0
    joints: tuple[str, ...] | None = None


@dataclass
class RunConfig:
    rate: float = 50.0
    max_ticks: int | None = None
    backend: str = "inproc"


@dataclass
class NodeSpec:
    kind: str
    name: str = ""
    args: dict[str, str] = field(default_factory=dict)
    children: list["NodeSpec"] = field(default_factory=list)
    until: str | None = None
    line: int = field(default=0, compare=False, repr=False)
    col: int = field(default=0, compare=False, repr=False)

    def depth(self) -> int:
        if self.kind == "block":
            return 0
        return 1 + max((c.depth() for c in self.children), default=0)


@dataclass
class WorkflowConfig:
    states: list[StateDecl]
    graph: NodeSpec
    run: RunConfig = field(default_factory=RunConfig)
    platform: PlatformConfig | None = None


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _joints(text: str) -> tuple[str, ...]:
    return tuple(j for j in text.split(",") if j)


def _optional_int(text: str) -> int | None:
    return None if text.lower() == "none" else int(text)


_PLATFORM_KEYS = {
    "kind": str, "spec": str, "threaded": _bool, "echo_delay": int,
    "clock_offset_us": int, "seed": int, "init_noise": float, "joints": _joints,
}
_RUN_KEYS = {"rate": float, "max_ticks": _optional_int, "backend": str}


# graph tokenizer ------------------------------------------------------------


@dataclass
class _Token:
    kind: str  # name, string, lparen, rparen, eq, end
    text: str
    line: int
    col: int


def _tokenize(lines: list[tuple[int, str]]) -> list[_Token]:
    tokens = []
    for lineno, text in lines:
        i = 0
        while i < len(text):
            ch = text[i]
            col = i + 1
            if ch.isspace():
                i += 1
            elif ch == "#":
                break
            elif ch == "(":
                tokens.append(_Token("lparen", ch, lineno, col))
                i += 1
            elif ch == ")":
                tokens.append(_Token("rparen", ch, lineno, col))
                i += 1
            elif ch == "=":
                tokens.append(_Token("eq", ch, lineno, col))
                i += 1
            elif ch == '"':
                end = text.find('"', i + 1)
                if end < 0:
                    raise ParseError("unterminated string", lineno, col)
                tokens.append(_Token("string", text[i + 1 : end], lineno, col))
                i = end + 1
            else:
                match = _BARE.match(text, i)
                if not match:
                    raise ParseError(f"unexpected character {ch!r}", lineno, col)
                tokens.append(_Token("name", match.group(), lineno, col))
                i = match.end()
    last_line = lines[-1][0] if lines else 0
    tokens.append(_Token("end", "", last_line + 1, 1))
    return tokens


class _GraphParser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def take(self, kind: str, what: str) -> _Token:
        tok = self.peek()
        if tok.kind != kind:
            found = tok.text or "end of graph"
            raise ParseError(f"expected {what}, found {found!r}", tok.line, tok.col)
        self.pos += 1
        return tok

    def parse(self) -> NodeSpec:
        node = self.node()
        tok = self.peek()
        if tok.kind != "end":
            raise ParseError(f"trailing input {tok.text!r} after graph", tok.line, tok.col)
        return node

    def node(self) -> NodeSpec:
        head = self.take("name", "a node")
        if head.text not in NODE_KINDS:
            raise ParseError(
                f"unknown node kind {head.text!r} (expected one of {', '.join(NODE_KINDS)})",
                head.line, head.col,
            )
        self.take("lparen", "'('")
        spec = NodeSpec(head.text, line=head.line, col=head.col)
        if head.text == "block":
            spec.name = self.take("name", "a block name").text
            while self.peek().kind == "name":
                key = self.take("name", "an argument")
                self.take("eq", "'=' after argument name")
                value = self.peek()
                if value.kind not in ("name", "string"):
                    raise ParseError("expected an argument value", value.line, value.col)
                self.pos += 1
                if key.text in spec.args:
                    raise ParseError(f"duplicate argument {key.text!r}", key.line, key.col)
                spec.args[key.text] = value.text
        elif head.text == "loop":
            spec.children.append(self.node())
            kw = self.take("name", "'until'")
            if kw.text != "until":
                raise ParseError(f"expected 'until', found {kw.text!r}", kw.line, kw.col)
            spec.until = self.take("string", "a quoted predicate").text
        else:
            while self.peek().kind == "name":
                spec.children.append(self.node())
            if not spec.children:
                tok = self.peek()
                raise ParseError(f"{head.text} needs at least one child", tok.line, tok.col)
        self.take("rparen", "')'")
        return spec


# sections -------------------------------------------------------------------


def _parse_state(lineno: int, raw: str, text: str) -> StateDecl:
    col = raw.index(text[0]) + 1
    decl, _, init = text.partition("=")
    match = re.fullmatch(r"\s*(\S+)\s+(\S+)\s*\[([^\]]*)\]\s*", decl)
    if not match:
        raise ParseError("state line needs: label dtype [d0,d1,...] [= v0,v1,...]", lineno, col)
    label, dtype, dims = match.groups()
    if dtype not in DTYPES:
        raise ParseError(f"unknown dtype {dtype!r}", lineno, raw.index(dtype, col - 1) + 1)
    try:
        shape = tuple(int(d) for d in dims.split(",") if d.strip())
        values = None
        if init.strip():
            values = tuple(float(v) for v in init.strip().strip("[]").split(",") if v.strip())
    except ValueError as exc:
        raise ParseError(str(exc), lineno, col) from None
    if not shape or any(d < 1 for d in shape):
        raise ParseError(f"invalid shape [{dims}]", lineno, col)
    return StateDecl(label, dtype, shape, values)


def _parse_keys(target, table, lineno: int, raw: str, text: str, section: str) -> None:
    col = raw.index(text[0]) + 1
    key, sep, value = text.partition("=")
    key, value = key.strip(), value.strip()
    if not sep:
        raise ParseError(f"expected key = value in [{section}]", lineno, col)
    if key not in table:
        raise ParseError(f"unknown key {key!r} in [{section}]", lineno, col)
    try:
        setattr(target, key, table[key](value))
    except ValueError as exc:
        raise ParseError(f"bad value for {key}: {exc}", lineno, raw.index("=") + 2) from None


def parse_workflow(text: str) -> WorkflowConfig:
    """Parse a workflow file; every unknown section, key or node kind is a ParseError."""
    section = None
    states: list[StateDecl] = []
    seen_labels: set[str] = set()
    run = RunConfig()
    platform = None
    graph_lines: list[tuple[int, str]] = []
    seen_sections: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        text_part = raw.split("#", 1)[0].rstrip() if section != "graph" else raw.rstrip()
        stripped = text_part.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            name = stripped[1:-1]
            col = raw.index("[") + 1
            if name not in ("states", "platform", "graph", "run"):
                raise ParseError(f"unknown section [{name}]", lineno, col)
            if name in seen_sections:
                raise ParseError(f"duplicate section [{name}]", lineno, col)
            seen_sections.add(name)
            section = name
            if name == "platform":
                platform = PlatformConfig()
            continue
        if section is None:
            raise ParseError("content before the first section", lineno, raw.index(stripped[0]) + 1)
        if section == "states":
            decl = _parse_state(lineno, raw, stripped)
            if decl.label in seen_labels:
                raise ParseError(f"duplicate state {decl.label!r}", lineno, raw.index(stripped[0]) + 1)
            seen_labels.add(decl.label)
            states.append(decl)
        elif section == "platform":
            _parse_keys(platform, _PLATFORM_KEYS, lineno, raw, stripped, section)
        elif section == "run":
            _parse_keys(run, _RUN_KEYS, lineno, raw, stripped, section)
        else:
            graph_lines.append((lineno, raw))
    if not graph_lines:
        raise ParseError("missing [graph] section", 0, 0)
    graph = _GraphParser(_tokenize(graph_lines)).parse()
    if platform is not None and not platform.spec:
        raise ParseError("[platform] needs a spec path", 0, 0)
    return WorkflowConfig(states, graph, run, platform)


def apply_override(config: WorkflowConfig, assignment: str) -> None:
    """Apply ``section.key=value`` (sections ``run`` and ``platform``)."""
    target, sep, value = assignment.partition("=")
    section, dot, key = target.strip().partition(".")
    if not sep or not dot:
        raise ParseError(f"override must look like section.key=value, got {assignment!r}", 0, 0)
    if section == "run":
        table, obj = _RUN_KEYS, config.run
    elif section == "platform":
        if config.platform is None:
            raise ParseError("config has no [platform] section to override", 0, 0)
        table, obj = _PLATFORM_KEYS, config.platform
    else:
        raise ParseError(f"cannot override section {section!r}", 0, 0)
    if key not in table:
        raise ParseError(f"unknown key {key!r} in [{section}]", 0, 0)
    try:
        setattr(obj, key, table[key](value.strip()))
    except ValueError as exc:
        raise ParseError(f"bad value for {target}: {exc}", 0, 0) from None


# printer --------------------------------------------------------------------


def _num(value: float) -> str:
    return str(int(value)) if float(value).is_integer() and abs(value) < 1e15 else repr(float(value))


def _value(text: str) -> str:
    return text if _BARE.fullmatch(text) else f'"{text}"'


def format_node(node: NodeSpec, indent: int = 0) -> str:
    pad = "  " * indent
    if node.kind == "block":
        args = "".join(f" {k}={_value(v)}" for k, v in node.args.items())
        return f"{pad}block({node.name}{args})"
    inner = [format_node(child, indent + 1) for child in node.children]
    if node.kind == "loop":
        inner.append(f'{pad}  until "{node.until}"')
    return f"{pad}{node.kind}(\n" + "\n".join(inner) + f"\n{pad})"


def _format_setting(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return _num(value)
    if value is None:
        return "none"
    return str(value)


def format_workflow(config: WorkflowConfig) -> str:
    """Canonical text; ``parse_workflow(format_workflow(c)) == c``."""
    out = ["[states]"]
    for s in config.states:
        line = f"{s.label} {s.dtype} [{','.join(map(str, s.shape))}]"
        if s.init is not None:
            line += " = " + ",".join(_num(v) for v in s.init)
        out.append(line)
    if config.platform is not None:
        out += ["", "[platform]"]
        defaults = PlatformConfig()
        for f in fields(PlatformConfig):
            value = getattr(config.platform, f.name)
            if f.name in ("kind", "spec") or value != getattr(defaults, f.name):
                out.append(f"{f.name} = {_format_setting(value)}")
    out += ["", "[graph]", format_node(config.graph), "", "[run]"]
    for f in fields(RunConfig):
        out.append(f"{f.name} = {_format_setting(getattr(config.run, f.name))}")
    return "\n".join(out) + "\n"


def load_workflow(path) -> WorkflowConfig:
    return parse_workflow(Path(path).read_text())

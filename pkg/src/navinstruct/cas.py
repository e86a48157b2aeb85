"""Compound Action Specification (CAS) language.

Concrete syntax::

    Travel(distance=2, until=blue_floor); Verify(see=chair, side=left)

An attribute written with ``None`` is present but unset.  A CAS whose
attributes are all unset is a *structure*; with any value bound it is a
*command*.  Both are represented by :class:`CasCommand`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from itertools import product
from typing import Iterator, Sequence, Union

from . import worldmodel as wm

Value = Union[int, str, None]

DIRECTIONS = ("Left", "Right", "Back")
SIDES = ("left", "right", "ahead", "at")
DISTANCES = tuple(range(1, 10))

# attribute kinds: "distance", "direction", "side" are literals, "entity" takes map labels
GRAMMAR: dict[str, tuple[tuple[str, str], ...]] = {
    "Travel": (("distance", "distance"), ("until", "entity"), ("past", "entity")),
    "Turn": (("direction", "direction"),),
    "Face": (("target", "entity"),),
    "Verify": (("see", "entity"), ("side", "side")),
    "Find": (("object", "entity"),),
}
ACTIONS = tuple(GRAMMAR)


class CasError(ValueError):
    """Syntax or validity error.  ``pos`` is the character offset, if known."""

    def __init__(self, message: str, pos: int | None = None):
        super().__init__(message if pos is None else f"{message} (at position {pos})")
        self.pos = pos


def attribute_kind(action: str, attr: str) -> str:
    for name, kind in GRAMMAR[action]:
        if name == attr:
            return kind
    raise CasError(f"unknown attribute {attr!r} for action {action}")


def _check_value(action: str, attr: str, value: Value) -> None:
    if value is None:
        return
    kind = attribute_kind(action, attr)
    if kind == "distance":
        if not isinstance(value, int) or value not in DISTANCES:
            raise CasError(f"{action}.{attr} must be an integer in 1..9, got {value!r}")
    elif kind == "direction":
        if value not in DIRECTIONS:
            raise CasError(f"{action}.{attr} must be one of {DIRECTIONS}, got {value!r}")
    elif kind == "side":
        if value not in SIDES:
            raise CasError(f"{action}.{attr} must be one of {SIDES}, got {value!r}")
    elif not isinstance(value, str) or not re.fullmatch(r"[a-z][a-z0-9_]*", value):
        raise CasError(f"{action}.{attr} must be a snake_case entity label, got {value!r}")


@dataclass(frozen=True)
class CasAction:
    kind: str
    attrs: tuple[tuple[str, Value], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in GRAMMAR:
            raise CasError(f"unknown action {self.kind!r}")
        order = [name for name, _ in GRAMMAR[self.kind]]
        seen = set()
        for name, value in self.attrs:
            if name not in order:
                raise CasError(f"unknown attribute {name!r} for action {self.kind}")
            if name in seen:
                raise CasError(f"duplicate attribute {name!r} in {self.kind}")
            seen.add(name)
            _check_value(self.kind, name, value)
        # canonical attribute order = grammar declaration order
        ordered = tuple(sorted(self.attrs, key=lambda kv: order.index(kv[0])))
        object.__setattr__(self, "attrs", ordered)

    def get(self, name: str, default: Value = None) -> Value:
        for key, value in self.attrs:
            if key == name:
                return value
        return default

    @property
    def bound(self) -> tuple[tuple[str, Value], ...]:
        return tuple((k, v) for k, v in self.attrs if v is not None)

    def with_value(self, name: str, value: Value) -> "CasAction":
        return CasAction(self.kind, tuple((k, value if k == name else v) for k, v in self.attrs))

    def __str__(self) -> str:
        inner = ", ".join(f"{k}={'None' if v is None else v}" for k, v in self.attrs)
        return f"{self.kind}({inner})"


@dataclass(frozen=True)
class CasCommand:
    actions: tuple[CasAction, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(self.actions))

    def __str__(self) -> str:
        return serialize_cas(self)

    @property
    def is_structure(self) -> bool:
        return eta(self) == 0

    def slots(self) -> list[tuple[int, str]]:
        """(action index, attribute name) for every attribute present."""
        return [(i, name) for i, a in enumerate(self.actions) for name, _ in a.attrs]

    def with_value(self, action_index: int, name: str, value: Value) -> "CasCommand":
        actions = list(self.actions)
        actions[action_index] = actions[action_index].with_value(name, value)
        return CasCommand(tuple(actions))

    @classmethod
    def of(cls, *actions: CasAction) -> "CasCommand":
        return cls(tuple(actions))


CasStructure = CasCommand
CasTokenSeq = tuple[str, ...]


def action(kind: str, **attrs: Value) -> CasAction:
    """Convenience constructor: ``action("Turn", direction="Left")``."""
    return CasAction(kind, tuple(attrs.items()))


def structure_of(cmd: CasCommand) -> CasStructure:
    return CasCommand(tuple(CasAction(a.kind, tuple((k, None) for k, _ in a.attrs)) for a in cmd.actions))


def eta(cmd: CasCommand) -> int:
    """Number of bound attribute values."""
    return sum(len(a.bound) for a in cmd.actions)


# --------------------------------------------------------------------------
# concrete syntax

_TOKEN = re.compile(
    r"\s*(?:(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<int>-?\d+)|(?P<punct>[();,=]))"
)


def _lex(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise CasError(f"unexpected character {text[start]!r}", start)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _lex(text)
        self.i = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self, kind: str, value: str | None = None) -> tuple[str, str, int]:
        tok = self.peek()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            got = tok[1] or "end of input"
            raise CasError(f"expected {want!r}, got {got!r}", tok[2])
        self.i += 1
        return tok

    def command(self) -> CasCommand:
        actions = [self.action()]
        while self.peek()[1] == ";":
            self.take("punct", ";")
            actions.append(self.action())
        self.take("eof")
        return CasCommand(tuple(actions))

    def action(self) -> CasAction:
        _, name, pos = self.take("name")
        if name not in GRAMMAR:
            raise CasError(f"unknown action {name!r}", pos)
        self.take("punct", "(")
        attrs = []
        seen = set()
        if self.peek()[1] != ")":
            while True:
                _, attr, apos = self.take("name")
                if attr not in dict(GRAMMAR[name]):
                    raise CasError(f"unknown attribute {attr!r} for action {name}", apos)
                if attr in seen:
                    raise CasError(f"duplicate attribute {attr!r}", apos)
                seen.add(attr)
                self.take("punct", "=")
                attrs.append((attr, self.value(name, attr)))
                if self.peek()[1] != ",":
                    break
                self.take("punct", ",")
        self.take("punct", ")")
        return CasAction(name, tuple(attrs))

    def value(self, action_name: str, attr: str) -> Value:
        kind, text, pos = self.peek()
        if kind not in ("name", "int"):
            raise CasError(f"expected a value for {attr!r}, got {text or 'end of input'!r}", pos)
        self.i += 1
        value: Value
        if text == "None":
            value = None
        elif kind == "int":
            value = int(text)
        else:
            value = text
        try:
            _check_value(action_name, attr, value)
        except CasError as exc:
            raise CasError(str(exc), pos) from None
        return value


def parse_cas(text: str) -> CasCommand:
    return _Parser(text).command()


def serialize_cas(cmd: CasCommand) -> str:
    return "; ".join(str(a) for a in cmd.actions)


# --------------------------------------------------------------------------
# tokens for the neural model


def tokenize_cas(cmd: CasCommand, include_unset: bool = False) -> CasTokenSeq:
    """One token per action plus ``attribute.value`` per bound attribute.

    With ``include_unset`` the unset slots of a structure are emitted as
    ``attribute.None`` so that structures with different slots differ.
    """
    tokens: list[str] = []
    for a in cmd.actions:
        tokens.append(a.kind)
        for name, value in a.attrs:
            if value is not None:
                tokens.append(f"{name}.{value}")
            elif include_unset:
                tokens.append(f"{name}.None")
    return tuple(tokens)


def detokenize_cas(tokens: Sequence[str]) -> CasCommand:
    """Inverse of :func:`tokenize_cas` for commands (bound values only)."""
    actions: list[tuple[str, list]] = []
    for tok in tokens:
        if "." not in tok:
            if tok not in GRAMMAR:
                raise CasError(f"unknown action token {tok!r}")
            actions.append((tok, []))
            continue
        if not actions:
            raise CasError(f"attribute token {tok!r} before any action")
        name, raw = tok.split(".", 1)
        kind = attribute_kind(actions[-1][0], name)
        value: Value = None if raw == "None" else (int(raw) if kind == "distance" else raw)
        actions[-1][1].append((name, value))
    return CasCommand(tuple(CasAction(k, tuple(v)) for k, v in actions))


def all_cas_tokens(entities: Sequence[str] = wm.ENTITIES) -> list[str]:
    """Every token the grammar can produce over the given entity labels."""
    tokens = list(ACTIONS)
    for act, attrs in GRAMMAR.items():
        for name, kind in attrs:
            for value in literal_values(kind, entities):
                tok = f"{name}.{value}"
                if tok not in tokens:
                    tokens.append(tok)
    return tokens


def literal_values(kind: str, entities: Sequence[str]) -> tuple:
    if kind == "distance":
        return DISTANCES
    if kind == "direction":
        return DIRECTIONS
    if kind == "side":
        return SIDES
    return tuple(entities)


# --------------------------------------------------------------------------
# attribute enumeration


def enumerate_attribute_values(
    structure: CasStructure, world: wm.WorldMap, pose: wm.Pose
) -> Iterator[CasCommand]:
    """All full instantiations of ``structure`` whose entity values are
    visible from ``pose``, in canonical slot order (cartesian product)."""
    entities = sorted({name for name, _ in wm.visible_entities(world, pose)})
    yield from instantiations(structure, entities)


def instantiations(structure: CasStructure, entities: Sequence[str]) -> Iterator[CasCommand]:
    slots = structure.slots()
    choices = [
        literal_values(attribute_kind(structure.actions[i].kind, name), entities)
        for i, name in slots
    ]
    for values in product(*choices):
        cmd = structure
        for (i, name), value in zip(slots, values):
            cmd = cmd.with_value(i, name, value)
        yield cmd


# --------------------------------------------------------------------------
# distances


def edit_distance(a: Sequence[str], b: Sequence[str]) -> int:
    """Levenshtein distance over token sequences."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def token_distance(a: CasCommand, b: CasCommand, include_unset: bool = False) -> float:
    """Edit distance between token sequences, normalised by the longer length."""
    ta, tb = tokenize_cas(a, include_unset), tokenize_cas(b, include_unset)
    longest = max(len(ta), len(tb))
    if longest == 0:
        return 0.0
    return edit_distance(ta, tb) / longest

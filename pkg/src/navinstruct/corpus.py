"""Dataset schema, splitting, lexicon-driven augmentation and a synthetic
corpus generator.

Dataset directory layout::

    maps/<map_id>.map    map documents (see worldmodel)
    demos.jsonl          one demonstration per line
    lexicon.json         substitution lexicon (optional; the packaged one
                         is used when absent)

Each demonstration line holds ``map_id``, ``poses`` (``"x,y,H"`` strings),
``cas`` (one concrete-syntax command per path segment), ``instruction``
(one sentence per segment), ``instructor_id`` and ``paragraph_id``.
"""

from __future__ import annotations

import json
import logging
import random
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path as FsPath
from typing import Iterable, Sequence

from . import cas
from . import planner
from . import worldmodel as wm
from .cas import CasCommand
from .vocab import build_vocab, tokenize_english  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.7, 0.1, 0.2)


class DatasetWarning(UserWarning):
    pass


@dataclass
class Demonstration:
    map_id: str
    path: wm.Path
    cas: list[CasCommand]
    instruction: list[list[str]]
    instructor_id: str = "0"
    paragraph_id: str = "0"

    def pairs(self) -> list[tuple[CasCommand, list[str]]]:
        return list(zip(self.cas, self.instruction))

    def to_record(self) -> dict:
        return {
            "map_id": self.map_id,
            "poses": [str(p) for p in self.path.poses],
            "cas": [cas.serialize_cas(c) for c in self.cas],
            "instruction": [" ".join(words) for words in self.instruction],
            "instructor_id": self.instructor_id,
            "paragraph_id": self.paragraph_id,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Demonstration":
        return cls(
            map_id=str(rec["map_id"]),
            path=wm.Path(tuple(wm.Pose.parse(p) for p in rec["poses"])),
            cas=[cas.parse_cas(c) for c in rec["cas"]],
            instruction=[tokenize_english(s) for s in rec["instruction"]],
            instructor_id=str(rec.get("instructor_id", "0")),
            paragraph_id=str(rec.get("paragraph_id", "0")),
        )


def validate(demo: Demonstration, maps: dict[str, wm.WorldMap]) -> list[str]:
    """Problems with one demonstration; empty when it is consistent."""
    world = maps.get(demo.map_id)
    if world is None:
        return [f"unknown map {demo.map_id!r}"]
    problems = []
    try:
        demo.path.check_in(world)
    except wm.PathError as exc:
        problems.append(str(exc))
    n_seg = len(demo.path.segments)
    if len(demo.cas) != n_seg:
        problems.append(f"{len(demo.cas)} CAS commands for {n_seg} path segments")
    if len(demo.instruction) != len(demo.cas):
        problems.append(f"{len(demo.instruction)} sentences for {len(demo.cas)} CAS commands")
    present = world.entity_names()
    for k, cmd in enumerate(demo.cas):
        for act in cmd.actions:
            for name, value in act.bound:
                if cas.attribute_kind(act.kind, name) == "entity" and value not in present:
                    problems.append(f"segment {k}: {act.kind}.{name}={value} is not on map {demo.map_id}")
    return problems


# --------------------------------------------------------------------------
# storage

def save_dataset(directory, maps: dict[str, wm.WorldMap], demos: Sequence[Demonstration],
                 lexicon: "Lexicon | None" = None) -> None:
    root = FsPath(directory)
    (root / "maps").mkdir(parents=True, exist_ok=True)
    for map_id, world in sorted(maps.items()):
        (root / "maps" / f"{map_id}.map").write_text(wm.save_map(world), encoding="utf-8")
    with open(root / "demos.jsonl", "w", encoding="utf-8") as fh:
        for demo in demos:
            fh.write(json.dumps(demo.to_record(), sort_keys=True) + "\n")
    if lexicon is not None:
        (root / "lexicon.json").write_text(json.dumps(lexicon.document, indent=1), encoding="utf-8")


def load_maps(directory) -> dict[str, wm.WorldMap]:
    out = {}
    for p in sorted((FsPath(directory) / "maps").glob("*.map")):
        out[p.stem] = wm.load_map(p.read_text(encoding="utf-8"))
    return out


def load_dataset(directory, problems: list[str] | None = None) -> list[Demonstration]:
    """Load and validate every record; invalid records are dropped with a
    DatasetWarning and their problems appended to ``problems``."""
    root = FsPath(directory)
    maps = load_maps(root)
    demos = []
    collected = [] if problems is None else problems
    demo_file = root / "demos.jsonl"
    if not demo_file.exists():
        raise FileNotFoundError(f"{demo_file} not found")
    with open(demo_file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                demo = Demonstration.from_record(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                collected.append(f"line {lineno}: {exc}")
                continue
            issues = validate(demo, maps)
            if issues:
                collected.extend(f"line {lineno}: {msg}" for msg in issues)
                continue
            demos.append(demo)
    if collected:
        warnings.warn(f"{len(collected)} validation problem(s); first: {collected[0]}", DatasetWarning,
                      stacklevel=2)
    return demos


# --------------------------------------------------------------------------
# splitting

@dataclass
class DatasetSplit:
    train: list[Demonstration]
    validation: list[Demonstration]
    test: list[Demonstration]
    ratios: tuple[float, float, float] = DEFAULT_RATIOS


def split(demos: Sequence[Demonstration], ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> DatasetSplit:
    """Split by paragraph so no paragraph straddles two parts."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {tuple(ratios)}")
    paragraphs = sorted({d.paragraph_id for d in demos})
    random.Random(seed).shuffle(paragraphs)
    n = len(paragraphs)
    n_train = round(ratios[0] * n)
    n_val = min(round(ratios[1] * n), n - n_train)
    part = {p: 0 for p in paragraphs[:n_train]}
    part.update({p: 1 for p in paragraphs[n_train : n_train + n_val]})
    part.update({p: 2 for p in paragraphs[n_train + n_val :]})
    buckets: tuple[list, list, list] = ([], [], [])
    for d in demos:
        buckets[part[d.paragraph_id]].append(d)
    return DatasetSplit(*buckets, ratios=tuple(ratios))


def pairs_of(demos: Iterable[Demonstration]) -> list[tuple[CasCommand, list[str]]]:
    return [pair for d in demos for pair in d.pairs()]


# --------------------------------------------------------------------------
# lexicon and rendering

class Lexicon:
    """Surface words for attribute values plus per-action phrase templates."""

    def __init__(self, document: dict):
        self.document = document
        self.values: dict[str, dict[str, str]] = document["values"]
        self.templates: dict[str, dict[str, list[str]]] = document["templates"]
        self.joiner: str = document.get("joiner", "and")

    @classmethod
    def default(cls) -> "Lexicon":
        text = resources.files("navinstruct").joinpath("data/lexicon.json").read_text(encoding="utf-8")
        return cls(json.loads(text))

    @classmethod
    def load(cls, path) -> "Lexicon":
        return cls(json.loads(FsPath(path).read_text(encoding="utf-8")))

    def surface(self, kind: str, value) -> list[str] | None:
        text = self.values.get(kind, {}).get(str(value))
        return None if text is None else text.split()

    def phrasings(self, act: cas.CasAction) -> list[str]:
        key = "+".join(sorted(name for name, _ in act.bound))
        try:
            return self.templates[act.kind][key]
        except KeyError:
            raise KeyError(f"no template for {act.kind} with attributes {key!r}") from None

    def render_action(self, act: cas.CasAction, template: str) -> list[str]:
        fills = {}
        for name, value in act.bound:
            words = self.surface(cas.attribute_kind(act.kind, name), value)
            if words is None:
                raise KeyError(f"no surface form for {act.kind}.{name}={value}")
            fills[name] = " ".join(words)
        return template.format(**fills).split()

    def render(self, cmd: CasCommand, rng: random.Random | None = None, primary: float = 0.9) -> list[str]:
        """Words for a command.  Each action uses its first phrasing with
        probability ``primary`` and a uniformly chosen alternative otherwise;
        without ``rng`` the first phrasing is always used."""
        out: list[str] = []
        for k, act in enumerate(cmd.actions):
            options = self.phrasings(act)
            template = options[0]
            if rng is not None and len(options) > 1 and rng.random() >= primary:
                template = rng.choice(options[1:])
            if k:
                out.append(self.joiner)
            out.extend(self.render_action(act, template))
        return out


# --------------------------------------------------------------------------
# augmentation

def _find(words: Sequence[str], sub: Sequence[str]) -> list[int]:
    n = len(sub)
    return [i for i in range(len(words) - n + 1) if list(words[i : i + n]) == list(sub)]


def _alternatives(kind: str, value) -> tuple:
    if kind == "entity":
        group = wm.entity_type(value)
        return tuple(e for e in wm.ENTITIES if wm.entity_type(e) == group)
    return cas.literal_values(kind, ())


def _substitutions(cmd: CasCommand, words: list[str], lexicon: Lexicon, index: int, name: str):
    """(value, words) variants for one slot, or None when it is skipped."""
    act = cmd.actions[index]
    kind = cas.attribute_kind(act.kind, name)
    value = act.get(name)
    old = lexicon.surface(kind, value)
    if old is None:
        log.warning("no lexicon entry for %s=%s; attribute skipped", name, value)
        return None
    hits = _find(words, old)
    if len(hits) != 1:
        log.warning("%r found %d times in %r; attribute skipped", " ".join(old), len(hits), " ".join(words))
        return None
    at = hits[0]
    out = []
    for other in _alternatives(kind, value):
        if other == value:
            continue
        new = lexicon.surface(kind, other)
        if new is None:
            continue
        out.append((other, words[:at] + new + words[at + len(old) :]))
    return out


def augment(pairs: Sequence[tuple[CasCommand, Sequence[str]]], lexicon: Lexicon | None = None,
            combinatorial: bool = False) -> list[tuple[CasCommand, list[str]]]:
    """Originals plus every single-attribute rebinding (or, with
    ``combinatorial``, every joint rebinding).

    Every original pair is kept, repeats included, so phrasing frequencies
    survive; a variant is added only if no equal pair was seen before.
    """
    lexicon = lexicon or Lexicon.default()
    seen = {(cas.serialize_cas(c), tuple(w)) for c, w in pairs}
    out = [(c, list(w)) for c, w in pairs]

    def keep(cmd, words):
        key = (cas.serialize_cas(cmd), tuple(words))
        if key not in seen:
            seen.add(key)
            out.append((cmd, list(words)))

    for cmd, words in pairs:
        words = list(words)
        slots = [(i, name) for i, act in enumerate(cmd.actions) for name, _ in act.bound]
        if not combinatorial:
            for i, name in slots:
                for value, new_words in _substitutions(cmd, words, lexicon, i, name) or ():
                    keep(cmd.with_value(i, name, value), new_words)
            continue
        # joint rebinding: apply substitutions slot by slot on every partial variant
        frontier = [(cmd, words)]
        for i, name in slots:
            grown = []
            for c, w in frontier:
                grown.append((c, w))
                for value, new_words in _substitutions(c, w, lexicon, i, name) or ():
                    grown.append((c.with_value(i, name, value), new_words))
            frontier = grown
        for c, w in frontier:
            keep(c, w)
    return out


# --------------------------------------------------------------------------
# synthetic maps and demonstrations

def generate_map(seed: int, width: int = 6, height: int = 6, n_objects: int = 6,
                 extra_edges: float = 0.2, wall_rate: float = 0.25) -> wm.WorldMap:
    """A random connected grid map.

    A random spanning tree over the grid gets a few extra edges.  Floors are
    assigned per row (horizontal edges) and per column (vertical edges), so
    hallways look uniform and change at corners.
    """
    rng = random.Random(seed)
    nodes = [(x, y) for x in range(width) for y in range(height)]
    seen = {nodes[rng.randrange(len(nodes))]}
    stack = list(seen)
    tree: set[tuple[wm.Node, wm.Node]] = set()
    while stack:
        cur = stack[-1]
        options = [(cur[0] + dx, cur[1] + dy) for dx, dy in ((0, 1), (1, 0), (0, -1), (-1, 0))]
        options = [n for n in options if 0 <= n[0] < width and 0 <= n[1] < height and n not in seen]
        if not options:
            stack.pop()
            continue
        nxt = rng.choice(options)
        tree.add(wm.edge_key(cur, nxt))
        seen.add(nxt)
        stack.append(nxt)
    for x, y in nodes:
        for nb in ((x + 1, y), (x, y + 1)):
            if nb[0] < width and nb[1] < height and rng.random() < extra_edges:
                tree.add(wm.edge_key((x, y), nb))
    row_floor = {y: (rng.choice(wm.FLOOR_COLORS), rng.choice(wm.FLOOR_TEXTURES)) for y in range(height)}
    col_floor = {x: (rng.choice(wm.FLOOR_COLORS), rng.choice(wm.FLOOR_TEXTURES)) for x in range(width)}
    edges = {}
    for a, b in sorted(tree):
        color, texture = row_floor[a[1]] if a[1] == b[1] else col_floor[a[0]]
        walls = [rng.choice(wm.WALL_FEATURES) if rng.random() < wall_rate else None for _ in range(2)]
        edges[(a, b)] = wm.Edge(a, b, color, texture, walls[0], walls[1])
    spots = rng.sample(nodes, min(n_objects, len(nodes)))
    objects = {node: rng.choice(wm.OBJECTS) for node in spots}
    return wm.WorldMap(frozenset(nodes), edges, objects)


# candidate structures per segment kind with sampling weights
TURN_STRUCTURES = (
    ("Turn(direction=None)", 6.0),
    ("Face(target=None)", 2.0),
    ("Turn(direction=None); Verify(see=None, side=None)", 1.0),
)
TRAVEL_STRUCTURES = (
    ("Travel(distance=None)", 4.0),
    ("Travel(until=None)", 3.0),
    ("Travel(past=None)", 1.0),
    ("Travel(distance=None, until=None)", 1.5),
    ("Travel(distance=None); Verify(see=None, side=None)", 1.0),
)


def _ordered_structures(kind: str, rng: random.Random) -> list[CasCommand]:
    table = TURN_STRUCTURES if kind == "turn" else TRAVEL_STRUCTURES
    pool = list(table)
    out = []
    while pool:
        k = rng.choices(range(len(pool)), weights=[w for _, w in pool])[0]
        out.append(cas.parse_cas(pool.pop(k)[0]))
    return out


_NET_DIRECTION = {1: "Right", 2: "Back", 3: "Left"}


def fallback_command(segment: wm.PathSegment) -> CasCommand:
    """Turn(direction) or Travel(distance) read directly off the segment."""
    if segment.kind == "turn":
        net = sum(1 if m is wm.Move.RIGHT else -1 for m in segment.as_path().moves) % 4
        return CasCommand.of(cas.action("Turn", direction=_NET_DIRECTION.get(net, "Back")))
    return CasCommand.of(cas.action("Travel", distance=min(segment.n_moves, max(cas.DISTANCES))))


def segment_command(segment: wm.PathSegment, world: wm.WorldMap, rng: random.Random,
                    cfg: planner.PlannerConfig = planner.PlannerConfig()) -> CasCommand:
    """First structure in a randomly weighted order whose greedy binding
    clears the planner threshold; the fallback command otherwise."""
    path = segment.as_path()
    for structure in _ordered_structures(segment.kind, rng):
        found = planner.instantiate_scored(structure, path, world, cfg)
        if found is not None and found.likelihood > cfg.p_threshold:
            return found.command
    return fallback_command(segment)


@dataclass
class SynthConfig:
    primary: float = 0.9
    instructors: int = 6
    per_paragraph: int = 4
    min_moves: int = 2
    max_segments: int = 9
    planner: planner.PlannerConfig = field(default_factory=planner.PlannerConfig)


def synth_corpus(maps: dict[str, wm.WorldMap] | Sequence[wm.WorldMap], n: int, seed: int = 0,
                 lexicon: Lexicon | None = None, config: SynthConfig | None = None) -> list[Demonstration]:
    """``n`` demonstrations over random start poses and goal nodes."""
    if not isinstance(maps, dict):
        maps = {f"map{i}": m for i, m in enumerate(maps)}
    lexicon = lexicon or Lexicon.default()
    cfg = config or SynthConfig()
    rng = random.Random(seed)
    ids = sorted(maps)
    demos: list[Demonstration] = []
    while len(demos) < n:
        map_id = ids[len(demos) % len(ids)]
        world = maps[map_id]
        start = rng.choice(list(world.poses()))
        goal = rng.choice(sorted(world.nodes))
        try:
            path = wm.shortest_path_to_node(world, start, goal)
        except wm.UnreachableError:
            continue
        segments = path.segments
        if len(path) < cfg.min_moves or len(segments) > cfg.max_segments:
            continue
        commands = [segment_command(s, world, rng, cfg.planner) for s in segments]
        words = [lexicon.render(c, rng, cfg.primary) for c in commands]
        k = len(demos)
        demos.append(Demonstration(map_id, path, commands, words,
                                   instructor_id=str(rng.randrange(cfg.instructors)),
                                   paragraph_id=f"{map_id}-{k // cfg.per_paragraph}"))
    return demos


def entity_vocabulary(lexicon: Lexicon) -> set[str]:
    """Every word a synthetic instruction may use."""
    words = set(lexicon.joiner.split())
    for table in lexicon.values.values():
        for text in table.values():
            words.update(text.split())
    for per_action in lexicon.templates.values():
        for options in per_action.values():
            for t in options:
                words.update(w for w in t.split() if not w.startswith("{"))
    return words


def cas_vocabulary(pairs: Iterable[tuple[CasCommand, Sequence[str]]]) -> list[list[str]]:
    return [cas.tokenize_cas(c) for c, _ in pairs]


__all__ = [
    "Demonstration", "DatasetSplit", "DatasetWarning", "Lexicon", "SynthConfig",
    "augment", "build_vocab", "fallback_command", "generate_map", "load_dataset", "load_maps",
    "pairs_of", "save_dataset", "segment_command", "split", "synth_corpus", "tokenize_english", "validate",
]

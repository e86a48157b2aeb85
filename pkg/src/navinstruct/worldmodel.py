"""Grid-world maps, poses and paths.

A map is a set of integer grid nodes joined by 4-neighbour edges.  Each edge
carries a floor colour and texture and may have a wall feature (a picture)
on either side; nodes may hold one object.  Poses add a heading, paths are
sequences of poses linked by atomic moves (a 90 degree turn in place or a
single forward step along an edge).
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Iterator

Node = tuple[int, int]

FLOOR_COLORS = ("blue", "brown", "gray", "green", "pink", "yellow")
FLOOR_TEXTURES = ("brick", "flower", "grass", "honeycomb", "stone", "wood")
WALL_FEATURES = ("butterfly", "eiffel", "fish")
OBJECTS = ("barstool", "chair", "easel", "hatrack", "lamp", "sofa")


class MapError(ValueError):
    """Raised for malformed map documents or maps that break an invariant."""


class UnreachableError(ValueError):
    pass


class Heading(str, Enum):
    N = "N"
    E = "E"
    S = "S"
    W = "W"

    @property
    def delta(self) -> Node:
        return _DELTAS[self]

    def left(self) -> "Heading":
        return _ORDER[(_ORDER.index(self) - 1) % 4]

    def right(self) -> "Heading":
        return _ORDER[(_ORDER.index(self) + 1) % 4]

    def back(self) -> "Heading":
        return _ORDER[(_ORDER.index(self) + 2) % 4]


_ORDER = (Heading.N, Heading.E, Heading.S, Heading.W)
_DELTAS = {Heading.N: (0, 1), Heading.E: (1, 0), Heading.S: (0, -1), Heading.W: (-1, 0)}


class Move(str, Enum):
    FORWARD = "fwd"
    LEFT = "left"
    RIGHT = "right"

    @property
    def is_turn(self) -> bool:
        return self is not Move.FORWARD


# priority used to break ties between equally short routes
MOVE_PRIORITY = (Move.FORWARD, Move.LEFT, Move.RIGHT)


def step(node: Node, heading: Heading) -> Node:
    dx, dy = heading.delta
    return (node[0] + dx, node[1] + dy)


def edge_key(a: Node, b: Node) -> tuple[Node, Node]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class Edge:
    a: Node
    b: Node
    floor_color: str
    floor_texture: str
    wall_left: str | None = None  # left/right as seen walking from a to b
    wall_right: str | None = None

    def walls_seen(self, start: Node) -> tuple[str | None, str | None]:
        """Return (left, right) wall features for a walk that starts at ``start``."""
        if start == self.a:
            return self.wall_left, self.wall_right
        return self.wall_right, self.wall_left


@dataclass(frozen=True, order=True)
class Pose:
    node: Node
    heading: Heading

    def __str__(self) -> str:
        return f"{self.node[0]},{self.node[1]},{self.heading.value}"

    @classmethod
    def parse(cls, text: str) -> "Pose":
        """Parse ``"x,y,H"``."""
        try:
            x, y, h = (part.strip() for part in text.split(","))
            return cls((int(x), int(y)), Heading(h.upper()))
        except ValueError as exc:
            raise ValueError(f"bad pose {text!r}; expected 'x,y,H'") from exc


def apply_move(pose: Pose, move: Move) -> Pose:
    if move is Move.FORWARD:
        return Pose(step(pose.node, pose.heading), pose.heading)
    if move is Move.LEFT:
        return Pose(pose.node, pose.heading.left())
    return Pose(pose.node, pose.heading.right())


def move_between(a: Pose, b: Pose) -> Move | None:
    """The atomic move taking ``a`` to ``b``, or None if there is none."""
    for move in MOVE_PRIORITY:
        if apply_move(a, move) == b:
            return move
    return None


@dataclass(frozen=True)
class WorldMap:
    nodes: frozenset[Node]
    edges: dict[tuple[Node, Node], Edge]
    objects: dict[Node, str]
    floor_colors: tuple[str, ...] = FLOOR_COLORS
    floor_textures: tuple[str, ...] = FLOOR_TEXTURES
    wall_features: tuple[str, ...] = WALL_FEATURES
    object_kinds: tuple[str, ...] = OBJECTS
    _adjacency: dict[Node, tuple[Node, ...]] = field(
        init=False, repr=False, compare=False, hash=False
    )

    def __post_init__(self) -> None:
        adjacency: dict[Node, list[Node]] = {n: [] for n in self.nodes}
        for (a, b), edge in self.edges.items():
            for end in (a, b):
                if end not in self.nodes:
                    raise MapError(f"dangling edge {list(a)}-{list(b)}: node {list(end)} missing")
            if abs(a[0] - b[0]) + abs(a[1] - b[1]) != 1:
                raise MapError(f"edge {list(a)}-{list(b)} does not join 4-neighbours")
            if edge.floor_color not in self.floor_colors:
                raise MapError(f"edge {list(a)}-{list(b)}: unknown floor_color {edge.floor_color!r}")
            if edge.floor_texture not in self.floor_textures:
                raise MapError(f"edge {list(a)}-{list(b)}: unknown floor_texture {edge.floor_texture!r}")
            for wall in (edge.wall_left, edge.wall_right):
                if wall is not None and wall not in self.wall_features:
                    raise MapError(f"edge {list(a)}-{list(b)}: unknown wall feature {wall!r}")
            adjacency[a].append(b)
            adjacency[b].append(a)
        for node, kind in self.objects.items():
            if node not in self.nodes:
                raise MapError(f"object {kind!r} placed on missing node {list(node)}")
            if kind not in self.object_kinds:
                raise MapError(f"unknown object kind {kind!r} at {list(node)}")
        object.__setattr__(
            self, "_adjacency", {n: tuple(sorted(v)) for n, v in adjacency.items()}
        )

    def edge(self, a: Node, b: Node) -> Edge | None:
        return self.edges.get(edge_key(a, b))

    def neighbors(self, node: Node) -> tuple[Node, ...]:
        return self._adjacency[node]

    def degree(self, node: Node) -> int:
        return len(self._adjacency[node])

    def can_advance(self, pose: Pose) -> bool:
        return edge_key(pose.node, step(pose.node, pose.heading)) in self.edges

    def edge_ahead(self, pose: Pose) -> Edge | None:
        return self.edges.get(edge_key(pose.node, step(pose.node, pose.heading)))

    def is_valid(self, pose: Pose) -> bool:
        return pose.node in self.nodes

    def poses(self) -> Iterator[Pose]:
        for node in sorted(self.nodes):
            for heading in _ORDER:
                yield Pose(node, heading)

    def entity_names(self) -> set[str]:
        """Every entity label present somewhere in the map."""
        names = set(self.objects.values())
        for edge in self.edges.values():
            names.add(floor_entity(edge.floor_color))
            names.add(floor_entity(edge.floor_texture))
            for wall in (edge.wall_left, edge.wall_right):
                if wall is not None:
                    names.add(wall_entity(wall))
        return names


# Entity labels used in CAS values: objects by kind, floors as "<label>_floor",
# wall features as "<label>_wall".  Colour and texture vocabularies are disjoint.
def floor_entity(label: str) -> str:
    return f"{label}_floor"


def wall_entity(label: str) -> str:
    return f"{label}_wall"


def entity_type(name: str) -> str | None:
    """Classify an entity label as object, floor_color, floor_texture or wall."""
    if name in OBJECTS:
        return "object"
    if name.endswith("_floor"):
        base = name[: -len("_floor")]
        if base in FLOOR_COLORS:
            return "floor_color"
        if base in FLOOR_TEXTURES:
            return "floor_texture"
    if name.endswith("_wall") and name[: -len("_wall")] in WALL_FEATURES:
        return "wall"
    return None


ENTITIES = (
    tuple(OBJECTS)
    + tuple(floor_entity(c) for c in FLOOR_COLORS)
    + tuple(floor_entity(t) for t in FLOOR_TEXTURES)
    + tuple(wall_entity(w) for w in WALL_FEATURES)
)


# --------------------------------------------------------------------------
# map documents

_TOP_KEYS = {"nodes", "edges", "objects"}
_EDGE_KEYS = {"a", "b", "floor_color", "floor_texture", "wall_left", "wall_right"}
_EDGE_REQUIRED = {"a", "b", "floor_color", "floor_texture"}
_OBJECT_KEYS = {"node", "kind"}


def _node(value, where: str) -> Node:
    if (
        not isinstance(value, list)
        or len(value) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    ):
        raise MapError(f"{where}: expected [x, y] integer pair, got {value!r}")
    return (value[0], value[1])


def _check_keys(record, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(record, dict):
        raise MapError(f"{where}: expected an object, got {type(record).__name__}")
    unknown = set(record) - allowed
    if unknown:
        raise MapError(f"{where}: unknown key(s) {sorted(unknown)}")
    missing = required - set(record)
    if missing:
        raise MapError(f"{where}: missing key(s) {sorted(missing)}")


def map_from_document(doc) -> WorldMap:
    _check_keys(doc, _TOP_KEYS, _TOP_KEYS, "map")
    nodes: set[Node] = set()
    for i, raw in enumerate(doc["nodes"]):
        node = _node(raw, f"nodes[{i}]")
        if node in nodes:
            raise MapError(f"nodes[{i}]: duplicate node {list(node)}")
        nodes.add(node)
    edges: dict[tuple[Node, Node], Edge] = {}
    for i, raw in enumerate(doc["edges"]):
        where = f"edges[{i}]"
        _check_keys(raw, _EDGE_KEYS, _EDGE_REQUIRED, where)
        a, b = _node(raw["a"], f"{where}.a"), _node(raw["b"], f"{where}.b")
        for end in (a, b):
            if end not in nodes:
                raise MapError(f"{where}: dangling edge, node {list(end)} missing")
        key = edge_key(a, b)
        if key in edges:
            raise MapError(f"{where}: duplicate edge {list(a)}-{list(b)}")
        edges[key] = Edge(
            a, b, raw["floor_color"], raw["floor_texture"],
            raw.get("wall_left"), raw.get("wall_right"),
        )
    objects: dict[Node, str] = {}
    for i, raw in enumerate(doc["objects"]):
        _check_keys(raw, _OBJECT_KEYS, _OBJECT_KEYS, f"objects[{i}]")
        node = _node(raw["node"], f"objects[{i}].node")
        if node in objects:
            raise MapError(f"objects[{i}]: node {list(node)} already holds an object")
        objects[node] = raw["kind"]
    return WorldMap(frozenset(nodes), edges, objects)


def load_map(source: IO[bytes] | IO[str] | bytes | str) -> WorldMap:
    """Parse a map document (JSON) from a stream, bytes or text."""
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise MapError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return map_from_document(doc)


def map_to_document(world: WorldMap) -> dict:
    edges = []
    for key in sorted(world.edges):
        e = world.edges[key]
        record = {"a": list(e.a), "b": list(e.b),
                  "floor_color": e.floor_color, "floor_texture": e.floor_texture}
        if e.wall_left is not None:
            record["wall_left"] = e.wall_left
        if e.wall_right is not None:
            record["wall_right"] = e.wall_right
        edges.append(record)
    return {
        "nodes": [list(n) for n in sorted(world.nodes)],
        "edges": edges,
        "objects": [{"node": list(n), "kind": k} for n, k in sorted(world.objects.items())],
    }


def save_map(world: WorldMap) -> str:
    return json.dumps(map_to_document(world), indent=1)


# --------------------------------------------------------------------------
# paths


class PathError(ValueError):
    pass


@dataclass(frozen=True)
class PathSegment:
    """A maximal run of turns or of forward travel.

    ``poses`` includes both end poses, so neighbouring segments share one pose.
    """

    poses: tuple[Pose, ...]
    kind: str  # "turn" | "travel"

    @property
    def start(self) -> Pose:
        return self.poses[0]

    @property
    def end(self) -> Pose:
        return self.poses[-1]

    @property
    def n_moves(self) -> int:
        return len(self.poses) - 1

    def as_path(self) -> "Path":
        return Path(self.poses)


@dataclass(frozen=True)
class Path:
    poses: tuple[Pose, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "poses", tuple(self.poses))
        if not self.poses:
            raise PathError("a path needs at least one pose")
        for i, (a, b) in enumerate(zip(self.poses, self.poses[1:])):
            if move_between(a, b) is None:
                raise PathError(f"poses {i} and {i + 1} ({a} -> {b}) are not one atomic move apart")

    @property
    def start(self) -> Pose:
        return self.poses[0]

    @property
    def end(self) -> Pose:
        return self.poses[-1]

    @property
    def moves(self) -> tuple[Move, ...]:
        return tuple(move_between(a, b) for a, b in zip(self.poses, self.poses[1:]))

    def __len__(self) -> int:
        """Number of atomic moves."""
        return len(self.poses) - 1

    @property
    def segments(self) -> list[PathSegment]:
        return segment_path(self)

    def check_in(self, world: WorldMap) -> None:
        for i, pose in enumerate(self.poses):
            if pose.node not in world.nodes:
                raise PathError(f"pose {i} ({pose}) is not on the map")
        for i, (a, b) in enumerate(zip(self.poses, self.poses[1:])):
            if a.node != b.node and world.edge(a.node, b.node) is None:
                raise PathError(f"move {i} crosses a missing edge {a.node}->{b.node}")

    @classmethod
    def from_moves(cls, start: Pose, moves: Iterable[Move]) -> "Path":
        poses = [start]
        for move in moves:
            poses.append(apply_move(poses[-1], move))
        return cls(tuple(poses))


def segment_path(path: Path) -> list[PathSegment]:
    segments: list[PathSegment] = []
    moves = path.moves
    i = 0
    while i < len(moves):
        turning = moves[i].is_turn
        j = i
        while j < len(moves) and moves[j].is_turn == turning:
            j += 1
        segments.append(PathSegment(path.poses[i : j + 1], "turn" if turning else "travel"))
        i = j
    return segments


def _successors(world: WorldMap, pose: Pose) -> Iterator[tuple[Move, Pose]]:
    for move in MOVE_PRIORITY:
        if move is Move.FORWARD and not world.can_advance(pose):
            continue
        yield move, apply_move(pose, move)


def _cost_to_goal(world: WorldMap, goal: Pose) -> dict[Pose, tuple[int, int]]:
    """(moves, turns) of the best route from every pose to ``goal``."""
    predecessors: dict[Pose, list[tuple[Move, Pose]]] = {}
    for pose in world.poses():
        for move, nxt in _successors(world, pose):
            predecessors.setdefault(nxt, []).append((move, pose))
    cost = {goal: (0, 0)}
    heap = [((0, 0), goal)]
    while heap:
        c, pose = heapq.heappop(heap)
        if cost.get(pose) != c:
            continue
        for move, prev in predecessors.get(pose, ()):
            nc = (c[0] + 1, c[1] + int(move.is_turn))
            if prev not in cost or nc < cost[prev]:
                cost[prev] = nc
                heapq.heappush(heap, (nc, prev))
    return cost


def shortest_path(world: WorldMap, start: Pose, goal: Pose) -> Path:
    """Minimum-move route from ``start`` to ``goal``.

    Ties go to the route with fewer turns, then to the route whose moves come
    first in the order forward < left < right.
    """
    for pose in (start, goal):
        if not world.is_valid(pose):
            raise PathError(f"pose {pose} is not on the map")
    cost = _cost_to_goal(world, goal)
    if start not in cost:
        raise UnreachableError(f"goal {goal} is unreachable from {start}")
    poses = [start]
    pose = start
    while pose != goal:
        here = cost[pose]
        for move, nxt in _successors(world, pose):
            c = cost.get(nxt)
            if c is not None and (c[0] + 1, c[1] + int(move.is_turn)) == here:
                pose = nxt
                break
        poses.append(pose)
    return Path(tuple(poses))


def shortest_path_to_node(world: WorldMap, start: Pose, goal: Node) -> Path:
    """Best route to ``goal`` arriving with any heading (same tie-break)."""
    best = None
    for heading in _ORDER:
        try:
            path = shortest_path(world, start, Pose(goal, heading))
        except UnreachableError:
            continue
        key = (len(path), sum(m.is_turn for m in path.moves), [MOVE_PRIORITY.index(m) for m in path.moves])
        if best is None or key < best[0]:
            best = (key, path)
    if best is None:
        raise UnreachableError(f"node {goal} is unreachable from {start}")
    return best[1]


def reachable_costs(world: WorldMap, start: Pose) -> dict[Pose, int]:
    """Breadth-first move counts from ``start`` to every reachable pose."""
    dist = {start: 0}
    frontier = [start]
    while frontier:
        nxt_frontier = []
        for pose in frontier:
            for _, nxt in _successors(world, pose):
                if nxt not in dist:
                    dist[nxt] = dist[pose] + 1
                    nxt_frontier.append(nxt)
        frontier = nxt_frontier
    return dist


# --------------------------------------------------------------------------
# visibility


def visible_entities(world: WorldMap, pose: Pose) -> set[tuple[str, str]]:
    """Entities the follower can see from ``pose``.

    Sight runs straight along the heading through connected edges until the
    corridor ends.  Relations: ``at`` (object on the current node),
    ``ahead-k`` (k edges ahead: floors of edge k and the object on its far
    node), ``left``/``right`` (wall features along the corridor ahead, and the
    floors and objects of side corridors leaving the current node).
    """
    seen: set[tuple[str, str]] = set()
    here = pose.node
    if here in world.objects:
        seen.add((world.objects[here], "at"))
    for side, heading in (("left", pose.heading.left()), ("right", pose.heading.right())):
        nb = step(here, heading)
        edge = world.edge(here, nb)
        if edge is None:
            continue
        seen.add((floor_entity(edge.floor_color), side))
        seen.add((floor_entity(edge.floor_texture), side))
        if nb in world.objects:
            seen.add((world.objects[nb], side))
    node, k = here, 0
    while True:
        nxt = step(node, pose.heading)
        edge = world.edge(node, nxt)
        if edge is None:
            break
        k += 1
        rel = f"ahead-{k}"
        seen.add((floor_entity(edge.floor_color), rel))
        seen.add((floor_entity(edge.floor_texture), rel))
        left, right = edge.walls_seen(node)
        if left is not None:
            seen.add((wall_entity(left), "left"))
        if right is not None:
            seen.add((wall_entity(right), "right"))
        if nxt in world.objects:
            seen.add((world.objects[nxt], rel))
        node = nxt
    return seen


def entities_at(world: WorldMap, node: Node) -> set[str]:
    """Entities one meets on reaching ``node``: its object, the floors of all
    corridors meeting there and their wall features."""
    found = set()
    if node in world.objects:
        found.add(world.objects[node])
    for nb in world.neighbors(node):
        edge = world.edge(node, nb)
        found.add(floor_entity(edge.floor_color))
        found.add(floor_entity(edge.floor_texture))
        for wall in (edge.wall_left, edge.wall_right):
            if wall is not None:
                found.add(wall_entity(wall))
    return found

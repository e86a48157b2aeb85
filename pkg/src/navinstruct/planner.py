"""Sentence planning: bind attribute values so that a command is valid for the
path and unambiguous among the alternative paths from the same start pose.

A command is executed against a path action by action.  ``Turn`` and
``Face`` consume the run of turns at the current position (``Turn`` needs at
least one), ``Travel`` consumes the run of forward moves (at least one),
``Find`` consumes everything left and ``Verify`` consumes nothing.  When the
actions do not use up the path exactly, none of the bound attributes count
as valid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

from . import cas
from . import worldmodel as wm
from .cas import CasCommand, CasStructure


@dataclass(frozen=True)
class PlannerConfig:
    p_threshold: float = 0.99
    horizon: int | None = None  # None: moves in the path + 2
    max_alt_paths: int = 512

    def __post_init__(self) -> None:
        if not 0.0 < self.p_threshold <= 1.0:
            raise ValueError("p_threshold must lie in (0, 1]")


def _net_turn(moves) -> int:
    """Net rotation in quarter turns clockwise, modulo 4."""
    return sum(1 if m is wm.Move.RIGHT else -1 for m in moves) % 4


_DIRECTION_TURNS = {"Left": 3, "Right": 1, "Back": 2}


def _side_matches(side: str, relations: set[str]) -> bool:
    if side == "ahead":
        return any(r.startswith("ahead-") for r in relations)
    return side in relations


def _relations(world: wm.WorldMap, pose: wm.Pose, name: str) -> set[str]:
    return {rel for ent, rel in wm.visible_entities(world, pose) if ent == name}


def phi(cmd: CasCommand, path: wm.Path, world: wm.WorldMap) -> int:
    """Number of bound attributes of ``cmd`` that hold when following ``path``."""
    moves = path.moves
    poses = path.poses
    i = 0
    valid = 0
    for act in cmd.actions:
        kind = act.kind
        if kind in ("Turn", "Face"):
            j = i
            while j < len(moves) and moves[j].is_turn:
                j += 1
            if kind == "Turn" and j == i:
                return 0
            pose = poses[j]
            if kind == "Turn":
                direction = act.get("direction")
                if direction is not None and _net_turn(moves[i:j]) == _DIRECTION_TURNS[direction]:
                    valid += 1
            else:
                target = act.get("target")
                if target is not None and _side_matches("ahead", _relations(world, pose, target)):
                    valid += 1
            i = j
        elif kind == "Travel":
            j = i
            while j < len(moves) and moves[j] is wm.Move.FORWARD:
                j += 1
            if j == i:
                return 0
            run = poses[i : j + 1]
            distance = act.get("distance")
            if distance is not None and distance == j - i:
                valid += 1
            until = act.get("until")
            if until is not None:
                met = [until in wm.entities_at(world, p.node) for p in run]
                if met[-1] and not any(met[:-1]):
                    valid += 1
            past = act.get("past")
            if past is not None and any(past in wm.entities_at(world, p.node) for p in run[1:-1]):
                valid += 1
            i = j
        elif kind == "Verify":
            see, side = act.get("see"), act.get("side")
            relations = _relations(world, poses[i], see) if see is not None else set()
            if see is not None and relations:
                valid += 1
            if side is not None:
                if see is None:
                    # side alone: something must be visible on that side
                    relations = {rel for _, rel in wm.visible_entities(world, poses[i])}
                if _side_matches(side, relations):
                    valid += 1
        elif kind == "Find":
            obj = act.get("object")
            i = len(moves)
            if obj is not None and obj in wm.entities_at(world, poses[i].node):
                valid += 1
    if i != len(moves):
        return 0
    return valid


def delta(cmd: CasCommand, path: wm.Path, world: wm.WorldMap) -> int:
    return int(cas.eta(cmd) == phi(cmd, path, world))


@dataclass
class AlternativePaths:
    paths: list[wm.Path]
    truncated: bool = False


def alternative_paths(world: wm.WorldMap, start: wm.Pose, horizon: int, cap: int) -> AlternativePaths:
    """Canonical shortest routes from ``start`` to every pose within ``horizon`` moves.

    Poses are visited in breadth-first order and then sorted by (moves,
    pose), so the first ``cap`` paths are deterministic.
    """
    return _alternatives_cached(world_id_key(world), start, horizon, cap)


# WorldMap holds dicts and is not hashable; key the cache on identity and
# keep the map alive through the registry.
_WORLDS: dict[int, wm.WorldMap] = {}


def world_id_key(world: wm.WorldMap) -> int:
    _WORLDS[id(world)] = world
    return id(world)


@lru_cache(maxsize=4096)
def _alternatives_cached(key: int, start: wm.Pose, horizon: int, cap: int) -> AlternativePaths:
    world = _WORLDS[key]
    costs = wm.reachable_costs(world, start)
    goals = sorted(
        (c, p.node, p.heading.value, p) for p, c in costs.items() if c <= horizon
    )
    truncated = len(goals) > cap
    paths = [wm.shortest_path(world, start, g[-1]) for g in goals[:cap]]
    return AlternativePaths(paths, truncated)


@dataclass
class Likelihood:
    value: float
    approximate: bool = False
    matches: int = 0
    alternatives: int = 0


def likelihood_details(
    cmd: CasCommand, path: wm.Path, world: wm.WorldMap, cfg: PlannerConfig = PlannerConfig()
) -> Likelihood:
    if not delta(cmd, path, world):
        return Likelihood(0.0)
    horizon = cfg.horizon if cfg.horizon is not None else len(path) + 2
    alts = alternative_paths(world, path.start, horizon, cfg.max_alt_paths)
    # the query path stands in for the canonical route to its own end pose
    universe = [p for p in alts.paths if p.end != path.end] + [path]
    matches = sum(delta(cmd, p, world) for p in universe)
    return Likelihood(1.0 / matches, alts.truncated, matches, len(universe))


def command_likelihood(
    cmd: CasCommand, path: wm.Path, world: wm.WorldMap, cfg: PlannerConfig = PlannerConfig()
) -> float:
    """delta(c|p) / sum_j delta(c|p_j) over alternative paths sharing p's start."""
    return likelihood_details(cmd, path, world, cfg).value


def follower_entities(world: wm.WorldMap, path: wm.Path) -> list[str]:
    """Entity labels visible from any pose along the path, sorted."""
    names = set()
    for pose in path.poses:
        names.update(name for name, _ in wm.visible_entities(world, pose))
    return sorted(names)


@dataclass
class Instantiation:
    command: CasCommand
    likelihood: float


def instantiate_scored(
    structure: CasStructure, path: wm.Path, world: wm.WorldMap, cfg: PlannerConfig = PlannerConfig()
) -> Instantiation | None:
    """Greedy binding of every slot of ``structure``; None when a slot has no
    candidate values."""
    entities = follower_entities(world, path)
    cmd = cas.structure_of(structure)
    score = 0.0
    for i, name in cmd.slots():
        kind = cas.attribute_kind(cmd.actions[i].kind, name)
        candidates = cas.literal_values(kind, entities)
        if not candidates:
            return None
        best = None
        for value in candidates:
            trial = cmd.with_value(i, name, value)
            s = command_likelihood(trial, path, world, cfg)
            if best is None or s > best[0]:
                best = (s, trial)
        score, cmd = best
    if not cmd.slots():
        score = command_likelihood(cmd, path, world, cfg)
    return Instantiation(cmd, score)


def instantiate(
    structure: CasStructure, path: wm.Path, world: wm.WorldMap, cfg: PlannerConfig = PlannerConfig()
) -> list[CasCommand]:
    found = instantiate_scored(structure, path, world, cfg)
    if found is None or found.likelihood <= cfg.p_threshold:
        return []
    return [found.command]


@dataclass
class Plan:
    commands: list[CasCommand]
    best_rejected: Instantiation | None = None
    trace: list[str] = field(default_factory=list)


def plan_details(
    structures, path: wm.Path, world: wm.WorldMap, cfg: PlannerConfig = PlannerConfig()
) -> Plan:
    kept: dict[str, CasCommand] = {}
    rejected = None
    trace = []
    for structure in structures:
        found = instantiate_scored(structure, path, world, cfg)
        if found is None:
            trace.append(f"{cas.serialize_cas(structure)}: no visible candidates")
            continue
        trace.append(f"{cas.serialize_cas(found.command)}: P={found.likelihood:.4f}")
        if found.likelihood > cfg.p_threshold:
            kept.setdefault(cas.serialize_cas(found.command), found.command)
        elif cas.eta(found.command) > 0 and (rejected is None or found.likelihood > rejected.likelihood):
            rejected = found
    return Plan([kept[k] for k in sorted(kept)], rejected, trace)


def plan(structures, path: wm.Path, world: wm.WorldMap, cfg: PlannerConfig = PlannerConfig()) -> list[CasCommand]:
    """Valid commands from all candidate structures, deduplicated and sorted
    by canonical serialisation."""
    return plan_details(structures, path, world, cfg).commands

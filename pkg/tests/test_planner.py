import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from navinstruct import cas, planner
from navinstruct import worldmodel as wm
from navinstruct.cas import parse_cas
from navinstruct.planner import PlannerConfig
from navinstruct.worldmodel import Heading, Move, Pose

from conftest import make_map, random_map

E, N, W = Heading.E, Heading.N, Heading.W


def enumerate_universe(world, start, horizon):
    """Oracle: brute-force every move sequence of length <= horizon, keep one
    route per end pose (fewest moves, then fewest turns, then move priority)."""
    best = {}
    order = {Move.FORWARD: 0, Move.LEFT: 1, Move.RIGHT: 2}
    for n in range(horizon + 1):
        for moves in itertools.product(list(Move), repeat=n):
            pose, ok = start, True
            for m in moves:
                if m is Move.FORWARD and not world.can_advance(pose):
                    ok = False
                    break
                pose = wm.apply_move(pose, m)
            if not ok:
                continue
            key = (n, sum(m.is_turn for m in moves), [order[m] for m in moves])
            if pose not in best or key < best[pose][0]:
                best[pose] = (key, moves)
    return {pose: wm.Path.from_moves(start, moves) for pose, (_, moves) in best.items()}


def brute_likelihood(cmd, path, world, horizon):
    if not planner.delta(cmd, path, world):
        return 0.0
    universe = enumerate_universe(world, path.start, horizon)
    universe[path.end] = path
    return 1.0 / sum(planner.delta(cmd, p, world) for p in universe.values())


def test_phi_turn(tee):
    seg = wm.Path.from_moves(Pose((1, 0), E), [Move.LEFT])
    assert planner.phi(parse_cas("Turn(direction=Left)"), seg, tee) == 1
    assert planner.phi(parse_cas("Turn(direction=Right)"), seg, tee) == 0


def test_phi_distance_mismatch():
    world = make_map([((i, 0), (i + 1, 0)) for i in range(3)])
    seg = wm.Path.from_moves(Pose((0, 0), E), [Move.FORWARD] * 3)
    assert planner.phi(parse_cas("Travel(distance=2)"), seg, world) == 0
    assert planner.phi(parse_cas("Travel(distance=3)"), seg, world) == 1


def test_phi_compound_face_travel(tee):
    # manual check: at (1,0) facing E, turn left to face the green corridor,
    # then walk one edge to the lamp at (1,1)
    path = wm.Path.from_moves(Pose((1, 0), E), [Move.LEFT, Move.FORWARD])
    cmd = parse_cas("Face(target=green_floor); Travel(until=lamp)")
    assert planner.phi(cmd, path, tee) == 2
    assert planner.delta(cmd, path, tee) == 1
    # the blue corridor is not ahead after the turn
    assert planner.phi(parse_cas("Face(target=blue_floor); Travel(until=lamp)"), path, tee) == 1


def test_phi_requires_full_coverage(tee):
    path = wm.Path.from_moves(Pose((1, 0), E), [Move.LEFT, Move.FORWARD])
    assert planner.phi(parse_cas("Turn(direction=Left)"), path, tee) == 0


def test_delta_cases(tee):
    seg = wm.Path.from_moves(Pose((1, 0), E), [Move.LEFT])
    assert planner.delta(parse_cas("Turn(direction=Left)"), seg, tee) == 1
    assert planner.delta(parse_cas("Face(target=green_floor); Verify(see=chair)"), seg, tee) == 0
    assert planner.delta(parse_cas("Turn(direction=None)"), seg, tee) == 1


def test_likelihood_unique_command(tee):
    seg = wm.Path.from_moves(Pose((1, 0), E), [Move.LEFT])
    cfg = PlannerConfig(horizon=3)
    cmd = parse_cas("Turn(direction=Left)")
    assert planner.command_likelihood(cmd, seg, tee, cfg) == 1.0
    assert brute_likelihood(cmd, seg, tee, 3) == 1.0


def test_likelihood_shared_with_three_of_four_alternatives():
    # a plus-shaped junction where every arm is blue: "face the blue floor"
    # holds after no turn, left, right and back
    centre = (1, 1)
    arms = [(1, 2), (2, 1), (1, 0), (0, 1)]
    world = make_map([(centre, a) for a in arms])
    start = Pose(centre, N)
    seg = wm.Path.from_moves(start, [Move.LEFT])
    cmd = parse_cas("Face(target=blue_floor)")
    cfg = PlannerConfig(horizon=2)
    expected = brute_likelihood(cmd, seg, world, 2)
    assert expected == 0.25
    assert planner.command_likelihood(cmd, seg, world, cfg) == expected


def test_likelihood_zero_when_invalid(tee):
    seg = wm.Path.from_moves(Pose((1, 0), E), [Move.LEFT])
    assert planner.command_likelihood(parse_cas("Turn(direction=Back)"), seg, tee) == 0.0


def test_instantiate_turn(tee):
    seg = wm.Path.from_moves(Pose((1, 0), E), [Move.LEFT])
    out = planner.instantiate(parse_cas("Turn(direction=None)"), seg, tee)
    # exhaustive oracle over the three directions
    scores = {d: planner.command_likelihood(parse_cas(f"Turn(direction={d})"), seg, tee) for d in cas.DIRECTIONS}
    assert scores == {"Left": 1.0, "Right": 0.0, "Back": 0.0}
    assert out == [parse_cas("Turn(direction=Left)")]


def test_instantiate_nothing_visible():
    world = wm.WorldMap(frozenset({(0, 0), (0, 1)}), {
        wm.edge_key((0, 0), (0, 1)): wm.Edge((0, 0), (0, 1), "blue", "stone")}, {})
    isolated = wm.WorldMap(frozenset({(0, 0)}), {}, {})
    seg = wm.Path((Pose((0, 0), N), Pose((0, 0), Heading.E)))
    assert planner.instantiate(parse_cas("Face(target=None)"), seg, isolated) == []
    assert world  # sanity: the two-node map is well formed


def test_instantiate_ambiguous_below_threshold():
    # "walk past the chair" holds for every travel of two or more edges
    world = make_map([((i, 0), (i + 1, 0)) for i in range(4)], {(1, 0): "chair", (2, 0): "sofa"})
    seg = wm.Path.from_moves(Pose((0, 0), E), [Move.FORWARD] * 3)
    cfg = PlannerConfig(horizon=5)
    cmd = parse_cas("Travel(past=chair)")
    assert planner.command_likelihood(cmd, seg, world, cfg) == brute_likelihood(cmd, seg, world, 5) == 1 / 3
    assert planner.instantiate(parse_cas("Travel(past=None)"), seg, world, cfg) == []


def test_plan_empty_and_dedup(tee):
    seg = wm.Path.from_moves(Pose((1, 0), E), [Move.LEFT])
    assert planner.plan([], seg, tee) == []
    s = parse_cas("Turn(direction=None)")
    assert planner.plan([s, s], seg, tee) == [parse_cas("Turn(direction=Left)")]


def test_plan_matches_brute_force(tee):
    seg = wm.Path.from_moves(Pose((1, 0), E), [Move.LEFT])
    structures = [parse_cas("Turn(direction=None)"), parse_cas("Face(target=None)")]
    cfg = PlannerConfig()
    expected = set()
    entities = planner.follower_entities(tee, seg)
    for s in structures:
        full = [c for c in cas.instantiations(s, entities)
                if brute_likelihood(c, seg, tee, len(seg) + 2) > cfg.p_threshold]
        expected.update(cas.serialize_cas(c) for c in full[:1] or [])
    got = {cas.serialize_cas(c) for c in planner.plan(structures, seg, tee, cfg)}
    assert got == expected == {"Turn(direction=Left)", "Face(target=grass_floor)"}
    for c in planner.plan(structures, seg, tee, cfg):
        assert planner.delta(c, seg, tee) == 1


def _random_fixture(seed):
    rng = random.Random(seed)
    world = random_map(rng, max_nodes=8)
    start = rng.choice(list(world.poses()))
    costs = wm.reachable_costs(world, start)
    goal = rng.choice(sorted(p for p, c in costs.items() if c <= 3))
    path = wm.shortest_path(world, start, goal)
    entities = sorted(world.entity_names())
    kind = rng.choice(["Turn", "Face", "Travel", "Verify", "Find", "TravelVerify"])
    if kind == "Turn":
        cmd = parse_cas(f"Turn(direction={rng.choice(cas.DIRECTIONS)})")
    elif kind == "Face":
        cmd = parse_cas(f"Face(target={rng.choice(entities)})")
    elif kind == "Travel":
        cmd = parse_cas(f"Travel(distance={rng.randint(1, 3)}, until={rng.choice(entities)})")
    elif kind == "Verify":
        cmd = parse_cas(f"Verify(see={rng.choice(entities)}, side={rng.choice(cas.SIDES)})")
    elif kind == "Find":
        cmd = parse_cas(f"Find(object={rng.choice(entities)})")
    else:
        cmd = parse_cas(f"Travel(distance={rng.randint(1, 2)}); Verify(side={rng.choice(cas.SIDES)})")
    return world, path, cmd, rng.randint(len(path), 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_likelihood_equals_enumeration_oracle(seed):
    world, path, cmd, horizon = _random_fixture(seed)
    cfg = PlannerConfig(horizon=horizon)
    got = planner.command_likelihood(cmd, path, world, cfg)
    assert 0.0 <= got <= 1.0
    assert got == brute_likelihood(cmd, path, world, horizon)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_binding_never_grows_denominator(seed):
    world, path, cmd, horizon = _random_fixture(seed)
    universe = list(enumerate_universe(world, path.start, horizon).values())
    slots = cmd.slots()
    partial = cas.structure_of(cmd)
    prev = sum(planner.delta(partial, p, world) for p in universe)
    for i, name in slots:
        partial = partial.with_value(i, name, cmd.actions[i].get(name))
        count = sum(planner.delta(partial, p, world) for p in universe)
        assert count <= prev
        prev = count


def test_alternatives_cap_flags_approximation(tee):
    seg = wm.Path.from_moves(Pose((1, 0), E), [Move.LEFT])
    details = planner.likelihood_details(parse_cas("Turn(direction=Left)"), seg, tee, PlannerConfig(max_alt_paths=2))
    assert details.approximate

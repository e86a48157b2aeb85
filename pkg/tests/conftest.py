import random

import pytest

from navinstruct import worldmodel as wm


def make_map(edges, objects=(), floor=("blue", "stone"), walls=None):
    """Build a map from a list of node pairs; every edge gets ``floor``."""
    walls = walls or {}
    nodes = set()
    built = {}
    for a, b in edges:
        nodes.update((a, b))
        left, right = walls.get((a, b), (None, None))
        color, texture = floor if not isinstance(floor, dict) else floor[(a, b)]
        built[wm.edge_key(a, b)] = wm.Edge(a, b, color, texture, left, right)
    objs = dict(objects)
    nodes.update(objs)
    return wm.WorldMap(frozenset(nodes), built, objs)


def random_map(rng: random.Random, max_nodes=8, size=3):
    """Random connected map on a small grid with random floors and objects."""
    cells = [(x, y) for x in range(size) for y in range(size)]
    start = rng.choice(cells)
    nodes = {start}
    edges = []
    target = rng.randint(2, max_nodes)
    while len(nodes) < target:
        a = rng.choice(sorted(nodes))
        h = rng.choice(list(wm.Heading))
        b = wm.step(a, h)
        if b not in cells:
            continue
        if wm.edge_key(a, b) not in {wm.edge_key(*e) for e in edges}:
            edges.append((a, b))
        nodes.add(b)
    # a few extra edges to create loops
    for _ in range(rng.randint(0, 3)):
        a = rng.choice(sorted(nodes))
        b = wm.step(a, rng.choice(list(wm.Heading)))
        if b in nodes and wm.edge_key(a, b) not in {wm.edge_key(*e) for e in edges}:
            edges.append((a, b))
    floors = {e: (rng.choice(wm.FLOOR_COLORS[:3]), rng.choice(wm.FLOOR_TEXTURES[:3])) for e in edges}
    walls = {e: (rng.choice([None, "fish"]), rng.choice([None, "eiffel"])) for e in edges}
    objects = {n: rng.choice(wm.OBJECTS[:3]) for n in sorted(nodes) if rng.random() < 0.3}
    return make_map(edges, objects, floors, walls)


@pytest.fixture
def corridor():
    # (0,0) - (1,0) - (2,0), chair at the far end
    return make_map([((0, 0), (1, 0)), ((1, 0), (2, 0))], {(2, 0): "chair"})


@pytest.fixture
def tee():
    """A T junction: corridor along y=0 from x=0..2, branch north at x=1.

    Floors: main corridor blue/stone, branch green/grass; lamp at (1, 1).
    """
    floors = {
        ((0, 0), (1, 0)): ("blue", "stone"),
        ((1, 0), (2, 0)): ("blue", "stone"),
        ((1, 0), (1, 1)): ("green", "grass"),
    }
    return make_map(list(floors), {(1, 1): "lamp"}, floors)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)

"""Content selection: path contexts, CAS properties, MaxEnt IRL and retrieval.

A segment's situation is a 14-bit context vector; a CAS structure is
described by 9 integer properties.  The policy over property vectors is
log-linear in the joint (outer product) features,

    pi(a | s)  proportional to  exp(-theta . psi(s, a)),   psi = vec(s xi(a)^T)

and is fitted by matching demonstrated feature expectations.  The MAP
property vector is then matched against a database of training structures
with a mutual-information weighted L1 distance, and the neighbours are
spectrally clustered into a few representative structures.
"""

from __future__ import annotations

import gzip
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from sklearn.cluster import SpectralClustering

from . import cas
from . import worldmodel as wm
from .cas import CasCommand, CasStructure

log = logging.getLogger(__name__)

K_C = 100


class ContextVector(NamedTuple):
    t: int
    w: int
    tw: int
    wt: int
    w_obj_at: int
    w_past_obj: int
    w_dead_end: int
    w_goal: int
    t_start: int
    t_new_carp: int
    t_obj_side: int
    t_obj_at: int
    t_new_pict: int
    t_at_T: int


class PropertyVector(NamedTuple):
    nsl: int
    cmd: int
    dep: int
    eta: int
    pcp: int
    ppc: int
    htw: int
    nln: int
    trf: int


N_CONTEXT = len(ContextVector._fields)
N_PROPERTY = len(PropertyVector._fields)

# low-level command codes for the ``cmd`` property
CMD_TURN, CMD_TRAVEL, CMD_FACE, CMD_OTHER = 0, 1, 2, 3
# reference frame codes for ``trf``
EGOCENTRIC, ALLOCENTRIC = 0, 1


# --------------------------------------------------------------------------
# features


def _floor_ahead(world: wm.WorldMap, pose: wm.Pose) -> str | None:
    edge = world.edge_ahead(pose)
    return None if edge is None else edge.floor_color


def _walls_ahead(world: wm.WorldMap, pose: wm.Pose) -> frozenset[str]:
    edge = world.edge_ahead(pose)
    if edge is None:
        return frozenset()
    return frozenset(w for w in edge.walls_seen(pose.node) if w is not None)


def extract_context(world: wm.WorldMap, path: wm.Path, segment_index: int) -> ContextVector:
    segments = wm.segment_path(path)
    if not 0 <= segment_index < len(segments):
        raise IndexError(f"segment {segment_index} out of range (path has {len(segments)})")
    seg = segments[segment_index]
    nxt = segments[segment_index + 1] if segment_index + 1 < len(segments) else None
    turn, walk = seg.kind == "turn", seg.kind == "travel"
    end = seg.end
    interior = {p.node for p in seg.poses[1:-1]} - {seg.start.node, end.node}

    floor_before, floor_after = _floor_ahead(world, seg.start), _floor_ahead(world, end)
    walls_before, walls_after = _walls_ahead(world, seg.start), _walls_ahead(world, end)
    objects_seen = {name for name, rel in wm.visible_entities(world, end)
                    if rel != "at" and wm.entity_type(name) == "object"}
    return ContextVector(
        t=int(turn),
        w=int(walk),
        tw=int(turn and nxt is not None and nxt.kind == "travel"),
        wt=int(walk and nxt is not None and nxt.kind == "turn"),
        w_obj_at=int(end.node in world.objects),
        w_past_obj=int(walk and any(n in world.objects for n in interior)),
        w_dead_end=int(world.degree(end.node) == 1),
        w_goal=int(end == path.end),
        t_start=int(segment_index == 0),
        t_new_carp=int(floor_after is not None and floor_after != floor_before),
        t_obj_side=int(bool(objects_seen)),
        t_obj_at=int(turn and seg.start.node in world.objects),
        t_new_pict=int(bool(walls_after) and walls_after != walls_before),
        t_at_T=int(turn and world.degree(seg.start.node) == 1),
    )


def extract_properties(structure: CasStructure, command: CasCommand | None = None) -> PropertyVector:
    """Property vector of a structure, counted on ``command`` when given.

    Counts of mentioned entities come from bound values, so a bare structure
    only contributes its shape (``dep``, ``cmd``, ``trf``).
    """
    src = command if command is not None else structure
    kinds = [a.kind for a in src.actions]
    values = [v for a in src.actions for _, v in a.bound]
    types = [wm.entity_type(v) if isinstance(v, str) else None for v in values]
    if "Travel" in kinds:
        code = CMD_TRAVEL
    elif "Turn" in kinds:
        code = CMD_TURN
    elif "Face" in kinds:
        code = CMD_FACE
    else:
        code = CMD_OTHER
    heads_to_object = "Find" in kinds or any(
        a.kind == "Travel" and wm.entity_type(a.get("until") or "") == "object" for a in src.actions
    )
    return PropertyVector(
        nsl=len(set(values)),
        cmd=code,
        dep=len(src.actions),
        eta=cas.eta(src),
        pcp=sum(t in ("floor_color", "floor_texture") for t in types),
        ppc=sum(t == "wall" for t in types),
        htw=int(heads_to_object),
        nln=sum(t == "object" for t in types),
        trf=ALLOCENTRIC if "Face" in kinds else EGOCENTRIC,
    )


def joint_features(context: Sequence[int], prop: Sequence[int]) -> np.ndarray:
    """psi(s, a): the 14 x 9 outer product, flattened row-major."""
    return np.outer(np.asarray(context, float), np.asarray(prop, float)).ravel()


# --------------------------------------------------------------------------
# MaxEnt IRL


@dataclass
class IrlConfig:
    l2: float = 1e-3
    lr: float = 0.1
    iters: int = 500
    method: str = "newton"  # or "gradient"
    tol: float = 1e-10
    k_c: int = K_C
    n_clusters: int = 5
    gamma: float = 1.0  # recorded only; the log-linear policy has no transitions
    mi_smoothing: float = 1.0
    seed: int = 0


@dataclass
class IrlModel:
    theta: np.ndarray  # (14, 9)
    actions: list[PropertyVector]
    action_db: list[tuple[CasStructure, PropertyVector]]
    mi_weights: np.ndarray
    config: IrlConfig = field(default_factory=IrlConfig)
    converged: bool = True
    grad_norm: float = 0.0
    feature_gap: float = 0.0

    def policy(self, context: Sequence[int]) -> np.ndarray:
        return policy(self.theta, context, self.actions)


def policy(theta: np.ndarray, context: Sequence[int], actions: Sequence[Sequence[int]]) -> np.ndarray:
    """pi(. | s) over ``actions``."""
    logits = -(np.asarray(context, float) @ theta @ np.asarray(actions, float).T)
    logits -= logits.max()
    p = np.exp(logits)
    return p / p.sum()


@dataclass
class _Problem:
    contexts: np.ndarray  # (S, 14) distinct contexts
    actions: np.ndarray  # (A, 9) distinct property vectors
    counts: np.ndarray  # (S, A) demo counts
    n: int

    def empirical(self) -> np.ndarray:
        return self.contexts.T @ self.counts @ self.actions / self.n

    def model_probs(self, theta: np.ndarray) -> np.ndarray:
        logits = -(self.contexts @ theta @ self.actions.T)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def expected(self, theta: np.ndarray) -> np.ndarray:
        weights = self.counts.sum(axis=1, keepdims=True) * self.model_probs(theta)
        return self.contexts.T @ weights @ self.actions / self.n

    # The penalty is l2/2 |theta|^2 on the summed log-likelihood; both terms
    # are divided by n so the optimiser sees per-demonstration magnitudes.
    def objective(self, theta: np.ndarray, l2: float) -> float:
        """Negative mean log-likelihood plus the scaled L2 penalty (minimised)."""
        logits = -(self.contexts @ theta @ self.actions.T)
        shift = logits.max(axis=1, keepdims=True)
        log_z = (shift + np.log(np.exp(logits - shift).sum(axis=1, keepdims=True)))
        ll = (self.counts * (logits - log_z)).sum() / self.n
        return -ll + 0.5 * l2 / self.n * float((theta * theta).sum())

    def hessian(self, theta: np.ndarray, l2: float) -> np.ndarray:
        """Hessian of :meth:`objective`: the demo-weighted covariance of psi
        under the policy, which factors as (s s^T) kron Cov(xi | s)."""
        p = self.model_probs(theta)
        w = self.counts.sum(axis=1) / self.n
        mu = p @ self.actions  # (S, 9)
        second = np.einsum("sa,ai,aj->sij", p, self.actions, self.actions)
        cov = second - np.einsum("si,sj->sij", mu, mu)
        H = np.einsum("s,sk,sl,sij->kilj", w, self.contexts, self.contexts, cov)
        n = N_CONTEXT * N_PROPERTY
        return H.reshape(n, n) + (l2 / self.n) * np.eye(n)

    def gradient(self, theta: np.ndarray, l2: float) -> np.ndarray:
        # d(-ll)/dtheta = empirical - expected joint features (note the sign
        # of the exponent), plus the penalty term
        return self.empirical() - self.expected(theta) + l2 / self.n * theta


def _problem(demos: Sequence[tuple[Sequence[int], Sequence[int]]]) -> tuple[_Problem, list[PropertyVector]]:
    ctx_index: dict[tuple, int] = {}
    act_index: dict[tuple, int] = {}
    pairs = []
    for s, a in demos:
        s, a = tuple(int(x) for x in s), tuple(int(x) for x in a)
        if len(s) != N_CONTEXT or len(a) != N_PROPERTY:
            raise ValueError(f"demonstration has shape ({len(s)}, {len(a)}), expected ({N_CONTEXT}, {N_PROPERTY})")
        pairs.append((ctx_index.setdefault(s, len(ctx_index)), act_index.setdefault(a, len(act_index))))
    counts = np.zeros((len(ctx_index), len(act_index)))
    for i, j in pairs:
        counts[i, j] += 1
    contexts = np.array(list(ctx_index), dtype=float).reshape(-1, N_CONTEXT)
    actions = np.array(list(act_index), dtype=float).reshape(-1, N_PROPERTY)
    return _Problem(contexts, actions, counts, len(pairs)), [PropertyVector(*a) for a in act_index]


def irl_gradient(theta: np.ndarray, demos, l2: float = 0.0) -> np.ndarray:
    """Gradient of the minimised objective at ``theta`` (for checking)."""
    prob, _ = _problem(demos)
    return prob.gradient(theta, l2)


def irl_objective(theta: np.ndarray, demos, l2: float = 0.0) -> float:
    prob, _ = _problem(demos)
    return prob.objective(theta, l2)


def feature_gap(theta: np.ndarray, demos) -> float:
    """max |empirical - model-expected joint features|."""
    prob, _ = _problem(demos)
    return float(np.abs(prob.empirical() - prob.expected(theta)).max())


def fit_theta(demos, cfg: IrlConfig = IrlConfig()) -> tuple[np.ndarray, bool, float]:
    """Solve for theta; returns (theta, converged, final gradient norm)."""
    prob, _ = _problem(demos)
    shape = (N_CONTEXT, N_PROPERTY)
    if cfg.method == "newton":
        theta = np.zeros(shape)
        f = prob.objective(theta, cfg.l2)
        for _ in range(cfg.iters):
            g = prob.gradient(theta, cfg.l2)
            if np.abs(g).max() < cfg.tol:
                break
            H = prob.hessian(theta, cfg.l2)
            # lstsq copes with directions the demonstrations never constrain
            step = -np.linalg.lstsq(H, g.ravel(), rcond=1e-12)[0].reshape(shape)
            t = 1.0
            while t > 1e-10:
                cand = theta + t * step
                fc = prob.objective(cand, cfg.l2)
                if fc <= f + 1e-4 * t * float((g * step).sum()):
                    break
                t *= 0.5
            else:
                break
            theta, f = cand, fc
    elif cfg.method == "gradient":
        theta = np.zeros(shape)
        for _ in range(cfg.iters):
            g = prob.gradient(theta, cfg.l2)
            if np.abs(g).max() < cfg.tol:
                break
            theta -= cfg.lr * g
    else:
        raise ValueError(f"unknown IRL optimiser {cfg.method!r}")
    g = prob.gradient(theta, cfg.l2)
    norm = float(np.abs(g).max())
    converged = norm < max(cfg.tol, 1e-6)
    if not converged:
        log.warning("IRL did not converge: final gradient max-norm %.3g", norm)
    return theta, converged, norm


def train_irl(demos: Sequence[tuple[Sequence[int], Sequence[int]]], cfg: IrlConfig | None = None,
              structures: Sequence[CasStructure] | None = None) -> IrlModel:
    """Fit the policy on (context, property) demonstrations.

    ``structures`` (one per demonstration) populate the retrieval database;
    without them the database holds the property vectors only.
    """
    cfg = cfg or IrlConfig()
    if not demos:
        raise ValueError("no demonstrations")
    prob, actions = _problem(demos)
    theta, converged, norm = fit_theta(demos, cfg)
    db: list[tuple[CasStructure, PropertyVector]] = []
    seen = set()
    if structures is not None:
        if len(structures) != len(demos):
            raise ValueError("need exactly one structure per demonstration")
        for st, (_, a) in zip(structures, demos):
            key = (cas.serialize_cas(cas.structure_of(st)), tuple(a))
            if key not in seen:
                seen.add(key)
                db.append((cas.structure_of(st), PropertyVector(*a)))
    weights = mi_weights([s for s, _ in demos], [a for _, a in demos], cfg.mi_smoothing)
    gap = float(np.abs(prob.empirical() - prob.expected(theta)).max())
    return IrlModel(theta, actions, db, weights, cfg, converged, norm, gap)


def map_property_vector(model: IrlModel, context: Sequence[int]) -> PropertyVector:
    """Most probable property vector; ties go to the earliest action."""
    if not model.actions:
        raise ValueError("model has no actions")
    p = model.policy(context)
    return model.actions[int(np.argmax(p))]


# --------------------------------------------------------------------------
# retrieval


def _mutual_information(x: np.ndarray, y: np.ndarray, smoothing: float) -> float:
    xs, xi = np.unique(x, return_inverse=True)
    ys, yi = np.unique(y, return_inverse=True)
    if len(xs) < 2 or len(ys) < 2:
        return 0.0
    joint = np.full((len(xs), len(ys)), float(smoothing))
    np.add.at(joint, (xi, yi), 1.0)
    joint /= joint.sum()
    px, py = joint.sum(axis=1, keepdims=True), joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float((joint[nz] * np.log(joint[nz] / (px @ py)[nz])).sum())


def mi_weights(contexts: Sequence[Sequence[int]], properties: Sequence[Sequence[int]],
               smoothing: float = 1.0) -> np.ndarray:
    """Per property component, the summed mutual information (nats) with each
    context bit, from co-occurrence counts with additive smoothing."""
    S = np.asarray(contexts, dtype=int).reshape(-1, N_CONTEXT)
    P = np.asarray(properties, dtype=int).reshape(-1, N_PROPERTY)
    out = np.zeros(N_PROPERTY)
    for d in range(N_PROPERTY):
        out[d] = sum(_mutual_information(S[:, b], P[:, d], smoothing) for b in range(N_CONTEXT))
    return np.maximum(out, 0.0)


def knn_retrieve(model: IrlModel, target: Sequence[int], k_c: int | None = None) -> list[CasStructure]:
    """The k_c database structures closest to ``target`` (stable order)."""
    k_c = model.config.k_c if k_c is None else k_c
    if not model.action_db:
        return []
    props = np.array([p for _, p in model.action_db], dtype=float)
    dist = np.abs(props - np.asarray(target, float)) @ model.mi_weights
    order = np.argsort(dist, kind="stable")[:k_c]
    return [model.action_db[i][0] for i in order]


def structure_distance_matrix(candidates: Sequence[CasStructure]) -> np.ndarray:
    n = len(candidates)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = cas.token_distance(candidates[i], candidates[j], include_unset=True)
    return dist


def cluster_structures(candidates: Sequence[CasStructure], k: int = 5, seed: int = 0) -> list[CasStructure]:
    """Spectral clustering on 1 - token distance; one medoid per cluster.

    Duplicates are merged first.  Representatives are returned in the order
    of their first appearance in ``candidates``.
    """
    if not candidates:
        raise ValueError("no candidate structures")
    unique: list[CasStructure] = []
    seen = set()
    for c in candidates:
        key = cas.serialize_cas(c)
        if key not in seen:
            seen.add(key)
            unique.append(c)
    k = max(1, min(k, len(unique)))
    if k == len(unique):
        return unique
    dist = structure_distance_matrix(unique)
    affinity = 1.0 - dist
    with warnings.catch_warnings():
        # disconnected affinity graphs are expected for very different structures
        warnings.simplefilter("ignore")
        labels = SpectralClustering(
            n_clusters=k, affinity="precomputed", random_state=seed, assign_labels="kmeans", n_init=10
        ).fit_predict(affinity)
    reps = []
    for label in sorted(set(labels), key=lambda l: int(np.flatnonzero(labels == l)[0])):
        members = np.flatnonzero(labels == label)
        cost = dist[np.ix_(members, members)].sum(axis=1)
        reps.append(int(members[int(np.argmin(cost))]))
    return [unique[i] for i in sorted(reps)]


def select_structures(model: IrlModel, context: Sequence[int]) -> list[CasStructure]:
    """MAP property vector -> k-NN structures -> cluster representatives."""
    target = map_property_vector(model, context)
    neighbours = knn_retrieve(model, target)
    if not neighbours:
        return []
    return cluster_structures(neighbours, model.config.n_clusters, model.config.seed)


# --------------------------------------------------------------------------
# checkpoints

IRL_FORMAT = "navinstruct.irl"
IRL_VERSION = 1


def save_irl(model: IrlModel, path) -> None:
    cfg = model.config
    doc = {
        "format": IRL_FORMAT,
        "version": IRL_VERSION,
        "config": cfg.__dict__,
        "theta": {"dims": list(model.theta.shape), "values": model.theta.ravel().tolist()},
        "mi_weights": {"dims": [N_PROPERTY], "values": model.mi_weights.tolist()},
        "actions": [list(map(int, a)) for a in model.actions],
        "action_db": [{"cas": cas.serialize_cas(s), "properties": list(map(int, p))} for s, p in model.action_db],
        "converged": model.converged,
        "grad_norm": model.grad_norm,
        "feature_gap": model.feature_gap,
    }
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wt", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def load_irl(path) -> IrlModel:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != IRL_FORMAT:
        raise ValueError(f"{path}: not an IRL checkpoint")
    if doc.get("version") != IRL_VERSION:
        raise ValueError(f"{path}: unsupported IRL checkpoint version {doc.get('version')}")
    theta = np.asarray(doc["theta"]["values"], float).reshape(doc["theta"]["dims"])
    return IrlModel(
        theta=theta,
        actions=[PropertyVector(*a) for a in doc["actions"]],
        action_db=[(cas.parse_cas(e["cas"]), PropertyVector(*e["properties"])) for e in doc["action_db"]],
        mi_weights=np.asarray(doc["mi_weights"]["values"], float),
        config=IrlConfig(**doc["config"]),
        converged=doc["converged"],
        grad_norm=doc["grad_norm"],
        feature_gap=doc["feature_gap"],
    )


def segment_demos(world: wm.WorldMap, path: wm.Path, commands: Sequence[CasCommand]):
    """(context, properties, structure) for each segment of a demonstration."""
    out = []
    for i, cmd in enumerate(commands):
        out.append((extract_context(world, path, i), extract_properties(cas.structure_of(cmd), cmd),
                    cas.structure_of(cmd)))
    return out


def entropy(bits: Sequence[int]) -> float:
    """Shannon entropy (nats) of a discrete sample."""
    _, counts = np.unique(np.asarray(bits), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum()) if len(p) > 1 else 0.0


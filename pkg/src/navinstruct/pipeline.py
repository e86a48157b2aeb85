"""End-to-end wiring: the three training phases, instruction generation for
a (map, path) query, and evaluation over a test split."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Sequence

from . import cas
from . import content_select as cs
from . import corpus
from . import lm_rank
from . import metrics
from . import planner
from . import realize
from . import worldmodel as wm
from .cas import CasCommand
from .vocab import Vocab, build_vocab

log = logging.getLogger(__name__)

IRL_FILE = "irl.json"
SEQ2SEQ_FILE = "seq2seq.json"
SEQ2SEQ_ABLATED_FILE = "seq2seq_no_aligner.json"
LM_FILE = "lm.json"


@dataclass
class PipelineConfig:
    dataset: str = "data"
    checkpoint_dir: str = "checkpoints"
    k_c: int = 100
    p_t: float = 0.99
    k_e: int = 128
    l_t: float = 95.0
    beam_width: int = 2
    layers: int = 2
    hidden: int = 128
    n_clusters: int = 5
    seed: int = 0
    epochs: int = 15
    batch_size: int = 32
    lr: float = 3e-3
    patience: int = 5
    lm_epochs: int = 10
    irl_l2: float = 1e-3

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        data = json.loads(FsPath(path).read_text(encoding="utf-8")) if path else {}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def planner_config(self) -> planner.PlannerConfig:
        return planner.PlannerConfig(p_threshold=self.p_t)

    def seq2seq_config(self, aligner: bool = True) -> realize.Seq2SeqConfig:
        return realize.Seq2SeqConfig(embed=self.k_e, hidden=self.hidden, layers=self.layers,
                                     attention=self.hidden, deep_output=self.hidden,
                                     aligner=aligner, seed=self.seed)

    def train_config(self) -> realize.TrainConfig:
        return realize.TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                                   patience=self.patience, seed=self.seed)

    def lm_config(self) -> lm_rank.LmConfig:
        return lm_rank.LmConfig(embed=self.k_e, hidden=self.hidden, layers=self.layers,
                                l_threshold=self.l_t, seed=self.seed)

    def lm_train_config(self) -> lm_rank.LmTrainConfig:
        return lm_rank.LmTrainConfig(epochs=self.lm_epochs, batch_size=self.batch_size, lr=self.lr,
                                     seed=self.seed)

    def irl_config(self) -> cs.IrlConfig:
        return cs.IrlConfig(l2=self.irl_l2, k_c=self.k_c, n_clusters=self.n_clusters, seed=self.seed)


class PhaseError(RuntimeError):
    """A trainer failure tagged with its pipeline phase."""

    def __init__(self, phase: str, exc: Exception):
        super().__init__(f"[{phase}] {type(exc).__name__}: {exc}")
        self.phase = phase


# --------------------------------------------------------------------------
# training phases

def irl_demonstrations(demos: Sequence[corpus.Demonstration], maps: dict[str, wm.WorldMap]):
    """(context, property) pairs and their structures, one per segment."""
    pairs, structures = [], []
    for d in demos:
        for ctx, props, structure in cs.segment_demos(maps[d.map_id], d.path, d.cas):
            pairs.append((ctx, props))
            structures.append(structure)
    return pairs, structures


def train_irl_phase(demos, maps, cfg: PipelineConfig) -> cs.IrlModel:
    try:
        pairs, structures = irl_demonstrations(demos, maps)
        return cs.train_irl(pairs, cfg.irl_config(), structures)
    except Exception as exc:
        raise PhaseError("irl", exc) from exc


def cas_vocab() -> Vocab:
    return Vocab(cas.all_cas_tokens())


def train_seq2seq_phase(pairs, val_pairs, cfg: PipelineConfig, aligner: bool = True) -> realize.TrainResult:
    try:
        words = build_vocab([w for _, w in pairs])
        model = realize.Seq2SeqModel(cas_vocab(), words, cfg.seq2seq_config(aligner))
        return realize.train(model, pairs, cfg.train_config(), val_pairs=val_pairs or None)
    except Exception as exc:
        raise PhaseError("seq2seq", exc) from exc


def train_lm_phase(sentences, val_sentences, cfg: PipelineConfig,
                   vocab: Vocab | None = None) -> lm_rank.LmTrainResult:
    try:
        return lm_rank.train_lm(sentences, vocab=vocab, config=cfg.lm_config(), hyper=cfg.lm_train_config(),
                                val_corpus=val_sentences or None)
    except Exception as exc:
        raise PhaseError("lm", exc) from exc


def training_pairs(split: corpus.DatasetSplit, lexicon: corpus.Lexicon | None = None, augment: bool = True):
    train = corpus.pairs_of(split.train)
    if augment:
        train = corpus.augment(train, lexicon)
    return train, corpus.pairs_of(split.validation)


def seen_pattern_pairs(test_pairs, train_pairs):
    """Test pairs whose CAS structure also occurs in training."""
    patterns = {cas.serialize_cas(cas.structure_of(c)) for c, _ in train_pairs}
    return [(c, w) for c, w in test_pairs if cas.serialize_cas(cas.structure_of(c)) in patterns]


# --------------------------------------------------------------------------
# checkpoints

@dataclass
class Models:
    irl: cs.IrlModel | None = None
    seq2seq: realize.Seq2SeqModel | None = None
    lm: lm_rank.LangModel | None = None
    seq2seq_ablated: realize.Seq2SeqModel | None = None


def load_models(directory, need: Sequence[str] = ("irl", "seq2seq", "lm")) -> Models:
    root = FsPath(directory)
    files = {"irl": IRL_FILE, "seq2seq": SEQ2SEQ_FILE, "lm": LM_FILE, "seq2seq_ablated": SEQ2SEQ_ABLATED_FILE}
    loaders = {"irl": cs.load_irl, "seq2seq": realize.Seq2SeqModel.load, "lm": lm_rank.LangModel.load,
               "seq2seq_ablated": realize.Seq2SeqModel.load}
    models = Models()
    for name, fname in files.items():
        p = root / fname
        if p.exists():
            setattr(models, name, loaders[name](p))
        elif name in need:
            raise FileNotFoundError(f"missing {name} checkpoint {p}")
    return models


# --------------------------------------------------------------------------
# generation

@dataclass
class SegmentResult:
    index: int
    kind: str
    context: tuple
    structures: list[str]
    commands: list[str]
    sentence: list[str]
    perplexity: float | None
    flagged: bool
    fallback: str | None = None


@dataclass
class Generation:
    text: str
    segments: list[SegmentResult] = field(default_factory=list)
    notice: str = ""

    @property
    def flagged(self) -> bool:
        return any(s.flagged for s in self.segments)

    def trace(self) -> str:
        lines = [self.notice] if self.notice else []
        for s in self.segments:
            lines.append(f"segment {s.index} ({s.kind}) context={''.join(map(str, s.context))}")
            lines.append(f"  structures: {' | '.join(s.structures) or '-'}")
            lines.append(f"  commands:   {' | '.join(s.commands) or '-'}")
            if s.fallback:
                lines.append(f"  fallback:   {s.fallback}")
            ppl = "-" if s.perplexity is None else f"{s.perplexity:.3f}"
            lines.append(f"  sentence:   {' '.join(s.sentence)}  (ppl {ppl}{', flagged' if s.flagged else ''})")
        return "\n".join(lines) + "\n"


def segment_commands(models: Models, world: wm.WorldMap, path: wm.Path, index: int,
                     cfg: PipelineConfig) -> tuple[tuple, list[CasCommand], list[CasCommand], str | None]:
    """(context, structures, commands, fallback note) for one segment."""
    segment = path.segments[index]
    ctx = tuple(cs.extract_context(world, path, index))
    structures = cs.select_structures(models.irl, ctx) if models.irl is not None else []
    plan = planner.plan_details(structures, segment.as_path(), world, cfg.planner_config())
    if plan.commands:
        return ctx, structures, plan.commands, None
    if plan.best_rejected is not None:
        cmd = plan.best_rejected.command
        return ctx, structures, [cmd], f"no command above P_t; best sub-threshold P={plan.best_rejected.likelihood:.4f}"
    cmd = corpus.fallback_command(segment)
    return ctx, structures, [cmd], "no structure could be bound; movement-only command"


def generate(models: Models, world: wm.WorldMap, start: wm.Pose, goal: wm.Pose | wm.Node,
             cfg: PipelineConfig | None = None) -> Generation:
    """Instruction text for the shortest path from ``start`` to ``goal``."""
    cfg = cfg or PipelineConfig()
    if models.seq2seq is None:
        raise ValueError("generation needs a seq2seq model")
    if isinstance(goal, wm.Pose):
        path = wm.shortest_path(world, start, goal)
    else:
        path = wm.shortest_path_to_node(world, start, goal)
    return generate_for_path(models, world, path, cfg)


def generate_for_path(models: Models, world: wm.WorldMap, path: wm.Path, cfg: PipelineConfig | None = None) -> Generation:
    cfg = cfg or PipelineConfig()
    path.check_in(world)
    segments = path.segments
    if not segments:
        return Generation("", [], notice="start equals goal: nothing to describe")
    out = []
    for k, seg in enumerate(segments):
        ctx, structures, commands, note = segment_commands(models, world, path, k, cfg)
        candidates: list[list[str]] = []
        for cmd in commands:
            for words in realize.generate_candidates(models.seq2seq, cmd, cfg.beam_width):
                if words and words not in candidates:
                    candidates.append(words)
        if not candidates:
            candidates = [realize.greedy_decode(models.seq2seq, commands[0]) or ["<unk>"]]
        ppl = None
        best = candidates[0]
        flagged = note is not None
        if models.lm is not None:
            ranked = lm_rank.rank(models.lm, candidates, threshold=cfg.l_t)
            best, ppl = ranked.best, ranked.perplexities[ranked.index]
            flagged = flagged or ranked.best_flagged
        out.append(SegmentResult(k, seg.kind, ctx, [cas.serialize_cas(s) for s in structures],
                                 [cas.serialize_cas(c) for c in commands], best, ppl, flagged, note))
    text = lm_rank.sequence_instruction([s.sentence for s in out])
    return Generation(text, out)


# --------------------------------------------------------------------------
# evaluation

def evaluate(models: Models, test_pairs, cfg: PipelineConfig | None = None,
             ablation: str = "none") -> metrics.BleuReport:
    cfg = cfg or PipelineConfig()
    if ablation not in ("none", "no_aligner", "references"):
        raise ValueError(f"unknown ablation {ablation!r}")
    if ablation == "references":
        refs = [w for _, w in test_pairs]
        return metrics.score(refs, refs)
    model = models.seq2seq if ablation == "none" else models.seq2seq_ablated
    if model is None:
        raise FileNotFoundError(f"no checkpoint for ablation {ablation!r}")
    return metrics.evaluate(model, models.lm, test_pairs, cfg.beam_width)

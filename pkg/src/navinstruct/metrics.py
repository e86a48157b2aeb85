"""4-gram BLEU at sentence and corpus level, and the evaluation harness.

Sentence BLEU smooths a zero n-gram precision for n >= 2 by adding one to
both the match count and the hypothesis n-gram count; a zero unigram
precision still scores 0.  Corpus BLEU pools clipped counts over all pairs
and is not smoothed; an order for which no hypothesis has any n-gram counts
as precision 1.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

MAX_N = 4


def ngram_counts(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def ngram_stats(hyp: Sequence[str], ref: Sequence[str], max_n: int = MAX_N) -> list[tuple[int, int]]:
    """(clipped matches, hypothesis n-gram count) for n = 1..max_n."""
    out = []
    for n in range(1, max_n + 1):
        h, r = ngram_counts(hyp, n), ngram_counts(ref, n)
        out.append((sum(min(c, r[g]) for g, c in h.items()), max(len(hyp) - n + 1, 0)))
    return out


def brevity_penalty(hyp_len: int, ref_len: int) -> float:
    if hyp_len == 0:
        return 0.0
    return 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)


def _normalise(words: Sequence[str]) -> list[str]:
    return [w.lower() for w in words]


def bleu_sentence(hyp: Sequence[str], ref: Sequence[str]) -> float:
    """Smoothed sentence BLEU-4 in percent."""
    if not ref:
        raise ValueError("empty reference")
    hyp, ref = _normalise(hyp), _normalise(ref)
    if not hyp:
        return 0.0
    stats = ngram_stats(hyp, ref)
    if stats[0][0] == 0:
        return 0.0
    logs = []
    for n, (m, c) in enumerate(stats, 1):
        if m == 0:
            m, c = 1, c + 1
        logs.append(math.log(m / c))
    return 100.0 * brevity_penalty(len(hyp), len(ref)) * math.exp(sum(logs) / MAX_N)


@dataclass
class CorpusStats:
    matches: list[int]
    totals: list[int]
    hyp_len: int
    ref_len: int

    @property
    def precisions(self) -> list[float]:
        # an order with no hypothesis n-grams at all is vacuously precise
        return [m / c if c else 1.0 for m, c in zip(self.matches, self.totals)]

    @property
    def bp(self) -> float:
        return brevity_penalty(self.hyp_len, self.ref_len)

    @property
    def bleu(self) -> float:
        if self.hyp_len == 0 or min(self.precisions) == 0.0:
            return 0.0
        return 100.0 * self.bp * math.exp(sum(math.log(p) for p in self.precisions) / MAX_N)


def corpus_stats(pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> CorpusStats:
    matches, totals = [0] * MAX_N, [0] * MAX_N
    hyp_len = ref_len = 0
    for hyp, ref in pairs:
        hyp, ref = _normalise(hyp), _normalise(ref)
        for k, (m, c) in enumerate(ngram_stats(hyp, ref)):
            matches[k] += m
            totals[k] += c
        hyp_len += len(hyp)
        ref_len += len(ref)
    return CorpusStats(matches, totals, hyp_len, ref_len)


def bleu_corpus(pairs: Sequence[tuple[Sequence[str], Sequence[str]]]) -> float:
    """Corpus BLEU-4 in percent over (hypothesis, reference) pairs."""
    if not pairs:
        raise ValueError("no pairs to score")
    return corpus_stats(pairs).bleu


@dataclass
class BleuReport:
    sentence_bleu_mean: float
    corpus_bleu: float
    precisions: list[float]
    brevity_penalty: float
    per_pair: list[float] = field(default_factory=list)
    hypotheses: list[list[str]] = field(default_factory=list)
    references: list[list[str]] = field(default_factory=list)
    flagged: list[bool] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def table(self) -> str:
        rows = [
            ("pairs", f"{len(self.per_pair)}"),
            ("sentence BLEU (macro)", f"{self.sentence_bleu_mean:.2f}"),
            ("corpus BLEU (micro)", f"{self.corpus_bleu:.2f}"),
        ]
        rows += [(f"p_{n}", f"{100 * p:.2f}") for n, p in enumerate(self.precisions, 1)]
        rows.append(("brevity penalty", f"{self.brevity_penalty:.4f}"))
        if self.flagged:
            rows.append(("above L_t", f"{sum(self.flagged)}"))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>8}" for k, v in rows) + "\n"


def score(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
          flagged: Sequence[bool] = ()) -> BleuReport:
    if len(hypotheses) != len(references):
        raise ValueError("hypotheses and references differ in number")
    if not references:
        raise ValueError("no pairs to score")
    pairs = list(zip(hypotheses, references))
    per = [bleu_sentence(h, r) for h, r in pairs]
    stats = corpus_stats(pairs)
    return BleuReport(
        sentence_bleu_mean=sum(per) / len(per),
        corpus_bleu=stats.bleu,
        precisions=stats.precisions,
        brevity_penalty=stats.bp,
        per_pair=per,
        hypotheses=[list(h) for h in hypotheses],
        references=[list(r) for r in references],
        flagged=list(flagged),
    )


def realize_best(seq2seq, lm, cmd, beam_width: int = 2):
    """Candidates from greedy + beam search, ranked by the language model.

    Returns (words, flagged).  Without a language model the greedy output is
    used.
    """
    from . import lm_rank, realize

    candidates = realize.generate_candidates(seq2seq, cmd, beam_width)
    candidates = [c for c in candidates if c] or candidates
    if lm is None:
        return candidates[0], False
    ranked = lm_rank.rank(lm, [c if c else ["<unk>"] for c in candidates])
    return candidates[ranked.index], ranked.best_flagged


def evaluate(seq2seq, lm, testset: Sequence[tuple[object, Sequence[str]]], beam_width: int = 2) -> BleuReport:
    """Generate for every (command, reference) pair and score the outputs."""
    hyps, flags = [], []
    for cmd, _ in testset:
        words, flagged = realize_best(seq2seq, lm, cmd, beam_width)
        hyps.append(words)
        flags.append(flagged)
    return score(hyps, [ref for _, ref in testset], flags)

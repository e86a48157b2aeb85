"""LSTM language model used to score and rank candidate sentences."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import neural as nn
from .neural import Tensor
from .vocab import Vocab

log = logging.getLogger(__name__)

L_THRESHOLD = 95.0


@dataclass
class LmConfig:
    embed: int = 128
    hidden: int = 128
    layers: int = 2
    l_threshold: float = L_THRESHOLD
    seed: int = 0


@dataclass
class LmTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    clip: float = 5.0
    patience: int = 3
    seed: int = 0
    max_len: int = 40


class LangModel:
    def __init__(self, vocab: Vocab, config: LmConfig | None = None):
        self.vocab = vocab
        self.config = cfg = config or LmConfig()
        rng = np.random.default_rng(cfg.seed)
        p = {"word_embedding": nn.parameter(rng.uniform(-0.08, 0.08, (len(vocab), cfg.embed)))}
        for layer in range(cfg.layers):
            lstm = nn.init_lstm(rng, cfg.embed if layer == 0 else cfg.hidden, cfg.hidden)
            p[f"lstm{layer}.weight"], p[f"lstm{layer}.bias"] = lstm.weight, lstm.bias
        p["out.weight"] = nn.parameter(rng.uniform(-0.08, 0.08, (cfg.hidden, len(vocab))))
        p["out.bias"] = nn.parameter(np.zeros(len(vocab)))
        self.params = p

    def _batch(self, sentences: list[Sequence[int]]):
        B, T = len(sentences), max(len(s) for s in sentences) + 1
        inputs = np.full((B, T), self.vocab.pad_id, dtype=np.int64)
        targets = np.full((B, T), self.vocab.pad_id, dtype=np.int64)
        weights = np.zeros((B, T))
        for b, s in enumerate(sentences):
            inputs[b, : len(s) + 1] = [self.vocab.bos_id] + list(s)
            targets[b, : len(s) + 1] = list(s) + [self.vocab.eos_id]
            weights[b, : len(s) + 1] = 1.0
        return inputs, targets, weights

    def loss(self, sentences: list[Sequence[int]]) -> tuple[Tensor, np.ndarray]:
        """Summed next-word NLL and the per-sentence NLL/token-count array."""
        cfg = self.config
        inputs, targets, weights = self._batch(sentences)
        B, T = inputs.shape
        emb = nn.embedding(self.params["word_embedding"], inputs)
        zeros = Tensor(np.zeros((B, cfg.hidden)))
        state = [(zeros, zeros)] * cfg.layers
        tops = []
        for t in range(T):
            x = emb[:, t, :]
            new_state = []
            for layer in range(cfg.layers):
                lstm = nn.LstmParams(self.params[f"lstm{layer}.weight"], self.params[f"lstm{layer}.bias"])
                h, c = nn.lstm_step(x, *state[layer], lstm)
                new_state.append((h, c))
                x = h
            state = new_state
            tops.append(x)
        hidden = nn.reshape(nn.stack(tops, axis=1), (B * T, cfg.hidden))
        logits = hidden @ self.params["out.weight"] + self.params["out.bias"]
        logp = nn.log_softmax(logits)
        flat_t = targets.reshape(-1)
        picked = logp.data[np.arange(B * T), flat_t].reshape(B, T)
        per_sentence = -(picked * weights).sum(axis=1)
        total = nn.cross_entropy(logits, flat_t, weights.reshape(-1))
        return total, np.stack([per_sentence, weights.sum(axis=1)], axis=1)

    def nll(self, sentences: list[Sequence[str]]) -> np.ndarray:
        """(summed NLL, token count) per sentence, EOS included."""
        ids = [self.vocab.encode(s) for s in sentences]
        with nn.no_grad():
            return self.loss(ids)[1]

    def save(self, path) -> None:
        nn.save_tensors(path, self.params, {"kind": "lm", "config": asdict(self.config),
                                            "vocab": self.vocab.to_list()})

    @classmethod
    def load(cls, path) -> "LangModel":
        tensors, meta = nn.load_tensors(path)
        if meta.get("kind") != "lm":
            raise ValueError(f"{path} is not a language-model checkpoint")
        model = cls(Vocab.from_list(meta["vocab"]), LmConfig(**meta["config"]))
        for name, t in model.params.items():
            t.data = tensors[name]
        return model


def perplexity(lm: LangModel, sentence: Sequence[str]) -> float:
    """exp of the mean per-token NLL, the end-of-sentence token included."""
    if len(sentence) == 0:
        raise ValueError("cannot score an empty sentence")
    total, count = lm.nll([sentence])[0]
    return math.exp(total / count)


def perplexities(lm: LangModel, sentences: Sequence[Sequence[str]]) -> list[float]:
    if any(len(s) == 0 for s in sentences):
        raise ValueError("cannot score an empty sentence")
    return [math.exp(t / n) for t, n in lm.nll(list(sentences))]


def corpus_perplexity(lm: LangModel, sentences: Sequence[Sequence[str]], batch_size: int = 64) -> float:
    total, count = 0.0, 0.0
    for lo in range(0, len(sentences), batch_size):
        stats = lm.nll(list(sentences[lo : lo + batch_size]))
        total += stats[:, 0].sum()
        count += stats[:, 1].sum()
    return math.exp(total / count)


@dataclass
class Ranked:
    best: list[str]
    index: int
    perplexities: list[float]
    flagged: list[bool]

    @property
    def best_flagged(self) -> bool:
        return self.flagged[self.index]


def rank(lm: LangModel, candidates: Sequence[Sequence[str]], threshold: float | None = None) -> Ranked:
    """Lowest-perplexity candidate; ties go to the earliest.

    Candidates whose perplexity exceeds the threshold (the model's own
    unless given) are flagged as low quality but still take part in the
    ranking.
    """
    if not candidates:
        raise ValueError("no candidates to rank")
    ppl = perplexities(lm, candidates)
    index = min(range(len(ppl)), key=lambda i: (ppl[i], i))
    limit = lm.config.l_threshold if threshold is None else threshold
    flagged = [p > limit for p in ppl]
    return Ranked(list(candidates[index]), index, ppl, flagged)


def sequence_instruction(per_segment_best: Sequence[Sequence[str] | str]) -> str:
    """Join the per-segment sentences, in order, with '. '."""
    parts = [s if isinstance(s, str) else " ".join(s) for s in per_segment_best]
    return ". ".join(parts)


@dataclass
class LmTrainResult:
    model: LangModel
    train_ppl: list[float] = field(default_factory=list)
    val_ppl: list[float] = field(default_factory=list)
    seconds: float = 0.0


def train_lm(corpus: Sequence[Sequence[str]], vocab: Vocab | None = None, config: LmConfig | None = None,
             hyper: LmTrainConfig | None = None, val_corpus=None) -> LmTrainResult:
    """Fit the language model by minimising next-word NLL with Adam."""
    from .vocab import build_vocab

    if not corpus:
        raise ValueError("empty language-model corpus")
    hyper = hyper or LmTrainConfig()
    vocab = vocab or build_vocab(corpus)
    lm = LangModel(vocab, config)
    data = [vocab.encode(s)[: hyper.max_len] for s in corpus]
    rng = np.random.default_rng(hyper.seed)
    state = nn.AdamState(lr=hyper.lr)
    result = LmTrainResult(lm)
    best, stale = (math.inf, None), 0
    start = time.perf_counter()
    for epoch in range(hyper.epochs):
        order = rng.permutation(len(data))
        total, count = 0.0, 0.0
        for lo in range(0, len(order), hyper.batch_size):
            chunk = [data[i] for i in order[lo : lo + hyper.batch_size]]
            loss, stats = lm.loss(chunk)
            n = stats[:, 1].sum()
            if not math.isfinite(float(loss.data)):
                raise FloatingPointError(f"non-finite LM loss at epoch {epoch}")
            nn.zero_grads(lm.params.values())
            nn.backward(loss * (1.0 / n))
            nn.clip_grad_norm(lm.params, hyper.clip)
            nn.adam_step(lm.params, state)
            total += float(loss.data)
            count += n
        result.train_ppl.append(math.exp(total / count))
        msg = f"lm epoch {epoch + 1}: train ppl {result.train_ppl[-1]:.3f}"
        if val_corpus:
            v = corpus_perplexity(lm, val_corpus)
            result.val_ppl.append(v)
            msg += f", val ppl {v:.3f}"
            if v < best[0] - 1e-9:
                best, stale = (v, {k: t.data.copy() for k, t in lm.params.items()}), 0
            else:
                stale += 1
        log.info(msg)
        if val_corpus and stale >= hyper.patience:
            break
    if best[1] is not None:
        for k, t in lm.params.items():
            t.data = best[1][k]
    result.seconds = time.perf_counter() - start
    return result

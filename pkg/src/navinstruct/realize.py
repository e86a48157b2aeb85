"""Encoder-aligner-decoder surface realisation.

The encoder reads the reversed CAS token sequence with a stacked LSTM.  At
each output step the aligner scores every encoder annotation against the
previous top-layer decoder state with a one-layer perceptron, and the
decoder LSTM consumes the resulting context vector together with the
embedding of the previous word.  Word probabilities come from a deep output
layer over the decoder state and the context.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import neural as nn
from .cas import CasCommand, tokenize_cas
from .neural import Tensor
from .vocab import Vocab

log = logging.getLogger(__name__)


@dataclass
class Seq2SeqConfig:
    embed: int = 128
    hidden: int = 128
    layers: int = 2
    attention: int = 128
    deep_output: int = 128
    aligner: bool = True
    # the printed decoder update reads only z_t; feeding the previous word as
    # well is what makes teacher forcing and beam search meaningful
    feed_previous_word: bool = True
    max_len: int = 40
    seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    clip: float = 5.0
    patience: int = 5
    seed: int = 0
    max_src_len: int = 24
    max_tgt_len: int = 40
    log_every: int = 0


class Seq2SeqModel:
    def __init__(self, cas_vocab: Vocab, word_vocab: Vocab, config: Seq2SeqConfig | None = None):
        self.cas_vocab = cas_vocab
        self.word_vocab = word_vocab
        self.config = cfg = config or Seq2SeqConfig()
        rng = np.random.default_rng(cfg.seed)
        u = lambda *shape: nn.parameter(rng.uniform(-0.08, 0.08, size=shape))
        p: dict[str, Tensor] = {
            "cas_embedding": u(len(cas_vocab), cfg.embed),
            "word_embedding": u(len(word_vocab), cfg.embed),
        }
        for layer in range(cfg.layers):
            enc = nn.init_lstm(rng, cfg.embed if layer == 0 else cfg.hidden, cfg.hidden)
            p[f"enc{layer}.weight"], p[f"enc{layer}.bias"] = enc.weight, enc.bias
            dec_in = (cfg.embed * cfg.feed_previous_word + cfg.hidden) if layer == 0 else cfg.hidden
            dec = nn.init_lstm(rng, dec_in, cfg.hidden)
            p[f"dec{layer}.weight"], p[f"dec{layer}.bias"] = dec.weight, dec.bias
        p["align.v"] = u(cfg.attention, 1)
        p["align.W"] = u(cfg.hidden, cfg.attention)
        p["align.V"] = u(cfg.hidden, cfg.attention)
        p["out.L_d"] = u(cfg.hidden, cfg.deep_output)
        p["out.L_z"] = u(cfg.hidden, cfg.deep_output)
        p["out.L_0"] = u(cfg.deep_output, len(word_vocab))
        p["out.bias"] = nn.parameter(np.zeros(len(word_vocab)))
        self.params = p

    # ------------------------------------------------------------------
    def _lstm(self, prefix: str, layer: int) -> nn.LstmParams:
        return nn.LstmParams(self.params[f"{prefix}{layer}.weight"], self.params[f"{prefix}{layer}.bias"])

    def encode_batch(self, src: list[Sequence[int]]):
        """Encode a padded batch.

        Returns annotations (B, N, H) in original token order, the source
        mask (B, N) and the final (h, c) per encoder layer.
        """
        cfg = self.config
        lengths = np.array([len(s) for s in src])
        if lengths.min() == 0:
            raise ValueError("cannot encode an empty CAS token sequence")
        B, N = len(src), int(lengths.max())
        rev = np.full((B, N), self.cas_vocab.pad_id, dtype=np.int64)
        for b, s in enumerate(src):
            rev[b, : len(s)] = list(reversed(s))
        mask = np.arange(N)[None, :] < lengths[:, None]
        emb = nn.embedding(self.params["cas_embedding"], rev)
        zeros = Tensor(np.zeros((B, cfg.hidden)))
        state = [(zeros, zeros) for _ in range(cfg.layers)]
        tops = []
        for t in range(N):
            m = mask[:, t : t + 1].astype(np.float64)
            x = emb[:, t, :]
            new_state = []
            for layer in range(cfg.layers):
                h_prev, c_prev = state[layer]
                h, c = nn.lstm_step(x, h_prev, c_prev, self._lstm("enc", layer))
                if not m.all():
                    h = h * m + h_prev * (1.0 - m)
                    c = c * m + c_prev * (1.0 - m)
                new_state.append((h, c))
                x = h
            state = new_state
            tops.append(x)
        steps = nn.stack(tops, axis=1)  # (B, N, H), reversed order
        # original position j was read at reversed step len - 1 - j
        idx = np.where(mask, lengths[:, None] - 1 - np.arange(N)[None, :], np.arange(N)[None, :])
        annotations = nn.getitem(steps, (np.arange(B)[:, None], idx))
        return annotations, mask, state

    def encode(self, tokens: Sequence[str]) -> Tensor:
        """Annotations h_1..h_N, shape (N, H), for one CAS token sequence."""
        annotations, _, _ = self.encode_batch([self.cas_vocab.encode(tokens)])
        return annotations[0]

    def align(self, d_prev: Tensor, annotations: Tensor, mask=None, keys: Tensor | None = None):
        """Context vector z_t and weights alpha_t.

        ``d_prev`` is (B, H), ``annotations`` (B, N, H).  ``keys`` may carry a
        precomputed ``annotations @ V``.
        """
        p = self.params
        if keys is None:
            keys = annotations @ p["align.V"]
        B, N = annotations.shape[0], annotations.shape[1]
        query = nn.reshape(d_prev @ p["align.W"], (B, 1, -1))
        beta = nn.reshape(nn.tanh(keys + query) @ p["align.v"], (B, N))
        alpha = nn.softmax(beta, mask=mask)
        z = nn.reshape(nn.reshape(alpha, (B, 1, N)) @ annotations, (B, -1))
        return z, alpha

    def decode_step(self, state, z: Tensor, prev_words):
        """One decoder update.

        Returns log-probabilities over words (B, V) and the new layer states.
        """
        if self.config.feed_previous_word:
            x = nn.concat([nn.embedding(self.params["word_embedding"], prev_words), z], axis=-1)
        else:
            x = z
        new_state = []
        for layer in range(self.config.layers):
            h, c = nn.lstm_step(x, *state[layer], self._lstm("dec", layer))
            new_state.append((h, c))
            x = h
        logits = self.output_logits(x, z)
        return logits, new_state

    def output_logits(self, d: Tensor, z: Tensor) -> Tensor:
        p = self.params
        return (d @ p["out.L_d"] + z @ p["out.L_z"]) @ p["out.L_0"] + p["out.bias"]

    # ------------------------------------------------------------------
    def _start(self, src: list[Sequence[int]]):
        annotations, mask, state = self.encode_batch(src)
        keys = annotations @ self.params["align.V"] if self.config.aligner else None
        return annotations, mask, keys, state

    def _context(self, annotations, mask, keys, state, summary):
        if self.config.aligner:
            return self.align(state[-1][0], annotations, mask, keys)
        # ablation: the final top-layer encoder state stands in for z_t
        return summary, None

    def loss(self, src: list[Sequence[int]], tgt: list[Sequence[int]]) -> tuple[Tensor, int]:
        """Summed NLL of the targets (teacher forcing) and the token count."""
        annotations, mask, keys, state = self._start(src)
        summary = state[-1][0]
        B = len(tgt)
        T = max(len(t) for t in tgt) + 1
        inputs = np.full((B, T), self.word_vocab.pad_id, dtype=np.int64)
        targets = np.full((B, T), self.word_vocab.pad_id, dtype=np.int64)
        weights = np.zeros((B, T))
        for b, t in enumerate(tgt):
            seq = list(t)
            inputs[b, : len(seq) + 1] = [self.word_vocab.bos_id] + seq
            targets[b, : len(seq) + 1] = seq + [self.word_vocab.eos_id]
            weights[b, : len(seq) + 1] = 1.0
        total = None
        for t in range(T):
            z, _ = self._context(annotations, mask, keys, state, summary)
            logits, state = self.decode_step(state, z, inputs[:, t])
            step_loss = nn.cross_entropy(logits, targets[:, t], weights[:, t])
            total = step_loss if total is None else total + step_loss
        return total, int(weights.sum())

    # ------------------------------------------------------------------
    def src_ids(self, cmd_or_tokens) -> list[int]:
        tokens = tokenize_cas(cmd_or_tokens) if isinstance(cmd_or_tokens, CasCommand) else cmd_or_tokens
        return self.cas_vocab.encode(tokens)

    def step_logprobs(self, src_ids: list[int]):
        """Incremental decoder for inference: returns a function mapping
        (state, previous word ids) to (log-probs, new state, alpha)."""
        with nn.no_grad():
            annotations, mask, keys, state = self._start([src_ids])
        last = state[-1][0]

        def step(state, prev_words):
            with nn.no_grad():
                k = len(prev_words)
                ann = Tensor(np.repeat(annotations.data, k, axis=0))
                ks = Tensor(np.repeat(keys.data, k, axis=0)) if keys is not None else None
                m = np.repeat(mask, k, axis=0)
                if self.config.aligner:
                    z, alpha = self.align(state[-1][0], ann, m, ks)
                else:
                    z, alpha = Tensor(np.repeat(last.data, k, axis=0)), None
                logits, new_state = self.decode_step(state, z, np.asarray(prev_words))
                logp = nn.log_softmax(logits).data
            # padding and BOS are never emitted
            logp[:, [self.word_vocab.pad_id, self.word_vocab.bos_id]] = -np.inf
            return logp, new_state, alpha

        return step, state

    def greedy_decode(self, tokens, max_len: int | None = None) -> list[str]:
        return self.greedy_decode_scored(tokens, max_len)[0]

    def greedy_decode_scored(self, tokens, max_len: int | None = None) -> tuple[list[str], float, bool]:
        """Greedy decoding: (words, summed log-prob incl. EOS, truncated flag)."""
        max_len = max_len or self.config.max_len
        step, state = self.step_logprobs(self.src_ids(tokens))
        words, score, prev = [], 0.0, self.word_vocab.bos_id
        for _ in range(max_len + 1):
            logp, state, _ = step(state, [prev])
            best = int(np.argmax(logp[0]))
            score += float(logp[0, best])
            if best == self.word_vocab.eos_id:
                return self.word_vocab.decode(words), score, False
            if len(words) == max_len:
                break
            words.append(best)
            prev = best
        return self.word_vocab.decode(words), score, True

    def beam_decode(self, tokens, width: int = 2, max_len: int | None = None) -> list[tuple[list[str], float]]:
        """Length-normalised beam search.

        Returns up to ``width`` (words, score) pairs, best first, where score
        is the summed log-probability (EOS included) divided by the number of
        scored tokens.
        """
        if width < 1:
            raise ValueError("beam width must be >= 1")
        max_len = max_len or self.config.max_len
        V = len(self.word_vocab)
        eos = self.word_vocab.eos_id
        step, state = self.step_logprobs(self.src_ids(tokens))
        beams = [([], 0.0)]  # (word ids, summed log-prob)
        finished: list[tuple[list[int], float]] = []
        for t in range(max_len + 1):
            prev = [b[0][-1] if b[0] else self.word_vocab.bos_id for b in beams]
            logp, new_state, _ = step(state, prev)
            if t == max_len:
                # only EOS may follow a max-length hypothesis
                mask = np.full(V, -np.inf)
                mask[eos] = 0.0
                logp = logp + mask
            totals = np.array([b[1] for b in beams])[:, None] + logp
            flat = totals.reshape(-1)
            # highest score first, ties by (beam, word) index like argmax
            order = np.lexsort((np.arange(flat.size), -flat))[: width]
            next_beams, keep = [], []
            for idx in order:
                b, w = divmod(int(idx), V)
                if not np.isfinite(flat[idx]):
                    continue
                if w == eos:
                    finished.append((beams[b][0], float(flat[idx])))
                else:
                    next_beams.append((beams[b][0] + [w], float(flat[idx])))
                    keep.append(b)
            if len(finished) >= width or not next_beams:
                break
            beams = next_beams
            state = [(nn.Tensor(h.data[keep]), nn.Tensor(c.data[keep])) for h, c in new_state]
        ranked = sorted(
            ((ids, s / (len(ids) + 1)) for ids, s in finished),
            key=lambda x: -x[1],
        )
        return [(self.word_vocab.decode(ids), s) for ids, s in ranked[:width]]

    def sequence_logprob(self, tokens, words: Sequence[str]) -> float:
        """Summed log-probability of ``words`` followed by EOS."""
        step, state = self.step_logprobs(self.src_ids(tokens))
        ids = self.word_vocab.encode(words) + [self.word_vocab.eos_id]
        prev, total = self.word_vocab.bos_id, 0.0
        for w in ids:
            logp, state, _ = step(state, [prev])
            total += float(logp[0, w])
            prev = w
        return total

    def alignment(self, tokens, words: Sequence[str]) -> np.ndarray:
        """Teacher-forced attention weights, shape (T, N), T = len(words) + 1
        (the last row is the step that emits EOS)."""
        if not self.config.aligner:
            raise ValueError("model has no aligner")
        step, state = self.step_logprobs(self.src_ids(tokens))
        rows = []
        prev = self.word_vocab.bos_id
        for w in self.word_vocab.encode(words) + [self.word_vocab.eos_id]:
            _, state, alpha = step(state, [prev])
            rows.append(alpha.data[0])
            prev = w
        return np.array(rows)

    # ------------------------------------------------------------------
    def state_dict(self) -> dict[str, Tensor]:
        return self.params

    def save(self, path) -> None:
        meta = {
            "kind": "seq2seq",
            "config": asdict(self.config),
            "cas_vocab": self.cas_vocab.to_list(),
            "word_vocab": self.word_vocab.to_list(),
        }
        nn.save_tensors(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "Seq2SeqModel":
        tensors, meta = nn.load_tensors(path)
        if meta.get("kind") != "seq2seq":
            raise ValueError(f"{path} is not a seq2seq checkpoint")
        model = cls(Vocab.from_list(meta["cas_vocab"]), Vocab.from_list(meta["word_vocab"]),
                    Seq2SeqConfig(**meta["config"]))
        for name, t in model.params.items():
            t.data = tensors[name]
        return model


# ----------------------------------------------------------------------
# module-level operations


def encode(model: Seq2SeqModel, tokens: Sequence[str]) -> np.ndarray:
    with nn.no_grad():
        return model.encode(tokens).data


def align(model: Seq2SeqModel, d_prev: np.ndarray, annotations: np.ndarray):
    with nn.no_grad():
        z, alpha = model.align(Tensor(d_prev[None]), Tensor(annotations[None]))
    return z.data[0], alpha.data[0]


def decode_step(model: Seq2SeqModel, d_prev, z: np.ndarray, prev_word: int = None):
    """Word distribution and new state for one step.

    ``d_prev`` is a list of (h, c) arrays per decoder layer.
    """
    prev_word = model.word_vocab.bos_id if prev_word is None else prev_word
    with nn.no_grad():
        state = [(Tensor(h[None]), Tensor(c[None])) for h, c in d_prev]
        logits, new_state = model.decode_step(state, Tensor(z[None]), np.array([prev_word]))
        probs = nn.softmax(logits).data[0]
    return probs, [(h.data[0], c.data[0]) for h, c in new_state]


def greedy_decode(model: Seq2SeqModel, tokens) -> list[str]:
    return model.greedy_decode(tokens)


def beam_decode(model: Seq2SeqModel, tokens, width: int = 2) -> list[list[str]]:
    return [words for words, _ in model.beam_decode(tokens, width)]


def generate_candidates(model: Seq2SeqModel, cmd, width: int = 2) -> list[list[str]]:
    """Greedy output followed by the beam outputs, duplicates removed."""
    out = [model.greedy_decode(cmd)]
    for words, _ in model.beam_decode(cmd, width):
        if words not in out:
            out.append(words)
    return out


def export_alignment(model: Seq2SeqModel, tokens, words: Sequence[str]) -> dict:
    """Row-stochastic attention matrix with labels, ready to serialise."""
    src = list(tokenize_cas(tokens)) if isinstance(tokens, CasCommand) else list(tokens)
    matrix = model.alignment(src, words)
    return {"cas_tokens": src, "words": list(words) + ["<eos>"], "alpha": matrix.tolist()}


def alignment_to_text(export: dict) -> str:
    """Tab-separated matrix: header row of CAS tokens, one row per word."""
    lines = ["word\t" + "\t".join(export["cas_tokens"])]
    for word, row in zip(export["words"], export["alpha"]):
        lines.append(word + "\t" + "\t".join(f"{a:.6f}" for a in row))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: Seq2SeqModel
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0


def _encode_pairs(model: Seq2SeqModel, pairs, cfg: TrainConfig):
    out = []
    for cmd, words in pairs:
        src = model.src_ids(cmd)[: cfg.max_src_len]
        tgt = model.word_vocab.encode(words)[: cfg.max_tgt_len]
        out.append((src, tgt))
    return out


def evaluate_nll(model: Seq2SeqModel, pairs, cfg: TrainConfig | None = None) -> float:
    """Mean per-token NLL (EOS included) without gradient tracking."""
    cfg = cfg or TrainConfig()
    data = _encode_pairs(model, pairs, cfg)
    total, count = 0.0, 0
    with nn.no_grad():
        for lo in range(0, len(data), cfg.batch_size):
            chunk = data[lo : lo + cfg.batch_size]
            loss, n = model.loss([s for s, _ in chunk], [t for _, t in chunk])
            total += float(loss.data)
            count += n
    return total / count


def train(model: Seq2SeqModel, pairs, cfg: TrainConfig | None = None, val_pairs=None) -> TrainResult:
    """Minimise mean per-token NLL with Adam; keeps the parameters with the
    lowest validation NLL when ``val_pairs`` is given."""
    cfg = cfg or TrainConfig()
    if not pairs:
        raise ValueError("no training pairs")
    rng = np.random.default_rng(cfg.seed)
    data = _encode_pairs(model, pairs, cfg)
    state = nn.AdamState(lr=cfg.lr)
    result = TrainResult(model)
    best = (math.inf, None)
    stale = 0
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [data[i] for i in order[lo : lo + cfg.batch_size]]
            loss, n = model.loss([s for s, _ in chunk], [t for _, t in chunk])
            if not math.isfinite(float(loss.data)):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}")
            mean_loss = loss * (1.0 / n)
            nn.zero_grads(model.params.values())
            nn.backward(mean_loss)
            nn.clip_grad_norm(model.params, cfg.clip)
            nn.adam_step(model.params, state)
            total += float(loss.data)
            count += n
        result.train_loss.append(total / count)
        msg = f"epoch {epoch + 1}: train nll {total / count:.4f}"
        if val_pairs:
            v = evaluate_nll(model, val_pairs, cfg)
            result.val_loss.append(v)
            msg += f", val nll {v:.4f}"
            if v < best[0] - 1e-6:
                best = (v, {k: t.data.copy() for k, t in model.params.items()})
                result.best_epoch = epoch
                stale = 0
            else:
                stale += 1
        log.info(msg)
        if val_pairs and stale >= cfg.patience:
            break
    if best[1] is not None:
        for k, t in model.params.items():
            t.data = best[1][k]
    result.seconds = time.perf_counter() - start
    return result

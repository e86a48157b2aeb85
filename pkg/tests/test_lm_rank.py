import math
import random
from collections import Counter

import numpy as np
import pytest

from navinstruct import lm_rank as L
from navinstruct import neural as nn
from navinstruct.vocab import Vocab, build_vocab


def small(vocab, seed=0):
    return L.LangModel(vocab, L.LmConfig(embed=8, hidden=8, seed=seed))


def uniform(lm):
    lm.params["out.weight"].data[:] = 0.0
    lm.params["out.bias"].data[:] = 0.0
    return lm


def toy_sentences(n, seed=0):
    """A small phrase grammar: fixed word order, varied fillers."""
    rng = random.Random(seed)
    verbs = ["walk", "go", "move"]
    things = ["chair", "sofa", "lamp", "easel", "hatrack"]
    dirs = ["left", "right"]
    out = []
    for _ in range(n):
        r = rng.random()
        if r < 0.4:
            out.append(["turn", rng.choice(dirs)])
        elif r < 0.8:
            out.append([rng.choice(verbs), "to", "the", rng.choice(things)])
        else:
            out.append([rng.choice(verbs), "forward", "until", "you", "see", "the", rng.choice(things)])
    return out


def test_uniform_model_perplexity_is_vocab_size():
    lm = uniform(small(Vocab(["a", "b", "c"])))
    for s in (["a"], ["b", "c", "a", "zz"]):
        assert L.perplexity(lm, s) == pytest.approx(len(lm.vocab), rel=1e-12)


def test_perplexity_rejects_empty():
    lm = small(Vocab(["a"]))
    with pytest.raises(ValueError):
        L.perplexity(lm, [])


def test_batched_scores_match_single():
    lm = small(Vocab(["a", "b", "c"]), seed=2)
    for t in lm.params.values():
        t.data = t.data + np.random.default_rng(0).normal(scale=0.5, size=t.data.shape)
    sents = [["a"], ["b", "c", "a"], ["c", "c"]]
    got = L.perplexities(lm, sents)
    for s, g in zip(sents, got):
        assert g == pytest.approx(L.perplexity(lm, s), rel=1e-12)


def test_lm_gradient_check():
    lm = small(Vocab(["a", "b", "c"]), seed=1)
    r = np.random.default_rng(3)
    for t in lm.params.values():
        t.data = t.data + r.normal(scale=0.8, size=t.data.shape)
    ids = [lm.vocab.encode(["a", "b"]), lm.vocab.encode(["c"])]
    errors = nn.gradcheck(lambda: lm.loss(ids)[0], lm.params)
    assert max(errors.values()) < 1e-4, errors


def test_untrained_perplexity_close_to_vocab_size():
    vocab = build_vocab(toy_sentences(50))
    lm = small(vocab)
    ppl = L.perplexity(lm, ["turn", "left"])
    assert abs(ppl - len(vocab)) / len(vocab) < 0.05


def test_repeated_sentence_memorised():
    corpus = [["turn", "left", "at", "the", "sofa"]] * 16
    res = L.train_lm(corpus, config=L.LmConfig(embed=16, hidden=16),
                     hyper=L.LmTrainConfig(epochs=400, batch_size=16, lr=1e-2))
    ppl = L.perplexity(res.model, corpus[0])
    assert 1.0 <= ppl < 1.01


@pytest.fixture(scope="module")
def trained():
    corpus = toy_sentences(1000, seed=1)
    held = toy_sentences(200, seed=2)
    res = L.train_lm(corpus, config=L.LmConfig(embed=24, hidden=24),
                     hyper=L.LmTrainConfig(epochs=8, batch_size=32, lr=1e-2), val_corpus=held[:50])
    return res, corpus, held


def test_beats_unigram_baseline(trained):
    res, corpus, held = trained
    counts = Counter(w for s in corpus for w in s)
    counts["<eos>"] = len(corpus)
    total = sum(counts.values())
    v = len(res.model.vocab)
    # add-one unigram over the same vocabulary
    nll = sum(-math.log((counts[w] + 1) / (total + v)) for s in held for w in list(s) + ["<eos>"])
    unigram_ppl = math.exp(nll / sum(len(s) + 1 for s in held))
    assert L.corpus_perplexity(res.model, held) < unigram_ppl
    assert len(res.val_ppl) >= 1 and all(p >= 1 for p in res.val_ppl)


def test_grammatical_beats_scrambled(trained):
    res, _, held = trained
    rng = random.Random(7)
    wins = n = 0
    for s in held:
        if len(set(s)) < 2:
            continue
        scr = s[:]
        while scr == s:
            rng.shuffle(scr)
        wins += L.perplexity(res.model, s) < L.perplexity(res.model, scr)
        n += 1
        if n == 100:
            break
    assert wins >= 90


def test_rank_contract(trained):
    res, corpus, _ = trained
    lm = res.model
    assert L.rank(lm, [["turn", "left"]]).best == ["turn", "left"]
    s = ["walk", "to", "the", "chair"]
    r = L.rank(lm, [["chair", "the", "walk", "to"], s])
    assert r.best == s and r.index == 1
    r = L.rank(lm, [s, list(s)])
    assert r.index == 0
    with pytest.raises(ValueError):
        L.rank(lm, [])


def test_rank_flags_above_threshold():
    lm = uniform(small(Vocab([str(i) for i in range(120)])))
    r = L.rank(lm, [["1"], ["2", "3"]])
    assert r.flagged == [True, True] and r.best_flagged
    assert r.index == 0  # equal perplexity, first wins


def test_perplexity_finite_under_repetition(trained):
    lm = trained[0].model
    prev = None
    for k in range(1, 12):
        p = L.perplexity(lm, ["the"] * k)
        assert math.isfinite(p) and p >= 1
        prev = p
    assert prev is not None


def test_sequence_instruction():
    assert L.sequence_instruction([["turn", "left"]]) == "turn left"
    assert L.sequence_instruction(["turn left", "move to the stool"]) == "turn left. move to the stool"
    six = ["turn to face the grass hallway", "walk forward twice", "turn left",
           "walk to the chair", "turn right", "move to the stool"]
    out = L.sequence_instruction(six)
    assert out.count(". ") == 5 and out.startswith("turn to face the grass hallway. walk forward twice")


def test_checkpoint_round_trip(tmp_path, trained):
    lm = trained[0].model
    lm.save(tmp_path / "lm.json")
    back = L.LangModel.load(tmp_path / "lm.json")
    s = ["walk", "to", "the", "lamp"]
    assert L.perplexity(back, s) == L.perplexity(lm, s)

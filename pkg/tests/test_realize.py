import itertools
import math

import numpy as np
import pytest

from navinstruct import neural as nn
from navinstruct import realize as R
from navinstruct.cas import parse_cas, tokenize_cas
from navinstruct.neural import Tensor, parameter
from navinstruct.vocab import Vocab, build_vocab, tokenize_english

CAS_TOKENS = ["Turn", "Travel", "direction.Left", "direction.Right", "distance.2", "until.chair"]
WORDS = ["turn", "left", "right", "walk", "two", "steps", "to", "the", "chair"]


def tiny(seed=0, **kw):
    cfg = R.Seq2SeqConfig(embed=5, hidden=4, layers=2, attention=3, deep_output=4, seed=seed, **kw)
    return R.Seq2SeqModel(Vocab(CAS_TOKENS), Vocab(WORDS), cfg)


def perturb(model, seed=1, scale=0.5):
    # break the near-zero init so finite differences see real curvature
    r = np.random.default_rng(seed)
    for t in model.params.values():
        t.data = t.data + r.normal(scale=scale, size=t.data.shape)


def test_vocab_specials_and_unknowns():
    v = build_vocab([["b", "a", "b"], ["c"]])
    assert v.to_list()[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
    assert v.to_list()[4:] == ["b", "a", "c"]
    assert v.encode(["a", "zzz"]) == [5, v.unk_id]
    assert Vocab.from_list(v.to_list()) == v
    assert build_vocab([["a", "b", "a"]], min_count=2).to_list()[4:] == ["a"]


def test_tokenize_english():
    assert tokenize_english("Turn LEFT, then walk to the chair.") == [
        "turn", "left", "then", "walk", "to", "the", "chair"]
    assert tokenize_english("you're at 2 o'clock") == ["you're", "at", "2", "o'clock"]


def test_encode_single_token_is_one_lstm_unroll():
    m = tiny()
    with nn.no_grad():
        got = m.encode(["Turn"]).data
        x = Tensor(m.params["cas_embedding"].data[[m.cas_vocab.stoi["Turn"]]])
        zero = Tensor(np.zeros((1, 4)))
        h, _ = nn.lstm_step(x, zero, zero, m._lstm("enc", 0))
        h, _ = nn.lstm_step(h, zero, zero, m._lstm("enc", 1))
    np.testing.assert_allclose(got, h.data, atol=1e-14)


def test_encode_depends_on_order():
    m = tiny()
    perturb(m)
    seq = ["Travel", "distance.2", "until.chair"]
    a = R.encode(m, seq)
    b = R.encode(m, seq[::-1])
    assert not np.allclose(a, b[::-1])


def test_encode_rejects_empty():
    with pytest.raises(ValueError):
        tiny().encode([])


def test_padded_batch_matches_individual_encoding():
    m = tiny()
    perturb(m)
    seqs = [["Turn", "direction.Left"], ["Travel", "distance.2", "until.chair"], ["Travel"]]
    ids = [m.cas_vocab.encode(s) for s in seqs]
    with nn.no_grad():
        ann, mask, state = m.encode_batch(ids)
        for b, s in enumerate(seqs):
            single, _, st1 = m.encode_batch([ids[b]])
            np.testing.assert_allclose(ann.data[b, : len(s)], single.data[0], atol=1e-13)
            for (h, c), (h1, c1) in zip(state, st1):
                np.testing.assert_allclose(h.data[b], h1.data[0], atol=1e-13)
                np.testing.assert_allclose(c.data[b], c1.data[0], atol=1e-13)
    assert mask.tolist() == [[True, True, False], [True, True, True], [True, False, False]]


def test_align_uniform_when_scores_equal():
    m = tiny()
    m.params["align.v"].data[:] = 0.0
    ann = np.random.default_rng(0).normal(size=(3, 4))
    z, alpha = R.align(m, np.ones(4), ann)
    np.testing.assert_allclose(alpha, 1 / 3, atol=1e-15)
    np.testing.assert_allclose(z, ann.mean(axis=0), atol=1e-15)


def test_align_saturates_on_dominant_score():
    m = tiny()
    # beta_j = 60 * tanh(annotation[j, 0]) via V = e_0, W = 0
    m.params["align.W"].data[:] = 0.0
    m.params["align.V"].data[:] = 0.0
    m.params["align.V"].data[0, 0] = 1.0
    m.params["align.v"].data[:] = 0.0
    m.params["align.v"].data[0, 0] = 60.0
    ann = np.zeros((3, 4))
    ann[:, 1] = [1.0, 2.0, 3.0]
    ann[1, 0] = 5.0  # tanh(5) ~ 1: beta_1 ~ 60, the others 0
    z, alpha = R.align(m, np.zeros(4), ann)
    assert alpha[1] == pytest.approx(1.0, abs=1e-20)
    assert alpha[0] < 1e-20 and alpha[2] < 1e-20
    np.testing.assert_allclose(z, ann[1], atol=1e-12)


def test_align_rows_sum_to_one_random():
    r = np.random.default_rng(3)
    for seed in range(10):
        m = tiny(seed=seed)
        perturb(m, seed)
        _, alpha = R.align(m, r.normal(size=4), r.normal(size=(1 + seed % 5, 4)))
        assert abs(alpha.sum() - 1.0) < 1e-12


def test_align_matches_formula():
    m = tiny()
    perturb(m)
    r = np.random.default_rng(9)
    d, ann = r.normal(size=4), r.normal(size=(3, 4))
    p = {k: t.data for k, t in m.params.items()}
    beta = np.array([(p["align.v"][:, 0] @ np.tanh(d @ p["align.W"] + h @ p["align.V"])) for h in ann])
    alpha = np.exp(beta) / np.exp(beta).sum()
    z, got = R.align(m, d, ann)
    np.testing.assert_allclose(got, alpha, atol=1e-14)
    np.testing.assert_allclose(z, alpha @ ann, atol=1e-14)


def test_decode_step_distribution():
    m = tiny()
    perturb(m)
    state = [(np.zeros(4), np.zeros(4))] * 2
    probs, new_state = R.decode_step(m, state, np.ones(4) * 0.3)
    assert abs(probs.sum() - 1.0) < 1e-12
    assert len(new_state) == 2
    m.params["out.L_0"].data[:] = 0.0
    m.params["out.bias"].data[:] = 0.0
    probs, _ = R.decode_step(m, state, np.ones(4) * 0.3)
    np.testing.assert_allclose(probs, 1 / len(m.word_vocab), atol=1e-15)


def test_gradcheck_align():
    m = tiny()
    perturb(m)
    r = np.random.default_rng(2)
    d = parameter(r.normal(size=(2, 4)))
    ann = parameter(r.normal(size=(2, 3, 4)))
    w = r.normal(size=(2, 4))
    mask = np.array([[True, True, True], [True, True, False]])

    def loss():
        z, alpha = m.align(d, ann, mask)
        return (z * w).sum() + (alpha * alpha).sum()

    inputs = {"d": d, "h": ann, "v": m.params["align.v"], "W": m.params["align.W"], "V": m.params["align.V"]}
    errors = nn.gradcheck(loss, inputs)
    assert max(errors.values()) < 1e-6, errors


def test_gradcheck_decode_step_nll():
    m = tiny()
    perturb(m)
    r = np.random.default_rng(4)
    z = parameter(r.normal(size=(2, 4)))
    state = [(parameter(r.normal(size=(2, 4)) * 0.5), parameter(r.normal(size=(2, 4)))) for _ in range(2)]

    def loss():
        logits, _ = m.decode_step(state, z, np.array([5, 7]))
        return nn.cross_entropy(logits, [4, 9])

    inputs = {"z": z, "d0": state[0][0], "c1": state[1][1]}
    inputs.update({k: t for k, t in m.params.items() if not k.startswith(("enc", "align", "cas"))})
    errors = nn.gradcheck(loss, inputs)
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize("aligner", [True, False])
def test_gradcheck_full_nll(aligner):
    # 2 CAS tokens, 3 words, every parameter
    m = tiny(aligner=aligner)
    perturb(m, scale=1.0)
    src = [m.cas_vocab.encode(["Turn", "direction.Left"])]
    tgt = [m.word_vocab.encode(["turn", "to", "left"])]

    def loss():
        total, n = m.loss(src, tgt)
        return total * (1.0 / n)

    params = m.params if aligner else {k: v for k, v in m.params.items() if not k.startswith("align")}
    errors = nn.gradcheck(loss, params)
    assert max(errors.values()) < 1e-4, errors


def test_initial_loss_near_log_vocab():
    m = tiny()
    loss = R.evaluate_nll(m, [(["Turn", "direction.Left"], ["turn", "left"])])
    assert loss == pytest.approx(math.log(len(m.word_vocab)), abs=0.05)


PAIRS = [
    ("Turn(direction=Left)", "turn left"),
    ("Turn(direction=Right)", "turn right"),
    ("Turn(direction=Back)", "turn around"),
    ("Travel(distance=2)", "walk two steps"),
    ("Travel(distance=3)", "walk three steps"),
    ("Travel(until=chair)", "walk to the chair"),
    ("Travel(until=sofa)", "go until you reach the sofa"),
    ("Face(target=blue_floor)", "face the blue hallway"),
    ("Find(object=easel)", "find the easel"),
    ("Verify(see=lamp, side=left)", "you should see a lamp on your left"),
]


def pair_data():
    return [(parse_cas(c), s.split()) for c, s in PAIRS]


@pytest.fixture(scope="module")
def overfit():
    data = pair_data()
    cv = build_vocab([tokenize_cas(c) for c, _ in data])
    wv = build_vocab([s for _, s in data])
    m = R.Seq2SeqModel(cv, wv, R.Seq2SeqConfig(embed=24, hidden=24, attention=16, deep_output=24, seed=3))
    result = R.train(m, data, R.TrainConfig(epochs=500, batch_size=10, lr=5e-3, seed=3))
    return m, result, data


def test_overfit_memorises(overfit):
    m, result, data = overfit
    assert result.train_loss[-1] < 0.05
    assert R.evaluate_nll(m, data) < 0.05
    assert result.train_loss[-1] < result.train_loss[0]
    for cmd, words in data:
        assert R.greedy_decode(m, cmd) == words


def test_trained_turn_left_begins_with_turn(overfit):
    m, _, _ = overfit
    assert R.greedy_decode(m, parse_cas("Turn(direction=Left)"))[0] == "turn"


def test_beam_width_one_equals_greedy(overfit):
    m, _, _ = overfit
    fixtures = [tokenize_cas(c) for c, _ in pair_data()]
    rng = np.random.default_rng(0)
    vocab = m.cas_vocab.to_list()[4:]
    for _ in range(10):
        fixtures.append(list(rng.choice(vocab, size=rng.integers(1, 5))))
    assert len(fixtures) == 20
    for toks in fixtures:
        assert m.beam_decode(toks, 1)[0][0] == m.greedy_decode(toks)


def test_untrained_decode_terminates():
    m = tiny()
    perturb(m, scale=2.0)
    for toks in (["Turn"], ["Travel", "until.chair"]):
        words, _, truncated = m.greedy_decode_scored(toks)
        assert len(words) <= 40
        assert all(len(w) <= 40 for w, _ in m.beam_decode(toks, 2))


def test_truncation_flagged():
    m = tiny()
    # EOS can never win: its logit is pinned far below the rest
    m.params["out.bias"].data[m.word_vocab.eos_id] = -1e3
    words, _, truncated = m.greedy_decode_scored(["Turn"], max_len=6)
    assert truncated and len(words) == 6


def _all_sequences(model, toks, max_len):
    allowed = [i for i in range(len(model.word_vocab))
               if i not in (model.word_vocab.pad_id, model.word_vocab.bos_id, model.word_vocab.eos_id)]
    out = []
    for n in range(max_len + 1):
        for ids in itertools.product(allowed, repeat=n):
            words = model.word_vocab.decode(ids)
            out.append((words, model.sequence_logprob(toks, words) / (n + 1)))
    return out


def test_beam_matches_exhaustive_search():
    # 3 emittable words + UNK, max length 3: 85 candidate strings
    cv = Vocab(["Turn", "direction.Left"])
    wv = Vocab(["turn", "left", "right"])
    m = R.Seq2SeqModel(cv, wv, R.Seq2SeqConfig(embed=4, hidden=3, attention=3, deep_output=3, seed=5, max_len=3))
    perturb(m, seed=8, scale=1.0)
    toks = ["Turn", "direction.Left"]
    oracle = sorted(_all_sequences(m, toks, 3), key=lambda x: -x[1])
    got = m.beam_decode(toks, width=len(oracle))
    assert len(got) == len(oracle) == 85
    for (gw, gs), (ow, os_) in zip(got, oracle):
        assert gs == pytest.approx(os_, abs=1e-12)
    assert got[0][0] == oracle[0][0]
    # a narrow beam still finds the exhaustive optimum on this toy model
    assert m.beam_decode(toks, width=2)[0][0] == oracle[0][0]


def test_beam_two_not_worse_than_greedy(overfit):
    m, _, data = overfit
    for seed in range(5):
        r = np.random.default_rng(seed)
        toks = list(r.choice(m.cas_vocab.to_list()[4:], size=3))
        greedy, g_score, _ = m.greedy_decode_scored(toks)
        best = m.beam_decode(toks, 2)[0][1]
        assert best >= g_score / (len(greedy) + 1) - 1e-12


def test_generate_candidates_contract(overfit):
    m, _, data = overfit
    for cmd, words in data:
        cands = R.generate_candidates(m, cmd)
        assert cands[0] == R.greedy_decode(m, cmd)
        assert len(cands) == len({tuple(c) for c in cands})
        assert 1 <= len(cands) <= 3


def test_generate_candidates_beam_adds_alternatives():
    cv = Vocab(["Turn", "direction.Left"])
    wv = Vocab(["turn", "left", "right"])
    m = R.Seq2SeqModel(cv, wv, R.Seq2SeqConfig(embed=4, hidden=3, attention=3, deep_output=3, seed=5, max_len=3))
    perturb(m, seed=8, scale=1.0)
    cands = R.generate_candidates(m, ["Turn", "direction.Left"])
    assert 2 <= len(cands) <= 3


def test_export_alignment_rows_stochastic(overfit):
    m, _, data = overfit
    cmd, words = data[-1]
    exp = R.export_alignment(m, cmd, words)
    alpha = np.array(exp["alpha"])
    assert alpha.shape == (len(words) + 1, len(exp["cas_tokens"]))
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
    text = R.alignment_to_text(exp)
    assert text.splitlines()[0].split("\t")[1:] == exp["cas_tokens"]
    single = np.array(R.export_alignment(m, ["Find"], ["find", "it"])["alpha"])
    np.testing.assert_array_equal(single, np.ones((3, 1)))


def test_alignment_follows_one_to_one_pair():
    # each CAS token maps to one word; attention should walk forward
    src = [["a1", "a2", "a3"], ["a2", "a3", "a1"], ["a3", "a1", "a2"], ["a1", "a3", "a2"],
           ["a2", "a1", "a3"], ["a3", "a2", "a1"]]
    lex = {"a1": "red", "a2": "green", "a3": "blue"}
    data = [(s, [lex[t] for t in s]) for s in src]
    m = R.Seq2SeqModel(Vocab(["a1", "a2", "a3"]), Vocab(["red", "green", "blue"]),
                       R.Seq2SeqConfig(embed=16, hidden=16, attention=16, deep_output=16, seed=0))
    R.train(m, data, R.TrainConfig(epochs=400, batch_size=6, lr=1e-2, seed=0))
    alpha = np.array(R.export_alignment(m, src[0], data[0][1])["alpha"])
    argmax = alpha[:3].argmax(axis=1)
    assert list(argmax) == sorted(argmax)


def test_full_batch_training_ignores_pair_order():
    data = pair_data()[:4]
    cv = build_vocab([tokenize_cas(c) for c, _ in data])
    wv = build_vocab([s for _, s in data])
    cfg = R.Seq2SeqConfig(embed=6, hidden=5, attention=4, deep_output=5, seed=1)
    losses = []
    for order in (data, data[::-1]):
        m = R.Seq2SeqModel(cv, wv, cfg)
        losses.append(R.train(m, order, R.TrainConfig(epochs=5, batch_size=4, seed=0)).train_loss[-1])
    assert abs(losses[0] - losses[1]) < 1e-9


def test_non_finite_loss_aborts():
    m = tiny()
    m.params["out.L_0"].data[:] = np.nan
    with pytest.raises(FloatingPointError):
        R.train(m, [(["Turn"], ["turn"])], R.TrainConfig(epochs=1))


def test_early_stopping_restores_best(overfit):
    data = pair_data()
    cv = build_vocab([tokenize_cas(c) for c, _ in data])
    wv = build_vocab([s for _, s in data])
    m = R.Seq2SeqModel(cv, wv, R.Seq2SeqConfig(embed=8, hidden=8, attention=8, deep_output=8))
    res = R.train(m, data[:8], R.TrainConfig(epochs=40, batch_size=4, lr=1e-2, patience=3), val_pairs=data[8:])
    assert R.evaluate_nll(m, data[8:]) == pytest.approx(min(res.val_loss), abs=1e-12)
    assert len(res.val_loss) <= 40


def test_checkpoint_round_trip(tmp_path, overfit):
    m, _, data = overfit
    m.save(tmp_path / "s2s.json.gz")
    back = R.Seq2SeqModel.load(tmp_path / "s2s.json.gz")
    assert back.config == m.config and back.word_vocab == m.word_vocab
    for cmd, _ in data:
        assert back.greedy_decode(cmd) == m.greedy_decode(cmd)
    nn.save_tensors(tmp_path / "other.json", {"x": np.zeros(1)}, {"kind": "lm"})
    with pytest.raises(ValueError):
        R.Seq2SeqModel.load(tmp_path / "other.json")

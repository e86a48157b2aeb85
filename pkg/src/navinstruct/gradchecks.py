"""Central finite-difference checks of the hand-written backward passes on
tiny float64 models.  Used by the ``gradcheck`` CLI verb."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import neural as nn
from . import realize
from .neural import parameter
from .vocab import Vocab

OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-4

_CAS = ["Turn", "direction.Left", "direction.Right", "Travel", "until.chair"]
_WORDS = ["turn", "left", "right", "walk", "to", "the", "chair"]


@dataclass
class Check:
    name: str
    max_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_error < self.tolerance


def _tiny(aligner: bool = True, seed: int = 0) -> realize.Seq2SeqModel:
    cfg = realize.Seq2SeqConfig(embed=5, hidden=4, layers=2, attention=3, deep_output=4, aligner=aligner, seed=seed)
    m = realize.Seq2SeqModel(Vocab(_CAS), Vocab(_WORDS), cfg)
    r = np.random.default_rng(seed + 1)
    for t in m.params.values():
        t.data = t.data + r.normal(scale=1.0, size=t.data.shape)
    return m


def check_lstm_step(seed: int = 1) -> Check:
    r = np.random.default_rng(seed)
    params = nn.init_lstm(r, 3, 4, scale=0.5)
    x, h, c = parameter(r.normal(size=(2, 3))), parameter(r.normal(size=(2, 4)) * 0.5), parameter(r.normal(size=(2, 4)))
    target = r.normal(size=(2, 4))

    def loss():
        h1, c1 = nn.lstm_step(x, h, c, params)
        return (h1 * target).sum() + (c1 * c1).sum()

    errors = nn.gradcheck(loss, {"x": x, "h": h, "c": c, "W": params.weight, "b": params.bias})
    return Check("lstm_step", max(errors.values()), OP_TOLERANCE)


def check_align(seed: int = 2) -> Check:
    m = _tiny(seed=seed)
    r = np.random.default_rng(seed)
    d = parameter(r.normal(size=(2, 4)))
    ann = parameter(r.normal(size=(2, 3, 4)))
    w = r.normal(size=(2, 4))
    mask = np.array([[True, True, True], [True, True, False]])

    def loss():
        z, alpha = m.align(d, ann, mask)
        return (z * w).sum() + (alpha * alpha).sum()

    inputs = {"d": d, "h": ann, "v": m.params["align.v"], "W": m.params["align.W"], "V": m.params["align.V"]}
    return Check("align", max(nn.gradcheck(loss, inputs).values()), OP_TOLERANCE)


def check_decode_step(seed: int = 4) -> Check:
    m = _tiny(seed=seed)
    r = np.random.default_rng(seed)
    z = parameter(r.normal(size=(2, 4)))
    state = [(parameter(r.normal(size=(2, 4)) * 0.5), parameter(r.normal(size=(2, 4)))) for _ in range(2)]

    def loss():
        logits, _ = m.decode_step(state, z, np.array([5, 7]))
        return nn.cross_entropy(logits, [4, 9])

    inputs = {"z": z, "d0": state[0][0], "c1": state[1][1]}
    inputs.update({k: t for k, t in m.params.items() if not k.startswith(("enc", "align", "cas"))})
    return Check("decode_step", max(nn.gradcheck(loss, inputs).values()), MODEL_TOLERANCE)


def check_full_nll(aligner: bool = True, seed: int = 0) -> Check:
    m = _tiny(aligner=aligner, seed=seed)
    src = [m.cas_vocab.encode(["Turn", "direction.Left"]), m.cas_vocab.encode(["Travel", "until.chair", "Turn"])]
    tgt = [m.word_vocab.encode(["turn", "to", "left"]), m.word_vocab.encode(["walk", "to", "the", "chair"])]

    def loss():
        total, n = m.loss(src, tgt)
        return total * (1.0 / n)

    params = m.params if aligner else {k: v for k, v in m.params.items() if not k.startswith("align")}
    name = "seq2seq NLL" + ("" if aligner else " (no aligner)")
    return Check(name, max(nn.gradcheck(loss, params).values()), MODEL_TOLERANCE)


def run_all() -> list[Check]:
    return [check_lstm_step(), check_align(), check_decode_step(), check_full_nll(True), check_full_nll(False)]

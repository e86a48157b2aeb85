import numpy as np
import pytest

from navinstruct import neural as nn
from navinstruct.neural import Tensor, parameter


def rng():
    return np.random.default_rng(0)


def test_sum_gradient_is_ones():
    x = parameter(rng().normal(size=(3, 4)))
    nn.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_square_gradient():
    x = parameter(3.0)
    nn.backward(x * x)
    assert x.grad == 6.0


def test_unreachable_parameter_has_no_gradient():
    x, y = parameter(1.0), parameter(2.0)
    nn.backward(x * 2.0)
    assert y.grad is None


OPS = {
    "add_broadcast": lambda a, b: (a + b[0]).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "matmul": lambda a, b: (a @ nn.reshape(b, (4, 3))).sum(),
    "tanh": lambda a, b: (nn.tanh(a) * b).sum(),
    "sigmoid": lambda a, b: (nn.sigmoid(a) * b).sum(),
    "exp": lambda a, b: (nn.exp(a) * b).sum(),
    "log": lambda a, b: (nn.log(a * a + 1.0) * b).sum(),
    "getitem": lambda a, b: (a[:, 1:3] * b[:, :2]).sum(),
    "concat": lambda a, b: (nn.concat([a, b], axis=0) * nn.concat([b, a], axis=0)).sum(),
    "stack": lambda a, b: (nn.stack([a, b]) * nn.stack([b, b])).sum(),
    "softmax": lambda a, b: (nn.softmax(a) * b).sum(),
    "softmax_masked": lambda a, b: (nn.softmax(a, mask=np.array([True, False, True, True])) * b).sum(),
    "log_softmax": lambda a, b: (nn.log_softmax(a) * b).sum(),
    "cross_entropy": lambda a, b: nn.cross_entropy(a * b, [0, 3, 1], weights=[1.0, 0.5, 0.0]),
    "mean": lambda a, b: nn.mean(a * b),
    "sum_axis": lambda a, b: (nn.tsum(a * b, axis=0) * nn.tsum(b, axis=0)).sum(),
    "embedding": lambda a, b: (nn.embedding(a, [2, 0, 2]) * b).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    r = rng()
    a = parameter(r.normal(size=(3, 4)))
    b = parameter(r.normal(size=(3, 4)))
    errors = nn.gradcheck(lambda: OPS[name](a, b), {"a": a, "b": b})
    assert max(errors.values()) < 1e-6, errors


def _lstm(seed=1, n_in=3, hidden=4):
    r = np.random.default_rng(seed)
    params = nn.init_lstm(r, n_in, hidden, scale=0.5)
    x = parameter(r.normal(size=(2, n_in)))
    h = parameter(r.normal(size=(2, hidden)) * 0.5)
    c = parameter(r.normal(size=(2, hidden)))
    return params, x, h, c


def test_lstm_zero_everything():
    params = nn.LstmParams(parameter(np.zeros((6, 12))), parameter(np.zeros(12)))
    h, c = nn.lstm_step(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))), params)
    np.testing.assert_array_equal(h.data, 0.0)
    np.testing.assert_array_equal(c.data, 0.0)


def test_lstm_saturated_forget_gate():
    H = 2
    w = np.zeros((2 + H, 4 * H))
    b = np.zeros(4 * H)
    b[H : 2 * H] = 50.0  # forget gate -> 1
    b[:H] = 1.0
    b[3 * H :] = 0.5
    params = nn.LstmParams(parameter(w), parameter(b))
    c_prev = np.array([[40.0, -30.0]])
    _, c = nn.lstm_step(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, H))), Tensor(c_prev), params)
    i, g = 1 / (1 + np.exp(-1.0)), np.tanh(0.5)
    np.testing.assert_allclose(c.data, c_prev + i * g, atol=1e-12)


def test_lstm_gradient_check():
    params, x, h, c = _lstm()
    target = np.random.default_rng(5).normal(size=(2, 4))

    def loss():
        h1, c1 = nn.lstm_step(x, h, c, params)
        return ((h1 * target).sum() + (c1 * c1).sum())

    errors = nn.gradcheck(loss, {"x": x, "h": h, "c": c, "W": params.weight, "b": params.bias})
    assert max(errors.values()) < 1e-6, errors


def test_lstm_hidden_bounded():
    params, x, h, c = _lstm(seed=7)
    for _ in range(20):
        h, c = nn.lstm_step(Tensor(x.data * 10), h, c, params)
        assert np.all(np.abs(h.data) < 1.0)


def test_lstm_shape_mismatch():
    params, x, h, c = _lstm()
    with pytest.raises(nn.ShapeError):
        nn.lstm_step(Tensor(np.zeros((2, 5))), h, c, params)


def test_forget_bias_initialised_to_one():
    p = nn.init_lstm(rng(), 3, 4)
    np.testing.assert_array_equal(p.bias.data[4:8], 1.0)
    np.testing.assert_array_equal(np.delete(p.bias.data, range(4, 8)), 0.0)
    assert np.all(np.abs(p.weight.data) <= 0.08)


def test_adam_zero_gradient_leaves_params():
    p = {"w": parameter(np.array([1.0, -2.0]))}
    p["w"].grad = np.zeros(2)
    state = nn.AdamState(lr=0.1)
    nn.adam_step(p, state)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_constant_gradient_step_size():
    p = {"w": parameter(np.array([0.0]))}
    state = nn.AdamState(lr=0.01)
    prev = 0.0
    for _ in range(200):
        p["w"].grad = np.array([3.7])
        nn.adam_step(p, state)
        step = prev - p["w"].data[0]
        prev = p["w"].data[0]
    assert step == pytest.approx(0.01, rel=1e-6)


def test_adam_scalar_reference():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    grads = [0.5, -1.0, 2.0]
    # hand-rolled reference
    x, m, v = 1.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    p = {"x": parameter(np.array(1.0))}
    state = nn.AdamState(lr=lr)
    for g in grads:
        p["x"].grad = np.array(g)
        nn.adam_step(p, state)
    assert p["x"].data == pytest.approx(x, abs=1e-15)


def test_adam_rejects_nan():
    p = {"w": parameter(np.zeros(2))}
    p["w"].grad = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError):
        nn.adam_step(p, nn.AdamState())


def test_clip_grad_norm():
    p = {"a": parameter(np.zeros(2)), "b": parameter(np.zeros(1))}
    p["a"].grad = np.array([3.0, 4.0])
    p["b"].grad = np.array([12.0])
    norm = nn.clip_grad_norm(p, 5.0)
    assert norm == pytest.approx(13.0)
    total = np.sqrt(sum((t.grad ** 2).sum() for t in p.values()))
    assert total == pytest.approx(5.0)


def test_checkpoint_round_trip(tmp_path):
    tensors = {"w": np.arange(6.0).reshape(2, 3) / 7, "b": np.array([1e-300, -2.5])}
    for name in ("ck.json", "ck.json.gz"):
        nn.save_tensors(tmp_path / name, tensors, {"hidden": 3})
        back, meta = nn.load_tensors(tmp_path / name)
        assert meta == {"hidden": 3}
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])


def test_no_grad_records_nothing():
    x = parameter(np.ones(3))
    with nn.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad

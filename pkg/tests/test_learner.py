import numpy as np
import pytest

from flowfl import learner as L
from flowfl.learner import Arch, ModelWeights, OptimizerState
from flowfl.rng import stream

from _util import gradient_check

SMALL = Arch(hidden=5, history=4, horizon=3)


def _batch(arch, n, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(n, arch.history, 2)), rng.normal(size=(n, arch.horizon, 2)))


def test_default_architecture_size():
    a = L.DEFAULT_ARCH
    assert a.out_dim == 96
    assert a.count == 2 * 64 + 16 * 64 + 64 + 16 * 96 + 96 == 2848


def test_zero_network_predicts_zero():
    X, _ = _batch(L.DEFAULT_ARCH, 3)
    assert np.all(L.forward(L.zero_weights(L.DEFAULT_ARCH), X) == 0.0)


def test_forward_is_deterministic_including_dropout():
    w = L.init_weights(L.DEFAULT_ARCH, stream(1, "init"))
    X, _ = _batch(L.DEFAULT_ARCH, 4)
    a = L.forward(w, X, rng=stream(2, "d"), dropout=0.2)
    b = L.forward(w, X, rng=stream(2, "d"), dropout=0.2)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, L.forward(w, X))


def test_single_sequence_and_length_check():
    w = L.init_weights(L.DEFAULT_ARCH, stream(0, "init"))
    X, _ = _batch(L.DEFAULT_ARCH, 1)
    assert L.forward(w, X[0]).shape == (48, 2)
    assert np.array_equal(L.forward(w, X[0]), L.forward(w, X)[0])
    with pytest.raises(ValueError):
        L.forward(w, np.zeros((31, 2)))


def test_init_bounds():
    w = L.init_weights(L.DEFAULT_ARCH, stream(0, "init"))
    p = L.DEFAULT_ARCH.unpack(w.values)
    assert np.abs(p["W_x"]).max() <= 1 / np.sqrt(18)
    assert np.abs(p["W_out"]).max() <= 1 / 4
    assert np.abs(p["W_out"]).max() > 1 / np.sqrt(18)


def test_mse_examples():
    y = np.arange(6.0).reshape(3, 2)
    assert L.mse_loss(y, y) == 0.0
    assert L.mse_loss(y + 1, y) == 1.0
    assert L.mse_loss([[0.0, 0.0]], [[1.0, 1.0]]) == 1.0
    with pytest.raises(ValueError):
        L.mse_loss(np.zeros(3), np.zeros(4))


def test_single_parameter_perturbation_matches_gradient():
    w = L.init_weights(SMALL, stream(3, "init"))
    X, Y = _batch(SMALL, 2)
    _, g = L.loss_and_grad(w, X, Y)
    i = 7
    h = 1e-5
    up, down = w.values.copy(), w.values.copy()
    up[i] += h
    down[i] -= h
    num = (L.loss_and_grad(ModelWeights(SMALL, up), X, Y)[0]
           - L.loss_and_grad(ModelWeights(SMALL, down), X, Y)[0]) / (2 * h)
    assert num == pytest.approx(g[i], rel=1e-5)


@pytest.mark.parametrize("kind", ["lstm", "linear"])
def test_gradient_check_small(kind):
    arch = Arch(kind=kind, hidden=4, history=4, horizon=2)
    w = L.init_weights(arch, stream(11, "init"))
    X, Y = _batch(arch, 3, seed=4)
    mask = None
    if kind == "lstm":
        mask = (np.random.default_rng(0).random((3, 4)) >= 0.2) / 0.8
    ok, excess, n = gradient_check(w, X, Y, mask)
    assert ok, excess
    assert n == arch.count


def test_linear_sgd_full_batch_matches_closed_form():
    arch = Arch(kind="linear", history=3, horizon=2)
    w = L.init_weights(arch, stream(0, "init"))
    X, Y = _batch(arch, 10)
    lr = 0.05
    new, _ = L.train_epoch(w, X, Y, OptimizerState("sgd", lr), np.random.default_rng(0),
                           minibatch_size=None)
    p = arch.unpack(w.values)
    Xf, Yf = X.reshape(10, -1), Y.reshape(10, -1)
    resid = Xf @ p["W"] + p["b"] - Yf
    scale = 2.0 / resid.size
    expect = np.concatenate([(p["W"] - lr * scale * Xf.T @ resid).ravel(),
                             p["b"] - lr * scale * resid.sum(0)])
    np.testing.assert_allclose(new.values, expect, rtol=1e-12, atol=1e-14)


def test_rmsprop_zero_gradient_leaves_weights():
    opt = OptimizerState("rmsprop", 1e-3)
    v = np.linspace(-1, 1, 7)
    assert np.array_equal(opt.apply(v, np.zeros(7)), v)
    assert np.all(opt.accumulators >= 0)
    arch = Arch(kind="linear", history=2, horizon=1)
    zero = L.zero_weights(arch)
    X = np.zeros((4, 2, 2))
    out, loss = L.train_epoch(zero, X, np.zeros((4, 1, 2)), OptimizerState(), np.random.default_rng(0))
    assert loss == 0.0 and np.array_equal(out.values, zero.values)


def test_rmsprop_update_rule():
    opt = OptimizerState("rmsprop", 0.1, 0.9, 1e-7)
    g = np.array([2.0, -1.0])
    v = opt.apply(np.zeros(2), g)
    acc = 0.1 * g * g
    np.testing.assert_allclose(opt.accumulators, acc)
    np.testing.assert_allclose(v, -0.1 * g / (np.sqrt(acc) + 1e-7))


def _straight_batch(n, seed):
    rng = np.random.default_rng(seed)
    t = np.arange(80)[:, None]
    v = rng.uniform(-0.01, 0.01, size=(n, 1, 2))
    p0 = rng.uniform(-1, 1, size=(n, 1, 2))
    pts = p0 + t[None] * v
    return pts[:, :32], pts[:, 32:]


def test_one_epoch_reduces_loss_on_straight_lines():
    X, Y = _straight_batch(64, 0)
    w = L.init_weights(L.DEFAULT_ARCH, stream(0, "init"))
    before = L.validation_loss(w, X, Y)
    opt = OptimizerState("rmsprop", 1e-2)
    w2, _ = L.train_epoch(w, X, Y, opt, stream(0, "train"), 16, 0.2)
    assert L.validation_loss(w2, X, Y) < before


def test_training_is_deterministic():
    X, Y = _straight_batch(40, 1)
    w = L.init_weights(L.DEFAULT_ARCH, stream(0, "init"))
    runs = [L.train_epoch(w, X, Y, OptimizerState(), stream(5, "t"))[0].values for _ in range(2)]
    assert np.array_equal(*runs)


def test_training_errors():
    w = L.zero_weights(SMALL)
    with pytest.raises(ValueError):
        L.train_epoch(w, np.zeros((0, 4, 2)), np.zeros((0, 3, 2)), OptimizerState(), np.random.default_rng(0))
    X, Y = _batch(SMALL, 2)
    X[0, 0, 0] = np.nan
    with pytest.raises(L.TrainingDiverged):
        L.train_epoch(w, X, Y, OptimizerState(), np.random.default_rng(0))


def test_validation_loss_cases():
    w = L.init_weights(SMALL, stream(0, "init"))
    X, _ = _batch(SMALL, 5)
    assert L.validation_loss(w, X, L.forward(w, X)) == 0.0
    zero = L.zero_weights(SMALL)
    assert L.validation_loss(zero, X, np.ones((5, 3, 2))) == 1.0
    assert L.validation_loss(w, np.zeros((0, 4, 2)), np.zeros((0, 3, 2))) is None


def test_serialization_round_trip():
    w = L.init_weights(L.DEFAULT_ARCH, stream(0, "init"))
    data = w.to_bytes()
    assert len(data) == 8 + 4 * 2848
    back = ModelWeights.from_bytes(L.DEFAULT_ARCH, data)
    assert back.to_bytes() == data
    exact = ModelWeights.from_bytes(L.DEFAULT_ARCH, w.to_bytes("f8"), "f8")
    assert np.array_equal(exact.values, w.values)
    with pytest.raises(ValueError):
        ModelWeights.from_bytes(SMALL, data)


def test_contribution_codec():
    w = L.init_weights(SMALL, stream(0, "init"))
    back, n = L.decode_contribution(SMALL, L.encode_contribution(w, 23))
    assert n == 23 and np.array_equal(back.values, w.values)

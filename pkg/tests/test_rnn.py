import numpy as np
import pytest

from bilateral_il.dataset import CorruptFile, FormatVersionMismatch, NormRanges, TrainingWindow
from bilateral_il.operator import DEMO_CHANNELS, Demonstration
from bilateral_il.rnn import (
    DimensionMismatch,
    DivergedLoss,
    HiddenState,
    NetworkParams,
    TrainHyper,
    VariantMismatch,
    backward,
    forward_sequence,
    forward_step,
    load_params,
    loss,
    loss_and_grad,
    save_params,
    train,
)
from bilateral_il.selftest import gradient_check


def zero_net(variant="M1", sizes=None):
    net = NetworkParams.init(variant, np.random.default_rng(0), sizes=sizes)
    for a in net.arrays().values():
        a[...] = 0.0
    return net


def window(X, Y):
    return TrainingWindow(np.asarray(X, float), np.asarray(Y, float), 0, 0.0)


def test_default_architecture():
    for variant, n_out in (("M1", 3), ("M2", 9)):
        net = NetworkParams.init(variant)
        assert net.sizes == (9, 100, 100, n_out)
        assert net.W1.shape == (400, 109) and net.W2.shape == (400, 200) and net.Wy.shape == (n_out, 100)
        assert np.all(net.b1[100:200] == 1.0) and np.all(net.b1[:100] == 0.0)
        assert np.max(np.abs(net.W1)) <= 1 / np.sqrt(109)


def test_zero_weights_give_zero_output_and_state():
    net = zero_net()
    h = HiddenState.zeros(net)
    for _ in range(3):
        y, h = forward_step(net, h, np.full(9, 0.7))
        assert np.array_equal(y, np.zeros(3))
        assert not np.any(h.h1) and not np.any(h.c1) and not np.any(h.h2) and not np.any(h.c2)


def test_saturated_forget_gate_preserves_cell():
    net = zero_net()
    net.b1[100:200] = 60.0
    net.b2[100:200] = 60.0
    rng = np.random.default_rng(1)
    h = HiddenState(np.zeros(100), rng.normal(size=100), np.zeros(100), rng.normal(size=100))
    c1, c2 = h.c1.copy(), h.c2.copy()
    for _ in range(10):
        _, h = forward_step(net, h, rng.uniform(size=9))
    assert np.array_equal(h.c1, c1) and np.array_equal(h.c2, c2)


def test_step_and_sequence_agree():
    rng = np.random.default_rng(2)
    net = NetworkParams.init("M2", rng)
    X = rng.uniform(size=(30, 9))
    Y = forward_sequence(net, X)
    h = HiddenState.zeros(net)
    for t in range(30):
        y, h = forward_step(net, h, X[t])
        assert np.allclose(y, Y[t], atol=1e-13, rtol=0)
        assert np.all(np.abs(h.h1) <= 1) and np.all(np.abs(h.h2) <= 1)


def test_dimension_mismatch():
    net = NetworkParams.init("M1")
    with pytest.raises(DimensionMismatch):
        forward_step(net, HiddenState.zeros(net), np.zeros(8))
    with pytest.raises(DimensionMismatch):
        NetworkParams("M1", (9, 4, 4, 3), np.zeros((16, 12)), np.zeros(16), np.zeros((16, 8)), np.zeros(16),
                      np.zeros((3, 4)), np.zeros(3))


def test_hidden_state_reset_matters():
    rng = np.random.default_rng(3)
    net = NetworkParams.init("M1", rng)
    X = rng.uniform(size=(20, 9))

    def run(h):
        ys = []
        for x in X:
            y, h = forward_step(net, h, x)
            ys.append(y)
        return np.array(ys), h

    a, carried = run(HiddenState.zeros(net))
    b, _ = run(HiddenState.zeros(net))
    c, _ = run(carried)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c)


def test_loss_examples():
    net = zero_net()
    assert loss(net, window(np.zeros((100, 9)), np.zeros((100, 3)))) == 0.0
    assert loss(net, window(np.zeros((100, 9)), np.ones((100, 3)))) == pytest.approx(1.0, abs=1e-15)


def test_loss_invariant_to_channel_permutation():
    rng = np.random.default_rng(4)
    net = NetworkParams.init("M2", rng)
    X, Y = rng.uniform(size=(15, 9)), rng.uniform(size=(15, 9))
    perm = rng.permutation(9)
    swapped = net.copy()
    swapped.Wy[...] = net.Wy[perm]
    swapped.by[...] = net.by[perm]
    assert loss(swapped, window(X, Y[:, perm])) == pytest.approx(loss(net, window(X, Y)), rel=1e-14)


def test_bptt_matches_central_differences():
    assert gradient_check(seed=0) <= 1e-4
    assert gradient_check(seed=1, T=7) <= 1e-4


def test_zero_loss_means_zero_gradient():
    net = zero_net()
    net.by[...] = [0.2, 0.5, 0.9]
    grads = backward(net, window(np.full((10, 9), 0.3), np.tile([0.2, 0.5, 0.9], (10, 1))))
    assert all(not np.any(g) for g in grads.values())


def test_duplicated_window_gives_the_same_gradient():
    rng = np.random.default_rng(5)
    net = NetworkParams.init("M1", rng, sizes=(9, 8, 8, 3))
    X, Y = rng.uniform(size=(12, 9)), rng.uniform(size=(12, 3))
    l1, g1 = loss_and_grad(net, X, Y)
    l2, g2 = loss_and_grad(net, np.stack([X, X]), np.stack([Y, Y]))
    assert l1 == pytest.approx(l2, rel=1e-14)
    for k in g1:
        assert np.allclose(g1[k], g2[k], rtol=1e-12, atol=1e-16)


def constant_corpus(value=0.25):
    data = np.full((400, len(DEMO_CHANNELS)), value)
    return [Demonstration(rate=100.0, data=data)]


def unit_norm(model):
    n_out = 3 if model == "M1" else 9
    return NormRanges(model, np.zeros(9), np.ones(9), np.zeros(n_out), np.ones(n_out))


def test_memorises_a_constant_window():
    _, losses = train(constant_corpus(), "M1", TrainHyper(iterations=500, seed=0), norm=unit_norm("M1"))
    assert losses[-1] < 1e-4


def test_training_is_deterministic():
    corpus = [Demonstration(rate=100.0, data=np.random.default_rng(s).uniform(size=(300, len(DEMO_CHANNELS))))
              for s in range(3)]
    hyper = TrainHyper(iterations=15, seed=7)
    a, la = train(corpus, "M2", hyper, norm=unit_norm("M2"))
    b, lb = train(corpus, "M2", hyper, norm=unit_norm("M2"))
    assert la.tobytes() == lb.tobytes()
    assert all(np.array_equal(a.arrays()[k], b.arrays()[k]) for k in a.arrays())


def test_nan_loss_aborts_training():
    corpus = constant_corpus(np.nan)
    with pytest.raises(DivergedLoss):
        train(corpus, "M1", TrainHyper(iterations=3), norm=unit_norm("M1"))
    with pytest.raises(ValueError):
        train([], "M1")


def test_params_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    net = NetworkParams.init("M2", rng, norm=NormRanges.table("M2"))
    net.meta["label"] = "x"
    path = tmp_path / "m.net"
    save_params(path, net)
    back = load_params(path, "M2")
    assert all(back.arrays()[k].tobytes() == net.arrays()[k].tobytes() for k in net.arrays())
    assert back.norm.to_dict() == net.norm.to_dict() and back.meta == net.meta
    X = rng.uniform(size=(10, 9))
    assert np.array_equal(forward_sequence(back, X), forward_sequence(net, X))


def test_damaged_or_mismatched_params(tmp_path):
    path = tmp_path / "m.net"
    save_params(path, NetworkParams.init("M1", norm=NormRanges.table("M1")))
    raw = bytearray(path.read_bytes())
    with pytest.raises(VariantMismatch):
        load_params(path, "M2")
    raw[-100] ^= 0x10
    (tmp_path / "flip.net").write_bytes(bytes(raw))
    with pytest.raises(CorruptFile):
        load_params(tmp_path / "flip.net")
    raw = bytearray(path.read_bytes())
    raw[8] = 7
    (tmp_path / "ver.net").write_bytes(bytes(raw))
    with pytest.raises(FormatVersionMismatch):
        load_params(tmp_path / "ver.net")

import numpy as np
import pytest

from modroute.numerics import TEXT, VISION, InvalidConfig, fd_gradient
from modroute.router import (
    ExpertLoadEMA,
    UnsupportedCombination,
    apply_modality_mask,
    balance_loss,
    bin_balance_loss,
    gate_forward,
    loss_grad_router,
    modality_counts,
    topk_select,
)


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def setup(seed, T=24, D=5, N_e=8, k=2):
    rng = np.random.default_rng(seed)
    W = rng.normal(scale=0.5, size=(N_e, D))
    x = rng.normal(size=(T, D))
    return rng, W, x, k


def test_topk_ties_go_to_lower_id():
    g = np.array([[0.25, 0.25, 0.25, 0.25]])
    assert topk_select(g, 2).tolist() == [[0, 1]]
    assert topk_select(np.array([[0.1, 0.4, 0.1, 0.4]]), 2).tolist() == [[1, 3]]


def test_gate_rows():
    _, W, x, k = setup(0)
    gate = gate_forward(W, x, k)
    np.testing.assert_allclose(gate.g.sum(axis=1), 1.0, atol=1e-12)
    sig = gate_forward(W, x, k, kind="sigmoid")
    assert np.all((sig.g > 0) & (sig.g < 1))
    with pytest.raises(InvalidConfig):
        gate_forward(W, x, 9)


def test_balance_loss_uniform_is_one():
    # identical logits: P is uniform; with k=N_e every expert gets f=1
    N_e = 4
    gate = gate_forward(np.zeros((N_e, 3)), np.ones((6, 3)), N_e)
    loss, stats = balance_loss(gate)
    assert loss == pytest.approx(N_e * N_e * (1 / N_e), abs=1e-12)
    np.testing.assert_allclose(stats.P, 0.25)


def test_balance_loss_hand_example():
    g = np.array([[0.7, 0.2, 0.1], [0.6, 0.3, 0.1]])
    W = np.eye(3)
    x = np.log(g)
    gate = gate_forward(W, x, 1)
    loss, stats = balance_loss(gate)
    np.testing.assert_allclose(stats.f, [1.0, 0.0, 0.0])
    assert loss == pytest.approx(3 * 0.65, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("kind", ["softmax", "sigmoid"])
def test_balance_grad_matches_fd(seed, kind):
    _, W, x, k = setup(seed)
    topk = gate_forward(W, x, k, kind).topk
    value, grad = loss_grad_router("balance", W, x, k, kind, topk=topk)
    f = lambda w: loss_grad_router("balance", w.reshape(W.shape), x, k, kind, topk=topk)[0]
    fd = fd_gradient(f, W.ravel(), h=1e-5).reshape(W.shape)
    assert rel_err(grad, fd) < 1e-4


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("scope", ["bin", "global"])
def test_bin_balance_grad_matches_fd(seed, scope):
    _, W, x, k = setup(seed)
    expert_bin = np.repeat(np.arange(4), 2)
    topk = gate_forward(W, x, k).topk
    _, grad = loss_grad_router("bin_balance", W, x, k, topk=topk, expert_bin=expert_bin, num_bins=4, scope=scope)
    f = lambda w: loss_grad_router(
        "bin_balance", w.reshape(W.shape), x, k, topk=topk, expert_bin=expert_bin, num_bins=4, scope=scope
    )[0]
    fd = fd_gradient(f, W.ravel(), h=1e-5).reshape(W.shape)
    assert rel_err(grad, fd) < 1e-4


def test_single_bin_equals_global_loss():
    _, W, x, k = setup(11)
    gate = gate_forward(W, x, k)
    expert_bin = np.zeros(8, dtype=int)
    assert bin_balance_loss(gate, expert_bin, 1, "bin") == pytest.approx(balance_loss(gate)[0], abs=1e-12)
    assert bin_balance_loss(gate, expert_bin, 1, "global") == pytest.approx(balance_loss(gate)[0], abs=1e-12)


def test_empty_bin_contributes_nothing():
    # every token picks experts 0 and 1, so bin 1 (experts 2, 3) is never hit
    W = np.array([[5.0], [4.0], [-5.0], [-5.0]])
    x = np.ones((3, 1))
    gate = gate_forward(W, x, 2)
    loss = bin_balance_loss(gate, np.array([0, 0, 1, 1]), 2, "bin")
    P = gate.g[:, :2].mean(axis=0)
    assert loss == pytest.approx(2 * (P[0] + P[1]), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_mi_grad_matches_fd(seed):
    rng, W, x, k = setup(seed, T=24)
    t = rng.random(24)
    scores = np.stack([t, 1 - t], axis=-1)
    expert_bin = np.repeat(np.arange(4), 2)
    kw = dict(expert_bin=expert_bin, num_bins=4, scores=scores, seq_shape=(3, 8))
    _, grad = loss_grad_router("mi", W, x, k, **kw)
    f = lambda w: loss_grad_router("mi", w.reshape(W.shape), x, k, **kw)[0]
    fd = fd_gradient(f, W.ravel(), h=1e-5).reshape(W.shape)
    assert rel_err(grad, fd) < 1e-4


def test_sigmoid_mi_is_gated():
    rng, W, x, k = setup(0, T=8)
    scores = np.tile([0.5, 0.5], (8, 1))
    kw = dict(expert_bin=np.repeat(np.arange(4), 2), num_bins=4, scores=scores, seq_shape=(1, 8))
    with pytest.raises(UnsupportedCombination):
        loss_grad_router("mi", W, x, k, "sigmoid", **kw)
    value, _ = loss_grad_router("mi", W, x, k, "sigmoid", experimental_sigmoid_mi=True, **kw)
    assert np.isfinite(value)


def test_modality_mask_routes_inside_partition():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(10, 6))
    labels = np.array([TEXT, VISION] * 5)
    part = {TEXT: [0, 1, 2], VISION: [3, 4, 5]}
    gate = apply_modality_mask(logits, labels, part, 2)
    for i, m in enumerate(labels):
        assert set(gate.topk[i]) <= set(part[m])
        np.testing.assert_allclose(gate.g[i].sum(), 1.0)
    C = modality_counts(gate.topk, labels, 6)
    assert C[TEXT, 3:].sum() == 0 and C[VISION, :3].sum() == 0


def test_modality_mask_rejects_bad_partitions():
    logits = np.zeros((2, 4))
    with pytest.raises(InvalidConfig):
        apply_modality_mask(logits, [TEXT, VISION], {TEXT: [0], VISION: [1, 2, 3]}, 2)
    with pytest.raises(InvalidConfig):
        apply_modality_mask(logits, [TEXT, VISION], {TEXT: [0, 1], VISION: [1, 2]}, 2)


def test_modality_counts_and_ema():
    topk = np.array([[0, 1], [1, 2], [2, 3]])
    labels = np.array([TEXT, TEXT, VISION])
    C = modality_counts(topk, labels, 4)
    np.testing.assert_array_equal(C, [[1, 2, 1, 0], [0, 0, 1, 1]])
    ema = ExpertLoadEMA(1, 4, beta=0.5)
    ema.update(0, topk, labels)
    ema.update(0, topk, labels)
    np.testing.assert_allclose(ema.C[0], 0.75 * C)

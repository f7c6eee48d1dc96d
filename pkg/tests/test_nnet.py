import math

import numpy as np
import pytest

from rcp.core import Rng
from rcp.nnet import (
    MLP,
    GaussianMixture,
    MixtureDensity,
    MixtureNllLoss,
    MseLoss,
    NetConfig,
    PinballLoss,
    ShapeError,
    TrainingError,
    grad_check,
    load_weights,
    mixture_head_width,
    save_weights,
    train,
    unpack_mixture,
    weights_from_bytes,
    weights_to_bytes,
)


def test_forward_constant_bias():
    net = MLP([2, 3, 1], Rng(0))
    for w in net.weights:
        w[:] = 0.0
    net.biases[-1][:] = 4.5
    out = net.forward(np.random.default_rng(0).normal(size=(6, 2)))
    np.testing.assert_allclose(out, 4.5)


def test_forward_rowwise_independent():
    # no cross-batch coupling; tolerance covers BLAS kernel reassociation
    net = MLP([3, 8, 2], Rng(1))
    x = Rng(2).normal(size=(10, 3))
    full = net.forward(x)
    rows = np.vstack([net.forward(x[i : i + 1]) for i in range(10)])
    np.testing.assert_allclose(full, rows, rtol=1e-12, atol=1e-14)


def test_relu_exact_zeros():
    net = MLP([1, 4, 1], Rng(3))
    net.weights[0][:] = -1.0
    net.biases[0][:] = 0.0
    _, (acts, pre) = net.forward(np.array([[2.0]]), want_cache=True)
    assert (acts[1] == 0.0).all()


def test_forward_shape_error():
    net = MLP([3, 4, 1], Rng(0))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 2)))


def test_grad_check_mse():
    rng = Rng(42)
    net = MLP([2, 8, 8, 1], rng.child(1))
    x = rng.normal(size=(8, 2))
    y = rng.normal(size=(8, 1))
    assert grad_check(net, MseLoss(), x, y) < 1e-4


def test_grad_check_pinball_off_kink():
    rng = Rng(43)
    net = MLP([2, 8, 8, 1], rng.child(1))
    x = rng.normal(size=(8, 2))
    # residuals bounded away from the kink by construction
    y = net.forward(x) + np.where(rng.normal(size=(8, 1)) > 0, 0.5, -0.5)
    assert np.abs(y - net.forward(x)).min() > 0.1
    assert grad_check(net, PinballLoss(0.9), x, y) < 1e-4


def make_mixture_probe(seed=44, k=3, d=2):
    """Well-conditioned probe: the last layer is scaled down so Cholesky
    diagonals stay O(1), keeping the finite-difference oracle accurate."""
    rng = Rng(seed)
    net = MLP([2, 8, mixture_head_width(k, d)], rng.child(1))
    net.weights[-1] *= 0.3
    net.biases[-1][:] = 0.0
    x = rng.normal(size=(8, 2))
    y = rng.normal(size=(8, d))
    return net, x, y


def test_grad_check_mixture_nll():
    net, x, y = make_mixture_probe()
    assert grad_check(net, MixtureNllLoss(3, 2), x, y) < 1e-3


def test_grad_check_positive_output():
    rng = Rng(45)
    net = MLP([2, 6, 1], rng.child(1), positive_output=True)
    x = rng.normal(size=(6, 2))
    y = rng.normal(size=(6, 1)) + 2.0
    assert grad_check(net, MseLoss(), x, y) < 1e-4
    assert (net.forward(x) > 0).all()


def test_train_mse_beats_initial_and_approaches_least_squares():
    rng = Rng(7)
    x = rng.uniform(size=(300, 1))
    y = 2.0 * x + 0.5 + 0.05 * rng.normal(size=(300, 1))
    net = MLP([1, 16, 1], rng.child(1))
    loss = MseLoss()
    initial = loss.value(net.forward(x), y)
    cfg = NetConfig(hidden=(16,), batch_size=32, max_epochs=150, patience=30, learning_rate=1e-2, seed=0)
    train(net, x, y, loss, cfg, rng.child(2))
    final = loss.value(net.forward(x), y)
    assert final < 0.1 * initial
    # closed-form least squares on the same sample is the floor
    design = np.hstack([x, np.ones_like(x)])
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    ls = loss.value(design @ beta, y)
    assert final < 4.0 * ls + 0.01


def test_train_pinball_constant_target():
    rng = Rng(8)
    x = rng.uniform(size=(200, 1))
    y = np.full((200, 1), 1.7)
    net = MLP([1, 16, 16, 1], rng.child(1))
    cfg = NetConfig(
        hidden=(16, 16), batch_size=32, max_epochs=400, patience=80, learning_rate=5e-3, seed=0
    )
    train(net, x, y, PinballLoss(0.9), cfg, rng.child(2))
    assert np.abs(net.forward(x) - 1.7).max() < 0.05


def test_train_mixture_recovers_sigma():
    # single-Gaussian data, K=1: learned scale within 20% of truth
    rng = Rng(9)
    x = rng.uniform(size=(500, 1))
    sigma = 0.8
    y = 1.0 + sigma * rng.normal(size=(500, 1))
    net = MLP([1, 16, mixture_head_width(1, 1)], rng.child(1))
    cfg = NetConfig(hidden=(16,), batch_size=64, max_epochs=300, patience=60, learning_rate=1e-2, seed=0)
    train(net, x, y, MixtureNllLoss(1, 1), cfg, rng.child(2))
    mix = unpack_mixture(net.forward(x), 1, 1)
    learned = mix.chols[:, 0, 0, 0]
    # maximum-likelihood oracle on the same sample
    mle = float(np.sqrt(np.mean((y - y.mean()) ** 2)))
    assert abs(np.median(learned) - mle) / mle < 0.2


def test_train_history_and_best_tracking():
    rng = Rng(10)
    x = rng.uniform(size=(100, 1))
    y = x.copy()
    net = MLP([1, 8, 1], rng.child(1))
    cfg = NetConfig(hidden=(8,), batch_size=32, max_epochs=30, patience=10, seed=0)
    res = train(net, x, y, MseLoss(), cfg, rng.child(2))
    assert len(res.history) >= 1
    best_so_far = np.minimum.accumulate(res.history)
    assert (np.diff(best_so_far) <= 0).all()
    assert res.best_val_loss == min(res.history)


def test_train_nan_raises():
    # residuals around 1e200 overflow the squared loss to inf immediately
    rng = Rng(11)
    x = rng.normal(size=(50, 1)) * 1e200
    y = rng.normal(size=(50, 1)) * 1e200
    net = MLP([1, 8, 1], rng.child(1))
    cfg = NetConfig(hidden=(8,), batch_size=16, max_epochs=10, patience=5, learning_rate=1e3, seed=0)
    with pytest.raises(TrainingError, match="non-finite"):
        train(net, x, y, MseLoss(), cfg, rng.child(2))


def test_train_bit_reproducible():
    rng_data = Rng(12)
    x = rng_data.uniform(size=(80, 1))
    y = x**2
    cfg = NetConfig(hidden=(8, 8), batch_size=16, max_epochs=20, patience=8, seed=5)

    def fit():
        net = MLP([1, 8, 8, 1], Rng(cfg.seed))
        train(net, x, y, MseLoss(), cfg, Rng(99))
        return net.get_params()

    np.testing.assert_array_equal(fit(), fit())


def test_mixture_density_integrates_to_one():
    rng = Rng(13)
    for trial in range(3):
        k = int(rng.integers(1, 4))
        d = int(rng.integers(1, 3))
        chols = np.zeros((k, d, d))
        rows, cols = np.tril_indices(d)
        for i in range(k):
            chols[i, rows, cols] = rng.normal(size=rows.size) * 0.3
            chols[i, np.arange(d), np.arange(d)] = 0.4 + rng.uniform(size=d)
        md = MixtureDensity(rng.normal(size=k), rng.normal(size=(k, d)), chols)
        # Monte-Carlo integral with the mixture as its own proposal
        y = md.sample(40000, rng.child(trial))
        # importance check against a wide uniform box instead: box MC
        lo, hi = y.min(axis=0) - 2, y.max(axis=0) + 2
        u = rng.child(100 + trial).uniform(size=(120000, d)) * (hi - lo) + lo
        box_vol = float(np.prod(hi - lo))
        integral = box_vol * md.density(u).mean()
        assert abs(integral - 1.0) < 0.02


def test_mixture_collapse_equivalences():
    # two equal components at the same location == one component
    one = MixtureDensity(np.array([0.0]), np.array([[0.5]]), np.array([[[1.2]]]))
    two = MixtureDensity(
        np.array([0.3, 0.3]), np.array([[0.5], [0.5]]), np.array([[[1.2]], [[1.2]]])
    )
    y = np.linspace(-3, 4, 50)[:, None]
    np.testing.assert_allclose(one.log_density(y), two.log_density(y), rtol=1e-12)
    # weight vector (1, 0): second component ignored
    w10 = MixtureDensity(
        np.array([40.0, -40.0]), np.array([[0.5], [9.9]]), np.array([[[1.2]], [[0.1]]])
    )
    np.testing.assert_allclose(one.log_density(y), w10.log_density(y), atol=1e-12)


def test_gaussian_mixture_batch_rows():
    raw = Rng(14).normal(size=(5, mixture_head_width(2, 2)))
    mix = unpack_mixture(raw, 2, 2)
    assert isinstance(mix, GaussianMixture)
    y = Rng(15).normal(size=(5, 2))
    batch = mix.log_density(y)
    rowwise = np.array([mix.row(i).log_density(y[i : i + 1])[0] for i in range(5)])
    np.testing.assert_allclose(batch, rowwise, rtol=1e-10)


def test_weight_container_roundtrip(tmp_path):
    net = MLP([3, 7, 2], Rng(21), positive_output=True)
    path = tmp_path / "weights.rcpn"
    save_weights(net, path)
    loaded = load_weights(path)
    assert loaded.widths == net.widths
    assert loaded.positive_output
    x = Rng(22).normal(size=(4, 3))
    np.testing.assert_array_equal(net.forward(x), loaded.forward(x))
    blob = weights_to_bytes(net)
    assert blob[:4] == b"RCPN"
    net2, consumed = weights_from_bytes(blob)
    assert consumed == len(blob)


def test_weight_container_bad_magic():
    with pytest.raises(ValueError):
        weights_from_bytes(b"XXXX" + b"\x00" * 100)

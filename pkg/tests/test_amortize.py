import numpy as np
import pytest

import mbvi.amortize as am
from mbvi.amortize import (
    InferenceNet,
    TrainingConfig,
    flatten_observations,
    geometric_widths,
    load_net,
    net_backward,
    net_forward,
    sample_loss_and_grad,
    save_net,
    train_amortized,
)
from mbvi.closure import MomentPair
from mbvi.errors import ConfigError, DimensionError, NonFiniteLoss, ValidationError
from mbvi.models import linear_model
from mbvi.ode import TimeGrid
from mbvi.sample import ConcreteSDE, euler_maruyama, generate_observations
from mbvi.variational import ControlSpec, ObservationSet

MODEL = linear_model(1, 0.5, 0.0, 0.4)
SPEC = ControlSpec.for_model(MODEL)
GRID = TimeGrid(0.0, 2.0, 8)
TIMES = [0.5, 1.0, 2.0]
PHI0 = MomentPair.point_mass([1.0])


def dataset(n, seed=0):
    ens = euler_maruyama(ConcreteSDE(MODEL), [1.0], GRID.refine(4), n, seed, record_every=4)
    return [generate_observations(ens.path(i), ens.grid, TIMES, [[1.0]], [[0.04]], 100 + i) for i in range(n)]


def small_net(seed=0):
    return InferenceNet([3, 5, 4, GRID.n_steps * SPEC.n_controls], seed=seed)


def test_geometric_widths():
    assert geometric_widths(16, 600, 6) == [16, 29, 54, 98, 179, 328, 600]
    assert geometric_widths(3, 3, 2) == [3, 3, 3]
    with pytest.raises(ConfigError):
        geometric_widths(3, 4, 0)


def test_forward_matches_manual_computation():
    net = small_net()
    y = np.array([0.3, -1.0, 2.0])
    h = y
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = W @ h + b
        if l < net.n_layers - 1:
            h = np.maximum(h, 0.0)
    np.testing.assert_array_equal(net(y), h)
    u = net_forward(net, y, GRID, SPEC)
    np.testing.assert_array_equal(u.u, h.reshape(GRID.n_steps, SPEC.n_controls))
    with pytest.raises(DimensionError):
        net_forward(net, y, TimeGrid(0.0, 1.0, 3), SPEC)


def test_init_range_and_seed():
    net = InferenceNet([10, 20, 5], seed=3)
    assert np.all(np.abs(net.weights[0]) <= 1 / np.sqrt(10))
    assert np.all(np.abs(net.biases[1]) <= 1 / np.sqrt(20))
    assert np.array_equal(net.params(), InferenceNet([10, 20, 5], seed=3).params())
    assert net.n_weights == 10 * 20 + 20 + 20 * 5 + 5


def test_backward_matches_finite_differences():
    net = small_net(1)
    y = np.array([0.3, -1.0, 2.0])
    rng = np.random.default_rng(0)
    c = rng.normal(size=net.sizes[-1])
    dW, db = net_backward(net, y, c)
    flat = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(dW, db)])
    w = net.params()
    h = 1e-6
    for i in rng.choice(w.size, 25, replace=False):
        e = np.zeros_like(w)
        e[i] = h
        net.set_params(w + e)
        fp = c @ net(y)
        net.set_params(w - e)
        fm = c @ net(y)
        assert flat[i] == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-9)
    net.set_params(w)


def test_sample_gradient_matches_finite_differences():
    net = small_net(2)
    # shrink the output layer so the controls stay moderate
    net.weights[-1] *= 0.1
    obs = dataset(1)[0]
    J, g = sample_loss_and_grad(net, MODEL, SPEC, PHI0, obs, GRID)
    w = net.params()
    rng = np.random.default_rng(1)
    v = rng.normal(size=w.size)
    h = 1e-6
    net.set_params(w + h * v)
    Jp, _ = sample_loss_and_grad(net, MODEL, SPEC, PHI0, obs, GRID)
    net.set_params(w - h * v)
    Jm, _ = sample_loss_and_grad(net, MODEL, SPEC, PHI0, obs, GRID)
    assert g @ v == pytest.approx((Jp - Jm) / (2 * h), rel=1e-5)


def test_standardize_inputs_folds_affine_map():
    net = small_net(4)
    ref = net.copy()
    Y = np.random.default_rng(2).normal(3.0, 2.0, size=(50, 3))
    net.standardize_inputs(Y)
    y = Y[0]
    np.testing.assert_allclose(net(y), ref((y - Y.mean(0)) / Y.std(0)), rtol=1e-12, atol=1e-12)


def test_training_is_deterministic_and_reduces_loss():
    data = dataset(6)
    cfg = TrainingConfig(epochs=8, batch_size=2, lr=1e-2, seed=5)
    net = small_net(0)
    net.weights[-1] *= 0.1
    a, tra = train_amortized(MODEL, SPEC, PHI0, data, net, cfg, GRID)
    b, trb = train_amortized(MODEL, SPEC, PHI0, data, net, cfg, GRID)
    assert tra == trb and np.array_equal(a.params(), b.params())
    assert len(tra) == 8 and tra[-1] < tra[0]
    # the input net is left untouched
    assert not np.array_equal(a.params(), net.params())
    sgd, _ = train_amortized(MODEL, SPEC, PHI0, data, net, TrainingConfig(epochs=1, optimizer="sgd", lr=1e-3), GRID)
    assert np.all(np.isfinite(sgd.params()))


def test_training_rejects_bad_input(monkeypatch):
    net = small_net()
    data = dataset(2)
    with pytest.raises(ValidationError):
        train_amortized(MODEL, SPEC, PHI0, [], net, TrainingConfig(), GRID)
    odd = ObservationSet([0.5, 1.0, 1.5], data[1].values, [[1.0]], [[0.04]])
    with pytest.raises(ValidationError):
        train_amortized(MODEL, SPEC, PHI0, [data[0], odd], net, TrainingConfig(epochs=1), GRID)
    monkeypatch.setattr(am, "sample_loss_and_grad", lambda *a, **k: (float("nan"), np.zeros(net.n_weights)))
    with pytest.raises(NonFiniteLoss):
        train_amortized(MODEL, SPEC, PHI0, data, net, TrainingConfig(epochs=1), GRID)


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 1.5}, {"lr": 0.0}, {"optimizer": "rmsprop"},
                                {"beta1": 1.0}])
def test_training_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainingConfig(**kw)


def test_save_load_bit_exact(tmp_path):
    net = small_net(9)
    p = tmp_path / "net.npz"
    save_net(net, p)
    back = load_net(p)
    assert back.sizes == net.sizes
    for a, b in zip(net.weights + net.biases, back.weights + back.biases):
        assert a.dtype == b.dtype and np.array_equal(a, b)
    y = flatten_observations(dataset(1)[0])
    assert np.array_equal(net(y), back(y))
    bad = tmp_path / "bad.npz"
    with open(p, "rb") as fh:
        arrays = dict(np.load(fh))
    arrays["format_version"] = np.array(99)
    np.savez(bad, **arrays)
    with pytest.raises(ValidationError):
        load_net(bad)

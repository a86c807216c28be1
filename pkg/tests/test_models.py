import numpy as np
import pytest

from mbvi.closure import MomentPair
from mbvi.errors import ConfigError, DimensionError, SingularDiffusion, ValidationError
from mbvi.models import (
    IDENTITY,
    Stoichiometry,
    cle_model,
    double_well_model,
    gbm_model,
    linear_model,
    lotka_volterra,
    model_from_config,
)


def all_models():
    return {
        "linear": linear_model(2, [[0.6, 0.2], [-0.1, 0.9]], [0.5, -0.3], [[0.4, 0.0], [0.1, 0.3]]),
        "linear_id": linear_model(2, [[0.6, 0.2], [-0.1, 0.9]], [0.5, -0.3], [[0.4, 0.0], [0.1, 0.3]],
                                  rescaling=IDENTITY),
        "double_well": double_well_model(4.0, 0.8),
        "gbm": gbm_model([0.05, 0.1], [[0.2, 0.0], [0.06, 0.15]]),
        "lv": lotka_volterra(),
    }


POINTS = {
    "linear": [0.3, -0.7],
    "linear_id": [0.3, -0.7],
    "double_well": [0.6],
    "gbm": [1.1, 0.9],
    "lv": [70.0, 80.0],
}


def feats(x):
    return np.r_[1.0, x]


@pytest.mark.parametrize("name", list(POINTS))
def test_point_mass_expectations_equal_pointwise_functions(name):
    model = all_models()[name]
    x = np.array(POINTS[name])
    mp = MomentPair.point_mass(x)
    a = model.drift(x[None])[0]
    D = model.diffusion_tensor(x[None])[0]
    np.testing.assert_allclose(model.drift_mean(mp), a, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(model.drift_cross(mp), np.outer(a, x), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(model.diffusion_mean(mp), D, rtol=1e-10, atol=1e-12)
    C = model.coefficients()
    mom = model.basis.values(mp.phi)
    R = model.rescaling_matrix(x[None])[0]
    n, T = model.dim, feats(x)
    # E[R v T] columns: p = j*n + a gives R[:, a] T_j
    want = np.stack([R[:, a] * T[j] for j in range(n + 1) for a in range(n)], axis=1)
    np.testing.assert_allclose(C.control_mean @ mom, want, rtol=1e-10, atol=1e-12)
    if model.rescaling == IDENTITY:
        W = np.linalg.inv(D)
    else:
        W = R.T @ np.linalg.solve(D, R)
    np.testing.assert_allclose(C.fisher @ mom, np.kron(np.outer(T, T), W), rtol=1e-8, atol=1e-10)


def test_linear_gaussian_expectations():
    model = all_models()["linear"]
    g, mu, s = model.unpack()
    m = np.array([0.2, 0.4])
    cov = np.array([[0.3, 0.05], [0.05, 0.2]])
    mp = MomentPair.from_central(m, cov)
    np.testing.assert_allclose(model.drift_mean(mp), -g @ (m - mu))
    np.testing.assert_allclose(model.drift_cross(mp), -g @ (mp.M - np.outer(mu, m)))
    np.testing.assert_allclose(model.diffusion_mean(mp), s @ s.T)


def test_double_well_gaussian_expectation():
    model = double_well_model(3.0, 1.0)
    m, v = 0.4, 0.2
    mp = MomentPair.from_central([m], [[v]])
    ex3 = m ** 3 + 3 * m * v
    ex4 = m ** 4 + 6 * m * m * v + 3 * v * v
    assert model.drift_mean(mp)[0] == pytest.approx(3.0 * (m - ex3))
    assert model.drift_cross(mp)[0, 0] == pytest.approx(3.0 * (m * m + v - ex4))


@pytest.mark.parametrize("name", list(POINTS))
def test_coefficient_derivatives_finite_differences(name):
    model = all_models()[name]
    th = model.theta
    d = model.coefficient_derivatives()
    for i in range(model.n_theta):
        h = 1e-6 * max(1.0, abs(th[i]))
        e = np.zeros_like(th)
        e[i] = h
        cp, cm = model.coefficients(th + e), model.coefficients(th - e)
        for (field, dv), (_, vp), (_, vm) in zip(d.items(), cp.items(), cm.items()):
            np.testing.assert_allclose(dv[i], (vp - vm) / (2 * h), rtol=1e-5, atol=1e-7, err_msg=f"{field}/{i}")


@pytest.mark.parametrize("name", list(POINTS))
def test_expectation_jacobians_finite_differences(name):
    model = all_models()[name]
    x = np.array(POINTS[name])
    mp = MomentPair.from_central(x, 0.01 * np.diag(np.abs(x) + 0.1))
    phi = mp.phi
    dphi, dth = model.expectation_jacobians("drift", mp)
    h = 1e-6
    for q in range(phi.size):
        e = np.zeros_like(phi)
        e[q] = h * max(1.0, abs(phi[q]))
        fd = (model.drift_mean(MomentPair.from_phi(phi + e, model.dim))
              - model.drift_mean(MomentPair.from_phi(phi - e, model.dim))) / (2 * e[q])
        np.testing.assert_allclose(dphi[:, q], fd, rtol=1e-5, atol=1e-6)
    for i in range(model.n_theta):
        e = np.zeros(model.n_theta)
        e[i] = h * max(1.0, abs(model.theta[i]))
        fd = (model.drift_mean(mp, model.theta + e) - model.drift_mean(mp, model.theta - e)) / (2 * e[i])
        np.testing.assert_allclose(dth[i], fd, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("name", ["linear", "double_well", "gbm", "lv"])
def test_config_roundtrip(name):
    model = all_models()[name]
    again = model_from_config(model.to_config())
    assert type(again) is type(model)
    np.testing.assert_array_equal(again.theta, model.theta)


def test_gbm_config_from_sigma_and_corr():
    m = model_from_config({"family": "gbm", "r": [0.0, 0.0], "sigma": [0.1, 0.2], "corr": [[1, 0.5], [0.5, 1]]})
    _, R = m.unpack()
    np.testing.assert_allclose(R @ R.T, [[0.01, 0.01], [0.01, 0.04]])


def test_with_theta_copies():
    model = lotka_volterra()
    new = model.with_theta([0.4, 0.005, 0.2])
    assert model.theta.tolist() == [0.3, 0.004, 0.3]
    np.testing.assert_array_equal(new.stoichiometry.c, [0.4, 0.005, 0.2])
    with pytest.raises(DimensionError):
        model.with_theta([1.0])
    with pytest.raises(ValidationError):
        model.with_theta([np.nan, 1.0, 1.0])


def test_lotka_volterra_structure():
    model = lotka_volterra((0.5, 0.01, 0.2))
    x = np.array([[10.0, 20.0]])
    h = model.propensities(x)
    np.testing.assert_allclose(h, [[5.0, 2.0, 4.0]])
    np.testing.assert_allclose(model.drift(x), [[5.0 - 2.0, 2.0 - 4.0]])
    b = model.diffusion_factor(x)[0]
    np.testing.assert_allclose(b @ b.T, model.diffusion_tensor(x)[0], atol=1e-12)


def test_stoichiometry_validation():
    with pytest.raises(DimensionError):
        Stoichiometry([[1, 0]], [[1, 0], [0, 1]], [1.0])
    with pytest.raises(ValidationError):
        Stoichiometry([[3, 0]], [[0, 0]], [1.0])
    with pytest.raises(ValidationError):
        Stoichiometry([[1, 0]], [[0, 0]], [-1.0])
    with pytest.raises(ValidationError):
        Stoichiometry([[0.5, 0]], [[0, 0]], [1.0])


def test_identity_rescaling_needs_invertible_diffusion():
    model = linear_model(2, np.eye(2), 0.0, [[1.0, 0.0], [0.0, 0.0]], rescaling=IDENTITY)
    with pytest.raises(SingularDiffusion):
        model.coefficients()


def test_model_from_config_errors():
    with pytest.raises(ConfigError):
        model_from_config({"family": "nope"})
    with pytest.raises(ConfigError):
        model_from_config({"family": "linear", "mu": [0.0]})
    with pytest.raises(ConfigError):
        model_from_config({"family": "cle", "S": [[1]], "P": [[2]], "c": [-1.0]})

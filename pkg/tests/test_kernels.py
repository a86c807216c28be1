import os
import subprocess
import sys

import numpy as np
import pytest

from mbvi import kernels
from mbvi.closure import MomentPair
from mbvi.models import double_well_model, gbm_model, linear_model, lotka_volterra
from mbvi.ode import TimeGrid
from mbvi.variational import ControlPath, ControlSpec, MomentSystem, ObservationSet, evaluate

compiled = pytest.mark.skipif("compiled" not in kernels.available(), reason="extension not built")

PROBLEMS = {
    "linear": (linear_model(2, [[0.5, 0.1], [0.0, 0.8]], [1.0, 2.0], 0.3), [1.2, 1.8], 0.3, 1e-1),
    "double_well": (double_well_model(4.0, 1.0), [-1.0], 0.1, 1e-1),
    "gbm": (gbm_model([0.01, 0.02], [[0.1, 0.0], [0.03, 0.2]]), [1.0, 1.2], 0.1, 1e-1),
    "lv": (lotka_volterra(), [71.0, 79.0], 0.05, 1e-4),
}


def setup(name, N=60, seed=0):
    model, x0, sd, scale = PROBLEMS[name]
    spec = ControlSpec.for_model(model)
    sys_ = MomentSystem(model, spec)
    grid = TimeGrid(0.0, 1.0, N)
    rng = np.random.default_rng(seed)
    u = ControlPath(grid, scale * rng.standard_normal((N, spec.n_controls)), spec.n)
    A, l = sys_.interval_matrices(u.u)
    phi0 = MomentPair.from_central(x0, (sd * np.asarray(x0)) ** 2 * np.eye(len(x0))).phi
    return sys_, grid, A, l, phi0, rng


@compiled
@pytest.mark.parametrize("name", list(PROBLEMS))
def test_forward_backends_agree(name):
    sys_, grid, A, l, phi0, _ = setup(name)
    py = kernels.forward_sweep(sys_.basis, A, phi0, grid.dt, True, "python")
    cc = kernels.forward_sweep(sys_.basis, A, phi0, grid.dt, True, "compiled")
    scale = np.abs(py[0]).max()
    np.testing.assert_allclose(cc[0], py[0], rtol=1e-12, atol=1e-13 * scale)
    np.testing.assert_allclose(cc[1], py[1], rtol=1e-12, atol=1e-13 * scale)
    assert cc[2] == py[2]


@compiled
@pytest.mark.parametrize("name", list(PROBLEMS))
def test_backward_backends_agree(name):
    sys_, grid, A, l, phi0, rng = setup(name)
    phi, stages, _, _ = kernels.forward_sweep(sys_.basis, A, phi0, grid.dt, True, "python")
    jumps = {20: rng.standard_normal(phi.shape[1]), grid.n_steps: rng.standard_normal(phi.shape[1])}
    ep, kp = kernels.backward_sweep(sys_.basis, A, l, phi, stages, grid.dt, jumps, "python")
    ec, kc = kernels.backward_sweep(sys_.basis, A, l, phi, stages, grid.dt, jumps, "compiled")
    np.testing.assert_allclose(ec, ep, rtol=1e-10, atol=1e-12 * np.abs(ep).max())
    np.testing.assert_allclose(kc, kp, rtol=1e-10, atol=1e-12 * np.abs(kp).max())


@compiled
@pytest.mark.parametrize("name", ["double_well", "gbm"])
def test_moment_maps_agree(name):
    sys_, grid, A, l, phi0, _ = setup(name)
    py, cc = kernels.get("python"), kernels.get("compiled")
    phi = kernels.forward_sweep(sys_.basis, A, phi0, grid.dt)[0]
    np.testing.assert_allclose(cc.moments(sys_.basis, phi), py.moments(sys_.basis, phi), rtol=1e-12)
    vc, jc = cc.moments_jacobian(sys_.basis, phi)
    vp, jp = py.moments_jacobian(sys_.basis, phi)
    np.testing.assert_allclose(vc, vp, rtol=1e-12)
    np.testing.assert_allclose(jc, jp, rtol=1e-11, atol=1e-14)


def test_get_errors():
    assert kernels.get("python") is kernels.python_backend
    assert kernels.get() is kernels.get(kernels.BACKEND)
    with pytest.raises(ValueError, match="unavailable"):
        kernels.get("fortran")


SCRIPT = """
import numpy as np
from mbvi import kernels
from mbvi.closure import MomentPair
from mbvi.models import double_well_model
from mbvi.ode import TimeGrid
from mbvi.variational import ControlPath, ObservationSet, evaluate
m = double_well_model(4.0, 0.8)
g = TimeGrid(0.0, 1.0, 40)
u = ControlPath(g, 0.1 * np.ones((40, 2)), 1)
obs = ObservationSet([0.5, 1.0], [[-0.5], [0.4]], [[1.0]], [[0.1]])
ev = evaluate(m, None, u, MomentPair.from_central([-0.9], [[0.05]]), obs)
print(kernels.BACKEND, repr(ev.J))
"""


def _run(env_extra):
    env = {k: v for k, v in os.environ.items() if k != "MBVI_PURE_PYTHON"}
    env.update(env_extra)
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    name, J = out.stdout.split()
    return name, float(J)


def test_pure_python_fallback_matches():
    name, J = _run({"MBVI_PURE_PYTHON": "1"})
    assert name == "python"
    default, J0 = _run({})
    assert default == kernels.BACKEND
    assert J == pytest.approx(J0, rel=1e-12)


def test_in_process_objective_matches_script():
    m = double_well_model(4.0, 0.8)
    g = TimeGrid(0.0, 1.0, 40)
    u = ControlPath(g, 0.1 * np.ones((40, 2)), 1)
    obs = ObservationSet([0.5, 1.0], [[-0.5], [0.4]], [[1.0]], [[0.1]])
    ev = evaluate(m, None, u, MomentPair.from_central([-0.9], [[0.05]]), obs)
    assert ev.J == _run({})[1]

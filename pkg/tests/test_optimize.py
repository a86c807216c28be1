import numpy as np
import pytest

import mbvi.optimize as opt
from mbvi.closure import MomentPair
from mbvi.errors import ConfigError, NoProgress, ValidationError
from mbvi.models import double_well_model, linear_model
from mbvi.ode import TimeGrid
from mbvi.optimize import (
    OptimizerConfig,
    alternating_gd,
    online_smooth,
    param_gradient,
    robust_ngd,
    run_batch,
)
from mbvi.sample import ConcreteSDE, euler_maruyama, generate_observations
from mbvi.variational import ControlPath, ControlSpec, ObservationSet, adjoint_from, evaluate, theta_gradient

MODEL = linear_model(1, 0.8, 1.0, 0.5)
TIMES = [0.5, 1.0, 1.5, 2.0]
GRID = TimeGrid.for_observations(0.0, 2.0, TIMES, max_dt=0.05)
PHI0 = MomentPair.point_mass([0.5])


def observations(seed=3):
    ens = euler_maruyama(ConcreteSDE(MODEL), [0.5], GRID.refine(5), 1, seed, record_every=5)
    return generate_observations(ens.path(0), ens.grid, TIMES, np.eye(1), 0.04, seed + 1)


def strictly_decreasing(seq):
    return all(b < a for a, b in zip(seq, seq[1:]))


def test_config_validation():
    for kw in ({"alpha": 0.9}, {"beta": 1.0}, {"h0": 0.0}, {"mode": "adam"}, {"maxiter": -1},
               {"patience": 0}, {"tol_rel": -1.0}, {"k_max": 1.5}):
        with pytest.raises(ConfigError):
            OptimizerConfig(**kw)
    d = OptimizerConfig().to_dict()
    assert d["alpha"] == 1.2 and d["beta"] == 0.5 and d["reject_clamped"] is True


@pytest.mark.parametrize("mode", ["ngd", "rgd"])
def test_robust_loop_contract(mode):
    obs = observations()
    res = robust_ngd(MODEL, None, PHI0, obs, cfg=OptimizerConfig(mode=mode, maxiter=60), grid=GRID)
    tr = np.array(res.objective_trace)
    assert len(tr) == len(res.accepted) + 1
    assert np.all(np.diff(tr) <= 0)
    assert strictly_decreasing(res.accepted_objectives())
    assert res.J == tr[-1] == evaluate(MODEL, None, res.u_star, PHI0, obs).J
    # step-size schedule: alpha after accepts, beta after rejects
    h = 0.1
    for ok, hs in zip(res.accepted, res.diagnostics["step_sizes"]):
        h *= 1.2 if ok else 0.5
        assert hs == pytest.approx(h)
    assert res.diagnostics["status"] in ("maxiter", "converged", "stalled")


def test_converges_to_exact_posterior_objective():
    obs = observations()
    res = robust_ngd(MODEL, None, PHI0, obs, cfg=OptimizerConfig(maxiter=300), grid=GRID)
    assert res.diagnostics["status"] == "converged"
    again = robust_ngd(MODEL, None, PHI0, obs, u_init=res.u_star, cfg=OptimizerConfig(maxiter=20))
    assert again.J >= res.J - 1e-6 * abs(res.J)


def test_zero_iterations_returns_initial_state():
    obs = observations()
    res = robust_ngd(MODEL, None, PHI0, obs, cfg=OptimizerConfig(maxiter=0), grid=GRID)
    assert res.objective_trace == [evaluate(MODEL, None, ControlPath.zeros(GRID, ControlSpec(1, MODEL.rescaling)),
                                            PHI0, obs).J]
    assert res.accepted == []


def test_zero_direction_converges_immediately():
    res = robust_ngd(MODEL, None, PHI0, None, cfg=OptimizerConfig(maxiter=10), grid=GRID)
    assert res.diagnostics["status"] == "converged"
    assert res.J == 0.0


def test_no_progress_raises(monkeypatch):
    monkeypatch.setattr(opt, "_try_eval", lambda *a, **k: None)
    with pytest.raises(NoProgress):
        robust_ngd(MODEL, None, PHI0, observations(), cfg=OptimizerConfig(max_rejects=5), grid=GRID)


def test_stalled_after_progress(monkeypatch):
    real = opt._try_eval
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        return real(*a, **k) if calls["n"] <= 3 else None

    monkeypatch.setattr(opt, "_try_eval", flaky)
    res = robust_ngd(MODEL, None, PHI0, observations(), cfg=OptimizerConfig(max_rejects=4), grid=GRID)
    assert res.diagnostics["status"] == "stalled"
    assert res.diagnostics["accepts"] >= 1


def test_clamp_limit_rejects_candidates(monkeypatch):
    obs = observations()
    spec = ControlSpec.for_model(MODEL)
    ev = evaluate(MODEL, spec, ControlPath.zeros(GRID, spec), PHI0, obs)
    assert opt._try_eval(MODEL, spec, ev.u, PHI0, obs, None, max_clamps=0) is not None
    ev.traj.diagnostics["clamps"] = 2
    monkeypatch.setattr(opt, "evaluate", lambda *a, **k: ev)
    assert opt._try_eval(MODEL, spec, ev.u, PHI0, obs, None, max_clamps=1) is None
    assert opt._try_eval(MODEL, spec, ev.u, PHI0, obs, None, max_clamps=2) is ev
    assert opt._try_eval(MODEL, spec, ev.u, PHI0, obs, None) is ev


def test_online_close_to_batch():
    obs = observations()
    batch = robust_ngd(MODEL, None, PHI0, obs, cfg=OptimizerConfig(maxiter=300), grid=GRID)
    online = online_smooth(MODEL, None, PHI0, obs, OptimizerConfig(), steps_per_obs=60, grid=GRID)
    assert abs(online.J - batch.J) <= 0.05 * abs(batch.J)
    assert len(online.diagnostics["rounds"]) == len(obs)
    with pytest.raises(ValidationError):
        online_smooth(MODEL, None, PHI0, obs)


def test_param_gradient_log_coordinates():
    model = double_well_model(3.0, 0.9)
    grid = TimeGrid(0.0, 1.0, 10)
    spec = ControlSpec.for_model(model)
    u = ControlPath(grid, 0.1 * np.ones((10, 2)), 1)
    obs = ObservationSet([1.0], [[0.8]], [[1.0]], [[0.1]])
    ev = evaluate(model, spec, u, MomentPair.point_mass([-0.5]), obs)
    eta = adjoint_from(model, spec, ev)
    raw = theta_gradient(model, spec, u, ev.traj, eta)
    np.testing.assert_allclose(param_gradient(model, spec, u, ev.traj, eta, log_coords=False), raw)
    np.testing.assert_allclose(param_gradient(model, spec, u, ev.traj, eta), raw * model.theta)


def test_alternating_gd_moves_only_free_parameters():
    obs = observations()
    start = MODEL.with_theta([0.8, 0.0, 0.5])
    free = np.array([False, True, False])
    cfg = OptimizerConfig(i_max=6, k_max=4, h1=0.05)
    model, res = alternating_gd(start, None, PHI0, obs, cfg=cfg, grid=GRID, free=free)
    tr = res.diagnostics["theta_trace"]
    assert tr.shape == (7, 3)
    assert np.all(tr[:, 0] == 0.8) and np.all(tr[:, 2] == 0.5)
    assert tr[-1, 1] != 0.0
    assert res.diagnostics["param_accepts"] >= 1
    assert np.all(np.diff(res.objective_trace) <= 0)
    assert strictly_decreasing(res.accepted_objectives())
    with pytest.raises(ValidationError):
        alternating_gd(start, None, PHI0, obs, cfg=cfg, grid=GRID, free=[True])


def _square(x, y=1):
    return x * x * y


def test_run_batch_preserves_order():
    jobs = [((k,), {"y": 2}) for k in range(5)]
    assert run_batch(_square, jobs, workers=1) == [0, 2, 8, 18, 32]
    assert run_batch(_square, jobs, workers=2) == [0, 2, 8, 18, 32]

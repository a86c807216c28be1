"""Experiment drivers shared by the command line and the acceptance suite."""

from __future__ import annotations

import warnings
from dataclasses import replace

import numpy as np

from .amortize import InferenceNet, TrainingConfig, flatten_observations, net_forward, train_amortized
from .closure import MomentPair
from .errors import IllConditioned
from .models import gbm_model
from .ode import TimeGrid
from .optimize import OptimizerConfig, alternating_gd, online_smooth, robust_ngd, run_batch
from .sample import ConcreteSDE, euler_maruyama, generate_observations
from .variational import ControlPath, ControlSpec, ObservationSet, evaluate

__all__ = [
    "simulate_dataset",
    "smooth",
    "benchmark_grad",
    "energy",
    "gbm_summary",
    "gbm_instance",
    "GBM_REFERENCE",
    "infer_one",
    "infer_many",
    "amortized_experiment",
]

# Reference values of the correlated GBM benchmark (means and standard
# deviations over 100 repetitions); correlation entries in the order
# (12, 13, 14, 23, 24, 34).
GBM_REFERENCE = {
    "x0": [1.0, 1.0, 1.0, 1.0],
    "r": [1.0e-4, 2.64e-4, 1.5e-4, 3.2e-4],
    "sigma": [0.0112, 0.0102, 0.0174, 0.0130],
    "corr": [-0.08, -0.36, 0.28, 0.15, -0.12, -0.52],
    "sigma_hat": [0.0105, 0.0098, 0.0156, 0.0118],
    "sigma_hat_sd": [0.002, 0.001, 0.002, 0.001],
    "corr_hat": [-0.03, -0.31, 0.23, 0.13, -0.08, -0.46],
    "corr_hat_sd": [0.15, 0.14, 0.14, 0.13, 0.14, 0.11],
}


def simulate_dataset(model, x0, grid: TimeGrid, times, H, noise_cov, seed, n=1, refine=10):
    """``n`` latent paths on ``grid`` and one observation set per path.

    Paths are simulated on ``grid.refine(refine)`` and recorded on the
    grid nodes; observation noise uses seed ``seed + 1``.
    """
    ens = euler_maruyama(ConcreteSDE(model), x0, grid.refine(int(refine)), int(n), int(seed),
                         record_every=int(refine))
    ss = np.random.SeedSequence(int(seed) + 1).generate_state(int(n))
    obs = [generate_observations(ens.path(i), ens.grid, times, H, noise_cov, int(ss[i])) for i in range(n)]
    return ens, obs


def smooth(model, phi0, obs: ObservationSet, grid: TimeGrid, cfg: OptimizerConfig, method="batch",
           steps_per_obs=50, spec=None, backend=None):
    spec = ControlSpec.for_model(model) if spec is None else spec
    if method == "online":
        return online_smooth(model, spec, phi0, obs, cfg, steps_per_obs, grid=grid, backend=backend)
    return robust_ngd(model, spec, phi0, obs, cfg=cfg, grid=grid, backend=backend)


def benchmark_grad(model, phi0, obs, grid, cfg: OptimizerConfig, n_init=10, init_scale=0.1, maxiter=100,
                   seed=0, backend=None):
    """Mean log objective per iteration of NGD and RGD from random starts.

    Every start draws ``u`` entries from ``N(0, init_scale^2)``; both modes
    share the starts. The loop never stops early, so each trace has
    ``maxiter + 1`` entries (the initial objective first). Returns a dict
    with ``ngd``/``rgd`` mean traces and the raw traces; the means are of
    ``log J`` when every objective is positive (``out["log"]``), of ``J``
    otherwise.
    """
    spec = ControlSpec.for_model(model)
    rng = np.random.default_rng(int(seed))
    starts = [init_scale * rng.standard_normal((grid.n_steps, spec.n_controls)) for _ in range(int(n_init))]
    base = replace(cfg, maxiter=int(maxiter), tol_rel=0.0, max_rejects=10**9)
    out = {}
    for mode in ("ngd", "rgd"):
        traces = []
        for u0 in starts:
            res = robust_ngd(model, spec, phi0, obs, ControlPath(grid, u0, spec.n), replace(base, mode=mode),
                             backend=backend)
            traces.append(res.objective_trace)
        T = np.array(traces)
        out[mode + "_traces"] = T
    both = np.concatenate([out["ngd_traces"], out["rgd_traces"]])
    out["log"] = bool(np.all(both > 0))
    for mode in ("ngd", "rgd"):
        T = out[mode + "_traces"]
        out[mode] = np.log(T).mean(axis=0) if out["log"] else T.mean(axis=0)
    return out


def energy(J, obs: ObservationSet):
    """``J`` without the Gaussian normalising constants of the likelihood.

    This is the KL term plus the expected weighted squared residuals and
    is never negative.
    """
    if not len(obs):
        return float(J)
    _, logdet = obs.precision()
    p = obs.dim_obs
    return float(J) - 0.5 * len(obs) * (p * np.log(2 * np.pi) + logdet)


def gbm_summary(model):
    """Noise scales and correlation entries (upper triangle) of a GBM model."""
    _, R = model.unpack()
    D = R @ R.T
    s = np.sqrt(np.diag(D))
    C = D / np.outer(s, s)
    return s, C[np.triu_indices(len(s), 1)]


def gbm_instance():
    """Ground-truth 4-d GBM model with ``R`` a Cholesky factor of the covariance."""
    ref = GBM_REFERENCE
    sig = np.array(ref["sigma"])
    C = np.eye(4)
    C[np.triu_indices(4, 1)] = ref["corr"]
    C = np.triu(C) + np.triu(C, 1).T
    return gbm_model(ref["r"], np.linalg.cholesky(C * np.outer(sig, sig)))


def infer_one(start_model, phi0, obs, grid, cfg, free=None, backend=None):
    """Alternating control/parameter descent; returns ``(model, result)``."""
    spec = ControlSpec.for_model(start_model)
    return alternating_gd(start_model, spec, phi0, obs, cfg=cfg, grid=grid, free=free, backend=backend)


def _infer_job(start_model, phi0, obs, grid, cfg, free):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditioned)
        m, res = infer_one(start_model, phi0, obs, grid, cfg, free)
    diag = {k: v for k, v in res.diagnostics.items() if k != "theta_trace"}
    return {"theta": m.theta, "theta_trace": np.asarray(res.diagnostics["theta_trace"]),
            "objective_trace": res.objective_trace, "diagnostics": diag,
            "u": res.u_star, "moments": res.phi_star}


def infer_many(start_model, phi0, datasets, grid, cfg, free=None, workers=1):
    """Run :func:`infer_one` on every observation set (optionally in parallel).

    Returns one dict per set with ``theta``, ``theta_trace``,
    ``objective_trace``, ``diagnostics``, the final control ``u`` and
    its ``moments``.
    """
    jobs = [((start_model, phi0, obs, grid, cfg, free), {}) for obs in datasets]
    return run_batch(_infer_job, jobs, workers)


def amortized_experiment(model, x0, grid, times, H, noise_cov, seed, n_train=200, n_test=10,
                         tcfg: TrainingConfig = None, layers=6, standardize=True,
                         reference_cfg: OptimizerConfig = None, refine=10, backend=None):
    """Train an inference net on simulated data and score it on held-out sets.

    Returns a dict with the trained net, the epoch loss trace and, per
    held-out sample, the objective of the prior proposal, of the network
    control and of a per-sample robust optimisation.
    """
    tcfg = TrainingConfig() if tcfg is None else tcfg
    reference_cfg = OptimizerConfig(maxiter=200) if reference_cfg is None else reference_cfg
    spec = ControlSpec.for_model(model)
    _, data = simulate_dataset(model, x0, grid, times, H, noise_cov, seed, n_train + n_test, refine)
    train, test = data[:n_train], data[n_train:]
    phi0 = MomentPair.point_mass(x0)
    net = InferenceNet.for_problem(len(flatten_observations(train[0])), grid, spec, layers, seed=int(seed))
    if standardize:
        net.standardize_inputs([flatten_observations(o) for o in train])
    net, trace = train_amortized(model, spec, phi0, train, net, tcfg, grid, backend)
    rows = []
    for o in test:
        J0 = evaluate(model, spec, ControlPath.zeros(grid, spec), phi0, o, backend).J
        Jn = evaluate(model, spec, net_forward(net, flatten_observations(o), grid, spec), phi0, o, backend).J
        Jo = robust_ngd(model, spec, phi0, o, cfg=reference_cfg, grid=grid, backend=backend).J
        rows.append((J0, Jn, Jo, energy(J0, o), energy(Jn, o), energy(Jo, o)))
    return {"net": net, "loss_trace": trace, "held_out": np.array(rows).reshape(-1, 6),
            "train": train, "test": test}

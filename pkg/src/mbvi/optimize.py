"""Robust gradient drivers: smoothing, online smoothing, joint inference."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, IllConditioned, NoProgress, NumericalError, ValidationError
from .ode import TimeGrid
from .variational import (
    ControlPath,
    ControlSpec,
    MomentTrajectory,
    ObservationSet,
    adjoint_from,
    evaluate,
    gradient,
    interval_metric,
    precondition,
    theta_gradient,
)

__all__ = [
    "OptimizerConfig",
    "SmoothingResult",
    "robust_ngd",
    "online_smooth",
    "param_gradient",
    "alternating_gd",
    "run_batch",
]


@dataclass(frozen=True)
class OptimizerConfig:
    """Step-size schedule and stopping rules of the robust loops.

    ``h0``/``h1`` are the initial control and parameter step sizes;
    ``alpha``/``beta`` grow/shrink them after accepted/rejected steps.
    """

    h0: float = 0.1
    alpha: float = 1.2
    beta: float = 0.5
    maxiter: int = 200
    k_max: int = 5
    i_max: int = 50
    tol_rel: float = 1e-8
    patience: int = 5
    max_rejects: int = 50
    mode: str = "ngd"
    h1: float = 1e-3
    jitter: float = 1e-8
    identity_metric: bool = False
    reject_clamped: bool = True

    def __post_init__(self):
        if not (self.alpha > 1.0 > self.beta > 0.0):
            raise ConfigError(f"need alpha > 1 > beta > 0, got alpha={self.alpha}, beta={self.beta}")
        if not (self.h0 > 0 and self.h1 > 0):
            raise ConfigError("step sizes must be positive")
        if self.mode not in ("ngd", "rgd"):
            raise ConfigError(f"mode must be 'ngd' or 'rgd', got {self.mode!r}")
        for name in ("maxiter", "k_max", "i_max", "patience", "max_rejects"):
            v = getattr(self, name)
            if int(v) != v or v < (0 if name in ("maxiter", "i_max") else 1):
                raise ConfigError(f"{name} must be a non-negative integer")
        if self.tol_rel < 0 or self.jitter < 0:
            raise ConfigError("tol_rel and jitter must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class SmoothingResult:
    u_star: ControlPath
    phi_star: MomentTrajectory
    objective_trace: list
    accepted: list
    diagnostics: dict = field(default_factory=dict)

    @property
    def J(self):
        return self.objective_trace[-1]

    def accepted_objectives(self):
        """Objective after every accepted step, starting with the initial one."""
        return [self.objective_trace[0]] + [
            J for J, ok in zip(self.objective_trace[1:], self.accepted) if ok
        ]


def _direction(model, spec, ev, cfg, backend):
    eta = adjoint_from(model, spec, ev, backend)
    d = gradient(model, spec, ev.u, ev.traj, eta)
    if cfg.mode == "rgd" or cfg.identity_metric:
        return d
    return precondition(d, interval_metric(model, spec, ev.traj), cfg.jitter)


def _try_eval(model, spec, u, phi0, obs, backend, max_clamps=None):
    try:
        ev = evaluate(model, spec, u, phi0, obs, backend)
    except NumericalError:
        return None
    if max_clamps is not None and ev.traj.diagnostics.get("clamps", 0) > max_clamps:
        return None  # left the region where the gradient is exact
    return ev if math.isfinite(ev.J) else None


def robust_ngd(model, spec: Optional[ControlSpec], phi0, obs: Optional[ObservationSet],
               u_init: Optional[ControlPath] = None, cfg: Optional[OptimizerConfig] = None,
               grid: Optional[TimeGrid] = None, backend=None) -> SmoothingResult:
    """Accept/reject natural (or regular) gradient descent on the controls.

    A candidate ``u - h d`` is kept only if it lowers the objective;
    ``h`` is multiplied by ``alpha`` on acceptance and ``beta`` on
    rejection. Stops after ``maxiter`` iterations, when the relative
    improvement stays below ``tol_rel`` for ``patience`` accepted steps,
    or when the direction vanishes.
    """
    cfg = OptimizerConfig() if cfg is None else cfg
    spec = ControlSpec.for_model(model) if spec is None else spec
    if u_init is None:
        if grid is None:
            raise ValidationError("robust_ngd needs u_init or a grid")
        u_init = ControlPath.zeros(grid, spec)
    ev = evaluate(model, spec, u_init, phi0, obs, backend)
    J = ev.J
    max_clamps = ev.traj.diagnostics.get("clamps", 0) if cfg.reject_clamped else None
    trace, accepted, steps = [J], [], []
    h = cfg.h0
    n_acc = n_rej = run_rej = small = 0
    status = "maxiter"
    direction = None
    for it in range(int(cfg.maxiter)):
        if direction is None:
            direction = _direction(model, spec, ev, cfg, backend)
        if not np.any(direction):
            status = "converged"
            break
        cand = _try_eval(model, spec, ev.u.with_values(ev.u.u - h * direction), phi0, obs, backend,
                         max_clamps)
        if cand is not None and cand.J < J:
            rel = (J - cand.J) / max(abs(J), 1e-300)
            ev, J = cand, cand.J
            h *= cfg.alpha
            n_acc += 1
            run_rej = 0
            direction = None
            accepted.append(True)
            small = small + 1 if rel < cfg.tol_rel else 0
        else:
            h *= cfg.beta
            n_rej += 1
            run_rej += 1
            accepted.append(False)
        trace.append(J)
        steps.append(h)
        if small >= cfg.patience:
            status = "converged"
            break
        if run_rej >= cfg.max_rejects:
            if n_acc == 0:
                raise NoProgress(f"{run_rej} consecutive rejections without any accepted step")
            status = "stalled"
            break
    diag = {
        "status": status,
        "iterations": len(accepted),
        "accepts": n_acc,
        "rejects": n_rej,
        "h_final": h,
        "step_sizes": steps,
        "clamps": ev.traj.diagnostics.get("clamps", 0),
        "mode": cfg.mode,
    }
    return SmoothingResult(ev.u, ev.traj, trace, accepted, diag)


def online_smooth(model, spec, phi0, all_obs: ObservationSet, cfg: Optional[OptimizerConfig] = None,
                  steps_per_obs: int = 50, grid: Optional[TimeGrid] = None, u_init=None,
                  backend=None) -> SmoothingResult:
    """Add observations one at a time, warm-starting every round.

    Each round runs ``steps_per_obs`` robust iterations on the first
    ``k`` observations starting from the previous round's control.
    """
    cfg = OptimizerConfig() if cfg is None else cfg
    spec = ControlSpec.for_model(model) if spec is None else spec
    rcfg = replace(cfg, maxiter=int(steps_per_obs))
    u = u_init
    if u is None:
        if grid is None:
            raise ValidationError("online_smooth needs u_init or a grid")
        u = ControlPath.zeros(grid, spec)
    if len(all_obs) == 0:
        return robust_ngd(model, spec, phi0, all_obs, u, rcfg, backend=backend)
    rounds = []
    res = None
    for k in range(1, len(all_obs) + 1):
        res = robust_ngd(model, spec, phi0, all_obs.subset(k), u, rcfg, backend=backend)
        rounds.append({"n_obs": k, "trace": res.objective_trace, "accepted": res.accepted})
        u = res.u_star
    res.diagnostics["rounds"] = rounds
    return res


def param_gradient(model, spec, u: ControlPath, traj: MomentTrajectory, eta, log_coords=True):
    """``dJ/dtheta``; positive parameters in log coordinates when asked."""
    g = theta_gradient(model, spec, u, traj, eta)
    if log_coords:
        g = np.where(model.positive, g * model.theta, g)
    return g


def _to_free(model, theta):
    return np.where(model.positive, np.log(np.where(model.positive, theta, 1.0)), theta)


def _from_free(model, z):
    return np.where(model.positive, np.exp(np.where(model.positive, z, 0.0)), z)


def alternating_gd(model, spec, phi0, obs: ObservationSet, theta_init=None,
                   cfg: Optional[OptimizerConfig] = None, grid: Optional[TimeGrid] = None,
                   u_init: Optional[ControlPath] = None, free=None, backend=None):
    """Alternate ``k_max`` robust control steps and ``k_max`` parameter steps.

    Parameter steps are regular gradient steps in optimisation
    coordinates (log for positive entries); only entries selected by
    the boolean mask ``free`` move. Each phase keeps its own step size
    across outer iterations. Returns ``(model, SmoothingResult)``.
    """
    cfg = OptimizerConfig() if cfg is None else cfg
    spec = ControlSpec.for_model(model) if spec is None else spec
    if theta_init is not None:
        model = model.with_theta(theta_init)
    free = np.ones(model.n_theta, bool) if free is None else np.asarray(free, bool)
    if free.shape != (model.n_theta,):
        raise ValidationError("free mask has the wrong length")
    if u_init is None:
        if grid is None:
            raise ValidationError("alternating_gd needs u_init or a grid")
        u_init = ControlPath.zeros(grid, spec)
    u = u_init
    ucfg = replace(cfg, maxiter=int(cfg.k_max), max_rejects=10**9)
    h_u, h_t = cfg.h0, cfg.h1
    theta_trace = [model.theta.copy()]
    J_trace, accepted_all = [], []
    u_acc = t_acc = t_rej_run = u_rej_run = 0
    res = None
    for outer in range(int(cfg.i_max)):
        res = robust_ngd(model, spec, phi0, obs, u, replace(ucfg, h0=h_u), backend=backend)
        u, h_u = res.u_star, res.diagnostics["h_final"]
        u_acc += res.diagnostics["accepts"]
        u_rej_run = 0 if res.diagnostics["accepts"] else u_rej_run + res.diagnostics["rejects"]
        if not J_trace:
            J_trace.append(res.objective_trace[0])
        J_trace.extend(res.objective_trace[1:])
        accepted_all.extend(res.accepted)
        ev = evaluate(model, spec, u, phi0, obs, backend)
        J = ev.J
        z = _to_free(model, model.theta)
        direction = None
        for _ in range(int(cfg.k_max)):
            if direction is None:
                eta = adjoint_from(model, spec, ev, backend)
                direction = np.where(free, param_gradient(model, spec, u, ev.traj, eta), 0.0)
            if not np.any(direction):
                break
            z_new = z - h_t * direction
            cand_model = None
            try:
                cand_model = model.with_theta(_from_free(model, z_new))
            except (ValidationError, NumericalError):
                cand_model = None
            limit = ev.traj.diagnostics.get("clamps", 0) if cfg.reject_clamped else None
            cand = None
            if cand_model is not None:
                cand = _try_eval(cand_model, spec, u, phi0, obs, backend, limit)
            if cand is not None and cand.J < J:
                model, ev, J, z = cand_model, cand, cand.J, z_new
                h_t *= cfg.alpha
                t_acc += 1
                t_rej_run = 0
                direction = None
                accepted_all.append(True)
            else:
                h_t *= cfg.beta
                t_rej_run += 1
                accepted_all.append(False)
            J_trace.append(J)
        if t_rej_run >= cfg.max_rejects and t_acc == 0:
            raise NoProgress("parameter phase made no progress")
        if u_rej_run >= cfg.max_rejects and u_acc == 0:
            raise NoProgress("control phase made no progress")
        theta_trace.append(model.theta.copy())
    ev = evaluate(model, spec, u, phi0, obs, backend)
    diag = {
        "theta_trace": np.array(theta_trace),
        "h_control": h_u,
        "h_param": h_t,
        "control_accepts": u_acc,
        "param_accepts": t_acc,
        "status": "maxiter",
    }
    out = SmoothingResult(u, ev.traj, J_trace, accepted_all, diag)
    return model, out


def _call(job):
    fn, args, kwargs = job
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", IllConditioned)
        return fn(*args, **kwargs)


def run_batch(fn, jobs, workers=1):
    """Run ``fn(*args, **kwargs)`` for every ``(args, kwargs)`` job.

    Jobs are independent; with ``workers > 1`` they go to a process pool
    and results come back in submission order.
    """
    jobs = [(fn, tuple(a), dict(k)) for a, k in jobs]
    if int(workers) <= 1 or len(jobs) <= 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(_call, jobs))

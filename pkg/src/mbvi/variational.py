"""Controlled moment dynamics, objective, costate and control gradients.

The moment state is ``phi = (m, packed M)``. For a control path ``u`` the
moment system on interval ``k`` is linear in the closure moments,
``dphi/dt = A_k @ mom(phi)``, and the running cost is
``L = l_k @ mom(phi)`` with ``l_k = 1/2 u_k^T G u_k``. Everything below is
assembled from the coefficient tensors exported by the model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .closure import MomentPair, n_packed, triu_pairs, unpack_moments
from .errors import (
    DimensionError,
    GridError,
    IllConditioned,
    NotPositiveDefinite,
    ValidationError,
)
from .ode import GridFunction, TimeGrid

__all__ = [
    "ControlSpec",
    "ControlPath",
    "ObservationSet",
    "MomentTrajectory",
    "AdjointTrajectory",
    "MomentSystem",
    "forward_moments",
    "fisher_block",
    "kl_running_cost",
    "obs_factor",
    "objective",
    "adjoint_solve",
    "gradient",
    "natural_gradient",
    "evaluate",
    "adjoint_from",
    "precondition",
    "Evaluation",
    "interval_metric",
    "theta_gradient",
]

JITTER = 1e-8
COND_LIMIT = 1e10


@dataclass(frozen=True)
class ControlSpec:
    """Feature set ``T(x) = (1, x)`` and the model's rescaling."""

    n: int
    rescaling: str
    features: str = "constant_plus_linear"

    def __post_init__(self):
        if self.features != "constant_plus_linear":
            raise ValidationError(f"unsupported feature set {self.features!r}")
        if self.n < 1:
            raise DimensionError("state dimension must be positive")

    @classmethod
    def for_model(cls, model):
        return cls(model.dim, model.rescaling)

    @property
    def n_features(self):
        return self.n + 1

    @property
    def n_controls(self):
        return self.n * self.n_features

    def check(self, model):
        if model.dim != self.n or model.rescaling != self.rescaling:
            raise DimensionError(f"control spec {self} does not fit {model!r}")


class ControlPath:
    """Piecewise-constant controls, one vector ``u_k`` per grid interval."""

    def __init__(self, grid: TimeGrid, u, n: Optional[int] = None):
        u = np.array(u, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        if u.shape[0] != grid.n_steps:
            raise DimensionError(f"{u.shape[0]} control rows for {grid.n_steps} intervals")
        if not np.all(np.isfinite(u)):
            raise ValidationError("controls must be finite")
        if n is None:
            n = int(round((np.sqrt(1 + 4 * u.shape[1]) - 1) / 2))
        if n * (n + 1) != u.shape[1]:
            raise DimensionError(f"control width {u.shape[1]} is not n(n+1)")
        u.setflags(write=False)
        self.grid = grid
        self.u = u
        self.n = n

    @classmethod
    def zeros(cls, grid, spec: ControlSpec):
        return cls(grid, np.zeros((grid.n_steps, spec.n_controls)), spec.n)

    @classmethod
    def from_matrices(cls, grid, v):
        """From per-interval matrices ``v_k`` of shape ``(n, n+1)``."""
        v = np.asarray(v, dtype=float)
        N, n, m = v.shape
        return cls(grid, np.swapaxes(v, 1, 2).reshape(N, n * m), n)

    def matrices(self):
        n = self.n
        return np.swapaxes(self.u.reshape(-1, n + 1, n), 1, 2)

    @property
    def u0(self):
        return self.u[:, : self.n]

    @property
    def u1(self):
        return self.matrices()[:, :, 1:]

    def with_values(self, u):
        return ControlPath(self.grid, u, self.n)

    def __len__(self):
        return self.u.shape[0]


@dataclass(frozen=True)
class ObservationSet:
    """Linear-Gaussian observations ``y_k = H x(t_k) + noise``.

    The noise covariance must be symmetric positive semidefinite here;
    evaluating the likelihood factor additionally needs it definite.
    """

    times: np.ndarray
    values: np.ndarray
    H: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        p = H.shape[0]
        y = np.asarray(self.values, dtype=float).reshape(t.size, p)
        S = np.asarray(self.noise_cov, dtype=float)
        S = S.reshape(p, p) if S.size == p * p else np.diag(np.broadcast_to(S, (p,)))
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError("observation times must be strictly increasing")
        for name, arr in (("times", t), ("values", y), ("H", H), ("noise_cov", S)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"observation {name} must be finite")
        if not np.allclose(S, S.T, rtol=1e-12, atol=0):
            raise ValidationError("noise covariance must be symmetric")
        S = 0.5 * (S + S.T)
        if np.linalg.eigvalsh(S).min() < -1e-12 * max(1.0, np.abs(S).max()):
            raise NotPositiveDefinite("noise covariance must be positive semidefinite")
        for name, arr in (("times", t), ("values", y), ("H", H), ("noise_cov", S)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def empty(cls, n, p=None):
        p = n if p is None else p
        return cls(np.zeros(0), np.zeros((0, p)), np.eye(p, n), np.eye(p))

    def __len__(self):
        return self.times.size

    @property
    def dim_obs(self):
        return self.H.shape[0]

    @property
    def dim_state(self):
        return self.H.shape[1]

    def node_indices(self, grid: TimeGrid):
        idx = [grid.node_index(t) for t in self.times]
        if len(set(idx)) != len(idx):
            raise GridError("two observations snap to the same grid node")
        return idx

    def subset(self, k):
        """The first ``k`` observations."""
        return ObservationSet(self.times[:k], self.values[:k], self.H, self.noise_cov)

    def precision(self):
        try:
            L = np.linalg.cholesky(self.noise_cov)
        except np.linalg.LinAlgError:
            raise NotPositiveDefinite("observation noise covariance is not positive definite") from None
        Linv = np.linalg.inv(L)
        return Linv.T @ Linv, 2.0 * np.log(np.diag(L)).sum()


@dataclass
class MomentTrajectory:
    """Packed moments on grid nodes (``stages`` holds RK4 stage states)."""

    grid: TimeGrid
    values: np.ndarray
    n: int
    diagnostics: dict = field(default_factory=dict)
    stages: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.values = GridFunction(self.grid, self.values).values
        if self.values.shape != (self.grid.n_steps + 1, n_packed(self.n)):
            raise DimensionError(f"moment trajectory has shape {self.values.shape}")

    def pair(self, i) -> MomentPair:
        return MomentPair.from_phi(self.values[i], self.n)

    @property
    def means(self):
        return self.values[:, : self.n]

    @property
    def second_moments(self):
        return unpack_moments(self.values, self.n)[1]

    @property
    def covariances(self):
        m = self.means
        return self.second_moments - m[:, :, None] * m[:, None, :]

    @property
    def variances(self):
        return np.diagonal(self.covariances, axis1=1, axis2=2)


@dataclass
class AdjointTrajectory:
    """Costate on grid nodes; stored values are left limits at jumps.

    ``slope_cotangents`` (discrete method only) holds the derivative of
    the objective with respect to each RK4 slope of every step.
    """

    grid: TimeGrid
    values: np.ndarray
    jumps: dict = field(default_factory=dict)
    slope_cotangents: Optional[np.ndarray] = field(default=None, repr=False)
    method: str = "discrete"

    def right_limits(self):
        out = np.array(self.values, copy=True)
        for k, v in self.jumps.items():
            out[k] -= v
        return out


class MomentSystem:
    """Coefficient matrices of the moment ODE in packed coordinates."""

    def __init__(self, model, spec: Optional[ControlSpec] = None):
        spec = ControlSpec.for_model(model) if spec is None else spec
        spec.check(model)
        self.model = model
        self.spec = spec
        self.basis = model.basis
        n = model.dim
        self.n = n
        C = model.coefficients()
        self.B, self.Cc = self._assemble(C, n)
        self.G = C.fisher
        self._deriv = None

    @staticmethod
    def _assemble(C, n, lead=0):
        """Stack mean rows and packed second-moment rows."""
        ax = (slice(None),) * lead
        new = ax + (None,)
        pairs = triu_pairs(n)
        B = np.concatenate(
            [C.drift]
            + [(C.drift_cross[ax + (i, j)] + C.drift_cross[ax + (j, i)] + C.diffusion[ax + (i, j)])[new]
               for i, j in pairs],
            axis=lead,
        )
        Cc = np.concatenate(
            [C.control_mean]
            + [(C.control_cross[ax + (i, j)] + C.control_cross[ax + (j, i)])[new] for i, j in pairs],
            axis=lead,
        )
        return B, Cc

    def derivatives(self):
        if self._deriv is None:
            dC = self.model.coefficient_derivatives()
            dB, dCc = self._assemble(dC, self.n, lead=1)
            self._deriv = (dB, dCc, dC.fisher)
        return self._deriv

    def interval_matrices(self, u):
        u = np.asarray(u, dtype=float)
        A = self.B[None] + np.einsum("qpk,np->nqk", self.Cc, u)
        l = 0.5 * np.einsum("np,pqk,nq->nk", u, self.G, u)
        return A, l

    def fisher_nodes(self, mom):
        g = np.einsum("pqk,nk->npq", self.G, mom)
        return 0.5 * (g + np.swapaxes(g, 1, 2))


def _system(model, spec):
    # cached on the model instance, which is immutable
    key = ("system", spec)
    sys_ = model._cache.get(key)
    if sys_ is None:
        sys_ = MomentSystem(model, spec)
        model._cache[key] = sys_
    return sys_


def _as_phi0(phi0, n):
    if isinstance(phi0, MomentPair):
        if phi0.dim != n:
            raise DimensionError(f"initial moments have dimension {phi0.dim}, model {n}")
        return phi0.phi
    phi0 = np.asarray(phi0, dtype=float).ravel()
    if phi0.size != n_packed(n):
        raise DimensionError(f"packed initial moments must have length {n_packed(n)}")
    return MomentPair.from_phi(phi0, n).phi


def _sweep(sys_, u, phi0, backend, clamp=True):
    A, l = sys_.interval_matrices(u.u)
    phi, stages, clamps, worst = kernels.forward_sweep(
        sys_.basis, A, _as_phi0(phi0, sys_.n), u.grid.dt, clamp, backend=backend
    )
    diag = {"clamps": int(clamps), "worst_eig_ratio": float(worst)}
    return MomentTrajectory(u.grid, phi, sys_.n, diag, stages), A, l


def forward_moments(model, spec, u: ControlPath, phi0, backend=None, clamp=True) -> MomentTrajectory:
    """Moment trajectory of the controlled process (RK4 on the grid of ``u``)."""
    if u.n != model.dim:
        raise DimensionError("control path does not match the model dimension")
    return _sweep(_system(model, spec), u, phi0, backend, clamp)[0]


def _mp_phi(mp):
    return (mp if isinstance(mp, MomentPair) else MomentPair(*mp)).phi


def fisher_block(model, spec, mp, jitter=JITTER):
    """Symmetrised Fisher block ``g(phi)`` with relative jitter added."""
    sys_ = _system(model, spec)
    g = sys_.G @ sys_.basis.values(_mp_phi(mp))
    g = 0.5 * (g + g.T)
    if jitter:
        g = g + jitter * max(np.trace(g), 0.0) / g.shape[0] * np.eye(g.shape[0])
    return g


def kl_running_cost(model, spec, u_t, mp):
    """``1/2 u^T g(phi) u`` with the un-jittered Fisher block."""
    u_t = np.asarray(u_t, dtype=float)
    return 0.5 * float(u_t @ fisher_block(model, spec, mp, jitter=0.0) @ u_t)


def _obs_terms(obs: ObservationSet, n):
    """Gradients and offsets of all observation factors (linear in phi)."""
    if not len(obs):
        return np.zeros((0, n_packed(n))), np.zeros(0)
    P, logdet = obs.precision()
    H = obs.H
    p = H.shape[0]
    Q = H.T @ P @ H
    const = -0.5 * (p * np.log(2 * np.pi) + logdet)
    gM = np.array([-0.5 * Q[i, i] if i == j else -Q[i, j] for i, j in triu_pairs(n)])
    grads = np.array([np.concatenate([H.T @ P @ y, gM]) for y in obs.values])
    offs = np.array([const - 0.5 * y @ P @ y for y in obs.values])
    return grads, offs


def obs_factor(obs: ObservationSet, k, mp):
    """``(F_k, dF_k/dphi)`` for observation ``k`` at moments ``mp``.

    ``F_k`` is the expected Gaussian log-likelihood of ``y_k``; it is
    linear in the raw moments, so the gradient only depends on the data.
    """
    phi = _mp_phi(mp)
    n = obs.dim_state
    if phi.size != n_packed(n):
        raise DimensionError("moment pair does not match observation map")
    grads, offs = _obs_terms(obs, n)
    return float(offs[k] + grads[k] @ phi), grads[k].copy()


@dataclass
class Evaluation:
    """Forward pass bundle: trajectory, interval matrices and objective."""

    u: ControlPath
    traj: MomentTrajectory
    A: np.ndarray
    l: np.ndarray
    mom: np.ndarray
    J: float
    kl: float
    F: np.ndarray
    obs_nodes: list
    obs_grads: np.ndarray


def evaluate(model, spec, u: ControlPath, phi0, obs: Optional[ObservationSet], backend=None) -> Evaluation:
    """Forward solve and objective, keeping what the adjoint needs."""
    sys_ = _system(model, spec)
    obs = ObservationSet.empty(model.dim) if obs is None else obs
    if obs.dim_state != model.dim:
        raise DimensionError("observation map does not match the model dimension")
    if u.n != model.dim:
        raise DimensionError("control path does not match the model dimension")
    nodes = obs.node_indices(u.grid)
    traj, A, l = _sweep(sys_, u, phi0, backend)
    mom = sys_.basis.values(traj.values)
    kl = 0.5 * u.grid.dt * float(np.einsum("nk,nk->", l, mom[:-1] + mom[1:]))
    grads, offs = _obs_terms(obs, model.dim)
    F = offs + np.einsum("kq,kq->k", grads, traj.values[nodes]) if len(obs) else offs
    J = kl - float(F.sum())
    return Evaluation(u, traj, A, l, mom, J, kl, F, nodes, grads)


def objective(model, spec, u: ControlPath, phi0, obs: Optional[ObservationSet], backend=None) -> float:
    """Trapezoidal KL cost minus the summed observation factors."""
    return evaluate(model, spec, u, phi0, obs, backend).J


def adjoint_solve(model, spec, u: ControlPath, traj: MomentTrajectory, obs: Optional[ObservationSet],
                  backend=None, method="discrete") -> AdjointTrajectory:
    """Costate sweep from ``eta(T) = 0`` with jumps ``+dF_k/dphi``.

    ``method="discrete"`` reverses the RK4 + trapezoid scheme exactly
    (needs ``traj.stages``); ``"continuous"`` integrates the costate ODE
    with RK4 and is consistent to second order in ``dt``.
    """
    sys_ = _system(model, spec)
    obs = ObservationSet.empty(model.dim) if obs is None else obs
    nodes = obs.node_indices(u.grid)
    A, l = sys_.interval_matrices(u.u)
    grads = _obs_terms(obs, model.dim)[0]
    return _adjoint(sys_, A, l, traj, nodes, grads, backend, method)


def _adjoint(sys_, A, l, traj, nodes, grads, backend, method="discrete"):
    jumps = {int(k): grads[i] for i, k in enumerate(nodes)}
    dt = traj.grid.dt
    if method == "continuous":
        eta = kernels.continuous_backward_sweep(sys_.basis, A, l, traj.values, dt, jumps)
        return AdjointTrajectory(traj.grid, eta, jumps, None, method)
    if method != "discrete":
        raise ValidationError(f"unknown adjoint method {method!r}")
    if traj.stages is None:
        raise ValidationError("discrete adjoint needs the forward stage states")
    eta, kbar = kernels.backward_sweep(sys_.basis, A, l, traj.values, traj.stages, dt, jumps, backend=backend)
    return AdjointTrajectory(traj.grid, eta, jumps, kbar, method)


def adjoint_from(model, spec, ev: Evaluation, backend=None, method="discrete") -> AdjointTrajectory:
    return _adjoint(_system(model, spec), ev.A, ev.l, ev.traj, ev.obs_nodes, ev.obs_grads, backend, method)


def interval_metric(model, spec, traj: MomentTrajectory):
    """Fisher block averaged over the two ends of each interval."""
    sys_ = _system(model, spec)
    g = sys_.fisher_nodes(sys_.basis.values(traj.values))
    return 0.5 * (g[:-1] + g[1:])


def gradient(model, spec, u: ControlPath, traj: MomentTrajectory, eta: AdjointTrajectory):
    """Regular-gradient direction ``g u - f_u^T eta`` per interval.

    Returned as a density: ``dt`` times row ``k`` is ``dJ/du_k``
    (exactly for the discrete adjoint).
    """
    sys_ = _system(model, spec)
    mom = sys_.basis.values(traj.values)
    g = sys_.fisher_nodes(mom)
    U = u.u
    gu = 0.5 * (np.einsum("npq,nq->np", g[:-1], U) + np.einsum("npq,nq->np", g[1:], U))
    if eta.slope_cotangents is not None:
        N, _, nphi = traj.stages.shape
        smom = sys_.basis.values(traj.stages.reshape(-1, nphi)).reshape(N, 4, -1)
        # f_u at each stage is Cc @ mom(Y_s); kbar is dJ/dk_s
        fu = np.einsum("qpk,nsk,nsq->np", sys_.Cc, smom, eta.slope_cotangents)
        return gu + fu / traj.grid.dt
    right = eta.right_limits()
    fl = np.einsum("qpk,nk,nq->np", sys_.Cc, mom[:-1], right[:-1])
    fr = np.einsum("qpk,nk,nq->np", sys_.Cc, mom[1:], eta.values[1:])
    return gu - 0.5 * (fl + fr)


def natural_gradient(model, spec, u: ControlPath, traj: MomentTrajectory, eta: AdjointTrajectory,
                     jitter=JITTER, identity_metric=False):
    """Natural-gradient direction ``gbar_k^{-1} d_k`` per interval.

    ``gbar_k`` is the interval average of the Fisher block plus a
    relative jitter. ``identity_metric`` swaps the metric for the
    identity (used to compare against the regular gradient).
    """
    d = gradient(model, spec, u, traj, eta)
    if identity_metric:
        return d
    return precondition(d, interval_metric(model, spec, traj), jitter)


def precondition(d, gbar, jitter=JITTER):
    """Solve ``(gbar_k + jitter) x_k = d_k`` for every interval."""
    nu = gbar.shape[-1]
    tr = np.maximum(np.trace(gbar, axis1=1, axis2=2), 0.0)
    gj = gbar + (jitter * tr / nu)[:, None, None] * np.eye(nu)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(gj)
    bad = ~np.isfinite(cond) | (cond > COND_LIMIT)
    if bad.any():
        worst = np.max(np.where(np.isfinite(cond), cond, np.inf))
        warnings.warn(
            f"Fisher block condition number up to {worst:.2e} on {int(bad.sum())} intervals",
            IllConditioned, stacklevel=3,
        )
    try:
        return np.linalg.solve(gj, d[..., None])[..., 0]
    except np.linalg.LinAlgError:
        # singular even with jitter: least squares per interval
        return np.stack([np.linalg.lstsq(a, b, rcond=None)[0] for a, b in zip(gj, d)])


def theta_gradient(model, spec, u: ControlPath, traj: MomentTrajectory, eta: AdjointTrajectory):
    """``dJ/dtheta`` in raw parameter coordinates."""
    sys_ = _system(model, spec)
    dB, dCc, dG = sys_.derivatives()
    U = u.u
    dA = dB[None] + np.einsum("tqpk,np->ntqk", dCc, U)  # (N, nθ, nφ, K)
    dl = 0.5 * np.einsum("np,tpqk,nq->ntk", U, dG, U)
    mom = sys_.basis.values(traj.values)
    dt = traj.grid.dt
    out = 0.5 * dt * np.einsum("ntk,nk->t", dl, mom[:-1] + mom[1:])
    if eta.slope_cotangents is not None:
        N, _, nphi = traj.stages.shape
        smom = sys_.basis.values(traj.stages.reshape(-1, nphi)).reshape(N, 4, -1)
        out += np.einsum("ntqk,nsk,nsq->t", dA, smom, eta.slope_cotangents)
        return out
    right = eta.right_limits()
    fl = np.einsum("ntqk,nk,nq->t", dA, mom[:-1], right[:-1])
    fr = np.einsum("ntqk,nk,nq->t", dA, mom[1:], eta.values[1:])
    return out - 0.5 * dt * (fl + fr)

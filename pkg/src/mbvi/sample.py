"""Path simulation, empirical moments and the exact linear-Gaussian smoother."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import expm

from .closure import MomentPair, pack_moments
from .errors import DimensionError, NonFinitePath, ValidationError
from .ode import TimeGrid
from .variational import ControlPath, MomentTrajectory, ObservationSet

__all__ = [
    "ConcreteSDE",
    "PathEnsemble",
    "euler_maruyama",
    "empirical_moments",
    "generate_observations",
    "exact_linear_smoother",
    "linear_transition",
]

POSITIVE_FLOOR = 1e-12


class ConcreteSDE:
    """Pointwise drift and diffusion of a model, optionally with controls.

    With a control path the drift becomes ``a(x) + R(x) v_k T(x)``
    where ``k`` is the control interval containing the current time.
    """

    def __init__(self, model, control: Optional[ControlPath] = None):
        self.model = model
        self.control = control
        self.dim = model.dim
        self.positive = bool(model.positive_state)
        if control is not None and control.n != model.dim:
            raise DimensionError("control path does not match the model dimension")

    def drift(self, x, t=None):
        a = self.model.drift(x)
        if self.control is None:
            return a
        grid = self.control.grid
        k = min(int(np.floor((t - grid.t0) / grid.dt + 1e-9)), grid.n_steps - 1)
        v = self.control.matrices()[k]
        vt = v[:, 0][None, :] + x @ v[:, 1:].T
        R = self.model.rescaling_matrix(x)
        return a + np.einsum("pij,pj->pi", R, vt)

    def diffusion_factor(self, x):
        return self.model.diffusion_factor(x)


@dataclass
class PathEnsemble:
    """Simulated paths on ``grid`` (the recorded nodes of ``sim_grid``)."""

    grid: TimeGrid
    paths: np.ndarray
    seed: int
    sim_grid: Optional[TimeGrid] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.paths.ndim != 3 or self.paths.shape[1] != self.grid.n_steps + 1:
            raise DimensionError(f"paths of shape {self.paths.shape} do not fit {self.grid}")
        if not np.all(np.isfinite(self.paths)):
            bad = int(np.flatnonzero(~np.isfinite(self.paths).all(axis=(1, 2)))[0])
            raise NonFinitePath(f"path {bad} is not finite", path_index=bad)

    @property
    def n_paths(self):
        return self.paths.shape[0]

    def path(self, i):
        return self.paths[i]


def euler_maruyama(sde: ConcreteSDE, x0, grid: TimeGrid, n_paths: int, seed: int,
                   record_every: int = 1, chunk: int = 2000) -> PathEnsemble:
    """Euler-Maruyama paths ``X + a dt + b sqrt(dt) xi``.

    Path ``p`` draws its noise from its own stream spawned from ``seed``,
    so results do not depend on chunking. Positive models are floored at
    ``1e-12`` after every step (counted in the diagnostics).
    """
    n = sde.dim
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (n,))
    if n_paths < 1:
        raise ValidationError("n_paths must be positive")
    record_every = int(record_every)
    if record_every < 1 or grid.n_steps % record_every:
        raise ValidationError("record_every must divide the number of simulation steps")
    n_rec = grid.n_steps // record_every
    rec_grid = TimeGrid(grid.t0, grid.t_end, n_rec)
    streams = np.random.SeedSequence(int(seed)).spawn(int(n_paths))
    out = np.empty((n_paths, n_rec + 1, n))
    dt = grid.dt
    sq = np.sqrt(dt)
    floors = 0
    for start in range(0, n_paths, chunk):
        stop = min(start + chunk, n_paths)
        xi = np.stack([np.random.default_rng(s).standard_normal((grid.n_steps, n)) for s in streams[start:stop]])
        x = np.repeat(x0[None], stop - start, axis=0)
        out[start:stop, 0] = x
        for i in range(grid.n_steps):
            t = grid.t0 + i * dt
            a = sde.drift(x, t)
            b = sde.diffusion_factor(x)
            x = x + a * dt + sq * np.einsum("pij,pj->pi", b, xi[:, i])
            if sde.positive:
                low = x < POSITIVE_FLOOR
                if low.any():
                    floors += int(low.sum())
                    x = np.where(low, POSITIVE_FLOOR, x)
            if (i + 1) % record_every == 0:
                bad = ~np.isfinite(x).all(axis=1)
                if bad.any():
                    p = start + int(np.flatnonzero(bad)[0])
                    raise NonFinitePath(f"path {p} left the finite range at step {i + 1}", path_index=p)
                out[start:stop, (i + 1) // record_every] = x
    return PathEnsemble(rec_grid, out, int(seed), grid, {"positivity_floors": floors})


def empirical_moments(ens: PathEnsemble):
    """Sample moments per node and their standard errors.

    Returns ``(MomentTrajectory, se)`` with ``se`` in packed layout. For
    sample means the jackknife standard error equals ``s / sqrt(N)``.
    """
    P = ens.n_paths
    if P < 2:
        raise ValidationError("need at least two paths")
    X = ens.paths
    n = X.shape[2]
    iu = np.triu_indices(n)
    feats = np.concatenate([X, (X[..., :, None] * X[..., None, :])[..., iu[0], iu[1]]], axis=-1)
    mean = feats.mean(axis=0)
    se = feats.std(axis=0, ddof=1) / np.sqrt(P)
    return MomentTrajectory(ens.grid, mean, n, {"paths": P}), se


def generate_observations(path, grid: TimeGrid, times, H, noise_cov, seed) -> ObservationSet:
    """Noisy linear readouts ``H x(t_k) + noise`` of one path."""
    path = np.atleast_2d(np.asarray(path, dtype=float))
    if path.shape[0] != grid.n_steps + 1:
        raise DimensionError("path does not match the grid")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    p = H.shape[0]
    S = np.asarray(noise_cov, dtype=float)
    S = S.reshape(p, p) if S.size == p * p else np.diag(np.broadcast_to(S, (p,)))
    w, U = np.linalg.eigh(0.5 * (S + S.T))
    root = (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T
    idx = [grid.node_index(t) for t in times]
    rng = np.random.default_rng(int(seed))
    xi = rng.standard_normal((times.size, p))
    y = path[idx] @ H.T + xi @ root.T
    return ObservationSet(times, y, H, S)


def linear_transition(gamma, sigma, dt):
    """Exact OU transition ``(F, Q)`` over ``dt`` (Van Loan block exponential)."""
    g = np.atleast_2d(np.asarray(gamma, dtype=float))
    s = np.atleast_2d(np.asarray(sigma, dtype=float))
    n = g.shape[0]
    blk = np.zeros((2 * n, 2 * n))
    blk[:n, :n] = -g
    blk[:n, n:] = s @ s.T
    blk[n:, n:] = g.T
    E = expm(blk * dt)
    F = E[:n, :n]
    Q = E[:n, n:] @ F.T
    return F, 0.5 * (Q + Q.T)


def exact_linear_smoother(gamma, mu, sigma, phi0, obs: Optional[ObservationSet], grid: TimeGrid) -> MomentTrajectory:
    """Exact posterior marginals of ``dX = -gamma (X - mu) dt + sigma dW``.

    Kalman filter on the grid nodes with conjugate updates at the
    observation nodes, followed by a Rauch-Tung-Striebel pass.
    """
    g = np.atleast_2d(np.asarray(gamma, dtype=float))
    n = g.shape[0]
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (n,))
    mp = phi0 if isinstance(phi0, MomentPair) else MomentPair.from_phi(phi0, n)
    F, Q = linear_transition(g, sigma, grid.dt)
    c = mu - F @ mu
    N = grid.n_steps
    obs_at = {}
    if obs is not None and len(obs):
        for k, i in enumerate(obs.node_indices(grid)):
            obs_at[i] = k
    mf = np.empty((N + 1, n))
    Pf = np.empty((N + 1, n, n))
    mpred = np.empty((N + 1, n))
    Ppred = np.empty((N + 1, n, n))
    m, P = mp.m.copy(), mp.central.copy()
    for i in range(N + 1):
        if i > 0:
            m = F @ m + c
            P = F @ P @ F.T + Q
        mpred[i], Ppred[i] = m, P
        if i in obs_at:
            k = obs_at[i]
            H, R = obs.H, obs.noise_cov
            S = H @ P @ H.T + R
            K = np.linalg.solve(S.T, (P @ H.T).T).T
            m = m + K @ (obs.values[k] - H @ m)
            IKH = np.eye(n) - K @ H
            P = IKH @ P @ IKH.T + K @ R @ K.T  # Joseph form
        mf[i], Pf[i] = m, 0.5 * (P + P.T)
    ms = mf.copy()
    Ps = Pf.copy()
    for i in range(N - 1, -1, -1):
        Gk = np.linalg.solve(Ppred[i + 1].T, (Pf[i] @ F.T).T).T
        ms[i] = mf[i] + Gk @ (ms[i + 1] - mpred[i + 1])
        Ps[i] = Pf[i] + Gk @ (Ps[i + 1] - Ppred[i + 1]) @ Gk.T
        Ps[i] = 0.5 * (Ps[i] + Ps[i].T)
    phi = np.stack([pack_moments(ms[i], Ps[i] + np.outer(ms[i], ms[i])) for i in range(N + 1)])
    return MomentTrajectory(grid, phi, n, {"filter_means": mf, "filter_covs": Pf})

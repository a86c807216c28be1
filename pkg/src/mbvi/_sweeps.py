"""Pure-numpy forward/backward moment sweeps (reference backend).

The moment system on interval ``k`` is ``dphi/dt = A[k] @ mom(phi)``
with ``mom`` a :class:`~mbvi.closure.MomentBasis`; the running cost on
that interval is ``l[k] @ mom(phi)``, integrated by the trapezoid rule.

``backward_sweep`` is the exact reverse of the RK4 forward scheme, so
the gradients it yields are those of the discretised objective. It
returns the costate ``eta = -dJ/dphi`` at nodes, stored as left limits
(observation jumps ``+dF/dphi`` already added), and the cotangents of
the four RK4 slopes of every step.
"""

from __future__ import annotations

import numpy as np

from .closure import pack_moments, unpack_moments
from .errors import DomainError
from .ode import TimeGrid, integrate_backward_with_resets, integrate_forward

CLAMP_REL = 1e-10
RK4_B = np.array([1.0, 2.0, 2.0, 1.0]) / 6.0


def psd_clamp(y, n):
    """Clamp the central covariance held in packed ``y``.

    Returns ``(y, clamped, ratio)`` with ``ratio`` the smallest
    eigenvalue over the trace before clamping (only when clamped).
    """
    m, M = unpack_moments(y, n)
    C = M - np.outer(m, m)
    C = 0.5 * (C + C.T)
    eps = CLAMP_REL * max(np.trace(C), 0.0)
    try:
        np.linalg.cholesky(C - eps * np.eye(n))
        return y, False, 0.0
    except np.linalg.LinAlgError:
        pass
    w, U = np.linalg.eigh(C)
    if w.min() >= eps:
        return y, False, 0.0
    tr = np.trace(C)
    ratio = w.min() / tr if tr > 0 else -np.inf
    C = (U * np.maximum(w, eps)) @ U.T
    return pack_moments(m, C + np.outer(m, m)), True, float(ratio)


def forward_sweep(basis, A, phi0, dt, clamp=True):
    """Integrate the moment system over ``len(A)`` steps of size ``dt``.

    Returns ``(phi, stages, n_clamps, worst_ratio)``: node values
    ``(N+1, n_phi)`` and the RK4 stage states ``(N, 4, n_phi)``.
    """
    N = A.shape[0]
    n = basis.n
    grid = TimeGrid(0.0, N * dt, N)
    stages = np.empty((N, 4, basis.n_phi))
    stats = {"clamps": 0, "worst": 0.0, "i": 0, "s": 0}

    def rhs(t, y, i):
        if i != stats["i"]:
            stats["i"], stats["s"] = i, 0
        stages[i, stats["s"]] = y
        stats["s"] += 1
        return A[i] @ basis.values(y)

    def post(i, y):
        y, hit, ratio = psd_clamp(y, n)
        if hit:
            stats["clamps"] += 1
            stats["worst"] = min(stats["worst"], ratio)
        return y

    try:
        out = integrate_forward(rhs, phi0, grid, post if clamp else None)
    except DomainError as exc:
        raise DomainError(f"{exc} (forward step {stats['i']})") from None
    return out.values, stages, stats["clamps"], stats["worst"]


def backward_sweep(basis, A, l, phi, stages, dt, jumps):
    """Reverse pass of the RK4 + trapezoid discretisation.

    ``jumps`` maps node index to ``dF_k/dphi``. Returns ``(eta, kbar)``
    with ``kbar[i, s]`` the derivative of the objective with respect to
    RK4 slope ``s`` of step ``i``.
    """
    N = A.shape[0]
    nphi = phi.shape[1]
    Jn = basis.jacobian(phi)
    Js = basis.jacobian(stages[:, 1:].reshape(-1, nphi)).reshape(N, 3, basis.size, nphi)
    lam_cost = np.zeros((N + 1, basis.size))
    lam_cost[:-1] += 0.5 * dt * l
    lam_cost[1:] += 0.5 * dt * l
    lam = np.zeros((N + 1, nphi))
    kbar = np.zeros((N, 4, nphi))
    cur = Jn[N].T @ lam_cost[N]
    if N in jumps:
        cur = cur - jumps[N]
    lam[N] = cur
    coef = (0.5 * dt, 0.5 * dt, dt)
    for i in range(N - 1, -1, -1):
        Ai = A[i]
        kb = dt * RK4_B[:, None] * cur[None, :]
        ybar = cur.copy()
        for s in (3, 2, 1):
            # k_s = f(Y_s), Y_s = y + c_s k_{s-1}
            Ys_bar = Js[i, s - 1].T @ (Ai.T @ kb[s])
            kb[s - 1] += coef[s - 1] * Ys_bar
            ybar += Ys_bar
        ybar += Jn[i].T @ (Ai.T @ kb[0])
        ybar += Jn[i].T @ lam_cost[i]
        if i in jumps:
            ybar -= jumps[i]
        kbar[i] = kb
        lam[i] = ybar
        cur = ybar
    return -lam, kbar


def hermite_midpoints(basis, A, phi, dt):
    """Cubic Hermite midpoints of each interval from endpoint slopes."""
    V = basis.values(phi)
    f_left = np.einsum("nqk,nk->nq", A, V[:-1])
    f_right = np.einsum("nqk,nk->nq", A, V[1:])
    return 0.5 * (phi[:-1] + phi[1:]) + (dt / 8.0) * (f_left - f_right)


def continuous_backward_sweep(basis, A, l, phi, dt, jumps):
    """RK4 on the costate ODE ``deta/dt = J^T (l - A^T eta)`` with resets.

    Approximates the discrete reverse pass to ``O(dt^2)``; midpoint
    states come from cubic Hermite interpolation of the forward nodes.
    """
    N = A.shape[0]
    grid = TimeGrid(0.0, N * dt, N)
    Jn = basis.jacobian(phi)
    Jm = basis.jacobian(hermite_midpoints(basis, A, phi, dt))

    def rhs(t, eta, i):
        s = t / dt - i  # 1 at t_{i+1}, 0.5 at the midpoint, 0 at t_i
        if s > 0.75:
            J = Jn[i + 1]
        elif s > 0.25:
            J = Jm[i]
        else:
            J = Jn[i]
        return J.T @ (l[i] - A[i].T @ eta)

    resets = {int(k): (lambda e, v=np.asarray(v, float): e + v) for k, v in jumps.items()}
    out = integrate_backward_with_resets(rhs, np.zeros(phi.shape[1]), grid, resets)
    return out.values


def moments(basis, phi):
    return basis.values(phi)


def moments_jacobian(basis, phi):
    return basis.values_and_jacobian(phi)

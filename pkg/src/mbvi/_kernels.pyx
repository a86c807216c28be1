# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled forward/backward moment sweeps.

Mirrors :mod:`mbvi._sweeps` (same signatures, same arithmetic order
where it matters). The rare eigenvalue clamp calls back into Python.
"""

import numpy as np

from libc.math cimport exp, log, isfinite

from .errors import DomainError, NonFiniteState
from ._sweeps import psd_clamp

cdef int GAUSS = 0
cdef int LOGN = 1


cdef class Closure:
    """Flattened closure tables of one MomentBasis."""

    cdef public int kind, n, K, nphi
    cdef long[::1] direct, piv, par, tptr, tj, tidx, pidx, pi, pj, low1, low2
    cdef double[::1] tcoef, c1, c2
    cdef double[:, ::1] W
    cdef unsigned char[::1] req

    def __init__(self, basis):
        self.n = basis.n
        self.K = basis.size
        self.nphi = basis.n_phi
        n = self.n
        self.direct = np.ascontiguousarray(basis.direct, dtype=np.int64)
        pidx = np.zeros((n, n), dtype=np.int64)
        pi, pj = [], []
        q = n
        for i in range(n):
            for j in range(i, n):
                pidx[i, j] = pidx[j, i] = q
                pi.append(i)
                pj.append(j)
                q += 1
        self.pidx = pidx.ravel()
        self.pi = np.array(pi, dtype=np.int64)
        self.pj = np.array(pj, dtype=np.int64)
        if basis.kind == "gaussian":
            self.kind = GAUSS
            self.piv = np.ascontiguousarray(basis.g_piv, dtype=np.int64)
            self.par = np.ascontiguousarray(basis.g_par, dtype=np.int64)
            self.tptr = np.ascontiguousarray(basis.g_tptr, dtype=np.int64)
            self.tj = np.ascontiguousarray(basis.g_tj, dtype=np.int64) if basis.g_tj.size else np.zeros(1, np.int64)
            self.tidx = np.ascontiguousarray(basis.g_tidx, dtype=np.int64) if basis.g_tidx.size else np.zeros(1, np.int64)
            self.tcoef = np.ascontiguousarray(basis.g_tcoef, dtype=float) if basis.g_tcoef.size else np.zeros(1)
            self.low1 = np.ascontiguousarray(basis.g_low1, dtype=np.int64).ravel()
            self.c1 = np.ascontiguousarray(basis.g_c1, dtype=float).ravel()
            self.low2 = np.ascontiguousarray(basis.g_low2, dtype=np.int64).ravel()
            self.c2 = np.ascontiguousarray(basis.g_c2, dtype=float).ravel()
        else:
            self.kind = LOGN
            self.W = np.ascontiguousarray(basis.ln_W, dtype=float)
            self.req = np.ascontiguousarray(basis.ln_required, dtype=np.uint8)

    cdef int values(self, const double* phi, double* vals, double* work) nogil:
        """Fill ``vals``; returns 2 on a log-normal domain violation."""
        cdef int n = self.n, K = self.K, nphi = self.nphi
        cdef int p, i, j, t, q, d
        cdef double v, s
        if self.kind == GAUSS:
            # work holds the central covariance, row-major n x n
            for i in range(n):
                for j in range(n):
                    work[i * n + j] = phi[self.pidx[i * n + j]] - phi[i] * phi[j]
            vals[0] = 1.0
            for p in range(1, K):
                d = self.direct[p]
                if d >= 0:
                    vals[p] = phi[d]
                    continue
                i = self.piv[p]
                v = phi[i] * vals[self.par[p]]
                for t in range(self.tptr[p], self.tptr[p + 1]):
                    v = v + work[i * n + self.tj[t]] * (self.tcoef[t] * vals[self.tidx[t]])
                vals[p] = v
            return 0
        for q in range(nphi):
            if self.req[q]:
                if phi[q] <= 0.0:
                    return 2
                work[q] = log(phi[q])
            else:
                work[q] = 0.0
        for p in range(K):
            d = self.direct[p]
            if d >= 0:
                vals[p] = phi[d]
            elif d == -1:
                vals[p] = 1.0
            else:
                s = 0.0
                for q in range(nphi):
                    s = s + self.W[p, q] * work[q]
                vals[p] = exp(s)
        return 0

    cdef void jacobian(self, const double* phi, const double* vals, double* J) nogil:
        """Row-major ``K x nphi`` Jacobian of the closure moments."""
        cdef int n = self.n, K = self.K, nphi = self.nphi
        cdef int p, k, j, q, d, a, b
        cdef double acc, g
        if self.kind == GAUSS:
            for p in range(K):
                d = self.direct[p]
                for q in range(nphi):
                    J[p * nphi + q] = 0.0
                if d == -1:
                    continue
                if d >= 0:
                    J[p * nphi + d] = 1.0
                    continue
                for k in range(n):
                    acc = self.c1[p * n + k] * vals[self.low1[p * n + k]]
                    for j in range(n):
                        g = 0.5 * self.c2[(p * n + k) * n + j] * vals[self.low2[(p * n + k) * n + j]]
                        acc = acc - 2.0 * g * phi[j]
                    J[p * nphi + k] = acc
                for q in range(nphi - n):
                    a = self.pi[q]
                    b = self.pj[q]
                    if a == b:
                        J[p * nphi + n + q] = 0.5 * self.c2[(p * n + a) * n + a] * vals[self.low2[(p * n + a) * n + a]]
                    else:
                        J[p * nphi + n + q] = (
                            0.5 * self.c2[(p * n + a) * n + b] * vals[self.low2[(p * n + a) * n + b]]
                            + 0.5 * self.c2[(p * n + b) * n + a] * vals[self.low2[(p * n + b) * n + a]]
                        )
            return
        for p in range(K):
            d = self.direct[p]
            for q in range(nphi):
                if d >= -1:
                    J[p * nphi + q] = 0.0
                elif self.req[q]:
                    J[p * nphi + q] = vals[p] * self.W[p, q] / phi[q]
                else:
                    J[p * nphi + q] = 0.0
            if d >= 0:
                J[p * nphi + d] = 1.0


cdef Closure _closure(basis):
    c = getattr(basis, "_compiled_closure", None)
    if c is None:
        c = Closure(basis)
        basis._compiled_closure = c
    return <Closure>c


cdef inline void _matvec(const double[:, ::1] A, const double* x, double* out, int rows, int cols) nogil:
    cdef int r, k
    cdef double s
    for r in range(rows):
        s = 0.0
        for k in range(cols):
            s = s + A[r, k] * x[k]
        out[r] = s


cdef inline void _rmatvec(const double[:, ::1] A, const double* x, double* out, int rows, int cols) nogil:
    # out = A^T x, A is rows x cols
    cdef int r, k
    for k in range(cols):
        out[k] = 0.0
    for r in range(rows):
        if x[r] != 0.0:
            for k in range(cols):
                out[k] = out[k] + A[r, k] * x[r]


cdef inline void _rmatvec_flat(const double* J, const double* x, double* out, int rows, int cols) nogil:
    cdef int r, k
    for k in range(cols):
        out[k] = 0.0
    for r in range(rows):
        if x[r] != 0.0:
            for k in range(cols):
                out[k] = out[k] + J[r * cols + k] * x[r]


cdef int _needs_clamp(const double* y, int n, const long[::1] pidx, double* C) nogil:
    """Cholesky test of ``Cbar - eps I``; returns 1 when it fails."""
    cdef int i, j, k
    cdef double tr = 0.0, eps, s, acc
    for i in range(n):
        for j in range(n):
            C[i * n + j] = 0.5 * ((y[pidx[i * n + j]] - y[i] * y[j]) + (y[pidx[j * n + i]] - y[j] * y[i]))
        tr = tr + C[i * n + i]
    eps = 1e-10 * (tr if tr > 0.0 else 0.0)
    for i in range(n):
        C[i * n + i] = C[i * n + i] - eps
    for j in range(n):
        s = C[j * n + j]
        for k in range(j):
            s = s - C[j * n + k] * C[j * n + k]
        if not s > 0.0:
            return 1
        s = s ** 0.5
        C[j * n + j] = s
        for i in range(j + 1, n):
            acc = C[i * n + j]
            for k in range(j):
                acc = acc - C[i * n + k] * C[j * n + k]
            C[i * n + j] = acc / s
    return 0


def forward_sweep(basis, A_in, phi0_in, double dt, clamp=True):
    """Compiled twin of :func:`mbvi._sweeps.forward_sweep`."""
    cdef Closure cl = _closure(basis)
    cdef double[:, :, ::1] A = np.ascontiguousarray(A_in, dtype=float)
    cdef int N = A.shape[0], nphi = cl.nphi, K = cl.K, n = cl.n
    out_np = np.empty((N + 1, nphi))
    stages_np = np.empty((N, 4, nphi))
    cdef double[:, ::1] out = out_np
    cdef double[:, :, ::1] stages = stages_np
    cdef double[::1] y = np.array(phi0_in, dtype=float).ravel()
    cdef double[::1] vals = np.empty(K)
    cdef double[::1] work = np.empty(max(n * n, nphi))
    cdef double[:, ::1] kk = np.empty((4, nphi))
    cdef double[::1] ytmp = np.empty(nphi)
    cdef int i, s, q, status = 0, clamps = 0, bad = 0
    cdef double worst = 0.0
    cdef double cs[3]
    cdef bint do_clamp = bool(clamp)
    cs[0] = 0.5 * dt
    cs[1] = 0.5 * dt
    cs[2] = dt
    for q in range(nphi):
        if not isfinite(y[q]):
            raise NonFiniteState("non-finite state during forward integration at step 0", step=0)
        out[0, q] = y[q]
    for i in range(N):
        for q in range(nphi):
            ytmp[q] = y[q]
        for s in range(4):
            for q in range(nphi):
                stages[i, s, q] = ytmp[q]
            status = cl.values(&ytmp[0], &vals[0], &work[0])
            if status:
                raise DomainError(
                    f"log-normal closure needs positive moments (forward step {i})"
                )
            _matvec(A[i], &vals[0], &kk[s, 0], nphi, K)
            if s < 3:
                for q in range(nphi):
                    ytmp[q] = y[q] + cs[s] * kk[s, q]
        bad = 0
        for q in range(nphi):
            y[q] = y[q] + (dt / 6.0) * (kk[0, q] + 2.0 * kk[1, q] + 2.0 * kk[2, q] + kk[3, q])
            if not isfinite(y[q]):
                bad = 1
        if bad:
            raise NonFiniteState(f"non-finite state during forward integration at step {i + 1}", step=i + 1)
        if do_clamp and _needs_clamp(&y[0], n, cl.pidx, &work[0]):
            ynew, hit, ratio = psd_clamp(np.asarray(y).copy(), n)
            if hit:
                clamps += 1
                worst = min(worst, ratio)
                for q in range(nphi):
                    y[q] = ynew[q]
        for q in range(nphi):
            out[i + 1, q] = y[q]
    return out_np, stages_np, clamps, worst


def backward_sweep(basis, A_in, l_in, phi_in, stages_in, double dt, jumps):
    """Compiled twin of :func:`mbvi._sweeps.backward_sweep`."""
    cdef Closure cl = _closure(basis)
    cdef double[:, :, ::1] A = np.ascontiguousarray(A_in, dtype=float)
    cdef double[:, ::1] l = np.ascontiguousarray(l_in, dtype=float)
    cdef double[:, ::1] phi = np.ascontiguousarray(phi_in, dtype=float)
    cdef double[:, :, ::1] st = np.ascontiguousarray(stages_in, dtype=float)
    cdef int N = A.shape[0], nphi = cl.nphi, K = cl.K, n = cl.n
    lam_np = np.zeros((N + 1, nphi))
    kbar_np = np.zeros((N, 4, nphi))
    cdef double[:, ::1] lam = lam_np
    cdef double[:, :, ::1] kbar = kbar_np
    cdef double[::1] vals = np.empty(K)
    cdef double[::1] work = np.empty(max(n * n, nphi))
    cdef double[::1] J = np.empty(K * nphi)
    cdef double[::1] w = np.empty(K)
    cdef double[::1] ybar = np.empty(nphi)
    cdef double[::1] cur = np.zeros(nphi)
    cdef double[::1] tmp = np.empty(nphi)
    cdef double[:, ::1] jmp = np.zeros((N + 1, nphi))
    cdef unsigned char[::1] has = np.zeros(N + 1, dtype=np.uint8)
    cdef int i, s, q, k
    cdef double b[4]
    cdef double cs[3]
    b[0] = dt / 6.0
    b[1] = dt / 3.0
    b[2] = dt / 3.0
    b[3] = dt / 6.0
    cs[0] = 0.5 * dt
    cs[1] = 0.5 * dt
    cs[2] = dt
    for key, v in jumps.items():
        jmp_row = np.asarray(v, dtype=float)
        for q in range(nphi):
            jmp[int(key), q] = jmp_row[q]
        has[int(key)] = 1
    # terminal node: trapezoid weight of the last interval
    cl.values(&phi[N, 0], &vals[0], &work[0])
    cl.jacobian(&phi[N, 0], &vals[0], &J[0])
    for k in range(K):
        w[k] = 0.5 * dt * l[N - 1, k]
    _rmatvec_flat(&J[0], &w[0], &cur[0], K, nphi)
    if has[N]:
        for q in range(nphi):
            cur[q] = cur[q] - jmp[N, q]
    for q in range(nphi):
        lam[N, q] = cur[q]
    for i in range(N - 1, -1, -1):
        for s in range(4):
            for q in range(nphi):
                kbar[i, s, q] = b[s] * cur[q]
        for q in range(nphi):
            ybar[q] = cur[q]
        for s in range(3, 0, -1):
            cl.values(&st[i, s, 0], &vals[0], &work[0])
            cl.jacobian(&st[i, s, 0], &vals[0], &J[0])
            _rmatvec(A[i], &kbar[i, s, 0], &w[0], nphi, K)
            _rmatvec_flat(&J[0], &w[0], &tmp[0], K, nphi)
            for q in range(nphi):
                kbar[i, s - 1, q] = kbar[i, s - 1, q] + cs[s - 1] * tmp[q]
                ybar[q] = ybar[q] + tmp[q]
        cl.values(&phi[i, 0], &vals[0], &work[0])
        cl.jacobian(&phi[i, 0], &vals[0], &J[0])
        _rmatvec(A[i], &kbar[i, 0, 0], &w[0], nphi, K)
        for k in range(K):
            w[k] = w[k] + 0.5 * dt * l[i, k]
            if i > 0:
                w[k] = w[k] + 0.5 * dt * l[i - 1, k]
        _rmatvec_flat(&J[0], &w[0], &tmp[0], K, nphi)
        for q in range(nphi):
            ybar[q] = ybar[q] + tmp[q]
            if has[i]:
                ybar[q] = ybar[q] - jmp[i, q]
            lam[i, q] = ybar[q]
            cur[q] = ybar[q]
    return -lam_np, kbar_np


def moments(basis, phi_in):
    """Closure moments for a stack of packed vectors."""
    cdef Closure cl = _closure(basis)
    phi_np = np.ascontiguousarray(np.atleast_2d(phi_in), dtype=float)
    cdef double[:, ::1] phi = phi_np
    cdef int P = phi.shape[0], p
    out_np = np.empty((P, cl.K))
    cdef double[:, ::1] out = out_np
    cdef double[::1] work = np.empty(max(cl.n * cl.n, cl.nphi))
    for p in range(P):
        if cl.values(&phi[p, 0], &out[p, 0], &work[0]):
            raise DomainError("log-normal closure needs positive moments")
    return out_np


def moments_jacobian(basis, phi_in):
    cdef Closure cl = _closure(basis)
    phi_np = np.ascontiguousarray(np.atleast_2d(phi_in), dtype=float)
    cdef double[:, ::1] phi = phi_np
    cdef int P = phi.shape[0], p
    vals_np = np.empty((P, cl.K))
    jac_np = np.empty((P, cl.K, cl.nphi))
    cdef double[:, ::1] vals = vals_np
    cdef double[:, :, ::1] jac = jac_np
    cdef double[::1] work = np.empty(max(cl.n * cl.n, cl.nphi))
    for p in range(P):
        if cl.values(&phi[p, 0], &vals[p, 0], &work[0]):
            raise DomainError("log-normal closure needs positive moments")
        cl.jacobian(&phi[p, 0], &vals[p, 0], &jac[p, 0, 0])
    return vals_np, jac_np

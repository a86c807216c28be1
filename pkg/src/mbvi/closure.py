"""Gaussian and log-normal moment closures.

Moments are parametrised by the first moments ``m = E[X]`` and the raw
second moments ``M = E[X X^T]``; the packed state vector is
``phi = (m, M[i, j] for i <= j)`` in row-major upper-triangular order.

Gaussian moments use the Stein recursion

    E[X^a] = m_i E[X^b] + sum_j C_ij b_j E[X^(b - e_j)],   b = a - e_i,

over the downward closure of the requested multi-indices (C is the
covariance). Log-normal moments use

    log E[X^a] = sum_i (2 - k) a_i log m_i + sum_i a_i (a_i - 1) / 2 log M_ii
                 + sum_{i<j} a_i a_j log M_ij,

which is linear in ``log(phi)``.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, UnsupportedOrder, ValidationError

GAUSSIAN = "gaussian"
LOGNORMAL = "lognormal"
MAX_GAUSSIAN_ORDER = 8

__all__ = [
    "GAUSSIAN",
    "LOGNORMAL",
    "MomentPair",
    "MomentBasis",
    "gaussian_moment",
    "lognormal_moment",
    "raw_to_central",
    "central_to_raw",
    "pack_moments",
    "unpack_moments",
    "n_packed",
    "triu_pairs",
    "monomials",
]


def n_packed(n: int) -> int:
    """Length of the packed moment vector for state dimension ``n``."""
    return n + n * (n + 1) // 2


@functools.lru_cache(maxsize=None)
def triu_pairs(n: int):
    """Row-major ``(i, j)`` pairs with ``i <= j``."""
    return tuple((i, j) for i in range(n) for j in range(i, n))


@functools.lru_cache(maxsize=None)
def _pack_index(n: int) -> np.ndarray:
    idx = np.empty((n, n), dtype=np.intp)
    for p, (i, j) in enumerate(triu_pairs(n)):
        idx[i, j] = idx[j, i] = n + p
    idx.setflags(write=False)
    return idx


def pack_moments(m, M) -> np.ndarray:
    m = np.asarray(m, dtype=float).ravel()
    M = np.asarray(M, dtype=float).reshape(m.size, m.size)
    iu = np.triu_indices(m.size)
    return np.concatenate([m, M[iu]])


def unpack_moments(phi, n: int):
    """Return ``(m, M)`` from a packed vector (or a stack of them)."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape[-1] != n_packed(n):
        raise DimensionError(f"packed length {phi.shape[-1]} does not match n={n}")
    m = phi[..., :n]
    M = phi[..., _pack_index(n)]
    return m, M


@dataclass(frozen=True)
class MomentPair:
    """First moments ``m`` and raw second moments ``M``."""

    m: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=float).ravel()
        M = np.array(self.M, dtype=float)
        if M.shape != (m.size, m.size):
            raise DimensionError(f"M has shape {M.shape}, expected {(m.size, m.size)}")
        scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
        if np.max(np.abs(M - M.T), initial=0.0) > 1e-12 * scale:
            raise ValidationError("second-moment matrix is not symmetric")
        M = 0.5 * (M + M.T)
        m.setflags(write=False)
        M.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "M", M)

    @property
    def dim(self) -> int:
        return self.m.size

    @property
    def central(self) -> np.ndarray:
        return self.M - np.outer(self.m, self.m)

    @property
    def phi(self) -> np.ndarray:
        return pack_moments(self.m, self.M)

    @classmethod
    def from_phi(cls, phi, n):
        m, M = unpack_moments(phi, n)
        return cls(m, M)

    @classmethod
    def from_central(cls, m, cov):
        return central_to_raw(m, cov)

    @classmethod
    def point_mass(cls, x0):
        x0 = np.asarray(x0, dtype=float).ravel()
        return cls(x0, np.outer(x0, x0))


def raw_to_central(mp: MomentPair):
    return mp.m.copy(), mp.central


def central_to_raw(m, cov) -> MomentPair:
    m = np.asarray(m, dtype=float).ravel()
    cov = np.asarray(cov, dtype=float)
    return MomentPair(m, cov + np.outer(m, m))


def _as_alpha(alpha, n):
    a = tuple(int(x) for x in np.atleast_1d(alpha))
    if len(a) != n:
        raise DimensionError(f"multi-index {a} has length {len(a)}, state has {n}")
    if any(x < 0 for x in a):
        raise ValidationError(f"multi-index {a} has negative entries")
    if any(float(x) != float(y) for x, y in zip(a, np.atleast_1d(alpha))):
        raise ValidationError(f"multi-index {alpha} must contain integers")
    return a


def monomials(n: int, max_order: int):
    """All multi-indices of order ``<= max_order``, sorted by order."""
    out = []
    for k in range(max_order + 1):
        for combo in itertools.combinations_with_replacement(range(n), k):
            a = [0] * n
            for i in combo:
                a[i] += 1
            out.append(tuple(a))
    return out


def _downward_closure(alphas):
    seen = set()
    stack = list(alphas)
    while stack:
        a = stack.pop()
        if a in seen:
            continue
        seen.add(a)
        for i, ai in enumerate(a):
            if ai:
                b = list(a)
                b[i] -= 1
                stack.append(tuple(b))
    return seen


def _sort_key(a):
    return (sum(a), tuple(-x for x in a))


class MomentBasis:
    """An ordered set of multi-indices evaluated together under one closure.

    ``values(phi)`` returns ``E[X^a]`` for every basis element and
    ``jacobian(phi)`` their derivatives with respect to the packed
    vector ``phi``. Both accept stacks of packed vectors. Instances are
    immutable and shared through :meth:`get`.
    """

    def __init__(self, kind, n, alphas):
        if kind not in (GAUSSIAN, LOGNORMAL):
            raise ValidationError(f"unknown closure {kind!r}")
        self.kind = kind
        self.n = n = int(n)
        alphas = {_as_alpha(a, n) for a in alphas}
        alphas.add((0,) * n)
        if kind == GAUSSIAN:
            worst = max(sum(a) for a in alphas)
            if worst > MAX_GAUSSIAN_ORDER:
                raise UnsupportedOrder(
                    f"Gaussian moments of order {worst} > {MAX_GAUSSIAN_ORDER} not supported"
                )
            alphas = _downward_closure(alphas)
        self.alphas = tuple(sorted(alphas, key=_sort_key))
        self._index = {a: p for p, a in enumerate(self.alphas)}
        self.size = len(self.alphas)
        self.n_phi = n_packed(n)
        self.alpha_array = np.array(self.alphas, dtype=np.intp).reshape(self.size, n)
        self.orders = self.alpha_array.sum(axis=1)
        self._build_direct()
        if kind == GAUSSIAN:
            self._build_gaussian()
        else:
            self._build_lognormal()

    @classmethod
    @functools.lru_cache(maxsize=256)
    def get(cls, kind, n, alphas):
        return cls(kind, n, alphas)

    def index(self, alpha) -> int:
        return self._index[_as_alpha(alpha, self.n)]

    def __contains__(self, alpha):
        return _as_alpha(alpha, self.n) in self._index

    def __len__(self):
        return self.size

    def __repr__(self):
        return f"MomentBasis({self.kind!r}, n={self.n}, size={self.size})"

    # -- table construction -------------------------------------------------

    def _build_direct(self):
        """Map order-0/1/2 elements straight onto packed coordinates."""
        pidx = _pack_index(self.n)
        direct = np.full(self.size, -2, dtype=np.intp)
        for p, a in enumerate(self.alphas):
            k = sum(a)
            nz = [i for i, x in enumerate(a) if x]
            if k == 0:
                direct[p] = -1
            elif k == 1:
                direct[p] = nz[0]
            elif k == 2:
                i, j = (nz[0], nz[0]) if len(nz) == 1 else nz
                direct[p] = pidx[i, j]
        self.direct = direct

    def _build_gaussian(self):
        n, K = self.n, self.size
        piv = np.zeros(K, dtype=np.intp)
        par = np.zeros(K, dtype=np.intp)
        tptr = [0]
        tj, tcoef, tidx = [], [], []
        for p, a in enumerate(self.alphas):
            if p == 0:
                tptr.append(0)
                continue
            i = next(q for q, x in enumerate(a) if x)
            b = list(a)
            b[i] -= 1
            piv[p] = i
            par[p] = self._index[tuple(b)]
            for j in range(n):
                if b[j]:
                    c = list(b)
                    c[j] -= 1
                    tj.append(j)
                    tcoef.append(float(b[j]))
                    tidx.append(self._index[tuple(c)])
            tptr.append(len(tj))
        self.g_piv = piv
        self.g_par = par
        self.g_tptr = np.array(tptr, dtype=np.intp)
        self.g_tj = np.array(tj, dtype=np.intp)
        self.g_tcoef = np.array(tcoef, dtype=float)
        self.g_tidx = np.array(tidx, dtype=np.intp)
        # derivative tables: E[d_k X^a] and E[d_k d_j X^a] via lower moments
        low1 = np.zeros((K, n), dtype=np.intp)
        c1 = np.zeros((K, n))
        low2 = np.zeros((K, n, n), dtype=np.intp)
        c2 = np.zeros((K, n, n))
        for p, a in enumerate(self.alphas):
            for k in range(n):
                if not a[k]:
                    continue
                b = list(a)
                b[k] -= 1
                low1[p, k] = self._index[tuple(b)]
                c1[p, k] = a[k]
                for j in range(n):
                    if b[j]:
                        c = list(b)
                        c[j] -= 1
                        low2[p, k, j] = self._index[tuple(c)]
                        c2[p, k, j] = a[k] * b[j]
        self.g_low1, self.g_c1, self.g_low2, self.g_c2 = low1, c1, low2, c2

    def _build_lognormal(self):
        n = self.n
        pidx = _pack_index(n)
        W = np.zeros((self.size, self.n_phi))
        for p, a in enumerate(self.alphas):
            k = sum(a)
            for i in range(n):
                W[p, i] += (2 - k) * a[i]
                W[p, pidx[i, i]] += 0.5 * a[i] * (a[i] - 1)
                for j in range(i + 1, n):
                    W[p, pidx[i, j]] += a[i] * a[j]
        self.ln_W = W
        self.ln_required = np.any(W != 0, axis=0) | np.isin(
            np.arange(self.n_phi), self.direct[self.direct >= 0]
        )

    # -- evaluation -----------------------------------------------------------

    def _gaussian_values(self, phi):
        n = self.n
        m = phi[:, :n]
        _, M = unpack_moments(phi, n)
        C = M - m[:, :, None] * m[:, None, :]
        vals = np.empty((phi.shape[0], self.size))
        vals[:, 0] = 1.0
        for p in range(1, self.size):
            d = self.direct[p]
            if d >= 0:
                vals[:, p] = phi[:, d]
                continue
            i = self.g_piv[p]
            v = m[:, i] * vals[:, self.g_par[p]]
            for t in range(self.g_tptr[p], self.g_tptr[p + 1]):
                v = v + C[:, i, self.g_tj[t]] * (self.g_tcoef[t] * vals[:, self.g_tidx[t]])
            vals[:, p] = v
        return vals

    def _check_lognormal(self, phi):
        bad = (phi[:, self.ln_required] <= 0).any(axis=0)
        if bad.any():
            coords = np.flatnonzero(self.ln_required)[bad]
            raise DomainError(
                f"log-normal closure needs positive moments; packed coordinates "
                f"{coords.tolist()} are not positive"
            )

    def _lognormal_values(self, phi):
        self._check_lognormal(phi)
        logphi = np.zeros_like(phi)
        req = self.ln_required
        logphi[:, req] = np.log(phi[:, req])
        vals = np.exp(logphi @ self.ln_W.T)
        for p in np.flatnonzero(self.direct >= 0):
            vals[:, p] = phi[:, self.direct[p]]
        vals[:, self.direct == -1] = 1.0
        return vals

    def values(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        single = phi.ndim == 1
        phi2 = np.atleast_2d(phi)
        if phi2.shape[1] != self.n_phi:
            raise DimensionError(f"packed length {phi2.shape[1]} != {self.n_phi}")
        if self.kind == GAUSSIAN:
            vals = self._gaussian_values(phi2)
        else:
            vals = self._lognormal_values(phi2)
        return vals[0] if single else vals

    def values_and_jacobian(self, phi):
        phi = np.asarray(phi, dtype=float)
        single = phi.ndim == 1
        phi2 = np.atleast_2d(phi)
        vals = self.values(phi2)
        if self.kind == GAUSSIAN:
            jac = self._gaussian_jacobian(phi2, vals)
        else:
            jac = self._lognormal_jacobian(phi2, vals)
        for p in np.flatnonzero(self.direct > -2):
            jac[:, p, :] = 0.0
            if self.direct[p] >= 0:
                jac[:, p, self.direct[p]] = 1.0
        if single:
            return vals[0], jac[0]
        return vals, jac

    def jacobian(self, phi) -> np.ndarray:
        return self.values_and_jacobian(phi)[1]

    def _gaussian_jacobian(self, phi, vals):
        n = self.n
        m = phi[:, :n]
        d1 = self.g_c1[None] * vals[:, self.g_low1]  # (P, K, n)
        gs = 0.5 * self.g_c2[None] * vals[:, self.g_low2]  # (P, K, n, n)
        jac = np.zeros((phi.shape[0], self.size, self.n_phi))
        jac[:, :, :n] = d1 - 2.0 * np.einsum("pakj,pj->pak", gs, m)
        for q, (i, j) in enumerate(triu_pairs(n)):
            jac[:, :, n + q] = gs[:, :, i, i] if i == j else gs[:, :, i, j] + gs[:, :, j, i]
        return jac

    def _lognormal_jacobian(self, phi, vals):
        inv = np.zeros_like(phi)
        req = self.ln_required
        inv[:, req] = 1.0 / phi[:, req]
        return vals[:, :, None] * self.ln_W[None] * inv[:, None, :]


def _basis_for(kind, mp: MomentPair, alpha):
    a = _as_alpha(alpha, mp.dim)
    return MomentBasis.get(kind, mp.dim, (a,)), a


def gaussian_moment(mp: MomentPair, alpha) -> float:
    """``E[X^alpha]`` for ``X ~ N(m, M - m m^T)``."""
    if sum(_as_alpha(alpha, mp.dim)) > MAX_GAUSSIAN_ORDER:
        raise UnsupportedOrder(f"order of {tuple(alpha)} exceeds {MAX_GAUSSIAN_ORDER}")
    basis, a = _basis_for(GAUSSIAN, mp, alpha)
    return float(basis.values(mp.phi)[basis.index(a)])


def lognormal_moment(mp: MomentPair, alpha) -> float:
    """Log-normal closure ``Cl(m, M, alpha)`` for positive ``m`` and ``M``."""
    basis, a = _basis_for(LOGNORMAL, mp, alpha)
    return float(basis.values(mp.phi)[basis.index(a)])

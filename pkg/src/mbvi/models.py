"""Prior SDE families expressed through closed moment expectations.

Every expectation the variational machinery needs is a polynomial in
the state, so each model reduces it to a coefficient tensor acting on a
:class:`~mbvi.closure.MomentBasis`::

    E[a(Z)]             = drift          @ mom(phi)     (n, K)
    E[a(Z) Z^T]         = drift_cross    @ mom(phi)     (n, n, K)
    E[D(Z)]             = diffusion      @ mom(phi)     (n, n, K)
    E[R(Z) v T(Z)]      = control_mean   @ mom(phi) . u (n, nu, K)
    E[R(Z) v T(Z) Z^T]  = control_cross  @ mom(phi) . u (n, n, nu, K)
    E[psi(Z)]           = fisher         @ mom(phi)     (nu, nu, K)

with ``mom(phi)`` the closure moments, ``T(x) = (1, x)`` and ``u`` the
column-stacked control matrix ``v`` (``u[j*n + a] = v[a, j]``). The
parameter derivatives carry an extra leading axis of length ``n_theta``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, fields

import numpy as np

from .closure import GAUSSIAN, LOGNORMAL, MomentBasis, MomentPair
from .errors import DimensionError, SingularDiffusion, ValidationError

IDENTITY = "identity"
DIFFUSION_FACTOR = "diffusion_factor_b"
DIFFUSION_TENSOR = "diffusion_tensor_D"
RESCALINGS = (IDENTITY, DIFFUSION_FACTOR, DIFFUSION_TENSOR)

__all__ = [
    "Coefficients",
    "PriorModel",
    "ConstantDiffusionModel",
    "LinearModel",
    "DoubleWellModel",
    "GBMModel",
    "CLEModel",
    "Stoichiometry",
    "linear_model",
    "double_well_model",
    "gbm_model",
    "cle_model",
    "lotka_volterra",
    "model_from_config",
    "IDENTITY",
    "DIFFUSION_FACTOR",
    "DIFFUSION_TENSOR",
]


@dataclass(frozen=True)
class Coefficients:
    drift: np.ndarray
    drift_cross: np.ndarray
    diffusion: np.ndarray
    control_mean: np.ndarray
    control_cross: np.ndarray
    fisher: np.ndarray

    def items(self):
        return ((f.name, getattr(self, f.name)) for f in fields(self))


def _unit(n, i):
    a = [0] * n
    a[i] = 1
    return tuple(a)


def _add(*alphas):
    return tuple(int(sum(x)) for x in zip(*alphas))


class PriorModel:
    """Base class: moment expectations as coefficient tensors.

    Subclasses set ``family``, ``closure``, ``rescaling`` and the
    parameter metadata, list the multi-indices they use in
    ``_alphas()``, and implement ``_build(theta)`` returning
    ``(Coefficients, Coefficients-of-derivatives)``.
    """

    family = "abstract"

    def __init__(self, dim, theta, param_names, positive, closure, rescaling):
        self.dim = int(dim)
        theta = np.array(theta, dtype=float).ravel()
        if len(param_names) != theta.size or len(positive) != theta.size:
            raise DimensionError("parameter metadata does not match theta")
        if not np.all(np.isfinite(theta)):
            raise ValidationError("model parameters must be finite")
        theta.setflags(write=False)
        self.theta = theta
        self.param_names = tuple(param_names)
        self.positive = np.array(positive, dtype=bool)
        self.positive.setflags(write=False)
        if closure not in (GAUSSIAN, LOGNORMAL):
            raise ValidationError(f"unknown closure {closure!r}")
        if rescaling not in RESCALINGS:
            raise ValidationError(f"unknown rescaling {rescaling!r}")
        self.closure = closure
        self.rescaling = rescaling
        self.basis = MomentBasis.get(closure, self.dim, tuple(sorted(set(self._alphas()))))
        self._cache = {}

    # -- structure ------------------------------------------------------------

    @property
    def n_theta(self):
        return self.theta.size

    @property
    def n_features(self):
        return self.dim + 1

    @property
    def n_controls(self):
        return self.dim * self.n_features

    def feature_alpha(self, j):
        """Multi-index of control feature ``T_j`` (``T_0 = 1``, ``T_j = x_{j-1}``)."""
        return (0,) * self.dim if j == 0 else _unit(self.dim, j - 1)

    def _feature_alphas(self):
        return [self.feature_alpha(j) for j in range(self.n_features)]

    def _alphas(self):
        raise NotImplementedError

    def _build(self, theta):
        raise NotImplementedError

    def _empty(self, lead=()):
        n, nu, K = self.dim, self.n_controls, self.basis.size
        z = lambda *s: np.zeros(tuple(lead) + s)
        return Coefficients(z(n, K), z(n, n, K), z(n, n, K), z(n, nu, K), z(n, n, nu, K), z(nu, nu, K))

    def param_index(self, name):
        return self.param_names.index(name)

    def with_theta(self, theta):
        """Copy of the model with new parameter values."""
        theta = np.array(theta, dtype=float).ravel()
        if theta.size != self.n_theta:
            raise DimensionError(f"expected {self.n_theta} parameters, got {theta.size}")
        if not np.all(np.isfinite(theta)):
            raise ValidationError("model parameters must be finite")
        new = copy.copy(self)
        theta.setflags(write=False)
        new.theta = theta
        new._cache = {}
        new._on_theta()
        return new

    def _on_theta(self):
        pass

    def coefficients(self, theta=None) -> Coefficients:
        return self._built(theta)[0]

    def coefficient_derivatives(self, theta=None) -> Coefficients:
        return self._built(theta)[1]

    def _built(self, theta):
        theta = self.theta if theta is None else np.asarray(theta, dtype=float)
        key = theta.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            hit = self._build(theta)
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    # -- closed expectations --------------------------------------------------

    def _mom(self, mp):
        return self.basis.values_and_jacobian(_as_pair(mp).phi)

    def drift_mean(self, mp, theta=None):
        return self.coefficients(theta).drift @ self._mom(mp)[0]

    def drift_cross(self, mp, theta=None):
        return self.coefficients(theta).drift_cross @ self._mom(mp)[0]

    def diffusion_mean(self, mp, theta=None):
        D = self.coefficients(theta).diffusion @ self._mom(mp)[0]
        return 0.5 * (D + D.T)

    def expectation_jacobians(self, name, mp, theta=None):
        """``(d/dphi, d/dtheta)`` of one closed expectation.

        ``name`` is a :class:`Coefficients` field. The phi-derivative has
        the packed-moment axis last; the theta-derivative has the
        parameter axis first.
        """
        vals, jac = self._mom(mp)
        C = getattr(self.coefficients(theta), name)
        dC = getattr(self.coefficient_derivatives(theta), name)
        return C @ jac, dC @ vals

    # -- pointwise SDE (used by the simulator) --------------------------------

    positive_state = False

    def drift(self, x):
        raise NotImplementedError

    def diffusion_factor(self, x):
        raise NotImplementedError

    def diffusion_tensor(self, x):
        b = self.diffusion_factor(x)
        return b @ np.swapaxes(b, -1, -2)

    def rescaling_matrix(self, x):
        x = np.atleast_2d(x)
        if self.rescaling == IDENTITY:
            return np.broadcast_to(np.eye(self.dim), (x.shape[0], self.dim, self.dim))
        if self.rescaling == DIFFUSION_FACTOR:
            return self.diffusion_factor(x)
        return self.diffusion_tensor(x)

    def to_config(self):
        raise NotImplementedError

    def __repr__(self):
        return (
            f"{type(self).__name__}(dim={self.dim}, closure={self.closure!r}, "
            f"rescaling={self.rescaling!r})"
        )


def _as_pair(mp):
    return mp if isinstance(mp, MomentPair) else MomentPair(*mp)


class ConstantDiffusionModel(PriorModel):
    """State-independent diffusion factor ``b``; Gaussian closure.

    Subclasses provide ``_drift_terms(theta)`` returning
    ``(drift, drift_cross, d_drift, d_drift_cross)`` and
    ``_factor(theta)`` returning ``(b, db)``.
    """

    def __init__(self, dim, theta, param_names, positive, rescaling=DIFFUSION_FACTOR):
        if rescaling == DIFFUSION_TENSOR:
            raise ValidationError("constant-diffusion models use identity or b rescaling")
        super().__init__(dim, theta, param_names, positive, GAUSSIAN, rescaling)

    def _control_alphas(self):
        n = self.dim
        feats = self._feature_alphas()
        out = list(feats)
        out += [_add(f, _unit(n, l)) for f in feats for l in range(n)]
        out += [_add(f, g) for f in feats for g in feats]
        return out

    def _build(self, theta):
        n, m, K = self.dim, self.n_features, self.basis.size
        C, dC = self._empty(), self._empty((self.n_theta,))
        ea, eax, dea, deax = self._drift_terms(theta)
        C.drift[:], C.drift_cross[:] = ea, eax
        dC.drift[:], dC.drift_cross[:] = dea, deax
        b, db = self._factor(theta)
        D = b @ b.T
        dD = db @ b.T + b @ np.swapaxes(db, -1, -2)
        i0 = self.basis.index((0,) * n)
        C.diffusion[:, :, i0] = D
        dC.diffusion[:, :, :, i0] = dD
        if self.rescaling == DIFFUSION_FACTOR:
            Rc, dRc = b, db
            Dt, dDt = np.eye(n), np.zeros((self.n_theta, n, n))
        else:
            Rc, dRc = np.eye(n), np.zeros((self.n_theta, n, n))
            try:
                Dinv = np.linalg.inv(D)
                if np.linalg.cond(D) > 1e12:
                    raise np.linalg.LinAlgError
            except np.linalg.LinAlgError:
                raise SingularDiffusion("identity rescaling requires an invertible diffusion") from None
            Dt = Dinv
            dDt = -Dinv @ dD @ Dinv
        for j in range(m):
            fj = self.feature_alpha(j)
            kj = self.basis.index(fj)
            for a in range(n):
                p = j * n + a
                C.control_mean[:, p, kj] = Rc[:, a]
                dC.control_mean[:, :, p, kj] = dRc[:, :, a]
                for l in range(n):
                    kl = self.basis.index(_add(fj, _unit(n, l)))
                    C.control_cross[:, l, p, kl] = Rc[:, a]
                    dC.control_cross[:, :, l, p, kl] = dRc[:, :, a]
            for k in range(m):
                kk = self.basis.index(_add(fj, self.feature_alpha(k)))
                C.fisher[j * n:(j + 1) * n, k * n:(k + 1) * n, kk] = Dt
                dC.fisher[:, j * n:(j + 1) * n, k * n:(k + 1) * n, kk] = dDt
        return C, dC

    def diffusion_factor(self, x):
        x = np.atleast_2d(x)
        b, _ = self._factor(self.theta)
        return np.broadcast_to(b, (x.shape[0], self.dim, self.dim))


class LinearModel(ConstantDiffusionModel):
    """``dX = -gamma (X - mu) dt + sigma dW`` (exact under Gaussian closure).

    Parameters are ``gamma`` (row-major), ``mu`` and ``sigma`` (row-major);
    diagonal entries of ``gamma`` and ``sigma`` are flagged positive.
    """

    family = "linear"

    def __init__(self, gamma, mu, sigma, rescaling=DIFFUSION_FACTOR):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        n = mu.size
        gamma = np.asarray(gamma, dtype=float).reshape(n, n)
        sigma = np.asarray(sigma, dtype=float).reshape(n, n)
        names = [f"gamma_{i}{j}" for i in range(n) for j in range(n)]
        names += [f"mu_{i}" for i in range(n)]
        names += [f"sigma_{i}{j}" for i in range(n) for j in range(n)]
        eye = np.eye(n, dtype=bool).ravel()
        positive = np.concatenate([eye, np.zeros(n, bool), eye])
        theta = np.concatenate([gamma.ravel(), mu, sigma.ravel()])
        super().__init__(n, theta, names, positive, rescaling)

    def unpack(self, theta=None):
        theta = self.theta if theta is None else theta
        n = self.dim
        g = theta[: n * n].reshape(n, n)
        mu = theta[n * n: n * n + n]
        s = theta[n * n + n:].reshape(n, n)
        return g, mu, s

    def _alphas(self):
        n = self.dim
        out = [(0,) * n] + [_unit(n, i) for i in range(n)]
        out += [_add(_unit(n, i), _unit(n, l)) for i in range(n) for l in range(n)]
        return out + self._control_alphas()

    def _drift_terms(self, theta):
        n, K, nt = self.dim, self.basis.size, self.n_theta
        g, mu, _ = self.unpack(theta)
        ix = self.basis.index
        i0 = ix((0,) * n)
        e = [ix(_unit(n, i)) for i in range(n)]
        ee = [[ix(_add(_unit(n, i), _unit(n, l))) for l in range(n)] for i in range(n)]
        ea = np.zeros((n, K))
        eax = np.zeros((n, n, K))
        dea = np.zeros((nt, n, K))
        deax = np.zeros((nt, n, n, K))
        gmu = g @ mu
        for i in range(n):
            ea[i, i0] += gmu[i]
            for k in range(n):
                ea[i, e[k]] -= g[i, k]
                pg = i * n + k
                dea[pg, i, e[k]] -= 1.0
                dea[pg, i, i0] += mu[k]
                dea[n * n + k, i, i0] += g[i, k]
            for l in range(n):
                eax[i, l, e[l]] += gmu[i]
                for k in range(n):
                    eax[i, l, ee[k][l]] -= g[i, k]
                    pg = i * n + k
                    deax[pg, i, l, ee[k][l]] -= 1.0
                    deax[pg, i, l, e[l]] += mu[k]
                    deax[n * n + k, i, l, e[l]] += g[i, k]
        return ea, eax, dea, deax

    def _factor(self, theta):
        n = self.dim
        _, _, s = self.unpack(theta)
        ds = np.zeros((self.n_theta, n, n))
        for i in range(n):
            for j in range(n):
                ds[n * n + n + i * n + j, i, j] = 1.0
        return s, ds

    def drift(self, x):
        g, mu, _ = self.unpack()
        return -(np.atleast_2d(x) - mu) @ g.T

    def to_config(self):
        g, mu, s = self.unpack()
        return {
            "family": "linear",
            "gamma": g.tolist(),
            "mu": mu.tolist(),
            "sigma": s.tolist(),
            "rescaling": self.rescaling,
        }


class DoubleWellModel(ConstantDiffusionModel):
    """``dX = kappa X (1 - X^2) dt + sigma dW`` in one dimension."""

    family = "double_well"

    def __init__(self, kappa=4.0, sigma=1.0, rescaling=DIFFUSION_FACTOR):
        super().__init__(1, [kappa, sigma], ["kappa", "sigma"], [True, True], rescaling)

    def _alphas(self):
        return [(k,) for k in range(5)] + self._control_alphas()

    def _drift_terms(self, theta):
        K = self.basis.size
        kappa = theta[0]
        ix = self.basis.index
        ea = np.zeros((1, K))
        eax = np.zeros((1, 1, K))
        ea[0, ix((1,))], ea[0, ix((3,))] = kappa, -kappa
        eax[0, 0, ix((2,))], eax[0, 0, ix((4,))] = kappa, -kappa
        dea = np.zeros((2, 1, K))
        deax = np.zeros((2, 1, 1, K))
        dea[0] = ea / kappa if kappa != 0 else _dw_unit(ea, ix, 1)
        deax[0] = eax / kappa if kappa != 0 else _dw_unit(eax, ix, 2)
        return ea, eax, dea, deax

    def _factor(self, theta):
        db = np.zeros((2, 1, 1))
        db[1, 0, 0] = 1.0
        return np.array([[theta[1]]]), db

    def drift(self, x):
        x = np.atleast_2d(x)
        return self.theta[0] * x * (1.0 - x * x)

    def to_config(self):
        return {
            "family": "double_well",
            "kappa": float(self.theta[0]),
            "sigma": float(self.theta[1]),
            "rescaling": self.rescaling,
        }


def _dw_unit(arr, ix, lo):
    out = np.zeros_like(arr)
    out[..., ix((lo,))] = 1.0
    out[..., ix((lo + 2,))] = -1.0
    return out


class GBMModel(PriorModel):
    """Correlated geometric Brownian motion ``dX_i = r_i X_i dt + X_i (R dW)_i``.

    Log-normal closure with rescaling by the diffusion factor
    ``b(x) = diag(x) R``. Parameters: ``r`` then ``R`` (row-major).
    """

    family = "gbm"
    positive_state = True

    def __init__(self, r, Rmat):
        r = np.atleast_1d(np.asarray(r, dtype=float))
        n = r.size
        Rmat = np.asarray(Rmat, dtype=float).reshape(n, n)
        names = [f"r_{i}" for i in range(n)] + [f"R_{i}{j}" for i in range(n) for j in range(n)]
        super().__init__(
            n, np.concatenate([r, Rmat.ravel()]), names, np.zeros(n + n * n, bool),
            LOGNORMAL, DIFFUSION_FACTOR,
        )

    def unpack(self, theta=None):
        theta = self.theta if theta is None else theta
        n = self.dim
        return theta[:n], theta[n:].reshape(n, n)

    def _alphas(self):
        n = self.dim
        feats = self._feature_alphas()
        out = [(0,) * n]
        for i in range(n):
            ei = _unit(n, i)
            out.append(ei)
            for l in range(n):
                out.append(_add(ei, _unit(n, l)))
            for f in feats:
                out.append(_add(ei, f))
                out += [_add(ei, f, _unit(n, l)) for l in range(n)]
        out += [_add(f, g) for f in feats for g in feats]
        return out

    def _build(self, theta):
        n, m = self.dim, self.n_features
        r, R = self.unpack(theta)
        Q = R @ R.T
        C, dC = self._empty(), self._empty((self.n_theta,))
        ix = self.basis.index
        for i in range(n):
            ei = _unit(n, i)
            C.drift[i, ix(ei)] = r[i]
            dC.drift[i, i, ix(ei)] = 1.0
            for l in range(n):
                kil = ix(_add(ei, _unit(n, l)))
                C.drift_cross[i, l, kil] = r[i]
                dC.drift_cross[i, i, l, kil] = 1.0
                C.diffusion[i, l, kil] = Q[i, l]
                for q in range(n):
                    # dQ_il / dR_pq = d_ip R_lq + R_iq d_lp
                    dC.diffusion[n + i * n + q, i, l, kil] += R[l, q]
                    dC.diffusion[n + l * n + q, i, l, kil] += R[i, q]
            for j in range(m):
                fj = self.feature_alpha(j)
                kmean = ix(_add(ei, fj))
                for a in range(n):
                    p = j * n + a
                    pr = n + i * n + a
                    C.control_mean[i, p, kmean] = R[i, a]
                    dC.control_mean[pr, i, p, kmean] = 1.0
                    for l in range(n):
                        kc = ix(_add(ei, fj, _unit(n, l)))
                        C.control_cross[i, l, p, kc] = R[i, a]
                        dC.control_cross[pr, i, l, p, kc] = 1.0
        eye = np.eye(n)
        for j in range(m):
            for k in range(m):
                kk = ix(_add(self.feature_alpha(j), self.feature_alpha(k)))
                C.fisher[j * n:(j + 1) * n, k * n:(k + 1) * n, kk] = eye
        return C, dC

    def drift(self, x):
        r, _ = self.unpack()
        return np.atleast_2d(x) * r

    def diffusion_factor(self, x):
        _, R = self.unpack()
        x = np.atleast_2d(x)
        return x[:, :, None] * R[None]

    def to_config(self):
        r, R = self.unpack()
        return {"family": "gbm", "r": r.tolist(), "R": R.tolist()}


@dataclass(frozen=True)
class Stoichiometry:
    """Reaction network: substrate matrix ``S``, product matrix ``P``, rates ``c``."""

    S: np.ndarray
    P: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.S))
        P = np.atleast_2d(np.asarray(self.P))
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        if S.shape != P.shape:
            raise DimensionError(f"S {S.shape} and P {P.shape} differ in shape")
        if c.size != S.shape[0]:
            raise DimensionError(f"{c.size} rate constants for {S.shape[0]} reactions")
        for name, arr in (("S", S), ("P", P)):
            if np.any(arr < 0) or np.any(arr != np.round(arr)):
                raise ValidationError(f"{name} must hold non-negative integers")
        if np.any(S > 2):
            raise ValidationError("substrate counts above 2 are not supported")
        if np.any(c <= 0):
            raise ValidationError("rate constants must be positive")
        object.__setattr__(self, "S", S.astype(int))
        object.__setattr__(self, "P", P.astype(int))
        object.__setattr__(self, "c", c)

    @property
    def V(self):
        return self.P - self.S

    @property
    def n_reactions(self):
        return self.S.shape[0]

    @property
    def n_species(self):
        return self.S.shape[1]


class CLEModel(PriorModel):
    """Chemical Langevin equation with monomial propensities ``c_r x^{s_r}``.

    Log-normal closure, rescaling by the diffusion tensor. Parameters
    are the rate constants (positive).
    """

    family = "cle"
    positive_state = True

    def __init__(self, st: Stoichiometry):
        self.stoichiometry = st
        d = st.n_species
        names = [f"c_{k}" for k in range(st.n_reactions)]
        super().__init__(d, st.c, names, np.ones(st.n_reactions, bool), LOGNORMAL, DIFFUSION_TENSOR)

    def _on_theta(self):
        st = self.stoichiometry
        self.stoichiometry = Stoichiometry(st.S, st.P, self.theta)

    def _alphas(self):
        n = self.dim
        feats = self._feature_alphas()
        out = [(0,) * n]
        for s in self.stoichiometry.S:
            s = tuple(s)
            out.append(s)
            out += [_add(s, _unit(n, l)) for l in range(n)]
            for f in feats:
                out.append(_add(s, f))
                out += [_add(s, f, _unit(n, l)) for l in range(n)]
                out += [_add(s, f, g) for g in feats]
        return out

    def _build(self, theta):
        n, m = self.dim, self.n_features
        V = self.stoichiometry.V.astype(float)
        C, dC = self._empty(), self._empty((self.n_theta,))
        ix = self.basis.index
        for rk, s in enumerate(self.stoichiometry.S):
            s = tuple(s)
            c = theta[rk]
            ks = ix(s)
            vr = V[rk]
            vv = np.outer(vr, vr)
            C.drift[:, ks] += c * vr
            dC.drift[rk, :, ks] += vr
            C.diffusion[:, :, ks] += c * vv
            dC.diffusion[rk, :, :, ks] += vv
            for l in range(n):
                kl = ix(_add(s, _unit(n, l)))
                C.drift_cross[:, l, kl] += c * vr
                dC.drift_cross[rk, :, l, kl] += vr
            for j in range(m):
                fj = self.feature_alpha(j)
                kf = ix(_add(s, fj))
                for a in range(n):
                    p = j * n + a
                    C.control_mean[:, p, kf] += c * vv[:, a]
                    dC.control_mean[rk, :, p, kf] += vv[:, a]
                    for l in range(n):
                        kc = ix(_add(s, fj, _unit(n, l)))
                        C.control_cross[:, l, p, kc] += c * vv[:, a]
                        dC.control_cross[rk, :, l, p, kc] += vv[:, a]
                for k in range(m):
                    kk = ix(_add(s, fj, self.feature_alpha(k)))
                    C.fisher[j * n:(j + 1) * n, k * n:(k + 1) * n, kk] += c * vv
                    dC.fisher[rk, j * n:(j + 1) * n, k * n:(k + 1) * n, kk] += vv
        return C, dC

    def propensities(self, x):
        x = np.atleast_2d(x)
        S = self.stoichiometry.S
        return self.theta * np.prod(x[:, None, :] ** S[None], axis=2)

    def drift(self, x):
        return self.propensities(x) @ self.stoichiometry.V.astype(float)

    def diffusion_tensor(self, x):
        V = self.stoichiometry.V.astype(float)
        h = self.propensities(x)
        return np.einsum("ri,pr,rj->pij", V, h, V)

    def diffusion_factor(self, x):
        D = self.diffusion_tensor(x)
        w, U = np.linalg.eigh(D)
        w = np.clip(w, 0.0, None)
        return (U * np.sqrt(w)[:, None, :]) @ np.swapaxes(U, -1, -2)

    def to_config(self):
        st = self.stoichiometry
        return {"family": "cle", "S": st.S.tolist(), "P": st.P.tolist(), "c": st.c.tolist()}


def linear_model(n, gamma, mu, sigma, rescaling=DIFFUSION_FACTOR) -> LinearModel:
    n = int(n)
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (n,))
    gamma = np.asarray(gamma, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if gamma.size == 1:
        gamma = gamma.ravel()[0] * np.eye(n)
    if sigma.size == 1:
        sigma = sigma.ravel()[0] * np.eye(n)
    if gamma.shape != (n, n) or sigma.shape != (n, n):
        raise DimensionError(f"gamma and sigma must be {n}x{n}")
    return LinearModel(gamma, mu, sigma, rescaling)


def double_well_model(kappa=4.0, sigma=1.0, rescaling=DIFFUSION_FACTOR) -> DoubleWellModel:
    return DoubleWellModel(kappa, sigma, rescaling)


def gbm_model(r, Rmat) -> GBMModel:
    return GBMModel(r, Rmat)


def cle_model(st: Stoichiometry) -> CLEModel:
    return CLEModel(st)


def lotka_volterra(c=(0.3, 0.004, 0.3)) -> CLEModel:
    """Prey/predator network; default rates are not taken from any reference run."""
    S = [[1, 0], [1, 1], [0, 1]]
    P = [[2, 0], [0, 2], [0, 0]]
    return CLEModel(Stoichiometry(S, P, c))


def model_from_config(cfg) -> PriorModel:
    """Build a model from a config mapping (``family`` plus parameters)."""
    from .errors import ConfigError

    cfg = dict(cfg)
    fam = cfg.get("family")
    try:
        if fam == "linear":
            n = len(np.atleast_1d(cfg["mu"]))
            return LinearModel(
                np.asarray(cfg["gamma"], float).reshape(n, n), cfg["mu"],
                np.asarray(cfg["sigma"], float).reshape(n, n),
                cfg.get("rescaling", DIFFUSION_FACTOR),
            )
        if fam == "double_well":
            return DoubleWellModel(cfg.get("kappa", 4.0), cfg.get("sigma", 1.0),
                                   cfg.get("rescaling", DIFFUSION_FACTOR))
        if fam == "gbm":
            if "R" in cfg:
                R = cfg["R"]
            else:
                sig = np.asarray(cfg["sigma"], float)
                corr = np.asarray(cfg.get("corr", np.eye(sig.size)), float)
                R = np.linalg.cholesky(corr * np.outer(sig, sig))
            return GBMModel(cfg["r"], R)
        if fam == "cle":
            return CLEModel(Stoichiometry(cfg["S"], cfg["P"], cfg["c"]))
        if fam == "lotka_volterra":
            return lotka_volterra(cfg.get("c", (0.3, 0.004, 0.3)))
    except KeyError as exc:
        raise ConfigError(f"model section for {fam!r} is missing key {exc}") from None
    except (ValueError, np.linalg.LinAlgError) as exc:
        if isinstance(exc, ValidationError):
            raise ConfigError(str(exc)) from None
        raise ConfigError(f"invalid model section: {exc}") from None
    raise ConfigError(f"unknown model family {fam!r}")

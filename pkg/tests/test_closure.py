import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from mbvi.closure import (
    GAUSSIAN,
    LOGNORMAL,
    MomentBasis,
    MomentPair,
    central_to_raw,
    gaussian_moment,
    lognormal_moment,
    monomials,
    n_packed,
    pack_moments,
    triu_pairs,
    unpack_moments,
)
from mbvi.errors import DimensionError, DomainError, UnsupportedOrder, ValidationError


def isserlis(m, C, alpha):
    """E[prod x_i^a_i] for a Gaussian, by summing over pairings of the centred parts."""
    idx = [i for i, a in enumerate(alpha) for _ in range(a)]
    total = 0.0
    k = len(idx)
    # expand prod (m_i + z_i) and take E over pairings of the z factors
    for mask in itertools.product((0, 1), repeat=k):
        zs = [idx[j] for j in range(k) if mask[j]]
        ms = np.prod([m[idx[j]] for j in range(k) if not mask[j]]) if k - len(zs) else 1.0
        total += ms * _pairings(zs, C)
    return total


def _pairings(zs, C):
    if not zs:
        return 1.0
    if len(zs) % 2:
        return 0.0
    first, rest = zs[0], zs[1:]
    return sum(C[first, rest[j]] * _pairings(rest[:j] + rest[j + 1:], C) for j in range(len(rest)))


def lognormal_exact(mu, c, alpha):
    a = np.asarray(alpha, float)
    return float(np.exp(a @ mu + 0.5 * a @ c @ a))


def _random_gaussian(rng, n):
    A = rng.normal(size=(n, n))
    return rng.normal(size=n), A @ A.T + 0.2 * np.eye(n)


def test_packing_roundtrip():
    m = np.array([1.0, 2.0, 3.0])
    M = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]])
    phi = pack_moments(m, M)
    assert phi.tolist() == [1, 2, 3, 1, 2, 3, 4, 5, 6]
    m2, M2 = unpack_moments(phi, 3)
    assert np.array_equal(m2, m) and np.array_equal(M2, M)
    assert n_packed(3) == 9
    assert list(triu_pairs(2)) == [(0, 0), (0, 1), (1, 1)]


def test_moment_pair_validation():
    with pytest.raises(DimensionError):
        MomentPair([1.0, 2.0], np.eye(3))
    with pytest.raises(ValidationError):
        MomentPair([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    mp = MomentPair.point_mass([2.0, -1.0])
    assert np.array_equal(mp.central, np.zeros((2, 2)))
    mp2 = central_to_raw([1.0, 2.0], np.eye(2))
    np.testing.assert_allclose(mp2.M, [[2.0, 2.0], [2.0, 5.0]])


def test_monomials_count():
    assert len(monomials(3, 4)) == 35
    assert monomials(2, 1) == [(0, 0), (1, 0), (0, 1)]


@pytest.mark.parametrize("n", [1, 2, 3])
def test_gaussian_matches_isserlis(n):
    rng = np.random.default_rng(n)
    for _ in range(3):
        m, C = _random_gaussian(rng, n)
        mp = MomentPair.from_central(m, C)
        for a in monomials(n, 6):
            np.testing.assert_allclose(gaussian_moment(mp, a), isserlis(m, C, a), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_lognormal_exact_for_lognormal_laws(n):
    rng = np.random.default_rng(10 + n)
    for _ in range(3):
        mu, c = _random_gaussian(rng, n)
        c = 0.1 * c
        mean = np.exp(mu + 0.5 * np.diag(c))
        mp = MomentPair.from_central(mean, np.outer(mean, mean) * (np.exp(c) - 1))
        for a in monomials(n, 4):
            np.testing.assert_allclose(lognormal_moment(mp, a), lognormal_exact(mu, c, a), rtol=1e-10)


@given(hnp.arrays(float, 2, elements=st.floats(-3, 3)), hnp.arrays(float, (2, 2), elements=st.floats(-1, 1)))
def test_low_order_consistency_exact(m, A):
    mp = MomentPair.from_central(m, A @ A.T)
    for a in monomials(2, 2):
        want = 1.0 if sum(a) == 0 else (mp.m[a.index(1)] if sum(a) == 1 else mp.M[tuple(np.repeat([0, 1], a))])
        assert gaussian_moment(mp, a) == want


@given(hnp.arrays(float, 2, elements=st.floats(0.5, 3)), st.floats(0.01, 0.3))
def test_lognormal_low_order_exact(m, s):
    M = np.outer(m, m) * (1 + s)
    mp = MomentPair(m, M)
    for a in monomials(2, 2):
        want = 1.0 if sum(a) == 0 else (mp.m[a.index(1)] if sum(a) == 1 else mp.M[tuple(np.repeat([0, 1], a))])
        assert lognormal_moment(mp, a) == want


@pytest.mark.parametrize("kind", [GAUSSIAN, LOGNORMAL])
def test_basis_jacobian_finite_differences(kind):
    rng = np.random.default_rng(5)
    n = 2
    basis = MomentBasis.get(kind, n, tuple(monomials(n, 4)))
    m = np.array([1.2, 0.8])
    cov = np.array([[0.05, 0.01], [0.01, 0.04]])
    phi = MomentPair.from_central(m, cov).phi
    vals, jac = basis.values_and_jacobian(phi)
    h = 1e-6
    fd = np.empty_like(jac)
    for q in range(phi.size):
        e = np.zeros_like(phi)
        e[q] = h
        fd[:, q] = (basis.values(phi + e) - basis.values(phi - e)) / (2 * h)
    np.testing.assert_allclose(jac, fd, rtol=1e-6, atol=1e-6)
    # stacked evaluation agrees with single evaluation
    stack = np.stack([phi, phi * 1.01])
    np.testing.assert_allclose(basis.values(stack)[0], vals)
    assert basis.size == len(basis) and (0, 0) in basis


def test_gaussian_order_limit():
    mp = MomentPair.from_central([0.0], [[1.0]])
    assert gaussian_moment(mp, (8,)) == pytest.approx(105.0)
    with pytest.raises(UnsupportedOrder):
        gaussian_moment(mp, (9,))


def test_lognormal_domain():
    with pytest.raises(DomainError):
        lognormal_moment(MomentPair([-1.0, 1.0], [[2.0, 0.1], [0.1, 2.0]]), (2, 1))


def test_multi_index_validation():
    mp = MomentPair.from_central([0.0, 1.0], np.eye(2))
    with pytest.raises(DimensionError):
        gaussian_moment(mp, (1,))
    with pytest.raises(ValidationError):
        gaussian_moment(mp, (-1, 2))
    with pytest.raises(ValidationError):
        gaussian_moment(mp, (0.5, 1))
    with pytest.raises(ValidationError):
        MomentBasis("poisson", 1, ((1,),))

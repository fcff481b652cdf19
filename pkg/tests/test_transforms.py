import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esvdfair.errors import GroupSizeError, ShapeError
from esvdfair.numerics import thin_svd
from esvdfair.transforms import (
    build_first_moment_transform,
    build_M,
    build_second_moment_transform,
    d_e_squared,
    d_v_squared,
    group_means,
    moment_diagnostics,
)
from oracles import two_pass_cov


def test_group_means_trivial():
    m1, m2 = group_means(np.array([[0.0, 0.0], [2.0, 2.0]]), np.array([[5.0, -1.0]]))
    assert np.array_equal(m1, [1.0, 1.0])
    assert np.array_equal(m2, [5.0, -1.0])


def test_group_means_oracle(rng):
    X1, X2 = rng.normal(size=(50, 8)), rng.normal(size=(30, 8))
    m1, _ = group_means(X1, X2)
    ref = sum(X1[i] for i in range(50)) / 50
    assert np.allclose(m1, ref, atol=1e-12)


def test_group_means_empty():
    with pytest.raises(GroupSizeError):
        group_means(np.empty((0, 2)), np.ones((2, 2)))


def test_first_moment_transform_zero_gap():
    tr = build_first_moment_transform(np.ones(3), np.ones(3), 1.0)
    assert np.allclose(tr.S, np.eye(3))


def test_first_moment_transform_scalar():
    tr = build_first_moment_transform(np.array([3.0]), np.array([0.0]), 7.0)
    assert tr.S[0, 0] == pytest.approx(4.0)


def test_first_moment_transform_random(rng):
    m1, m2 = rng.normal(size=6), rng.normal(size=6)
    tr = build_first_moment_transform(m1, m2, 1e-5)
    d = (m1 - m2)[:, None]
    target = d @ d.T + 1e-5 * np.eye(6)
    assert np.linalg.norm(tr.S @ tr.S.T - target) <= 1e-10 * max(1.0, np.linalg.norm(target))
    assert np.allclose(tr.S @ tr.S_inv, np.eye(6), atol=1e-8)
    assert np.allclose(tr.S, np.tril(tr.S))


def test_build_M_identical_groups(rng):
    X = rng.normal(size=(10, 3))
    assert np.allclose(build_M(X, X), 0.0)


def test_build_M_variance_difference():
    X1 = np.array([[-2.0], [2.0], [0.0]])  # sample variance 4
    X2 = np.array([[-1.0], [1.0], [0.0]])  # sample variance 1
    assert build_M(X1, X2) == pytest.approx(np.array([[3.0]]))


def test_build_M_two_pass_oracle(rng):
    X1 = rng.normal(size=(40, 5)) @ rng.normal(size=(5, 5)) + 3.0
    X2 = rng.normal(size=(25, 5))
    M = build_M(X1, X2)
    assert np.allclose(M, two_pass_cov(X1) - two_pass_cov(X2), atol=1e-10)
    assert np.array_equal(M, M.T)


def test_build_M_needs_two_rows():
    with pytest.raises(GroupSizeError):
        build_M(np.ones((1, 2)), np.ones((3, 2)))


def test_second_moment_transform_diag():
    tr = build_second_moment_transform(np.diag([4.0, -9.0]))
    assert np.allclose(tr.S @ tr.S.T, np.diag([4.0, 9.0]))


def test_second_moment_transform_zero():
    tr = build_second_moment_transform(np.zeros((3, 3)))
    assert tr.is_zero
    assert np.array_equal(tr.S, np.zeros((3, 3)))
    assert np.array_equal(tr.S_inv, np.zeros((3, 3)))


def test_second_moment_transform_random(rng):
    B = rng.normal(size=(5, 5))
    M = B + B.T
    tr = build_second_moment_transform(M)
    assert np.linalg.norm(tr.S @ tr.S.T - tr.abs_M) <= 1e-9 * np.linalg.norm(M)
    w, Q = np.linalg.eigh(M)
    assert np.allclose(tr.abs_M, Q @ np.diag(np.abs(w)) @ Q.T, atol=1e-10)


def test_second_moment_transform_rank_deficient(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    M = Q @ np.diag([3.0, -2.0, 0.0, 0.0]) @ Q.T
    tr = build_second_moment_transform(M)
    assert tr.rank == 2
    assert np.allclose(tr.S_inv, np.linalg.pinv(tr.S), atol=1e-10)


def test_d_e_trivial():
    assert d_e_squared(np.ones(2), np.zeros(2), np.zeros((3, 2))) == 0.0
    assert d_e_squared(np.array([1.0, 0.0]), np.zeros(2), np.eye(2)) == 1.0


def test_d_e_shape_error():
    with pytest.raises(ShapeError):
        d_e_squared(np.ones(2), np.zeros(2), np.ones((3, 4)))


def test_d_v_trivial(rng):
    X = rng.normal(size=(10, 3))
    assert d_v_squared(X, X, rng.normal(size=(2, 3))) == pytest.approx(0.0, abs=1e-20)
    assert d_v_squared(X, rng.normal(size=(8, 3)), np.zeros((2, 3))) == 0.0


def test_d_v_matches_expanded_form(rng):
    X1, X2 = rng.normal(size=(30, 4)), 2 * rng.normal(size=(20, 4))
    W = rng.normal(size=(3, 4))
    C1 = np.cov(X1 @ W.T, rowvar=False)
    C2 = np.cov(X2 @ W.T, rowvar=False)
    assert d_v_squared(X1, X2, W) == pytest.approx(np.sum((C1 - C2) ** 2), rel=1e-10)


def _instance(rng, n, m):
    X1 = rng.normal(size=(rng.integers(2, 30), n)) * rng.uniform(0.2, 3)
    X2 = rng.normal(size=(rng.integers(2, 30), n)) + rng.normal(size=n)
    return X1, X2, rng.normal(size=(m, n))


def test_theorem1_identity(rng):
    for _ in range(50):
        n, m = rng.integers(2, 17), rng.integers(1, 17)
        eps = 10.0 ** rng.uniform(-8, 0)
        m1, m2 = rng.normal(size=n), rng.normal(size=n)
        W = rng.normal(size=(m, n))
        tr = build_first_moment_transform(m1, m2, eps)
        s = thin_svd(W @ tr.S).s
        de = d_e_squared(m1, m2, W)
        assert abs(de - (np.sum(s ** 2) - eps * np.trace(W @ W.T))) <= 1e-8 * max(1.0, de)
        # the spectrum strictly bounds the mean gap whenever W != 0
        assert de < np.sum(s ** 2)


def test_theorem2_bound_and_equality(rng):
    for _ in range(50):
        n, m = rng.integers(2, 10), rng.integers(1, 10)
        X1, X2, W = _instance(rng, n, m)
        tr = build_second_moment_transform(build_M(X1, X2))
        s = thin_svd(W @ tr.S).s
        assert d_v_squared(X1, X2, W) <= np.sum(s ** 4) * (1 + 1e-10)
        # constant rows in group 2 make M positive semidefinite: equality
        X2c = np.tile(rng.normal(size=n), (5, 1))
        tr = build_second_moment_transform(build_M(X1, X2c))
        s = thin_svd(W @ tr.S).s
        assert d_v_squared(X1, X2c, W) == pytest.approx(np.sum(s ** 4), rel=1e-8)


def test_abs_M_lemma(rng):
    for _ in range(50):
        n, m = rng.integers(2, 10), rng.integers(1, 10)
        B = rng.normal(size=(n, n))
        M = B + B.T
        W = rng.normal(size=(m, n))
        absM = build_second_moment_transform(M).abs_M
        assert np.sum((W @ M @ W.T) ** 2) <= np.sum((W @ absM @ W.T) ** 2) * (1 + 1e-12)


@settings(max_examples=40, deadline=None)
@given(c=st.floats(0.1, 10.0), seed=st.integers(0, 2 ** 16))
def test_scale_covariance(c, seed):
    r = np.random.default_rng(seed)
    X1, X2, W = r.normal(size=(9, 4)), r.normal(size=(7, 4)) * 2, r.normal(size=(3, 4))
    m1, m2 = X1.mean(0), X2.mean(0)
    assert d_e_squared(m1, m2, c * W) == pytest.approx(c ** 2 * d_e_squared(m1, m2, W), rel=1e-10)
    assert d_v_squared(X1, X2, c * W) == pytest.approx(c ** 4 * d_v_squared(X1, X2, W), rel=1e-10)


def test_moment_diagnostics_keys(rng):
    X1, X2, W = _instance(rng, 4, 3)
    d = moment_diagnostics(X1, X2, W)
    assert d["d_e_squared"] <= d["first_moment_bound"]
    assert d["d_v_squared"] <= d["second_moment_bound"] * (1 + 1e-10)

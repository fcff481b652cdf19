import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esvdfair.errors import ConfigError, NumericalError
from esvdfair.esvd import (
    FairnessConfig,
    cubic_residual,
    cubic_shrink,
    cubic_shrink_bisect,
    cubic_shrink_cardano,
    curvature_coefficients,
    esvdfair_layer,
    esvdfair_with_adjustment,
    shrink_layer_first_moment,
    shrink_layer_second_moment,
    solve_first_moment,
    solve_second_moment,
)
from esvdfair.model import MLP, least_squares_refit
from esvdfair.numerics import thin_svd
from esvdfair.transforms import (build_first_moment_transform, build_M,
                                 build_second_moment_transform, d_e_squared, d_v_squared)
from oracles import projected_gradient


def _problem(rng, r=None, frac=None, power=2):
    r = r or int(rng.integers(1, 7))
    s = np.sort(rng.uniform(0.1, 3.0, r))[::-1]
    k = rng.uniform(0.5, 5.0, r)
    c = float(np.sum(s ** power)) * (frac if frac is not None else rng.uniform(0.05, 0.9))
    return s, k, c


# --- curvature ---------------------------------------------------------------

def test_curvature_zero_data():
    assert np.array_equal(curvature_coefficients(np.zeros((5, 3)), np.eye(3), np.eye(3)),
                          np.zeros(3))


def test_curvature_orthonormal_rows():
    assert np.allclose(curvature_coefficients(np.eye(4), np.eye(4), np.eye(4)), 1.0)


def test_curvature_quadratic_form(rng):
    X = rng.normal(size=(20, 5))
    S_inv = rng.normal(size=(5, 5))
    V = np.linalg.qr(rng.normal(size=(5, 3)))[0]
    k = curvature_coefficients(X, S_inv, V)
    ref = [V[:, i] @ S_inv @ X.T @ X @ S_inv.T @ V[:, i] for i in range(3)]
    assert np.allclose(k, ref, rtol=1e-10)
    assert np.all(k >= 0)


# --- first-moment solver -------------------------------------------------------

def test_first_moment_slack():
    sol = solve_first_moment([2.0, 1.0], [1.0, 1.0], 10.0)
    assert sol.gamma == 0.0 and not sol.constraint_active
    assert np.array_equal(sol.sigma_star, [2.0, 1.0])


def test_first_moment_one_variable():
    sol = solve_first_moment([2.0], [1.0], 1.0)
    assert sol.sigma_star == pytest.approx([1.0], rel=1e-12)
    assert sol.gamma == pytest.approx(1.0, rel=1e-10)


def test_first_moment_zero_curvature_component():
    sol = solve_first_moment([2.0, 1.0], [0.0, 1.0], 0.5)
    assert sol.sigma_star[0] == 0.0
    assert sol.sigma_star[1] == pytest.approx(np.sqrt(0.5))


def test_first_moment_oracle(rng):
    for _ in range(20):
        s, k, c = _problem(rng, power=2)
        sol = solve_first_moment(s, k, c)
        _, obj = projected_gradient(s, k, c, 2)
        assert sol.objective_value == pytest.approx(obj, rel=1e-6)


def test_first_moment_kkt_and_slackness(rng):
    for _ in range(50):
        s, k, c = _problem(rng, power=2)
        sol = solve_first_moment(s, k, c)
        scale = max(1.0, float(np.max(k * s)))
        assert sol.kkt_residual() <= 1e-9 * scale
        assert sol.constraint_active and sol.gamma > 0
        assert abs(np.sum(sol.sigma_star ** 2) - c) <= 1e-8 * c
        assert np.all((0 <= sol.sigma_star) & (sol.sigma_star <= s))


# --- second-moment solver ------------------------------------------------------

def test_second_moment_slack():
    sol = solve_second_moment([1.0, 0.5], [1.0, 1.0], 5.0)
    assert sol.gamma == 0.0 and np.array_equal(sol.sigma_star, [1.0, 0.5])


def test_second_moment_oracle(rng):
    for _ in range(20):
        s, k, c = _problem(rng, power=4)
        sol = solve_second_moment(s, k, c)
        _, obj = projected_gradient(s, k, c, 4)
        assert sol.objective_value == pytest.approx(obj, rel=1e-6)


def test_second_moment_kkt_and_slackness(rng):
    for _ in range(50):
        s, k, c = _problem(rng, power=4)
        sol = solve_second_moment(s, k, c)
        scale = max(1.0, float(np.max(k * s)))
        assert sol.kkt_residual() <= 1e-9 * scale
        assert abs(np.sum(sol.sigma_star ** 4) - c) <= 1e-8 * c
        assert np.all((0 <= sol.sigma_star) & (sol.sigma_star <= s))


def test_cubic_closed_form_residual():
    for s, k, g in [(2.0, 1.0, 0.5), (1.0, 3.0, 10.0), (0.3, 1e-3, 1e3)]:
        t = cubic_shrink(s, k, g)
        assert abs(cubic_residual(s, k, g, t)) <= 1e-9 * max(k * s, 1.0)
        t2 = cubic_shrink_cardano(s, k, g)
        assert abs(cubic_residual(s, k, g, t2)) <= 1e-9 * max(k * s, 1.0)


def test_cubic_forms_agree_with_bisection(rng):
    for _ in range(300):
        s, k, g = 10.0 ** rng.uniform(-1, 1, size=3)
        b = cubic_shrink_bisect(s, k, g)
        assert cubic_shrink(s, k, g) == pytest.approx(b, abs=1e-9)
        assert cubic_shrink_cardano(s, k, g) == pytest.approx(b, abs=1e-9)


def test_cardano_outside_domain():
    with pytest.raises(NumericalError):
        cubic_shrink_cardano(1.0, 1.0, 0.0)


def test_cubic_shrink_gamma_zero_is_identity():
    assert cubic_shrink(1.5, 2.0, 0.0) == 1.5


def test_cubic_shrink_tiny_gamma():
    # k / gamma large enough that a naive cube of the scaled curvature overflows
    assert cubic_shrink(1.0, 1.0, 1e-150) == pytest.approx(1.0)
    assert cubic_shrink(1.0, 1.0, 1e-6) == pytest.approx(cubic_shrink_bisect(1.0, 1.0, 1e-6),
                                                          abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(s=st.floats(0.01, 10), k=st.floats(0.01, 10), g1=st.floats(0, 100), g2=st.floats(0, 100))
def test_shrinkage_monotone_in_gamma(s, k, g1, g2):
    lo, hi = sorted((g1, g2))
    assert cubic_shrink(s, k, hi) <= cubic_shrink(s, k, lo) + 1e-12
    assert 0 <= cubic_shrink(s, k, hi) <= s
    first = lambda g: s * k / (k + g)  # noqa: E731
    assert first(hi) <= first(lo)


# --- layer updates -------------------------------------------------------------

def _layer_data(rng, n=6, m=5):
    X1 = rng.normal(size=(40, n)) @ rng.normal(size=(n, n)) / np.sqrt(n)
    X2 = 1.5 * rng.normal(size=(30, n)) + rng.normal(size=n)
    return X1, X2, np.vstack([X1, X2]), rng.normal(size=(m, n))


def test_first_moment_layer_inactive_roundtrip(rng):
    X1, X2, X, W = _layer_data(rng)
    res = shrink_layer_first_moment(W, X, X1.mean(0), X2.mean(0), budget=1e12)
    assert np.linalg.norm(res.W - W) <= 1e-8 * np.linalg.norm(W)


def test_first_moment_layer_budget(rng):
    for _ in range(10):
        X1, X2, X, W = _layer_data(rng)
        m1, m2 = X1.mean(0), X2.mean(0)
        res = shrink_layer_first_moment(W, X, m1, m2, eps=1e-5, ce_tilde=20.0)
        c = res.solution.budget
        s_new = thin_svd(res.W @ build_first_moment_transform(m1, m2, 1e-5).S).s
        assert d_e_squared(m1, m2, res.W) <= np.sum(s_new ** 2) <= c * (1 + 1e-8)
        # drift in the outputs equals the solver's objective value
        drift = np.sum((X @ res.W.T - X @ W.T) ** 2)
        assert drift == pytest.approx(res.solution.objective_value, rel=1e-8)


def test_first_moment_layer_tiny_budget(rng):
    X1, X2, X, W = _layer_data(rng)
    m1, m2 = X1.mean(0), X2.mean(0)
    c = 1e-10
    res = shrink_layer_first_moment(W, X, m1, m2, budget=c)
    assert d_e_squared(m1, m2, res.W) <= c * (1 + 1e-6)
    gap = np.linalg.norm((m1 - m2) @ res.W.T)
    assert gap <= np.sqrt(c) * (1 + 1e-6)


def test_second_moment_layer_inactive_row_space(rng):
    X1, X2, X, W = _layer_data(rng)
    res = shrink_layer_second_moment(W, X, X1, X2, budget=1e12)
    assert np.allclose(res.W, W, atol=1e-8 * np.linalg.norm(W))


def test_second_moment_layer_identical_groups(rng):
    X = rng.normal(size=(30, 4))
    W = rng.normal(size=(3, 4))
    res = shrink_layer_second_moment(W, X, X, X.copy(), cv_tilde=150.0)
    assert res.skipped
    assert np.array_equal(res.W, W)


def test_second_moment_layer_budget(rng):
    for _ in range(10):
        X1, X2, X, W = _layer_data(rng)
        res = shrink_layer_second_moment(W, X, X1, X2, cv_tilde=50.0)
        c = res.solution.budget
        s_new = thin_svd(res.W @ build_second_moment_transform(build_M(X1, X2)).S).s
        assert d_v_squared(X1, X2, res.W) <= np.sum(s_new ** 4) * (1 + 1e-9) <= c * (1 + 1e-8)
        drift = np.sum((X @ res.W.T - X @ W.T) ** 2)
        assert drift == pytest.approx(res.solution.objective_value, rel=1e-8)


def test_second_moment_layer_rank_deficient_M(rng):
    # groups differ in covariance along two of five directions only
    Z = rng.normal(size=(400, 5))
    Z -= Z.mean(0)
    X1 = Z @ np.linalg.inv(np.linalg.cholesky(np.cov(Z, rowvar=False))).T
    X2 = X1 * np.array([2.0, 2.0, 1.0, 1.0, 1.0])
    W = rng.normal(size=(3, 5))
    tr = build_second_moment_transform(build_M(X1, X2))
    assert tr.rank == 2
    res = shrink_layer_second_moment(W, np.vstack([X1, X2]), X1, X2, cv_tilde=100.0)
    assert d_v_squared(X1, X2, res.W) <= res.solution.budget * (1 + 1e-8)


# --- pipeline --------------------------------------------------------------------

def _gaussian_model(rng, hidden=(12, 10)):
    X1 = rng.normal(size=(150, 4))
    X2 = 1.7 * rng.normal(size=(120, 4)) + 0.8
    model = MLP.init(4, hidden, 1, seed=3)
    return model, X1, X2


def test_esvdfair_layer_reduces_both_gaps(rng):
    model, X1, X2 = _gaussian_model(rng)
    new, rep = esvdfair_layer(model, 1, X1, X2, ce_tilde=15, cv_tilde=150)
    assert rep["after"]["d_e_squared"] < rep["before"]["d_e_squared"]
    assert rep["after"]["d_v_squared"] < rep["before"]["d_v_squared"]
    for i in (0, 2):
        assert np.array_equal(new.layers[i], model.layers[i])
    assert not np.array_equal(new.layers[1], model.layers[1])


def test_esvdfair_layer_ratio_one_is_noop(rng):
    model, X1, X2 = _gaussian_model(rng)
    new, _ = esvdfair_layer(model, 1, X1, X2, ce_tilde=1.0, cv_tilde=1.0)
    assert np.allclose(new.layers[1], model.layers[1], atol=1e-10)


def test_esvdfair_layer_identical_groups(rng):
    model, X1, _ = _gaussian_model(rng)
    new, rep = esvdfair_layer(model, 0, X1, X1.copy(), ce_tilde=15, cv_tilde=150)
    # both gaps are already zero, so both stages are skipped
    assert np.array_equal(new.layers[0], model.layers[0])
    assert rep["second_moment"] is None and rep["first_moment"] is None


def test_esvdfair_layer_budget_bounds(rng):
    model, X1, X2 = _gaussian_model(rng)
    _, rep = esvdfair_layer(model, 1, X1, X2, ce_tilde=15, cv_tilde=150)
    fm, sm = rep["first_moment"], rep["second_moment"]
    assert rep["after"]["d_e_squared"] <= fm["budget"] * (1 + 1e-8)
    assert np.sum(np.asarray(sm["sigma_after"]) ** 4) <= sm["budget"] * (1 + 1e-8)


def test_esvdfair_rejects_output_layer(rng):
    model, X1, X2 = _gaussian_model(rng)
    with pytest.raises(ConfigError):
        esvdfair_layer(model, 2, X1, X2)


def test_adjustment_inactive_least_squares(rng):
    model, X1, X2 = _gaussian_model(rng)
    X = np.vstack([X1, X2])
    groups = np.r_[np.ones(len(X1)), 2 * np.ones(len(X2))].astype(int)
    y = X @ rng.normal(size=4)
    cfg = FairnessConfig(ce_tilde=1.0, cv_tilde=1.0, mode="least-squares")
    new, rep = esvdfair_with_adjustment(model, X, y, groups, cfg)
    XL = model.layer_input(X, 2)
    w = least_squares_refit(XL, y)
    assert np.mean((new.forward(X) - y) ** 2) == pytest.approx(np.mean((XL @ w.ravel() - y) ** 2),
                                                               rel=1e-8, abs=1e-14)
    assert rep["mode"] == "least-squares"


def test_adjustment_modifies_exactly_two_layers(rng):
    model, X1, X2 = _gaussian_model(rng, hidden=(8, 8, 8))
    X = np.vstack([X1, X2])
    groups = np.r_[np.ones(len(X1)), 2 * np.ones(len(X2))].astype(int)
    y = np.sin(X[:, 0]) + X[:, 1]
    for mode in ("least-squares", "fine-tune"):
        new, _ = esvdfair_with_adjustment(model, X, y, groups,
                                          FairnessConfig(mode=mode, fine_tune_epochs=3))
        changed = [i for i in range(4) if not np.array_equal(new.layers[i], model.layers[i])]
        assert changed == [2, 3]


def test_fairness_config_validation():
    with pytest.raises(ConfigError):
        FairnessConfig(ce_tilde=0).validate()
    with pytest.raises(ConfigError):
        FairnessConfig(mode="nope").validate()
    with pytest.raises(ConfigError):
        FairnessConfig(layer=4).validate(5)
    FairnessConfig(layer=3).validate(5)

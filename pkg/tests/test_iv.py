import numpy as np
import pytest

from vmtaccess.iv import (
    F_CAP,
    OrderConditionError,
    first_stage,
    iv_tobit_two_step,
    sargan_test,
    two_sls,
    weak_instrument_share,
)
from vmtaccess.regress import EstimationError, RankDeficiencyError, ols_fit, tobit_fit

from conftest import linear_iv_dgp


def ssr(A, b):
    coef = np.linalg.solve(A.T @ A, A.T @ b)
    e = b - A @ coef
    return float(e @ e)


def test_perfect_instrument_caps_F(rng):
    _, w, C, _ = linear_iv_dgp(rng, 200)
    (fs,) = first_stage(w, w, C)
    assert fs.F == F_CAP and not fs.weak
    assert fs.r2 == pytest.approx(1.0)


def test_F_matches_hand_ssr():
    # fixed small fixture
    w = np.array([1.0, 3.0, 2.0, 5.0, 4.0, 6.0, 8.0, 7.0, 9.0, 12.0])
    Z = np.array([[0.5, 1.0], [1.5, 0.0], [1.0, 1.0], [2.5, 0.0], [2.0, 2.0],
                  [3.5, 1.0], [4.0, 0.0], [3.0, 2.0], [5.0, 1.0], [6.5, 0.0]])
    C = np.column_stack([np.ones(10), [1, 0, 1, 0, 1, 0, 1, 0, 1, 0]])
    (fs,) = first_stage(w, Z, C)
    ssr_u = ssr(np.hstack([Z, C]), w)
    ssr_r = ssr(C, w)
    expect = ((ssr_r - ssr_u) / 2) / (ssr_u / (10 - 2 - 2))
    assert fs.F == pytest.approx(expect, rel=1e-10)
    assert (fs.df_num, fs.df_denom) == (2, 6)


def test_first_stage_errors(rng):
    y, w, C, Z = linear_iv_dgp(rng, 100)
    with pytest.raises(OrderConditionError):
        first_stage(np.column_stack([w, w**2]), Z[:, :1], C)
    with pytest.raises(RankDeficiencyError):
        first_stage(w, np.column_stack([Z[:, 0], Z[:, 0]]), C)


def test_weak_instruments_flagged():
    rng = np.random.default_rng(99)
    fits, Fs = [], []
    for _ in range(200):
        n = 2000
        Z = rng.normal(size=(n, 1))
        w = rng.normal(size=n)
        (fs,) = first_stage(w, Z, np.ones((n, 1)))
        fits.append(fs)
        Fs.append(fs.F)
    assert abs(np.mean(Fs) - 1.0) < 0.3
    assert weak_instrument_share(fits) > 0.95


def test_iv_ratio_exactly_identified(rng):
    n = 500
    z = rng.normal(size=n)
    v = rng.normal(size=n)
    w = 0.8 * z + v
    y = 2.0 + 1.5 * w + 0.7 * v + rng.normal(size=n)
    fit = two_sls(y, w, np.ones((n, 1)), z)
    zc, wc, yc = z - z.mean(), w - w.mean(), y - y.mean()
    assert fit.params[0] == pytest.approx((zc @ yc) / (zc @ wc), rel=1e-8)
    with pytest.raises(EstimationError, match="exactly identified"):
        sargan_test(fit, z, np.ones((n, 1)))


def test_identical_instruments_reproduce_ols(rng):
    y, w, C, _ = linear_iv_dgp(rng, 400)
    fit = two_sls(y, w, C, w)
    ols = ols_fit(np.column_stack([w, C]), y)
    np.testing.assert_allclose(fit.params, ols.params, rtol=1e-8)
    np.testing.assert_allclose(fit.cov, ols.cov, rtol=1e-6)


def test_2sls_covariance_oracle(rng):
    y, w, C, Z = linear_iv_dgp(rng, 300)
    fit = two_sls(y, w, C, Z)
    X = np.column_stack([w, C])
    ZC = np.hstack([Z, C])
    P = ZC @ np.linalg.solve(ZC.T @ ZC, ZC.T)
    b = np.linalg.solve(X.T @ P @ X, X.T @ P @ y)
    np.testing.assert_allclose(fit.params, b, rtol=1e-8)
    u = y - X @ b
    np.testing.assert_allclose(fit.resid, u, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(fit.cov_classical, np.linalg.inv(X.T @ P @ X) * (u @ u) / 300, rtol=1e-8)


def test_sargan_invariant_to_instrument_recombination(rng):
    y, w, C, Z = linear_iv_dgp(rng, 500)
    A = np.array([[2.0, 1.0, 0.0], [0.5, -1.0, 3.0], [1.0, 0.0, 1.0]])
    a = sargan_test(two_sls(y, w, C, Z), Z, C)
    Z2 = Z @ A
    b = sargan_test(two_sls(y, w, C, Z2), Z2, C)
    assert b.statistic == pytest.approx(a.statistic, rel=1e-8)
    assert a.dof == 2


def test_2sls_matches_ols_without_endogeneity():
    rng = np.random.default_rng(5)
    inside = 0
    for _ in range(100):
        y, w, C, Z = linear_iv_dgp(rng, 1000, rho=0.0)
        iv = two_sls(y, w, C, Z)
        ols = ols_fit(np.column_stack([w, C]), y)
        inside += abs(iv.params[0] - ols.params[0]) < 2 * iv.bse[0]
    assert inside >= 95


def test_2sls_recovers_truth_under_confounding():
    rng = np.random.default_rng(6)
    inside, ols_bias = 0, []
    for _ in range(100):
        y, w, C, Z = linear_iv_dgp(rng, 1000, rho=0.8)
        iv = two_sls(y, w, C, Z)
        inside += abs(iv.params[0] - 1.0) < 3 * iv.bse[0]
        ols_bias.append(ols_fit(np.column_stack([w, C]), y).params[0] - 1.0)
    assert inside >= 95
    assert np.mean(ols_bias) > 0.1


def _censored(y):
    return np.maximum(0.0, y)


def test_iv_tobit_with_identical_instruments_is_tobit(rng):
    y, w, C, _ = linear_iv_dgp(rng, 800)
    yc = _censored(y)
    fit = iv_tobit_two_step(yc, w, C, w, ["acc"], ["const", "c"], bootstrap_reps=0)
    ref = tobit_fit(np.column_stack([w, C]), yc, ["acc", "const", "c"])
    np.testing.assert_allclose(fit.params, ref.params, rtol=1e-8)
    assert fit.second_stage.sigma == pytest.approx(ref.sigma, rel=1e-8)
    assert fit.bootstrap_se is None
    assert fit.sargan is None


def test_bootstrap_is_reproducible(rng):
    y, w, C, Z = linear_iv_dgp(rng, 400)
    yc = _censored(y)
    a = iv_tobit_two_step(yc, w, C, Z, bootstrap_reps=20, seed=3)
    b = iv_tobit_two_step(yc, w, C, Z, bootstrap_reps=20, seed=3)
    c = iv_tobit_two_step(yc, w, C, Z, bootstrap_reps=20, seed=4)
    assert a.bootstrap_se.tobytes() == b.bootstrap_se.tobytes()
    assert not np.array_equal(a.bootstrap_se, c.bootstrap_se)
    assert (a.bootstrap_se > 0).all()
    d = a.to_dict()
    assert d["bootstrap"] == {"reps": 20, "seed": 3, "redraws": 0}
    assert d["first_stage"][0]["F"] > 10
    assert set(d["sargan"]) == {"stat", "dof", "p"}
    assert "naive_se" in d and "bootstrap_se" in d


def test_bootstrap_redraws_degenerate_resamples():
    # one censored row: many resamples miss it and must be redrawn
    rng = np.random.default_rng(11)
    n = 30
    y, w, C, Z = linear_iv_dgp(rng, n)
    y = np.abs(y) + 5.0
    y[0] = 0.0
    fit = iv_tobit_two_step(y, w, C, Z, bootstrap_reps=10, seed=1)
    assert fit.redraws > 0
    assert np.isfinite(fit.bootstrap_se).all()


def test_iv_tobit_order_condition(rng):
    y, w, C, Z = linear_iv_dgp(rng, 100)
    with pytest.raises(OrderConditionError):
        iv_tobit_two_step(_censored(y), np.column_stack([w, Z[:, 0] + w]), C, Z[:, :1], bootstrap_reps=0)

import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vmtaccess.effects import (
    elasticity,
    expected_vmt,
    marginal_effect,
    norm_cdf,
    scenario_vmt_change,
)
from vmtaccess.regress import TobitFit, tobit_fit

from conftest import tobit_dgp

PHI = NormalDist().cdf


def make_fit(params, sigma, names=None, censor_point=0.0):
    p = len(params)
    return TobitFit(
        params=np.asarray(params, dtype=float),
        sigma=float(sigma),
        cov=np.eye(p + 1),
        llf=0.0,
        n=3,
        n_censored=0,
        names=list(names or ["const", "acc", "veh"][:p]),
        iterations=0,
        grad_norm=0.0,
        converged=True,
        censor_point=censor_point,
    )


# three households: design rows, access, VMT
X3 = np.array([[1.0, 2.0, 1.0], [1.0, 0.5, 2.0], [1.0, 4.0, 0.0]])
VMT3 = np.array([12.0, 30.0, 5.0])
FIT3 = make_fit([10.0, -1.3, 6.0], 20.0)


def test_three_row_hand_fixture():
    b, s = (10.0, -1.3, 6.0), 20.0
    terms = []
    for (c, a, v), y in zip(X3, VMT3):
        xb = b[0] * c + b[1] * a + b[2] * v
        terms.append(PHI(xb / s) * b[1] * a / y)
    hand = sum(terms) / 3
    e = elasticity(FIT3, X3, VMT3, "acc")
    assert e.value == pytest.approx(hand, rel=1e-10, abs=1e-12)
    assert e.n_used == 3 and e.policy == "observed"


def test_zero_vmt_rows_excluded():
    y = VMT3.copy()
    y[1] = 0.0
    e = elasticity(FIT3, X3, y, "acc")
    assert e.n_used + 1 == 3
    keep = [0, 2]
    hand = sum(PHI(X3[i] @ FIT3.params / 20) * -1.3 * X3[i, 1] / y[i] for i in keep) / 2
    assert e.value == pytest.approx(hand, rel=1e-10)
    with pytest.raises(ValueError):
        elasticity(FIT3, X3, np.zeros(3), "acc")


def test_predicted_policy_denominator():
    e = elasticity(FIT3, X3, np.zeros(3), "acc", policy="predicted")
    terms = []
    for row in X3:
        xb = row @ FIT3.params
        z = xb / 20
        ey = PHI(z) * xb + 20 * NormalDist().pdf(z)
        terms.append(PHI(z) * -1.3 * row[1] / ey)
    assert e.value == pytest.approx(sum(terms) / 3, rel=1e-10)
    assert e.n_used == 3 and e.policy == "predicted"
    with pytest.raises(ValueError):
        elasticity(FIT3, X3, VMT3, "acc", policy="median")


def test_zero_coefficient_gives_zero():
    fit = make_fit([10.0, 0.0, 6.0], 20.0)
    assert elasticity(fit, X3, VMT3, "acc").value == 0.0
    assert elasticity(fit, X3, VMT3, "acc", policy="predicted").value == 0.0
    assert (marginal_effect(fit, X3, "acc") == 0).all()


def test_marginal_effect_limits_and_errors():
    fit = make_fit([1e4, -1.3, 0.0], 1.0)
    assert marginal_effect(fit, [1.0, 1.0, 1.0], "acc") == -1.3
    assert marginal_effect(fit, {"const": 1.0, "acc": 0.0, "veh": 0.0}, "acc") == -1.3
    with pytest.raises(KeyError):
        marginal_effect(fit, [1.0, 1.0, 1.0], "income")
    with pytest.raises(KeyError):
        elasticity(fit, X3, VMT3, "income")
    with pytest.raises(ValueError):
        marginal_effect(fit, [1.0, 1.0], "acc")


def test_marginal_effect_is_derivative_of_expected_vmt(rng):
    # the derivative of E[y] = Phi(z) xb + sigma phi(z) w.r.t. x_acc
    for _ in range(20):
        fit = make_fit(rng.normal(0, 3, 3), rng.uniform(0.5, 5))
        x = np.r_[1.0, rng.normal(0, 1, 2)]
        h = 1e-6
        e = np.array([0.0, h, 0.0])
        fd = (expected_vmt(fit, x + e) - expected_vmt(fit, x - e)) / (2 * h)
        assert marginal_effect(fit, x, "acc") == pytest.approx(float(fd), rel=1e-6, abs=1e-9)


@given(st.floats(-50, 50), st.floats(-5, 5), st.floats(0.1, 10))
def test_attenuation_and_sign(xb, b, s):
    fit = make_fit([xb, b], s, ["const", "acc"])
    me = marginal_effect(fit, [1.0, 0.0], "acc")
    assert abs(me) <= abs(b)
    if b != 0 and abs(xb / s) < 8:
        assert abs(me) < abs(b)
        assert np.sign(me) == np.sign(b)


def test_norm_cdf_accuracy():
    z = np.linspace(-8, 8, 321)
    ref = np.array([PHI(v) for v in z])
    assert np.max(np.abs(norm_cdf(z) - ref)) < 1e-12


def test_sign_consistency_on_fitted_model(rng):
    X, y = tobit_dgp(rng, 2000)
    acc = np.abs(X[:, 1]) + 0.1
    X = np.column_stack([X[:, 0], acc, X[:, 2]])
    y = np.maximum(0.0, X @ [2.0, 1.5, -0.8] + 3 * rng.standard_normal(2000))
    fit = tobit_fit(X, y, ["const", "acc", "z"])
    e = elasticity(fit, X, y, "acc")
    assert np.sign(e.value) == np.sign(fit.coef("acc"))
    assert e.n_used + int((y == 0).sum()) == 2000


def test_expected_vmt_with_shifted_censor_point():
    fit0 = make_fit([3.0, 1.0], 2.0, ["const", "acc"])
    fit5 = make_fit([8.0, 1.0], 2.0, ["const", "acc"], censor_point=5.0)
    X = np.array([[1.0, 0.0], [1.0, -4.0], [1.0, 2.5]])
    np.testing.assert_allclose(expected_vmt(fit5, X), expected_vmt(fit0, X) + 5.0, rtol=1e-12)


def test_scenarios():
    r = scenario_vmt_change(-0.155, 100.0)
    assert r["pct_change_in_vmt"] == pytest.approx(-15.5, abs=1e-12)
    assert round(abs(r["pct_change_in_vmt"])) == 16
    assert "approximation" in r["approximation"]
    assert scenario_vmt_change(0.0, 37.0)["pct_change_in_vmt"] == 0.0
    assert scenario_vmt_change(-0.2, 10.0)["pct_change_in_vmt"] == pytest.approx(-2.0, abs=1e-12)
    e = elasticity(FIT3, X3, VMT3, "acc")
    assert scenario_vmt_change(e, 50.0)["pct_change_in_vmt"] == pytest.approx(50 * e.value)
    assert not math.isnan(e.value)

"""Tobit marginal effects, VMT elasticities and constant-elasticity scenarios."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .regress import TobitFit

POLICIES = ("observed", "predicted")


def norm_cdf(z):
    """Standard normal CDF through the complementary error function."""
    return 0.5 * special.erfc(-np.asarray(z, dtype=float) / math.sqrt(2.0))


def norm_pdf(z):
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _row_vector(fit: TobitFit, row) -> np.ndarray:
    if isinstance(row, dict):
        return np.array([float(row[nm]) for nm in fit.names])
    x = np.asarray(row, dtype=float)
    if x.shape[-1] != len(fit.names):
        raise ValueError(f"row has {x.shape[-1]} entries, fit has {len(fit.names)}")
    return x


def marginal_effect(fit: TobitFit, row, var: str):
    """``Phi(x'b / sigma) * b_var``: effect of ``var`` on expected observed VMT.

    ``row`` is a design row (or a 2-D block of rows) in the fit's column
    order, or a mapping from coefficient name to value.
    """
    b = fit.coef(var)
    x = _row_vector(fit, row)
    z = (x @ fit.params - fit.censor_point) / fit.sigma
    me = norm_cdf(z) * b
    return float(me) if np.ndim(me) == 0 else me


def expected_vmt(fit: TobitFit, X) -> np.ndarray:
    """Unconditional mean of the response censored at ``fit.censor_point``."""
    xb = np.asarray(X, dtype=float) @ fit.params
    c = fit.censor_point
    z = (xb - c) / fit.sigma
    cdf = norm_cdf(z)
    return cdf * xb + fit.sigma * norm_pdf(z) + (1.0 - cdf) * c


@dataclass(frozen=True)
class ElasticityEstimate:
    variable: str
    value: float
    n_used: int
    policy: str

    def to_dict(self) -> dict:
        return {
            "variable": self.variable,
            "elasticity": self.value,
            "n_used": self.n_used,
            "policy": self.policy,
        }


def elasticity(
    fit: TobitFit, X, y, var: str, access=None, policy: str = "observed"
) -> ElasticityEstimate:
    """Average of ``me_i * access_i / VMT_i`` over households.

    Parameters
    ----------
    fit : TobitFit
    X : array (n, p)
        Design rows in the fit's column order.
    y : array (n,)
        Observed VMT.
    var : str
        Coefficient name of the access measure.
    access : array (n,), optional
        Access values; defaults to the ``var`` column of ``X``. Pass the
        observed regressor when ``X`` holds first-stage fitted values.
    policy : {"observed", "predicted"}
        ``"observed"`` averages over households with positive VMT only.
        ``"predicted"`` uses every household with the model-implied expected
        VMT in the denominator.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    pos = fit.names.index(var) if var in fit.names else None
    if pos is None:
        raise KeyError(f"{var!r} is not a fitted coefficient")
    acc = X[:, pos] if access is None else np.asarray(access, dtype=float)
    if len(y) == 0:
        raise ValueError("empty sample")
    if policy == "observed":
        keep = y > 0
        if not keep.any():
            raise ValueError("no household with positive VMT for the elasticity")
        me = marginal_effect(fit, X[keep], var)
        terms = me * acc[keep] / y[keep]
    else:
        keep = np.ones(len(y), dtype=bool)
        me = marginal_effect(fit, X, var)
        terms = me * acc / expected_vmt(fit, X)
    value = math.fsum(np.atleast_1d(terms)) / int(keep.sum())
    return ElasticityEstimate(var, float(value), int(keep.sum()), policy)


def scenario_vmt_change(e: ElasticityEstimate | float, pct_change_in_access: float) -> dict:
    """Percent VMT change implied by a percent change in access."""
    value = e.value if isinstance(e, ElasticityEstimate) else float(e)
    return {
        "elasticity": value,
        "pct_change_in_access": float(pct_change_in_access),
        "pct_change_in_vmt": value * float(pct_change_in_access),
        "approximation": "constant-elasticity linear approximation",
    }

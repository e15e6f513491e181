"""OLS and left-censored (Tobit) regression of household VMT.

The Tobit likelihood is maximised with Newton's method in Olsen's
parameterisation ``theta = beta / sigma``, ``gamma = 1 / sigma``, where it is
globally concave. Covariances are heteroskedasticity-robust sandwiches by
default.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, special, stats

logger = logging.getLogger(__name__)

HOUSEHOLD_COLUMNS = (
    "vmt",
    "vehicles",
    "income_cat",
    "hh_size",
    "tract_density",
    "cell_q",
    "cell_r",
    "urban_core",
)
N_INCOME = 10
CONTROL_BASE = ("vehicles", "hh_size", "tract_density")


class EstimationError(RuntimeError):
    """Raised when a model cannot be estimated on the given data."""


class RankDeficiencyError(EstimationError):
    pass


# ---------------------------------------------------------------------------
# household data


@dataclass
class HouseholdSample:
    data: pd.DataFrame
    n_read: int
    n_dropped_outlier: int
    n_dropped_missing: int
    outlier_cap: float

    @property
    def n(self) -> int:
        return len(self.data)

    @property
    def censored_share(self) -> float:
        return float((self.data["vmt"] == 0).mean())

    def subset(self, mask) -> "HouseholdSample":
        return HouseholdSample(
            self.data.loc[np.asarray(mask, dtype=bool)].reset_index(drop=True),
            self.n_read,
            self.n_dropped_outlier,
            self.n_dropped_missing,
            self.outlier_cap,
        )

    def report(self) -> dict:
        return {
            "n_read": self.n_read,
            "n_retained": self.n,
            "n_dropped_outlier": self.n_dropped_outlier,
            "n_dropped_missing": self.n_dropped_missing,
            "censored_share": self.censored_share,
            "outlier_cap": self.outlier_cap,
        }


def load_households(path: str | Path | pd.DataFrame, outlier_cap: float = 200.0) -> HouseholdSample:
    """Read and clean a household file.

    Rows with VMT above ``outlier_cap`` are dropped first, then rows missing
    any modelled field. Both counts are kept on the returned sample.
    """
    df = path.copy() if isinstance(path, pd.DataFrame) else pd.read_csv(path)
    missing = [c for c in HOUSEHOLD_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"household file is missing column {missing[0]!r}")
    n_read = len(df)
    over = df["vmt"] > outlier_cap
    df = df.loc[~over]
    complete = df[list(HOUSEHOLD_COLUMNS)].notna().all(axis=1)
    n_missing = int((~complete).sum())
    df = df.loc[complete].reset_index(drop=True)
    if len(df) == 0:
        raise ValueError("no households retained after filtering")
    if (df["vmt"] < 0).any():
        raise ValueError("household VMT must be nonnegative")
    inc = df["income_cat"].astype(int)
    if ((inc < 1) | (inc > N_INCOME)).any():
        raise ValueError(f"income_cat must lie in 1..{N_INCOME}")
    df["income_cat"] = inc
    df["cell_q"] = df["cell_q"].astype(int)
    df["cell_r"] = df["cell_r"].astype(int)
    df["urban_core"] = df["urban_core"].astype(int)
    sample = HouseholdSample(df, n_read, int(over.sum()), n_missing, float(outlier_cap))
    logger.info(
        "households: read %d, dropped %d over cap, %d incomplete; %.1f%% zero VMT",
        n_read, sample.n_dropped_outlier, n_missing, 100 * sample.censored_share,
    )
    return sample


def attach_access(sample: HouseholdSample, access: pd.DataFrame) -> HouseholdSample:
    """Join per-cell access columns onto households by residence cell."""
    cols = [c for c in access.columns if c not in ("cell_q", "cell_r")]
    base = sample.data.drop(columns=[c for c in cols if c in sample.data.columns])
    merged = base.merge(access, on=["cell_q", "cell_r"], how="left", validate="many_to_one")
    if merged[cols].isna().any().any():
        bad = merged.loc[merged[cols].isna().any(axis=1), ["cell_q", "cell_r"]].iloc[0]
        raise ValueError(f"household cell ({bad.cell_q}, {bad.cell_r}) has no access values")
    return HouseholdSample(
        merged, sample.n_read, sample.n_dropped_outlier, sample.n_dropped_missing, sample.outlier_cap
    )


def control_columns(df: pd.DataFrame) -> tuple[np.ndarray, list[str]]:
    """Vehicles, nine income dummies (category 1 omitted), size, density."""
    names = ["vehicles"]
    cols = [df["vehicles"].to_numpy(float)]
    inc = df["income_cat"].to_numpy()
    for c in range(2, N_INCOME + 1):
        names.append(f"income_{c}")
        cols.append((inc == c).astype(float))
    for c in ("hh_size", "tract_density"):
        names.append(c)
        cols.append(df[c].to_numpy(float))
    return np.column_stack(cols), names


def design_matrix(
    df: pd.DataFrame, regressors: Sequence[str], controls: bool = True
) -> tuple[np.ndarray, list[str]]:
    """``[1, regressors..., controls...]`` with matching column names."""
    names = ["const"] + list(regressors)
    cols = [np.ones(len(df))] + [df[c].to_numpy(float) for c in regressors]
    X = np.column_stack(cols)
    if controls:
        C, cnames = control_columns(df)
        X = np.hstack([X, C])
        names += cnames
    return X, names


def _drop_constant_dummies(X: np.ndarray, names: list[str]) -> tuple[np.ndarray, list[str]]:
    keep = [
        k for k, nm in enumerate(names)
        if not (nm.startswith("income_") and not X[:, k].any())
    ]
    return X[:, keep], [names[k] for k in keep]


def check_rank(X: np.ndarray, names: Sequence[str] | None = None) -> None:
    """Raise naming the first column that is a combination of earlier ones."""
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if names is None:
        names = [f"x{k}" for k in range(p)]
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    for k in range(p):
        if not X[:, k].any():
            raise RankDeficiencyError(f"design column {names[k]!r} is identically zero")
    if n < p:
        raise RankDeficiencyError(f"design has more columns ({p}) than rows ({n})")
    # |R_kk| of unit-norm columns is the distance of column k from the span
    # of the columns before it
    R = linalg.qr(Xs, mode="r", check_finite=False)[0]
    diag = np.abs(np.diag(R))
    tol = 1e-10 * max(n, p) ** 0.5
    bad = np.flatnonzero(diag < tol)
    if bad.size:
        raise RankDeficiencyError(
            f"design is rank deficient: column {names[bad[0]]!r} is a linear "
            "combination of earlier columns"
        )


# ---------------------------------------------------------------------------
# OLS


@dataclass
class OlsFit:
    params: np.ndarray
    cov: np.ndarray
    resid: np.ndarray
    r2: float
    ssr: float
    n: int
    names: list[str]
    cov_type: str = "HC1"

    @property
    def bse(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def _lstsq(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    beta, *_ = linalg.lstsq(X, y, lapack_driver="gelsd")
    return beta


def ols_fit(
    X, y, names: Sequence[str] | None = None, cov_type: str = "HC1", check: bool = True
) -> OlsFit:
    """Least squares with a heteroskedasticity-robust covariance.

    ``cov_type`` is ``"HC1"`` (default, ``n / (n - p)`` scaled White),
    ``"HC0"`` or ``"classical"``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    names = list(names) if names is not None else [f"x{k}" for k in range(p)]
    if n <= p:
        raise EstimationError(
            f"need more observations than parameters for a covariance (n={n}, p={p})"
        )
    if check:
        check_rank(X, names)
    beta = _lstsq(X, y)
    resid = y - X @ beta
    ssr = float(resid @ resid)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ssr / tss if tss > 0 else 1.0
    XtX_inv = linalg.inv(X.T @ X)
    XtX_inv = 0.5 * (XtX_inv + XtX_inv.T)
    if cov_type == "classical":
        cov = XtX_inv * ssr / (n - p)
    elif cov_type in ("HC0", "HC1"):
        meat = (X * resid[:, None] ** 2).T @ X
        cov = XtX_inv @ meat @ XtX_inv
        if cov_type == "HC1":
            cov *= n / (n - p)
    else:
        raise ValueError(f"unknown cov_type {cov_type!r}")
    return OlsFit(beta, 0.5 * (cov + cov.T), resid, r2, ssr, n, names, cov_type)



# ---------------------------------------------------------------------------
# Tobit


@dataclass
class TobitFit:
    params: np.ndarray
    sigma: float
    cov: np.ndarray
    llf: float
    n: int
    n_censored: int
    names: list[str]
    iterations: int
    grad_norm: float
    converged: bool
    cov_type: str = "robust"
    censor_point: float = 0.0
    olsen_params: np.ndarray = field(default=None, repr=False)
    cov_classical: np.ndarray | None = field(default=None, repr=False)
    llf_path: list[float] = field(default_factory=list, repr=False)

    @property
    def bse(self) -> np.ndarray:
        """Standard errors of ``params`` followed by that of sigma."""
        return np.sqrt(np.diag(self.cov))

    @property
    def k(self) -> int:
        """Number of estimated parameters, sigma included."""
        return len(self.params) + 1

    def coef(self, name: str) -> float:
        return float(self.params[self._pos(name)])

    def se(self, name: str) -> float:
        return float(self.bse[self._pos(name)])

    def _pos(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"{name!r} is not a fitted coefficient") from None

    def to_dict(self) -> dict:
        bse = self.bse
        return {
            "coefficients": {nm: float(b) for nm, b in zip(self.names, self.params)},
            "robust_se" if self.cov_type == "robust" else "se": {
                nm: float(s) for nm, s in zip(self.names, bse[:-1])
            },
            "sigma": self.sigma,
            "sigma_se": float(bse[-1]),
            "log_likelihood": self.llf,
            "n": self.n,
            "n_censored": self.n_censored,
            "cov_type": self.cov_type,
            "convergence": {
                "iterations": self.iterations,
                "grad_norm": self.grad_norm,
                "converged": self.converged,
            },
        }


def _log_ndtr_and_mills(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """log Phi(a) and the inverse Mills ratio phi(a)/Phi(a), stable in both tails."""
    logcdf = special.log_ndtr(a)
    logpdf = -0.5 * a * a - 0.5 * math.log(2 * math.pi)
    return logcdf, np.exp(logpdf - logcdf)


class TobitLikelihood:
    """Left-censored Gaussian log-likelihood in Olsen parameters.

    ``params = (theta, gamma)`` with ``theta = beta / sigma`` and
    ``gamma = 1 / sigma``.
    """

    def __init__(self, X, y, censor_point: float = 0.0):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.c = float(censor_point)
        self.cens = self.y <= self.c
        self.Xc = self.X[self.cens]
        self.Xu = self.X[~self.cens]
        self.yu = self.y[~self.cens]

    def _split(self, params):
        params = np.asarray(params, dtype=float)
        return params[:-1], float(params[-1])

    def loglikeobs(self, params) -> np.ndarray:
        theta, gamma = self._split(params)
        out = np.empty(len(self.y))
        a = gamma * self.c - self.Xc @ theta
        out[self.cens] = special.log_ndtr(a)
        e = gamma * self.yu - self.Xu @ theta
        out[~self.cens] = math.log(gamma) - 0.5 * e * e - 0.5 * math.log(2 * math.pi)
        return out

    def loglike(self, params) -> float:
        if params[-1] <= 0:
            return -math.inf
        return float(self.loglikeobs(params).sum())

    def score_obs(self, params) -> np.ndarray:
        theta, gamma = self._split(params)
        n, p = self.X.shape
        g = np.empty((n, p + 1))
        a = gamma * self.c - self.Xc @ theta
        _, lam = _log_ndtr_and_mills(a)
        g[self.cens, :p] = -lam[:, None] * self.Xc
        g[self.cens, p] = lam * self.c
        e = gamma * self.yu - self.Xu @ theta
        g[~self.cens, :p] = e[:, None] * self.Xu
        g[~self.cens, p] = 1.0 / gamma - e * self.yu
        return g

    def score(self, params) -> np.ndarray:
        return self.score_obs(params).sum(axis=0)

    def hessian(self, params) -> np.ndarray:
        theta, gamma = self._split(params)
        p = self.X.shape[1]
        H = np.zeros((p + 1, p + 1))
        a = gamma * self.c - self.Xc @ theta
        _, lam = _log_ndtr_and_mills(a)
        # d2 log Phi(a) / da2 = -lam (a + lam); da = (-x, c)
        w = lam * (a + lam)
        Dc = np.hstack([-self.Xc, np.full((len(a), 1), self.c)])
        H -= (Dc * w[:, None]).T @ Dc
        Du = np.hstack([-self.Xu, self.yu[:, None]])
        H -= Du.T @ Du
        H[p, p] -= len(self.yu) / gamma**2
        return H


def _olsen_to_natural(olsen: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    theta, gamma = olsen[:-1], olsen[-1]
    p = len(theta)
    J = np.zeros((p + 1, p + 1))
    J[:p, :p] = np.eye(p) / gamma
    J[:p, p] = -theta / gamma**2
    J[p, p] = -1.0 / gamma**2
    return theta / gamma, 1.0 / gamma, J


def tobit_fit(
    X,
    y,
    names: Sequence[str] | None = None,
    censor_point: float = 0.0,
    cov_type: str = "robust",
    tol: float = 1e-8,
    ll_tol: float = 1e-10,
    maxiter: int = 200,
    check: bool = True,
) -> TobitFit:
    """Maximum-likelihood Tobit regression left-censored at ``censor_point``.

    Parameters
    ----------
    X : array (n, p)
        Design matrix including the intercept column.
    y : array (n,)
        Response; values at or below ``censor_point`` are censored.
    cov_type : {"robust", "classical"}
        Sandwich or inverse-information covariance.
    tol, ll_tol, maxiter
        Newton stops once the Olsen-space gradient norm falls below ``tol``,
        or the relative log-likelihood change falls below ``ll_tol`` after a
        full step.

    Returns
    -------
    TobitFit
        ``cov`` covers ``(beta, sigma)``.

    Raises
    ------
    EstimationError
        If every observation is censored, or Newton fails to converge.
    RankDeficiencyError
        If ``X`` does not have full column rank.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{k}" for k in range(p)]
    if y.shape != (n,):
        raise ValueError("X and y disagree on the number of observations")
    cens = y <= censor_point
    n_cens = int(cens.sum())
    if n_cens == n:
        raise EstimationError(
            "all observations are censored; the Tobit likelihood has no maximum"
        )
    if check:
        check_rank(X, names)
    if n_cens == 0:
        warnings.warn(
            "no censored observations; Tobit reduces to Gaussian linear regression",
            RuntimeWarning,
            stacklevel=2,
        )
    if cov_type not in ("robust", "classical"):
        raise ValueError(f"unknown cov_type {cov_type!r}")

    model = TobitLikelihood(X, y, censor_point)
    beta0 = _lstsq(X, y)
    resid = y - X @ beta0
    sigma0 = float(np.sqrt(resid @ resid / n))
    if not sigma0 > 0:
        sigma0 = float(np.std(y)) or 1.0
    params = np.append(beta0 / sigma0, 1.0 / sigma0)
    llf = model.loglike(params)
    path = [llf]
    converged = False
    grad = model.score(params)
    it = 0
    for it in range(1, maxiter + 1):
        H = model.hessian(params)
        try:
            step = linalg.solve(-H, grad, assume_a="pos")
        except linalg.LinAlgError as exc:
            raise EstimationError(f"Tobit Hessian is singular at iteration {it}") from exc
        # Newton decrement: the predicted log-likelihood gain of a full step.
        # On badly scaled data the gradient norm can floor above ``tol`` from
        # rounding alone while the decrement is already negligible.
        negligible = 0.5 * float(grad @ step) <= ll_tol * max(1.0, abs(llf))
        t = 1.0
        accepted = False
        for _ in range(50):
            cand = params + t * step
            if cand[-1] > 0:
                ll_new = model.loglike(cand)
                if ll_new >= llf:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            # no representable improvement left
            converged = negligible
            break
        ll_old = llf
        params, llf = cand, ll_new
        path.append(llf)
        grad = model.score(params)
        if negligible or float(np.linalg.norm(grad)) < tol:
            converged = True
            break
        if t == 1.0 and abs(llf - ll_old) <= ll_tol * max(1.0, abs(llf)):
            converged = True
            break
    gnorm = float(np.linalg.norm(grad))
    if not converged:
        raise EstimationError(
            f"Tobit Newton iterations did not converge in {maxiter} steps "
            f"(gradient norm {gnorm:.3g})"
        )

    H = model.hessian(params)
    Hinv = linalg.inv(-H)
    Hinv = 0.5 * (Hinv + Hinv.T)
    beta, sigma, J = _olsen_to_natural(params)
    cov_classical = J @ Hinv @ J.T
    if cov_type == "robust":
        S = model.score_obs(params)
        meat = S.T @ S
        V = Hinv @ meat @ Hinv * (n / (n - 1))
        cov = J @ V @ J.T
    else:
        cov = cov_classical
    cov = 0.5 * (cov + cov.T)
    return TobitFit(
        params=beta,
        sigma=float(sigma),
        cov=cov,
        llf=float(llf),
        n=n,
        n_censored=n_cens,
        names=names,
        iterations=it,
        grad_norm=gnorm,
        converged=converged,
        cov_type=cov_type,
        censor_point=float(censor_point),
        olsen_params=params,
        cov_classical=0.5 * (cov_classical + cov_classical.T),
        llf_path=path,
    )


# ---------------------------------------------------------------------------
# tests and reports


@dataclass(frozen=True)
class LRTest:
    statistic: float
    dof: int
    pvalue: float


def lr_test(full: TobitFit, restricted: TobitFit) -> LRTest:
    """Likelihood-ratio test of a nested restriction."""
    if full.n != restricted.n:
        raise ValueError(
            f"models were fitted on different samples (n={full.n} vs n={restricted.n})"
        )
    dof = full.k - restricted.k
    if dof < 0:
        raise ValueError("restricted model has more parameters than the full model")
    stat = max(0.0, 2.0 * (full.llf - restricted.llf))
    if dof == 0:
        return LRTest(stat, 0, 1.0)
    return LRTest(stat, dof, float(stats.chi2.sf(stat, dof)))


def joint_significance(fit: TobitFit, y) -> LRTest:
    """LR test that every slope is zero (intercept-only restriction)."""
    n = len(y)
    restricted = tobit_fit(
        np.ones((n, 1)), y, ["const"], censor_point=fit.censor_point, check=False
    )
    return lr_test(fit, restricted)


@dataclass
class StabilityReport:
    access: list[str]
    with_controls: dict[str, float]
    without_controls: dict[str, float]
    elasticity_with: dict[str, float]
    elasticity_without: dict[str, float]
    movement_ratio: dict[str, float]
    sign_preserved: dict[str, bool]

    def to_dict(self) -> dict:
        return {
            "access": self.access,
            "coef_with_controls": self.with_controls,
            "coef_without_controls": self.without_controls,
            "elasticity_with_controls": self.elasticity_with,
            "elasticity_without_controls": self.elasticity_without,
            "movement_ratio": self.movement_ratio,
            "sign_preserved": self.sign_preserved,
        }


def coefficient_stability(
    sample: HouseholdSample | pd.DataFrame,
    access: Sequence[str],
    controls: bool | np.ndarray = True,
    policy: str = "observed",
) -> StabilityReport:
    """Compare access coefficients fitted with and without household controls.

    ``controls`` may be ``True`` (the standard control block) or an explicit
    ``(n, m)`` array of control columns.
    """
    from .effects import elasticity

    df = sample.data if isinstance(sample, HouseholdSample) else sample
    y = df["vmt"].to_numpy(float)
    X0, names0 = design_matrix(df, access, controls=False)
    if isinstance(controls, np.ndarray):
        C = controls.reshape(len(df), -1)
        X1 = np.hstack([X0, C])
        names1 = names0 + [f"control_{k}" for k in range(C.shape[1])]
    else:
        X1, names1 = design_matrix(df, access, controls=True)
        X1, names1 = _drop_constant_dummies(X1, names1)
    fit_with = tobit_fit(X1, y, names1)
    fit_without = tobit_fit(X0, y, names0)
    w, wo, ew, ewo, mv, sp = {}, {}, {}, {}, {}, {}
    for a in access:
        bw, bwo = fit_with.coef(a), fit_without.coef(a)
        w[a], wo[a] = bw, bwo
        ew[a] = elasticity(fit_with, X1, y, a, df[a].to_numpy(float), policy).value
        ewo[a] = elasticity(fit_without, X0, y, a, df[a].to_numpy(float), policy).value
        mv[a] = abs(bw - bwo) / abs(bw) if bw != 0 else math.inf
        sp[a] = bool(np.sign(bw) == np.sign(bwo))
    return StabilityReport(list(access), w, wo, ew, ewo, mv, sp)

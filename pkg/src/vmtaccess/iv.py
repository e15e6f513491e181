"""Instrumented estimation: first-stage diagnostics, 2SLS, Sargan, two-step Tobit."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, stats

from .regress import (
    EstimationError,
    RankDeficiencyError,
    TobitFit,
    check_rank,
    ols_fit,
    tobit_fit,
)

WEAK_F = 10.0
F_CAP = 1e12


class OrderConditionError(EstimationError):
    pass


def _as2d(a, n: int | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if n is not None and a.shape[0] != n:
        raise ValueError(f"expected {n} rows, got {a.shape[0]}")
    return a


def _names(prefix: str, k: int, given) -> list[str]:
    return list(given) if given is not None else [f"{prefix}{j}" for j in range(k)]


@dataclass
class FirstStage:
    endog: str
    params: np.ndarray
    fitted: np.ndarray
    F: float
    df_num: int
    df_denom: int
    r2: float
    weak: bool

    def to_dict(self) -> dict:
        return {"endog": self.endog, "F": self.F, "weak_flag": self.weak, "r2": self.r2}


def _check_order(n_endog: int, n_instr: int) -> None:
    if n_instr < n_endog:
        raise OrderConditionError(
            f"order condition fails: {n_instr} instruments for {n_endog} endogenous regressors"
        )


def first_stage(
    endog,
    instruments,
    exog,
    endog_names: Sequence[str] | None = None,
    instrument_names: Sequence[str] | None = None,
    exog_names: Sequence[str] | None = None,
) -> list[FirstStage]:
    """Regress each endogenous column on ``[instruments, exog]``.

    ``F`` is the homoskedastic F statistic for excluding the instruments,
    ``((SSR_r - SSR_u) / L) / (SSR_u / (n - L - k))``. A perfect fit is
    reported as ``F_CAP``. ``weak`` flags ``F < 10``.
    """
    W = _as2d(endog)
    n = W.shape[0]
    Z = _as2d(instruments, n)
    C = _as2d(exog, n)
    m, L, k = W.shape[1], Z.shape[1], C.shape[1]
    _check_order(m, L)
    en = _names("endog", m, endog_names)
    zn = _names("z", L, instrument_names)
    cn = _names("exog", k, exog_names)
    ZC = np.hstack([Z, C])
    check_rank(ZC, zn + cn)
    dfd = n - L - k
    if dfd <= 0:
        raise EstimationError("not enough observations for the first-stage F test")
    out = []
    for j in range(m):
        w = W[:, j]
        full = ols_fit(ZC, w, check=False, cov_type="classical")
        restricted = ols_fit(C, w, check=False, cov_type="classical") if k else None
        ssr_u = full.ssr
        ssr_r = restricted.ssr if restricted is not None else float(w @ w)
        if ssr_u <= 1e-14 * max(ssr_r, 1e-300):
            F = F_CAP
        else:
            F = min(F_CAP, ((ssr_r - ssr_u) / L) / (ssr_u / dfd))
        F = max(F, 0.0)
        out.append(
            FirstStage(en[j], full.params, w - full.resid, float(F), L, dfd, full.r2, F < WEAK_F)
        )
    return out


@dataclass
class TwoSLSFit:
    params: np.ndarray
    cov: np.ndarray
    cov_classical: np.ndarray
    resid: np.ndarray
    names: list[str]
    n: int
    n_endog: int
    n_instruments: int

    @property
    def bse(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def two_sls(
    y,
    endog,
    exog,
    instruments,
    endog_names: Sequence[str] | None = None,
    exog_names: Sequence[str] | None = None,
) -> TwoSLSFit:
    """Two-stage least squares; coefficients ordered ``[endog..., exog...]``.

    Residuals, and hence both covariances, use the original regressors
    rather than the first-stage fitted values.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    W = _as2d(endog, n)
    C = _as2d(exog, n)
    Z = _as2d(instruments, n)
    m, L = W.shape[1], Z.shape[1]
    _check_order(m, L)
    names = _names("endog", m, endog_names) + _names("exog", C.shape[1], exog_names)
    X = np.hstack([W, C])
    ZC = np.hstack([Z, C])
    check_rank(ZC)
    check_rank(X, names)
    # projection of X onto the instrument space
    coef, *_ = linalg.lstsq(ZC, X)
    Xhat = ZC @ coef
    try:
        check_rank(Xhat, names)
    except RankDeficiencyError as exc:
        raise RankDeficiencyError(f"instruments do not identify the model: {exc}") from None
    beta, *_ = linalg.lstsq(Xhat, y)
    u = y - X @ beta
    p = X.shape[1]
    bread = linalg.inv(Xhat.T @ Xhat)
    bread = 0.5 * (bread + bread.T)
    cov_classical = bread * float(u @ u) / n
    meat = (Xhat * (u**2)[:, None]).T @ Xhat
    cov = bread @ meat @ bread * (n / (n - p))
    return TwoSLSFit(beta, 0.5 * (cov + cov.T), cov_classical, u, names, n, m, L)


@dataclass(frozen=True)
class SarganTest:
    statistic: float
    dof: int
    pvalue: float

    def to_dict(self) -> dict:
        return {"stat": self.statistic, "dof": self.dof, "p": self.pvalue}


def sargan_test(fit: TwoSLSFit, instruments, exog) -> SarganTest:
    """``n * R^2`` of the 2SLS residuals on all instruments and exogenous columns."""
    dof = fit.n_instruments - fit.n_endog
    if dof < 1:
        raise EstimationError(
            "over-identification test undefined: the model is exactly identified"
        )
    ZC = np.hstack([_as2d(instruments, fit.n), _as2d(exog, fit.n)])
    u = fit.resid
    coef, *_ = linalg.lstsq(ZC, u)
    proj = ZC @ coef
    r2 = float(proj @ proj) / float(u @ u)
    stat = fit.n * r2
    return SarganTest(stat, dof, float(stats.chi2.sf(stat, dof)))


@dataclass
class IvTobitFit:
    first_stage: list[FirstStage]
    second_stage: TobitFit
    naive_cov: np.ndarray
    bootstrap_se: np.ndarray | None
    bootstrap_reps: int
    seed: int | None
    redraws: int
    sargan: SarganTest | None = None
    names: list[str] = field(default_factory=list)

    @property
    def params(self) -> np.ndarray:
        return self.second_stage.params

    @property
    def bse(self) -> np.ndarray:
        """Bootstrap SEs of ``params`` when available, otherwise naive ones."""
        if self.bootstrap_se is not None:
            return self.bootstrap_se[:-1]
        return np.sqrt(np.diag(self.naive_cov))[:-1]

    def coef(self, name: str) -> float:
        return self.second_stage.coef(name)

    def se(self, name: str) -> float:
        return float(self.bse[self.names.index(name)])

    def to_dict(self) -> dict:
        d = self.second_stage.to_dict()
        naive = np.sqrt(np.diag(self.naive_cov))
        d["naive_se"] = {nm: float(s) for nm, s in zip(self.names, naive[:-1])}
        d["naive_se_note"] = "second-stage SEs ignoring generated regressors"
        if self.bootstrap_se is not None:
            d["bootstrap_se"] = {nm: float(s) for nm, s in zip(self.names, self.bootstrap_se[:-1])}
            d["bootstrap_sigma_se"] = float(self.bootstrap_se[-1])
        d["first_stage"] = [fs.to_dict() for fs in self.first_stage]
        d["sargan"] = self.sargan.to_dict() if self.sargan is not None else None
        d["bootstrap"] = {"reps": self.bootstrap_reps, "seed": self.seed, "redraws": self.redraws}
        return d


def _two_step(y, W, C, Z, names, censor_point):
    fs = first_stage(W, Z, C, endog_names=names[: W.shape[1]])
    What = np.column_stack([f.fitted for f in fs])
    X = np.hstack([What, C])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit = tobit_fit(X, y, names, censor_point=censor_point)
    return fs, fit


def iv_tobit_two_step(
    y,
    endog,
    exog,
    instruments,
    endog_names: Sequence[str] | None = None,
    exog_names: Sequence[str] | None = None,
    bootstrap_reps: int = 200,
    seed: int | None = 0,
    censor_point: float = 0.0,
    max_redraws: int = 1000,
) -> IvTobitFit:
    """Plug-in two-step IV Tobit with pairs-bootstrap standard errors.

    Endogenous columns are replaced by their first-stage OLS fitted values
    and the Tobit is fitted on ``[fitted endog, exog]``. Each bootstrap
    replication resamples households and re-runs both stages; replication
    ``b`` draws from its own child of ``SeedSequence(seed)`` so the result
    does not depend on execution order. Resamples that cannot be estimated
    are redrawn and counted.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    W = _as2d(endog, n)
    C = _as2d(exog, n)
    Z = _as2d(instruments, n)
    _check_order(W.shape[1], Z.shape[1])
    names = _names("endog", W.shape[1], endog_names) + _names("exog", C.shape[1], exog_names)
    fs, fit = _two_step(y, W, C, Z, names, censor_point)

    sargan = None
    if Z.shape[1] > W.shape[1]:
        sargan = sargan_test(two_sls(y, W, C, Z), Z, C)

    boot_se = None
    redraws = 0
    if bootstrap_reps > 0:
        children = np.random.SeedSequence(seed).spawn(bootstrap_reps)
        draws = np.empty((bootstrap_reps, len(names) + 1))
        for b, ss in enumerate(children):
            rng = np.random.default_rng(ss)
            for _ in range(max_redraws):
                idx = rng.integers(0, n, n)
                try:
                    _, bfit = _two_step(y[idx], W[idx], C[idx], Z[idx], names, censor_point)
                except (EstimationError, linalg.LinAlgError):
                    redraws += 1
                    continue
                if bfit.n_censored == 0:
                    redraws += 1
                    continue
                break
            else:
                raise EstimationError(f"bootstrap replication {b} exhausted {max_redraws} redraws")
            draws[b, :-1] = bfit.params
            draws[b, -1] = bfit.sigma
        boot_se = draws.std(axis=0, ddof=1)

    return IvTobitFit(
        first_stage=fs,
        second_stage=fit,
        naive_cov=fit.cov,
        bootstrap_se=boot_se,
        bootstrap_reps=int(bootstrap_reps),
        seed=seed,
        redraws=redraws,
        sargan=sargan,
        names=names,
    )


def weak_instrument_share(fits: Sequence[FirstStage]) -> float:
    return sum(f.weak for f in fits) / len(fits) if fits else math.nan

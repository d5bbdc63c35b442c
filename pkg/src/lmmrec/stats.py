"""Fixed-effect significance, information criteria and likelihood-ratio tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse, special

from lmmrec.design import detect_aliasing
from lmmrec.errors import NumericalError, StatsError
from lmmrec.reml import FitResult, estimate_covariance

# Negative LR statistics smaller than this are optimizer noise and clamped to 0.
LRT_CLAMP = 1e-6


@dataclass(frozen=True)
class TestReport:
    model_label: str
    p_value: float
    aic: float
    bic: float
    loglik: float
    df: int

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0 and not math.isnan(self.p_value):
            raise StatsError(f"p-value out of range: {self.p_value}")
        if self.df < 1:
            raise StatsError(f"df must be >= 1, got {self.df}")


@dataclass(frozen=True)
class LrtReport:
    df_nested: int
    df_full: int
    lr_stat: float
    delta_df: int
    p_value: float
    loglik_nested: float
    loglik_full: float


def chi2_sf(x: float, df: float) -> float:
    """Upper tail of the chi-square distribution via the regularized gamma."""
    if df <= 0:
        raise StatsError(f"chi-square degrees of freedom must be positive, got {df}")
    if x <= 0:
        return 1.0
    return float(special.gammaincc(0.5 * df, 0.5 * x))


def aic(loglik: float, n_params: int) -> float:
    return -2.0 * loglik + 2.0 * n_params


def bic(loglik: float, n_params: int, n_obs: int) -> float:
    return -2.0 * loglik + n_params * math.log(n_obs)


def information_criteria(fit: FitResult) -> tuple[float, float, float]:
    """``(aic, bic, loglik)`` from the fit's own log-likelihood."""
    ll = fit.loglik
    return aic(ll, fit.n_params), bic(ll, fit.n_params, fit.n_obs), ll


def factor_contrasts(fit: FitResult, factor: str) -> np.ndarray:
    """Successive-difference contrast matrix for ``factor`` over ``tau_hat``.

    Levels whose column was dropped because it is a linear combination of
    other columns carry an implicit coefficient of zero and take part in the
    contrasts.  Levels never observed (all-zero columns) are left out.
    """
    d = fit.design
    if factor not in fit.formula.fixed_factors:
        raise StatsError(f"{factor!r} is not a fixed factor of {fit.formula}")
    pos = {j: i for i, j in enumerate(d.kept_columns)}
    col_norm = np.asarray(d.X.multiply(d.X).sum(axis=0)).reshape(-1)
    levels = [j for j, (name, _) in enumerate(d.x_columns) if name == factor and col_norm[j] > 0]
    if not any(j in pos for j in levels):
        raise StatsError(f"factor {factor!r} has no estimable column")
    rows = []
    for a, b in zip(levels[:-1], levels[1:]):
        row = np.zeros(len(d.kept_columns))
        if a in pos:
            row[pos[a]] += 1.0
        if b in pos:
            row[pos[b]] -= 1.0
        rows.append(row)
    return np.array(rows).reshape(len(rows), len(d.kept_columns))


def wald_test(fit: FitResult, factor: str) -> float:
    """Wald chi-square p-value for "all levels of ``factor`` are equal"."""
    L = factor_contrasts(fit, factor)
    if L.shape[0] == 0:
        raise StatsError(f"factor {factor!r} has a single level: nothing to test")
    p = fit.design.p
    V = estimate_covariance(fit)[:p, :p]
    est = L @ fit.tau_hat
    S = L @ V @ L.T
    w, U = np.linalg.eigh(0.5 * (S + S.T))
    tol = max(w.max(), 0.0) * 1e-10 * len(w)
    keep = w > tol
    if not np.any(keep):
        raise NumericalError(f"contrast covariance for {factor!r} is singular")
    proj = U[:, keep].T @ est
    stat = float(np.sum(proj**2 / w[keep]))
    return chi2_sf(stat, int(keep.sum()))


def model_report(fit: FitResult, label: str, factor: str | None = None) -> TestReport:
    """Summary row for one fit: Wald p-value of ``factor`` plus AIC, BIC and logL."""
    if factor is None:
        if not fit.formula.fixed_factors:
            raise StatsError(f"{fit.formula} has no fixed factor to test")
        factor = fit.formula.fixed_factors[0]
    a, b, ll = information_criteria(fit)
    return TestReport(label, wald_test(fit, factor), a, b, ll, fit.n_params)


def _lrt_df(fit: FitResult) -> int:
    # structural count: every declared variance component, boundary or not
    return fit.design.p + len(fit.formula.random_factors) + 1


def check_nested(nested: FitResult, full: FitResult) -> None:
    """Raise :class:`StatsError` unless ``nested`` is nested in ``full``.

    Requirements: same data; the nested fixed factors are a subset of the full
    fixed factors and span a subspace of the full fixed column space; each
    nested random factor is modelled in the full model (as a fixed or random
    factor); and the full model has more parameters.
    """
    t1, t2 = nested.table, full.table
    if (
        t1.n_rows != t2.n_rows
        or not np.array_equal(t1.response, t2.response)
    ):
        raise StatsError("models were fitted to different data")
    for name in set(nested.formula.factors) & set(full.formula.factors):
        if not np.array_equal(t1.column(name), t2.column(name)):
            raise StatsError(f"factor {name!r} differs between the two fits")
    fn, ff = nested.formula, full.formula
    if not set(fn.fixed_factors) <= set(ff.fixed_factors):
        raise StatsError(
            f"not nested: fixed factors {list(fn.fixed_factors)} are not a subset of {list(ff.fixed_factors)}"
        )
    missing = set(fn.random_factors) - set(ff.factors)
    if missing:
        raise StatsError(f"not nested: random factor(s) {sorted(missing)} absent from the full model")
    Xf = full.design.X_kept
    joint = sparse.hstack([Xf, nested.design.X_kept], format="csr")
    if len(detect_aliasing(joint)) != Xf.shape[1]:
        raise StatsError("not nested: fixed column space is not contained in the full model's")
    if _lrt_df(full) <= _lrt_df(nested):
        raise StatsError(
            f"not nested: full model has {_lrt_df(full)} parameters, nested has {_lrt_df(nested)}"
        )


def likelihood_ratio_test(nested: FitResult, full: FitResult) -> LrtReport:
    """Likelihood-ratio test of two nested models refitted by maximum likelihood.

    REML likelihoods of models with different fixed effects are not
    comparable, so both fits are redone by ML first.
    """
    check_nested(nested, full)
    ml_n, ml_f = nested.ml_fit, full.ml_fit
    stat = 2.0 * (ml_f.loglik - ml_n.loglik)
    if stat < 0:
        if stat < -LRT_CLAMP:
            raise NumericalError(
                f"likelihood ratio statistic is negative ({stat:.3g}): ML optimization failed"
            )
        stat = 0.0
    df_n, df_f = _lrt_df(nested), _lrt_df(full)
    return LrtReport(
        df_nested=df_n,
        df_full=df_f,
        lr_stat=stat,
        delta_df=df_f - df_n,
        p_value=chi2_sf(stat, df_f - df_n),
        loglik_nested=ml_n.loglik,
        loglik_full=ml_f.loglik,
    )

"""Henderson's mixed model equations and REML estimation of variance ratios.

The model is ``y = X tau + sum_k Z_k u_k + e`` with ``var(e) = sigma2 I`` and
``var(u_k) = sigma2 gamma_k I``.  ``sigma2`` is profiled out analytically, so
the optimizer only searches over the ratios ``gamma_k`` (in log coordinates).

Likelihoods are computed from the *scaled* equations

    C~ = [[X'X,     X'Z L    ],       rhs~ = [X'y  ]
          [L Z'X,   L Z'Z L + I]]             [L Z'y]

with ``L = diag(sqrt(gamma))``.  Then ``log|C~| = log|V| + log|X'V^-1 X|`` and
``y'Py = y'y - rhs~' C~^-1 rhs~`` where ``V = I + Z G Z'``.  Unlike the textbook
form with ``G^-1`` in the lower block, C~ stays well defined when a ratio hits
zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg, optimize

from lmmrec.design import DesignMatrices, ObservationTable, build_design
from lmmrec.errors import ConvergenceError, DesignError, NumericalError
from lmmrec.formula import ModelFormula

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
GAMMA_MIN = 1e-8
LOG_GAMMA_MIN = math.log(GAMMA_MIN)
# Ratios above this are treated as numerically infinite; the search is capped there.
LOG_GAMMA_MAX = math.log(1e12)
MAX_STEP = 4.0


@dataclass(frozen=True)
class VarianceComponents:
    sigma2: float
    gamma: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if not self.sigma2 > 0:
            raise NumericalError(f"sigma2 must be positive, got {self.sigma2}")
        if any(not g >= 0 for g in self.gamma):
            raise NumericalError(f"variance ratios must be non-negative, got {self.gamma}")

    @property
    def variances(self) -> tuple[float, ...]:
        """Random-effect variances ``sigma2 * gamma_k``."""
        return tuple(self.sigma2 * g for g in self.gamma)


@dataclass(frozen=True, eq=False)
class MixedModelEquations:
    C: np.ndarray
    rhs: np.ndarray
    p: int
    q: int

    @cached_property
    def factor(self):
        try:
            return linalg.cho_factor(self.C, lower=True, check_finite=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(
                "mixed model coefficient matrix is not positive definite "
                "(aliased fixed columns or non-positive variance ratio)"
            ) from exc


def _check_gamma(d: DesignMatrices, gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if gamma.shape[0] != len(d.z_blocks):
        raise DesignError(
            f"expected {len(d.z_blocks)} variance ratios, got {gamma.shape[0]}"
        )
    if np.any(~np.isfinite(gamma)) or np.any(gamma < 0):
        raise NumericalError(f"variance ratios must be finite and >= 0, got {gamma}")
    return gamma


def assemble_mme(d: DesignMatrices, v: VarianceComponents | np.ndarray) -> MixedModelEquations:
    """Coefficient matrix and right-hand side of Henderson's equations (R = I).

    ``v`` may be a :class:`VarianceComponents` or a plain vector of ratios.
    Every ratio must be strictly positive since ``G^-1`` appears explicitly.
    """
    gamma = _check_gamma(d, v.gamma if isinstance(v, VarianceComponents) else v)
    if np.any(gamma == 0):
        raise NumericalError(
            "zero variance ratio: G is singular; drop the component or use fit_reml"
        )
    WtW, Wty, _ = d.cross_products()
    p = d.p
    C = WtW.copy()
    ginv = np.repeat(1.0 / gamma, d.q_sizes)
    idx = np.arange(p, C.shape[0])
    C[idx, idx] += ginv
    return MixedModelEquations(C=C, rhs=Wty.copy(), p=p, q=C.shape[0] - p)


def solve_mme(m: MixedModelEquations) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(tau_hat, u_hat)`` solving ``C [tau; u] = rhs``."""
    sol = linalg.cho_solve(m.factor, m.rhs)
    return sol[: m.p], sol[m.p :]


@dataclass(frozen=True, eq=False)
class ProfileEval:
    """One evaluation of the profiled likelihood at a vector of ratios."""

    gamma: np.ndarray
    loglik: float
    sigma2: float
    ypy: float
    solution: np.ndarray  # solution of the scaled system
    scale: np.ndarray  # diag(I, L)
    factor: tuple
    grad_gamma: np.ndarray | None = None

    @property
    def grad_rho(self) -> np.ndarray | None:
        """Gradient with respect to ``log gamma``."""
        if self.grad_gamma is None:
            return None
        return self.gamma * self.grad_gamma


class _Profile:
    """Profiled (RE)ML likelihood over the variance ratios of one design."""

    def __init__(self, d: DesignMatrices, method: str = "reml"):
        if method not in ("reml", "ml"):
            raise ValueError(f"method must be 'reml' or 'ml', got {method!r}")
        self.d = d
        self.method = method
        self.WtW, self.Wty, self.yty = d.cross_products()
        self.n = d.n_obs
        self.p = d.p
        self.q_sizes = d.q_sizes
        self.q = sum(self.q_sizes)
        self.offsets = np.concatenate([[0], np.cumsum(self.q_sizes)]).astype(int)
        self.dof = self.n - self.p if method == "reml" else self.n
        if self.n <= self.p:
            raise NumericalError(
                f"degenerate data: {self.n} observations for {self.p} fixed columns"
            )
        scale = float(self.yty) / self.n if self.n else 1.0
        self.sigma2_floor = max(scale, 1.0) * 1e-14

    def evaluate(self, gamma, gradient: bool = False) -> ProfileEval:
        gamma = _check_gamma(self.d, gamma)
        p = self.p
        s = np.concatenate([np.ones(p), np.repeat(np.sqrt(gamma), self.q_sizes)])
        C = self.WtW * np.outer(s, s)
        zi = np.arange(p, p + self.q)
        C[zi, zi] += 1.0
        rhs = s * self.Wty
        try:
            factor = linalg.cho_factor(C, lower=True, check_finite=False)
        except linalg.LinAlgError as exc:
            raise NumericalError(
                "scaled mixed model equations are not positive definite"
            ) from exc
        sol = linalg.cho_solve(factor, rhs, check_finite=False)
        ypy = max(self.yty - float(rhs @ sol), 0.0)
        if self.method == "reml":
            logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
        else:
            zfactor = self._z_factor(C)
            logdet = 2.0 * float(np.sum(np.log(np.diag(zfactor[0])))) if self.q else 0.0
        sigma2 = max(ypy / self.dof, self.sigma2_floor)
        loglik = -0.5 * (self.dof * (LOG_2PI + math.log(sigma2)) + ypy / sigma2 + logdet)
        grad = None
        if gradient:
            grad = self._grad_gamma(C, factor, sol, s, sigma2)
        return ProfileEval(gamma, loglik, sigma2, ypy, sol, s, factor, grad)

    def _z_factor(self, C):
        p = self.p
        if not self.q:
            return None
        return linalg.cho_factor(C[p:, p:], lower=True, check_finite=False)

    def _grad_gamma(self, C, factor, sol, s, sigma2) -> np.ndarray:
        # d loglik / d gamma_k = -1/2 [tr(Z_k' M Z_k) - |Z_k' P y|^2 / sigma2]
        # with M = P (REML) or V^-1 (ML).  W~ = W diag(s) gives
        #   P = I - W~ C~^-1 W~',   V^-1 = I - Z~ (Z~'Z~ + I)^-1 Z~'.
        p = self.p
        K = len(self.q_sizes)
        grad = np.zeros(K)
        if K == 0:
            return grad
        zcols = np.arange(p, p + self.q)
        A_wz = self.WtW[:, zcols]  # W'Z
        B = s[:, None] * A_wz  # W~'Z
        Zpy = self.Wty[zcols] - B.T @ sol
        if self.method == "reml":
            H = linalg.cho_solve(factor, B, check_finite=False)
            ZMZ_diag = np.diag(self.WtW[np.ix_(zcols, zcols)]) - np.einsum("ij,ij->j", B, H)
        else:
            Bz = B[p:]
            zf = self._z_factor(C)
            H = linalg.cho_solve(zf, Bz, check_finite=False)
            ZMZ_diag = np.diag(self.WtW[np.ix_(zcols, zcols)]) - np.einsum("ij,ij->j", Bz, H)
        for k in range(K):
            sl = slice(self.offsets[k], self.offsets[k + 1])
            grad[k] = -0.5 * (ZMZ_diag[sl].sum() - float(Zpy[sl] @ Zpy[sl]) / sigma2)
        return grad


def profile_loglik(d: DesignMatrices, gamma, method: str = "reml", gradient: bool = False) -> ProfileEval:
    """Evaluate the profiled restricted (or full) log-likelihood at ``gamma``."""
    return _Profile(d, method).evaluate(gamma, gradient=gradient)


def reml_loglik(d: DesignMatrices, gamma) -> tuple[float, float]:
    """Restricted log-likelihood with ``sigma2`` profiled out.

    Returns ``(loglik, sigma2_hat)`` where ``sigma2_hat = y'Py / (N - p)``
    and ``p`` is the number of kept fixed columns.
    """
    ev = _Profile(d, "reml").evaluate(gamma)
    return ev.loglik, ev.sigma2


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 200
    ftol: float = 1e-8
    gtol: float = 1e-6
    method: str = "reml"
    init_gamma: float = 1.0
    polish: bool = True
    raise_on_failure: bool = False


@dataclass
class _OptState:
    iterations: int = 0
    converged: bool = False
    message: str = ""


def _bfgs(objective, x0: np.ndarray, opts: FitOptions, state: _OptState, lower: float, upper: float):
    """Minimize ``objective(x) -> (f, g)`` by BFGS with backtracking.

    Stops early, returning ``("boundary", x)``, as soon as a coordinate drops
    below ``lower`` so the caller can pin that component at zero.
    """
    x = np.array(x0, dtype=float)
    f, g = objective(x)
    n = x.size
    H = np.eye(n)
    resets = 0
    last_df = np.inf
    while state.iterations < opts.max_iter:
        if np.max(np.abs(g)) < opts.gtol and last_df < opts.ftol:
            state.converged = True
            return "converged", x, f, g
        if np.max(np.abs(g)) < opts.gtol * 1e-3:
            state.converged = True
            return "converged", x, f, g
        state.iterations += 1
        d = -H @ g
        if not np.all(np.isfinite(d)) or d @ g >= 0:
            H = np.eye(n)
            d = -g
        step_norm = np.max(np.abs(d))
        if step_norm > MAX_STEP:
            d *= MAX_STEP / step_norm
        t = 1.0
        accepted = False
        # near the optimum the Armijo decrease drops below rounding in f;
        # there a smaller gradient at an equal f counts as progress
        noise = 1e-13 * max(1.0, abs(f))
        for _ in range(40):
            x_new = np.minimum(x + t * d, upper)
            f_new, g_new = objective(x_new)
            if np.isfinite(f_new) and (
                f_new <= f + 1e-4 * t * (g @ d)
                or (f_new <= f + noise and np.max(np.abs(g_new)) < 0.5 * np.max(np.abs(g)))
            ):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            if resets < 2:
                resets += 1
                H = np.eye(n)
                continue
            return "stalled", x, f, g
        s = x_new - x
        yv = g_new - g
        last_df = abs(f - f_new)
        x, f, g = x_new, f_new, g_new
        if np.any(x < lower):
            return "boundary", x, f, g
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
            if state.iterations == 1 and resets == 0:
                H = np.eye(n) * (sy / float(yv @ yv))
            rho = 1.0 / sy
            I = np.eye(n)
            H = (I - rho * np.outer(s, yv)) @ H @ (I - rho * np.outer(yv, s)) + rho * np.outer(s, s)
    state.message = f"no convergence after {opts.max_iter} iterations"
    return "maxiter", x, f, g


def _golden_sweep(objective_f, x: np.ndarray, lower: float, upper: float, sweeps: int = 20, tol: float = 1e-10):
    """Coordinate-wise golden-section search; fallback when BFGS stalls."""
    x = x.copy()
    f = objective_f(x)
    for _ in range(sweeps):
        f_start = f
        for i in range(x.size):
            def fi(v, i=i):
                z = x.copy()
                z[i] = v
                return objective_f(z)

            res = optimize.minimize_scalar(
                fi, bounds=(lower - 1.0, min(upper, x[i] + 10.0)), method="bounded",
                options={"xatol": tol},
            )
            if res.fun <= f:
                x[i] = res.x
                f = res.fun
        if abs(f_start - f) < 1e-12:
            break
    return x, f


def _optimize_ratios(prof: _Profile, opts: FitOptions):
    """Maximize the profiled likelihood over variance ratios.

    Returns ``(gamma, state)``.  Components whose log ratio falls below
    ``log(1e-8)`` are pinned at exactly zero and the rest re-optimized;
    pinned components are released again if their gradient at zero points
    inward.
    """
    K = len(prof.q_sizes)
    state = _OptState()
    gamma = np.full(K, float(opts.init_gamma))
    if K == 0:
        state.converged = True
        return gamma, state
    free = np.ones(K, dtype=bool)

    def full_gamma(xfree):
        g = gamma.copy()
        g[free] = np.exp(xfree)
        return g

    def objective(xfree):
        g = full_gamma(xfree)
        try:
            ev = prof.evaluate(g, gradient=True)
        except NumericalError:
            return np.inf, np.full(xfree.size, np.nan)
        return -ev.loglik, -ev.grad_rho[free]

    def objective_f(xfree):
        return objective(xfree)[0]

    released = np.zeros(K, dtype=int)
    for _outer in range(4 * K + 4):
        if not free.any():
            state.converged = True
        else:
            x0 = np.log(np.maximum(gamma[free], GAMMA_MIN))
            status, x, f, g = _bfgs(objective, x0, opts, state, LOG_GAMMA_MIN, LOG_GAMMA_MAX)
            if status == "stalled":
                log.debug("BFGS stalled; falling back to golden-section sweeps")
                x, f = _golden_sweep(objective_f, x, LOG_GAMMA_MIN, LOG_GAMMA_MAX)
                f, g = objective(x)
                state.converged = bool(np.max(np.abs(g)) < opts.gtol)
                status = "converged" if state.converged else "stalled"
            gamma = full_gamma(x)
            if status == "boundary":
                low = free & (gamma < GAMMA_MIN)
                gamma[low] = 0.0
                free &= ~low
                state.converged = False
                continue
            if status == "converged" and opts.polish:
                gamma = _newton_polish(prof, gamma, free)
            if status == "maxiter":
                break
        # boundary checks: tiny free components that do better at zero
        ev = prof.evaluate(gamma, gradient=True)
        changed = False
        for k in np.flatnonzero(free & (gamma < 1e-4)):
            trial = gamma.copy()
            trial[k] = 0.0
            ev0 = prof.evaluate(trial, gradient=True)
            if ev0.loglik >= ev.loglik - 1e-12 and ev0.grad_gamma[k] <= 0:
                gamma, ev = trial, ev0
                free[k] = False
                changed = True
        # pinned components whose gradient at zero is positive go back in
        for k in np.flatnonzero(~free):
            if ev.grad_gamma[k] > opts.gtol and released[k] < 2:
                released[k] += 1
                free[k] = True
                gamma[k] = 1e-3
                changed = True
        if not changed:
            break
        state.converged = False
    return gamma, state


def _newton_polish(prof: _Profile, gamma: np.ndarray, free: np.ndarray, steps: int = 4) -> np.ndarray:
    """A few Newton steps in log coordinates with a differenced Hessian."""
    gamma = gamma.copy()
    ev = prof.evaluate(gamma, gradient=True)
    for _ in range(steps):
        x = np.log(gamma[free])
        g = ev.grad_rho[free]
        if np.max(np.abs(g)) < 1e-12:
            break
        n = x.size
        Hm = np.zeros((n, n))
        h = 1e-4
        for i in range(n):
            for sign in (1.0, -1.0):
                z = gamma.copy()
                xi = x.copy()
                xi[i] += sign * h
                z[free] = np.exp(xi)
                Hm[:, i] += sign * prof.evaluate(z, gradient=True).grad_rho[free]
        Hm /= 2 * h
        Hm = 0.5 * (Hm + Hm.T)
        try:
            if np.max(np.linalg.eigvalsh(Hm)) >= 0:
                break
            step = -np.linalg.solve(Hm, g)
        except np.linalg.LinAlgError:
            break
        if np.max(np.abs(step)) > 1.0:
            break
        trial = gamma.copy()
        trial[free] = np.exp(x + step)
        ev_new = prof.evaluate(trial, gradient=True)
        if ev_new.loglik < ev.loglik - 1e-12:
            break
        gamma, ev = trial, ev_new
    return gamma


@dataclass(eq=False)
class FitResult:
    """A fitted mixed model.

    ``tau_hat`` holds one estimate per kept fixed column (labels in
    ``tau_labels``); ``u_hat`` holds every random level, block by block.
    """

    formula: ModelFormula
    design: DesignMatrices
    table: ObservationTable
    tau_hat: np.ndarray
    tau_labels: tuple[str, ...]
    u_hat: np.ndarray
    u_labels: tuple[str, ...]
    theta: VarianceComponents
    loglik: float
    method: str
    n_obs: int
    n_params: int
    converged: bool
    iterations: int
    dropped_columns: tuple[int, ...]
    options: FitOptions = field(default_factory=FitOptions, repr=False)
    _factor: tuple = field(default=None, repr=False)
    _scale: np.ndarray = field(default=None, repr=False)

    @property
    def loglik_restricted(self) -> float:
        if self.method != "reml":
            raise NumericalError("restricted log-likelihood requested from an ML fit")
        return self.loglik

    @cached_property
    def ml_fit(self) -> "FitResult":
        """The same model refit by full maximum likelihood."""
        if self.method == "ml":
            return self
        opts = FitOptions(**{**self.options.__dict__, "method": "ml"})
        return fit_design(self.design, self.table, opts)

    @property
    def loglik_ml(self) -> float:
        return self.ml_fit.loglik

    @property
    def aic(self) -> float:
        return -2.0 * self.loglik + 2.0 * self.n_params

    @property
    def bic(self) -> float:
        return -2.0 * self.loglik + self.n_params * math.log(self.n_obs)

    @property
    def c_inverse_factor(self):
        """Cholesky factor of the scaled equations plus the scaling vector."""
        return self._factor, self._scale

    def fixed_effects(self) -> dict[str, float]:
        return dict(zip(self.tau_labels, map(float, self.tau_hat)))

    def random_effects(self) -> dict[str, dict[str, float]]:
        out = {}
        start = 0
        for block in self.design.z_blocks:
            vals = self.u_hat[start : start + block.q]
            out[block.factor] = dict(zip(block.levels, map(float, vals)))
            start += block.q
        return out

    def fitted(self) -> np.ndarray:
        d = self.design
        return d.X_kept @ self.tau_hat + d.Z @ self.u_hat

    def summary(self) -> dict:
        return {
            "formula": str(self.formula),
            "method": self.method,
            "n_obs": self.n_obs,
            "n_params": self.n_params,
            "converged": self.converged,
            "iterations": self.iterations,
            "sigma2": self.theta.sigma2,
            "gamma": dict(zip(self.formula.random_factors, self.theta.gamma)),
            "loglik": self.loglik,
            "aic": self.aic,
            "bic": self.bic,
            "fixed": self.fixed_effects(),
            "random": self.random_effects(),
            "dropped_columns": [self.design.x_labels[j] for j in self.dropped_columns],
        }


def fit_design(d: DesignMatrices, table: ObservationTable, opts: FitOptions | None = None) -> FitResult:
    opts = opts or FitOptions()
    prof = _Profile(d, opts.method)
    gamma, state = _optimize_ratios(prof, opts)
    ev = prof.evaluate(gamma, gradient=True)
    sol = ev.solution * ev.scale
    p = d.p
    if not state.converged:
        msg = state.message or "variance ratio search did not converge"
        if opts.raise_on_failure:
            raise ConvergenceError(msg)
        log.warning("%s (best point returned)", msg)
    n_params = p + int(np.sum(gamma > 0)) + 1
    f = d.formula
    u_labels = tuple(f"{b.factor}:{lv}" for b in d.z_blocks for lv in b.levels)
    return FitResult(
        formula=f,
        design=d,
        table=table,
        tau_hat=sol[:p],
        tau_labels=tuple(d.x_labels[j] for j in d.kept_columns),
        u_hat=sol[p:],
        u_labels=u_labels,
        theta=VarianceComponents(ev.sigma2, tuple(gamma)),
        loglik=ev.loglik,
        method=opts.method,
        n_obs=d.n_obs,
        n_params=n_params,
        converged=state.converged,
        iterations=state.iterations,
        dropped_columns=d.dropped_columns,
        options=opts,
        _factor=ev.factor,
        _scale=ev.scale,
    )


def fit_reml(f: ModelFormula, t: ObservationTable, opts: FitOptions | None = None) -> FitResult:
    """Fit ``f`` to ``t`` by REML (or ML when ``opts.method == 'ml'``).

    Variance ratios start at 1 and are searched in log coordinates by BFGS
    using the analytic gradient; ``sigma2`` is profiled out.
    """
    d = build_design(f, t)
    return fit_design(d, t, opts)


def estimate_covariance(fit: FitResult) -> np.ndarray:
    """``sigma2 * C^-1``: joint covariance of ``(tau_hat, u_hat - u)``.

    Components estimated at zero get zero rows and columns.
    """
    factor, s = fit.c_inverse_factor
    n = s.shape[0]
    Cinv = linalg.cho_solve(factor, np.eye(n), check_finite=False)
    cov = fit.theta.sigma2 * (s[:, None] * Cinv * s[None, :])
    return 0.5 * (cov + cov.T)


def standard_errors(fit: FitResult) -> np.ndarray:
    return np.sqrt(np.clip(np.diag(estimate_covariance(fit)), 0.0, None))


def _map_codes(fit: FitResult, newdata: ObservationTable) -> dict[str, np.ndarray]:
    """Map newdata level labels onto training level indices (-1 if unseen)."""
    mapped = {}
    for name in fit.formula.factors:
        if name not in newdata.factor_names:
            raise DesignError(f"unknown factor {name!r} in new data; it has {list(newdata.factor_names)}")
        train_levels = fit.table.levels(name)
        index = {lv: i for i, lv in enumerate(train_levels)}
        lookup = np.array([index.get(lv, -1) for lv in newdata.levels(name)], dtype=np.int64)
        mapped[name] = lookup[newdata.column(name)] if newdata.n_rows else np.zeros(0, dtype=np.int64)
    return mapped


def linear_predictor(fit: FitResult, codes: dict[str, np.ndarray], n: int) -> np.ndarray:
    """``X tau + Z u`` from training-level codes; ``-1`` contributes nothing.

    Factors missing from ``codes`` are treated as unspecified for every row.
    """
    d = fit.design
    out = np.zeros(n)
    coef = {}
    for pos, j in enumerate(d.kept_columns):
        coef[d.x_columns[j]] = fit.tau_hat[pos]
    if fit.formula.intercept:
        out += coef.get(("intercept", -1), 0.0)
    for name in fit.formula.fixed_factors:
        c = codes.get(name)
        if c is None:
            continue
        n_levels = len(fit.table.levels(name))
        table = np.array([coef.get((name, i), 0.0) for i in range(n_levels)] + [0.0])
        out += table[np.where(c >= 0, c, n_levels)]
    start = 0
    for block in d.z_blocks:
        u = np.append(fit.u_hat[start : start + block.q], 0.0)
        start += block.q
        c = codes.get(block.factor)
        if c is None:
            continue
        out += u[np.where(c >= 0, c, block.q)]
    return out


def predict(fit: FitResult, newdata: ObservationTable) -> np.ndarray:
    """Predicted responses ``X_new tau + Z_new u`` in ``newdata`` row order.

    Levels unseen in training, and fixed levels whose column was aliased
    away, contribute zero.  This gives the population-level prediction for
    new users.
    """
    return linear_predictor(fit, _map_codes(fit, newdata), newdata.n_rows)

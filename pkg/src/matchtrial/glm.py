"""Maximum-likelihood logistic regression with Wald standard errors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from . import _kernels
from .stats_core import norm_sf

SCORE_TOL = 1e-8
MAX_ITER = 100


class DegenerateResponseError(ValueError):
    """The response vector has no variation (all 0 or all 1)."""


class UnconvergedFitError(ValueError):
    """A Wald quantity was requested from a fit that did not converge."""


@dataclass
class DesignMatrix:
    """Regressors (intercept column included by the caller) and binary response."""

    X: np.ndarray
    y: np.ndarray
    names: Sequence[str] = ()

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[1] < 1:
            raise ValueError("design matrix must be 2-D with at least one column")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError("response length does not match design rows")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise ValueError("design matrix contains missing or non-finite values")
        if self.names and len(self.names) != self.X.shape[1]:
            raise ValueError("one name per column required")

    @classmethod
    def with_intercept(cls, columns: dict[str, np.ndarray], y) -> "DesignMatrix":
        n = len(y)
        names = ["intercept", *columns]
        X = np.column_stack([np.ones(n)] + [np.asarray(v, dtype=float) for v in columns.values()])
        return cls(X, y, names)

    def index(self, name: str) -> int:
        return list(self.names).index(name)


@dataclass
class FitResult:
    coefficients: np.ndarray
    standard_errors: np.ndarray
    converged: bool
    separated: bool
    iterations: int
    log_likelihood: float
    max_abs_score: float = float("nan")
    singular: bool = False
    loglik_trace: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    names: Sequence[str] = ()
    separated_rows: np.ndarray = None  # rows a separating direction fits perfectly

    def coef(self, name_or_index) -> float:
        return float(self.coefficients[self._idx(name_or_index)])

    def se(self, name_or_index) -> float:
        return float(self.standard_errors[self._idx(name_or_index)])

    def _idx(self, key) -> int:
        if isinstance(key, str):
            return list(self.names).index(key)
        return int(key)


def separated_rows(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Rows that some direction of the coefficient space fits perfectly.

    With ``s = 2y - 1`` and ``z_i = s_i x_i``, the data are (quasi-)separated
    when some ``b`` has ``z_i b >= 0`` for all rows and ``> 0`` for at least
    one. The linear programme ``max sum(t)`` subject to ``0 <= t_i <= z_i b``,
    ``t_i <= 1`` puts ``t_i = 1`` on exactly the rows that can be pushed to
    infinity (the feasible ``b`` form a cone, so separating directions add up)
    and 0 on the rest. An all-False mask means the MLE exists.
    """
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    Z = (2.0 * np.asarray(y, dtype=float) - 1.0)[:, None] * X
    scale = np.abs(Z).max(axis=0)
    Z = Z / np.where(scale > 0, scale, 1.0)
    c = np.r_[np.zeros(k), -np.ones(n)]
    A = np.block([[-Z, np.eye(n)], [-Z, np.zeros((n, n))]])
    b = np.zeros(2 * n)
    bounds = [(None, None)] * k + [(0.0, 1.0)] * n
    res = linprog(c, A_ub=A, b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"separation check failed: {res.message}")
    return res.x[k:] > 0.5


def fit_logistic(X: DesignMatrix, tol: float = SCORE_TOL, max_iter: int = MAX_ITER) -> FitResult:
    """Fit a logistic regression by Newton-Raphson with step halving.

    Separation does not raise: the result comes back with ``separated=True``
    and ``converged=False``. Newton stops early when the linear predictor
    runs past 30 in absolute value; that, a failure to converge, or any row
    fitted within 1e-6 of its 0/1 response triggers an exact check with
    :func:`separated_rows`. When the check clears the data, Newton resumes
    without the linear predictor limit.
    """
    y = X.y
    n, k = X.X.shape
    if n < k:
        raise ValueError(f"need at least {k} observations, got {n}")
    ybar = y.mean()
    if ybar <= 0.0 or ybar >= 1.0:
        raise DegenerateResponseError("response is constant; logistic fit undefined")
    beta, se, status, iters, trace, gmax = _kernels.irls_logistic(X.X, y, tol, max_iter, _kernels.ETA_LIMIT)
    rows = None
    if status != _kernels.CONVERGED or _near_perfect(X.X, y, beta):
        rows = separated_rows(X.X, y)
        if not rows.any() and status == _kernels.SEPARATED:
            beta, se, status, iters, trace, gmax = _kernels.irls_logistic(X.X, y, tol, max_iter, np.inf)
    separated = rows is not None and bool(rows.any())
    return FitResult(
        coefficients=beta,
        standard_errors=se if not separated else np.full(k, np.nan),
        converged=status == _kernels.CONVERGED and not separated,
        separated=separated,
        iterations=int(iters),
        log_likelihood=float(trace[-1]),
        max_abs_score=float(gmax),
        singular=status == _kernels.SINGULAR,
        loglik_trace=trace,
        names=tuple(X.names),
        separated_rows=rows if separated else None,
    )


def _near_perfect(X: np.ndarray, y: np.ndarray, beta: np.ndarray, tol: float = 1e-6) -> bool:
    p = 1.0 / (1.0 + np.exp(-(X @ beta)))
    return bool(np.any(np.abs(y - p) < tol))


@dataclass
class LimitFit:
    """Fit on the rows/columns left once perfectly predictable rows are removed."""

    fit: FitResult
    rows: np.ndarray  # bool mask of rows kept
    columns: np.ndarray  # indices of columns kept
    first: FitResult  # the original (possibly separated) fit
    first_columns: np.ndarray = None

    def __post_init__(self):
        if self.first_columns is None:
            self.first_columns = self.columns

    def coef(self, column: int) -> float:
        return float(self.fit.coefficients[self._pos(column)])

    def se(self, column: int) -> float:
        return float(self.fit.standard_errors[self._pos(column)])

    def has(self, column: int) -> bool:
        return column in self.columns

    def _pos(self, column: int) -> int:
        return int(np.flatnonzero(self.columns == column)[0])


def _varying_columns(X: np.ndarray) -> np.ndarray:
    if X.shape[0] == 0:
        return np.array([0])
    return np.asarray([j for j in range(X.shape[1]) if j == 0 or np.ptp(X[:, j]) > 0])


def _subfit(X: DesignMatrix, rows, cols) -> FitResult:
    names = [X.names[j] for j in cols] if X.names else ()
    return fit_logistic(DesignMatrix(X.X[np.ix_(rows, cols)], X.y[rows], names))


def fit_logistic_limit(X: DesignMatrix) -> LimitFit:
    """Fit, dropping aliased columns and, under quasi-separation, separable rows.

    Column 0 is taken to be the intercept. Non-intercept columns that are
    constant are dropped first. If the fit then separates, the rows a
    separating direction sends to +/-inf are removed and the rest refitted
    (again without columns left constant); the coefficients there are the
    limit of the likelihood maximisation along the diverging direction.
    A coefficient whose column vanished in the refit was part of that
    direction.
    """
    all_rows = np.ones(len(X.y), dtype=bool)
    cols = _varying_columns(X.X)
    first = _subfit(X, all_rows, cols)
    if not first.separated:
        return LimitFit(first, all_rows, cols, first)
    keep = ~first.separated_rows
    yk = X.y[keep]
    if yk.size == 0 or yk.min() == yk.max():
        # complete separation: nothing left to fit
        return LimitFit(first, keep, cols[:0], first, cols)
    cols2 = cols[np.isin(cols, _varying_columns(X.X[keep]))]
    if keep.sum() < cols2.size:
        return LimitFit(first, keep, cols[:0], first, cols)
    return LimitFit(_subfit(X, keep, cols2), keep, cols2, first, cols)


R_EPSILON = 1e-8
R_MAXIT = 25


def fit_logistic_r_compat(X: DesignMatrix, epsilon: float = R_EPSILON, maxit: int = R_MAXIT) -> FitResult:
    """Fisher scoring with the start values and stopping rule of R's ``glm.fit``.

    Iterates until ``|dev - dev_old| / (|dev| + 0.1) < epsilon`` or ``maxit``
    steps, and returns whatever iterate it ends on. Under separation this is
    a large but finite coefficient with a huge standard error, reproducing
    what R reports together with its warning. Aliased columns are not
    handled; drop them first.
    """
    Xm, y = X.X, X.y
    mu = (y + 0.5) / 2.0
    eta = np.log(mu / (1.0 - mu))
    dev_old = np.inf
    tiny = np.finfo(float).eps
    it = 0
    converged = False
    beta = np.zeros(Xm.shape[1])
    for it in range(1, maxit + 1):
        w = mu * (1.0 - mu)
        z = eta + (y - mu) / w
        XtW = Xm.T * w
        beta = np.linalg.solve(XtW @ Xm, XtW @ z)
        eta = Xm @ beta
        mu = np.clip(1.0 / (1.0 + np.exp(-eta)), tiny, 1.0 - tiny)
        dev = -2.0 * float(np.sum(y * np.log(mu) + (1.0 - y) * np.log(1.0 - mu)))
        if abs(dev - dev_old) / (abs(dev) + 0.1) < epsilon:
            converged = True
            break
        dev_old = dev
    w = mu * (1.0 - mu)
    cov = np.linalg.inv((Xm.T * w) @ Xm)
    return FitResult(
        coefficients=beta,
        standard_errors=np.sqrt(np.diag(cov)),
        converged=converged,
        separated=bool(np.any(np.minimum(mu, 1.0 - mu) < 10 * tiny)),
        iterations=it,
        log_likelihood=-0.5 * dev,
        names=tuple(X.names),
    )


def wald_p_value(fit: FitResult, coefficient_index, null_value: float = 0.0) -> float:
    """One-sided (greater) Wald p-value ``1 - Phi((coef - null) / se)``."""
    if not fit.converged:
        raise UnconvergedFitError("Wald test needs a converged fit")
    z = (fit.coef(coefficient_index) - null_value) / fit.se(coefficient_index)
    return norm_sf(z)

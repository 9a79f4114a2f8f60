"""Logistic regression by iteratively reweighted least squares.

Shared by the comparison models (bag-of-codes / demographics regressions) and
by the calibration machinery (slope, intercept, recalibration), which regress
outcomes on linear predictors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

SEPARATION_THRESHOLD = 30.0


def expit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class LogisticFit:
    """Fitted coefficients; index 0 is the intercept."""

    coefficients: np.ndarray
    converged: bool
    n_iter: int
    separation_suspected: bool
    standard_errors: np.ndarray | None = None

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.coefficients[1:]

    def odds_ratios(self) -> np.ndarray:
        """exp(beta) for the non-intercept coefficients."""
        return np.exp(self.slopes)


def fit_logistic(X, y, ridge: float = 1e-6, max_iter: int = 100,
                 tol: float = 1e-8) -> LogisticFit:
    """Maximum-likelihood logistic regression with a small ridge for stability.

    The ridge penalises the non-intercept coefficients. Convergence is declared
    when the largest coefficient change falls below ``tol``; non-convergence
    warns and returns the best iterate, and |beta| > 30 triggers a
    perfect-separation warning.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = y.size
    design = np.hstack([np.ones((n, 1)), X])
    d = design.shape[1]
    penalty = np.full(d, ridge)
    penalty[0] = 0.0

    beta = np.zeros(d)
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        p = expit(design @ beta)
        w = np.clip(p * (1.0 - p), 1e-10, None)
        grad = design.T @ (y - p) - penalty * beta
        hess = (design * w[:, None]).T @ design + np.diag(penalty + 1e-12)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"logistic fit did not converge after {max_iter} iterations; "
                      "returning the last iterate")
    separation = bool(np.max(np.abs(beta)) > SEPARATION_THRESHOLD)
    if separation:
        warnings.warn("possible perfect separation: a coefficient exceeds "
                      f"{SEPARATION_THRESHOLD} in absolute value")
    p = expit(design @ beta)
    w = np.clip(p * (1.0 - p), 1e-10, None)
    info = (design * w[:, None]).T @ design
    try:
        se = np.sqrt(np.diag(np.linalg.inv(info)))
    except np.linalg.LinAlgError:
        se = None
    return LogisticFit(coefficients=beta, converged=converged, n_iter=n_iter,
                       separation_suspected=separation, standard_errors=se)


def predict_logistic(fit: LogisticFit, X) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and linear predictors for a design matrix (no intercept column)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    eta = fit.intercept + X @ fit.slopes
    return expit(eta), eta


def fit_intercept_with_offset(offset: np.ndarray, y, max_iter: int = 100,
                              tol: float = 1e-10) -> float:
    """Fit only an intercept in ``y ~ sigmoid(a + offset)`` (calibration-in-the-large)."""
    offset = np.asarray(offset, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    a = 0.0
    for _ in range(max_iter):
        p = expit(a + offset)
        gradient = float(np.sum(p - y))
        curvature = float(np.sum(np.clip(p * (1.0 - p), 1e-10, None)))
        step = gradient / curvature
        a -= step
        if abs(step) < tol:
            break
    return a

"""Standardisation, elastic-net fitting by coordinate descent, and CV model selection.

The penalised objective is::

    1/(2N) * ||y - b0 - X b||^2 + lam * (alpha * ||b||_1 + (1 - alpha)/2 * ||b||_2^2)

``alpha = 1`` is the lasso, ``alpha = 0`` ridge. The intercept is never
penalised.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .predictors import COLUMNS, PredictorMatrix

log = logging.getLogger(__name__)

DEFAULT_ALPHAS = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))
DEFAULT_N_LAMBDAS = 100
DEFAULT_LAMBDA_RATIO = 1e-4
DEFAULT_TOL = 1e-7
DEFAULT_MAX_SWEEPS = 100_000
# alpha below this uses this value to size the path, as pure ridge has no finite lambda_max
MIN_PATH_ALPHA = 1e-3
DEFAULT_COLUMNS = tuple(c for c in COLUMNS if c != "max_possible_spanned_angle")


class ColumnMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Standardisation


@dataclass(frozen=True)
class Standardization:
    columns: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    excluded: tuple[str, ...] = ()

    def apply(self, matrix: PredictorMatrix) -> np.ndarray:
        missing = [c for c in self.columns if c not in matrix.column_names]
        if missing:
            raise ColumnMismatchError(f"matrix lacks model columns {missing}")
        X = matrix.select(self.columns).values
        return (X - self.mean) / self.std


def standardize(
    X: np.ndarray | PredictorMatrix, names: Sequence[str] | None = None
) -> tuple[np.ndarray, Standardization]:
    """Centre each column and scale to unit sample SD.

    Zero-variance columns are dropped and listed in ``Standardization.excluded``.
    """
    if isinstance(X, PredictorMatrix):
        names = X.column_names if names is None else names
        X = X.select(names).values if tuple(names) != X.column_names else X.values
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("standardisation needs a 2-D matrix with at least two rows")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite predictor values")
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    mean = X.mean(axis=0)
    std = X.std(axis=0, ddof=1)
    keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
    excluded = tuple(n for n, k in zip(names, keep) if not k)
    if excluded:
        log.warning("excluding zero-variance predictors: %s", ", ".join(excluded))
    mean, std = mean[keep], std[keep]
    Z = (X[:, keep] - mean) / std
    kept = tuple(n for n, k in zip(names, keep) if k)
    return Z, Standardization(kept, mean, std, excluded)


# ---------------------------------------------------------------------------
# Coordinate descent


@njit(cache=True, nogil=True)
def _cd_gram(G, c, beta, l1, l2, tol, max_sweeps):
    # minimises 0.5 b'Gb - c'b + l1 |b|_1 + 0.5 l2 |b|^2 in place; returns sweeps used
    p = beta.shape[0]
    q = G @ beta
    for sweep in range(1, max_sweeps + 1):
        max_delta = 0.0
        for j in range(p):
            denom = G[j, j] + l2
            old = beta[j]
            if denom <= 0.0:
                new = 0.0
            else:
                rho = c[j] - q[j] + G[j, j] * old
                if rho > l1:
                    new = (rho - l1) / denom
                elif rho < -l1:
                    new = (rho + l1) / denom
                else:
                    new = 0.0
            d = new - old
            if d != 0.0:
                beta[j] = new
                for k in range(p):
                    q[k] += G[k, j] * d
                ad = abs(d)
                if ad > max_delta:
                    max_delta = ad
        if max_delta < tol:
            return sweep
    return max_sweeps


def _polish(G, c, beta, l1, l2):
    """Exact solution on the support found by coordinate descent, if it satisfies the KKT conditions.

    Coordinate descent stopped on a step-size tolerance can sit 1e-5 away from
    the optimum when predictors are strongly correlated. With the support and
    signs fixed the optimality conditions are linear, so one solve finishes
    the job. The refined vector is kept only when it keeps every sign and the
    excluded coordinates still satisfy their subgradient bound.
    """
    p = beta.shape[0]
    diag = np.diag(G) + l2
    active = (beta != 0.0) if l1 > 0.0 else (diag > 0.0)
    if not active.any():
        return beta
    A = np.flatnonzero(active)
    sign = np.sign(beta[A])
    M = G[np.ix_(A, A)] + l2 * np.eye(A.size)
    rhs = c[A] - l1 * sign
    try:
        sol = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        return beta
    if not np.all(np.isfinite(sol)):
        return beta
    if l1 > 0.0 and not np.all(np.sign(sol) == sign):
        return beta
    if A.size < p:
        grad = c - G[:, A] @ sol
        slack = l1 * (1.0 + 1e-9) + 1e-12 * max(1.0, float(np.abs(c).max()))
        if np.any(np.abs(np.delete(grad, A)) > slack):
            return beta
    out = np.zeros(p)
    out[A] = sol
    return out


@dataclass(frozen=True)
class _Problem:
    """Centred sufficient statistics for one design matrix."""

    G: np.ndarray
    c: np.ndarray
    x_mean: np.ndarray
    y_mean: float
    n: int

    @classmethod
    def build(cls, X: np.ndarray, y: np.ndarray) -> _Problem:
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("non-finite inputs to penalised fit")
        n = X.shape[0]
        xm = X.mean(axis=0)
        ym = float(y.mean())
        Xc = X - xm
        yc = y - ym
        return cls(Xc.T @ Xc / n, Xc.T @ yc / n, xm, ym, n)

    def lambda_max(self, alpha: float) -> float:
        return float(np.max(np.abs(self.c), initial=0.0) / max(alpha, MIN_PATH_ALPHA))

    def solve(self, alpha, lam, beta0=None, tol=DEFAULT_TOL, max_sweeps=DEFAULT_MAX_SWEEPS):
        beta = np.zeros(self.c.shape[0]) if beta0 is None else np.array(beta0, dtype=float)
        l1, l2 = lam * alpha, lam * (1.0 - alpha)
        sweeps = _cd_gram(self.G, self.c, beta, l1, l2, tol, max_sweeps)
        if sweeps < max_sweeps:
            beta = _polish(self.G, self.c, beta, l1, l2)
        return beta, sweeps

    def intercept(self, beta) -> float:
        return float(self.y_mean - self.x_mean @ beta)


def objective(X, y, coef, intercept, alpha, lam) -> float:
    r = np.asarray(y) - intercept - np.asarray(X) @ coef
    pen = alpha * np.abs(coef).sum() + 0.5 * (1.0 - alpha) * coef @ coef
    return float(r @ r / (2 * len(r)) + lam * pen)


def fit_penalized(
    X,
    y,
    alpha: float,
    lam: float,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    warm_start=None,
) -> tuple[np.ndarray, float]:
    """Elastic-net coefficients and intercept at a single (alpha, lambda).

    Parameters
    ----------
    X : array (n, p)
        Predictors, normally standardised. Columns are centred internally so
        the intercept is handled exactly.
    y : array (n,)
    alpha : float
        Mixing weight in [0, 1]; 1 is the lasso.
    lam : float
        Overall penalty, >= 0.
    tol : float
        Stop when no coefficient moves by more than this over a full sweep.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    prob = _Problem.build(X, y)
    beta, sweeps = prob.solve(alpha, lam, warm_start, tol, max_sweeps)
    if sweeps >= max_sweeps:
        log.warning("coordinate descent hit %d sweeps without converging", max_sweeps)
    return beta, prob.intercept(beta)


def lambda_path(lam_max: float, n: int = DEFAULT_N_LAMBDAS, ratio: float = DEFAULT_LAMBDA_RATIO):
    """Decreasing log-spaced grid from ``lam_max`` to ``ratio * lam_max``."""
    if lam_max <= 0:
        return np.zeros(n)
    return np.geomspace(lam_max, lam_max * ratio, n)


def coefficient_path(X, y, alpha: float, lambdas, tol=DEFAULT_TOL, max_sweeps=DEFAULT_MAX_SWEEPS):
    """Warm-started solutions along ``lambdas``; returns (coefs (L, p), intercepts (L,))."""
    prob = _Problem.build(X, y)
    return _path(prob, alpha, lambdas, tol, max_sweeps)


def _path(prob: _Problem, alpha, lambdas, tol, max_sweeps):
    p = prob.c.shape[0]
    coefs = np.zeros((len(lambdas), p))
    intercepts = np.zeros(len(lambdas))
    beta = np.zeros(p)
    for i, lam in enumerate(lambdas):
        l1, l2 = lam * alpha, lam * (1.0 - alpha)
        if _cd_gram(prob.G, prob.c, beta, l1, l2, tol, max_sweeps) < max_sweeps:
            beta = _polish(prob.G, prob.c, beta, l1, l2)
        coefs[i] = beta
        intercepts[i] = prob.intercept(beta)
    return coefs, intercepts


# ---------------------------------------------------------------------------
# Cross-validation


@dataclass(frozen=True)
class CVTable:
    alphas: np.ndarray  # (A,)
    lambdas: np.ndarray  # (A, L)
    mean: np.ndarray  # (A, L) mean held-out MSE
    sd: np.ndarray  # (A, L) SD of held-out MSE across folds

    def rows(self):
        for a_i, a in enumerate(self.alphas):
            for l_i, lam in enumerate(self.lambdas[a_i]):
                yield float(a), float(lam), float(self.mean[a_i, l_i]), float(self.sd[a_i, l_i])


@dataclass(frozen=True)
class ScoringModel:
    standardization: Standardization | None
    coefficients: np.ndarray
    intercept: float
    alpha: float
    lambda_: float
    cv_table: CVTable | None = None
    fold_errors: np.ndarray | None = field(default=None, repr=False)  # (A, L, k)

    @property
    def columns(self) -> tuple[str, ...]:
        return self.standardization.columns if self.standardization else ()

    def to_json(self) -> str:
        st = self.standardization
        doc = {
            "columns": list(st.columns),
            "mean": st.mean.tolist(),
            "std": st.std.tolist(),
            "excluded": list(st.excluded),
            "coefficients": self.coefficients.tolist(),
            "intercept": self.intercept,
            "alpha": self.alpha,
            "lambda": self.lambda_,
        }
        if self.cv_table is not None:
            t = self.cv_table
            doc["cv_table"] = {
                "alphas": t.alphas.tolist(),
                "lambdas": t.lambdas.tolist(),
                "mean": t.mean.tolist(),
                "sd": t.sd.tolist(),
            }
        return json.dumps(doc, indent=1)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> ScoringModel:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        st = Standardization(
            tuple(doc["columns"]),
            np.array(doc["mean"], dtype=float),
            np.array(doc["std"], dtype=float),
            tuple(doc.get("excluded", ())),
        )
        table = None
        if "cv_table" in doc:
            t = doc["cv_table"]
            table = CVTable(*(np.array(t[k], dtype=float) for k in ("alphas", "lambdas", "mean", "sd")))
        return cls(
            st,
            np.array(doc["coefficients"], dtype=float),
            float(doc["intercept"]),
            float(doc["alpha"]),
            float(doc["lambda"]),
            table,
        )


def make_folds(n: int, k: int, seed) -> np.ndarray:
    """Fold label per row from a seeded shuffle; fold sizes differ by at most one."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n:
        raise ValueError(f"{k} folds requested for only {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % k
    return folds


def _fold_errors(X, y, train, test, alphas, lambdas, tol, max_sweeps):
    prob = _Problem.build(X[train], y[train])
    err = np.empty(lambdas.shape)
    Xt, yt = X[test], y[test]
    for a_i, a in enumerate(alphas):
        coefs, ints = _path(prob, a, lambdas[a_i], tol, max_sweeps)
        resid = yt[None, :] - ints[:, None] - coefs @ Xt.T
        err[a_i] = np.mean(resid**2, axis=1)
    return err


def one_sd_lambda_index(mean: np.ndarray, sd: np.ndarray, lambdas: np.ndarray) -> int:
    """Index of the largest lambda whose CV error is within one SD of the minimum."""
    best = int(np.argmin(mean))
    limit = mean[best] + sd[best]
    ok = np.flatnonzero(mean <= limit)
    return int(ok[np.argmax(lambdas[ok])])


def cross_validate(
    X,
    y,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    lambda_path_n: int = DEFAULT_N_LAMBDAS,
    k: int = 10,
    seed=0,
    *,
    lambdas=None,
    folds=None,
    standardization: Standardization | None = None,
    tol: float = DEFAULT_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    n_jobs: int = 1,
) -> ScoringModel:
    """K-fold CV over an (alpha, lambda) grid, then refit on all rows.

    The alpha with the lowest CV error wins. Within that alpha the chosen
    lambda is the largest one whose mean CV error does not exceed the minimum
    mean error plus the fold-error SD at the minimising cell.

    ``lambdas`` may be given as one shared decreasing grid or one grid per
    alpha; by default each alpha gets a log grid sized from the full data.
    ``folds`` overrides the seeded shuffle with explicit per-row fold labels.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    alphas = np.asarray(alphas, dtype=float)
    full = _Problem.build(X, y)
    if lambdas is None:
        lambdas = np.array([lambda_path(full.lambda_max(a), lambda_path_n) for a in alphas])
    else:
        lambdas = np.asarray(lambdas, dtype=float)
        if lambdas.ndim == 1:
            lambdas = np.tile(lambdas, (len(alphas), 1))
    if folds is None:
        folds = make_folds(n, k, seed)
    else:
        folds = np.asarray(folds, dtype=np.int64)
        if folds.shape != (n,):
            raise ValueError("folds must give one label per row")
    labels = np.unique(folds)
    if labels.size < 2:
        raise ValueError("need at least 2 folds")

    def run(f):
        test = folds == f
        return _fold_errors(X, y, ~test, test, alphas, lambdas, tol, max_sweeps)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            errs = list(ex.map(run, labels))
    else:
        errs = [run(f) for f in labels]
    fold_err = np.stack(errs, axis=-1)
    mean = fold_err.mean(axis=-1)
    sd = fold_err.std(axis=-1, ddof=1)

    best_per_alpha = mean.min(axis=1)
    a_i = int(np.argmin(best_per_alpha))
    l_i = one_sd_lambda_index(mean[a_i], sd[a_i], lambdas[a_i])
    alpha = float(alphas[a_i])
    lam = float(lambdas[a_i, l_i])

    coefs, ints = _path(full, alpha, lambdas[a_i, : l_i + 1], tol, max_sweeps)
    return ScoringModel(
        standardization,
        coefs[-1].copy(),
        float(ints[-1]),
        alpha,
        lam,
        CVTable(alphas, lambdas, mean, sd),
        fold_err,
    )


def fit_model(
    matrix: PredictorMatrix,
    labels,
    columns: Sequence[str] = DEFAULT_COLUMNS,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    k: int = 10,
    seed=0,
    n_jobs: int = 1,
) -> ScoringModel:
    """Standardise the chosen columns and run :func:`cross_validate`."""
    Z, st = standardize(matrix, columns)
    if Z.shape[1] == 0:
        raise ValueError("no predictor columns with non-zero variance")
    return cross_validate(Z, labels, alphas, k=k, seed=seed, standardization=st, n_jobs=n_jobs)


def score(model: ScoringModel, matrix: PredictorMatrix | np.ndarray) -> np.ndarray:
    """Predicted score per row: intercept plus standardised row times coefficients."""
    if isinstance(matrix, PredictorMatrix):
        if model.standardization is None:
            raise ColumnMismatchError("model has no standardisation; pass a standardised array")
        Z = model.standardization.apply(matrix)
    else:
        Z = np.asarray(matrix, dtype=float)
        if Z.ndim != 2 or Z.shape[1] != model.coefficients.size:
            raise ColumnMismatchError(
                f"expected {model.coefficients.size} standardised columns, got shape {Z.shape}"
            )
    return model.intercept + Z @ model.coefficients


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass(frozen=True)
class DiagnosticsReport:
    columns: tuple[str, ...]
    r2: np.ndarray
    lasso_lambdas: np.ndarray
    lasso_path: np.ndarray
    lasso_lambda: float
    lasso_coef: np.ndarray
    ridge_lambdas: np.ndarray
    ridge_path: np.ndarray
    ridge_lambda: float
    ridge_coef: np.ndarray
    lasso_zeroed: tuple[str, ...]
    ridge_zeroed: tuple[str, ...]

    def format(self) -> str:
        lines = [f"{'predictor':<28}{'R2':>9}{'lasso':>12}{'ridge':>12}"]
        for j, name in enumerate(self.columns):
            lines.append(
                f"{name:<28}{self.r2[j]:>9.4f}{self.lasso_coef[j]:>12.5f}{self.ridge_coef[j]:>12.5f}"
            )
        lines.append(f"lasso lambda {self.lasso_lambda:.6g}; zeroed: {', '.join(self.lasso_zeroed) or '-'}")
        lines.append(f"ridge lambda {self.ridge_lambda:.6g}; near zero: {', '.join(self.ridge_zeroed) or '-'}")
        return "\n".join(lines)


def column_r2(X, y) -> np.ndarray:
    """Squared Pearson correlation of each column with ``y`` (0 for constant columns)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    num = Xc.T @ yc
    den = np.sqrt((Xc**2).sum(axis=0) * (yc @ yc))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 0, num / den, 0.0)
    return r**2


def predictor_diagnostics(
    X,
    y,
    names: Sequence[str] | None = None,
    k: int = 10,
    seed=0,
    ridge_rel_zero: float = 0.05,
) -> DiagnosticsReport:
    """Per-predictor R2 plus pure-lasso and pure-ridge CV fits.

    A lasso coefficient is reported as zeroed when it is exactly 0 at the
    CV-selected lambda. Ridge never produces exact zeros, so a ridge
    coefficient counts as zeroed when its magnitude is below
    ``ridge_rel_zero`` times the largest ridge coefficient.
    """
    X = np.asarray(X, dtype=float)
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    lasso = cross_validate(X, y, alphas=[1.0], k=k, seed=seed)
    ridge = cross_validate(X, y, alphas=[0.0], k=k, seed=seed)
    lasso_lams = lasso.cv_table.lambdas[0]
    ridge_lams = ridge.cv_table.lambdas[0]
    lasso_path_, _ = coefficient_path(X, y, 1.0, lasso_lams)
    ridge_path_, _ = coefficient_path(X, y, 0.0, ridge_lams)
    rmax = np.max(np.abs(ridge.coefficients), initial=0.0)
    return DiagnosticsReport(
        names,
        column_r2(X, y),
        lasso_lams,
        lasso_path_,
        lasso.lambda_,
        lasso.coefficients,
        ridge_lams,
        ridge_path_,
        ridge.lambda_,
        ridge.coefficients,
        tuple(n for n, b in zip(names, lasso.coefficients) if b == 0.0),
        tuple(
            n
            for n, b in zip(names, ridge.coefficients)
            if rmax == 0.0 or abs(b) < ridge_rel_zero * rmax
        ),
    )


def save_scores(ids, scores, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("landmark_id,score\n")
        for lid, s in zip(np.asarray(ids).tolist(), np.asarray(scores).tolist()):
            fh.write(f"{lid},{s!r}\n")


def load_scores(path) -> tuple[np.ndarray, np.ndarray]:
    ids, vals = [], []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "landmark_id,score":
            raise ValueError(f"{path}: expected header 'landmark_id,score'")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                a, b = line.split(",")
                ids.append(int(a))
                vals.append(float(b))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed score row") from None
    return np.array(ids, dtype=np.int64), np.array(vals)


def r2_score(y, pred) -> float:
    y = np.asarray(y, dtype=float)
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else math.nan

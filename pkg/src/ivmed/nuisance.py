"""Regression learners for the nuisance functions.

Four learner kinds: intercept-only, main-effects GLM (IRLS or least
squares), and an L1-penalized GLM over an interaction expansion fitted by
cyclic coordinate descent along a lambda path with cross-validated lambda.

Rows sharing a design pattern are collapsed to (total weight, mean outcome)
before fitting; for the logistic and squared-error losses this leaves the
minimizer unchanged, and with binary covariates it shrinks the problem to a
few dozen rows.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from scipy.special import expit

from .data import IvmedError, LearnerKind, LearnerSpec

CLIP = 0.001
CD_TOL = 1e-7
CD_MAX_SWEEPS = 10_000


class SingularDesign(IvmedError):
    pass


class UnknownColumn(IvmedError):
    pass


class DegenerateOutcome(IvmedError):
    """Raised only by :func:`check_outcome`; :func:`fit` falls back to a
    flagged intercept model instead."""


# ---------------------------------------------------------------------------
# design expansion


@dataclass(frozen=True)
class FeatureMap:
    """Input column names and the product terms built from them."""

    inputs: Tuple[str, ...]
    terms: Tuple[Tuple[int, ...], ...]
    centers: Optional[Tuple[float, ...]] = None

    @classmethod
    def main(cls, inputs: Sequence[str]) -> "FeatureMap":
        return cls(tuple(inputs), tuple((j,) for j in range(len(inputs))))

    @classmethod
    def interactions(cls, inputs: Sequence[str], max_order: Optional[int] = 2,
                     centers: Optional[Sequence[float]] = None) -> "FeatureMap":
        """All products of distinct inputs up to ``max_order`` factors.

        Products are formed from inputs minus ``centers``.  With every lower
        order present this spans the same space as raw products, but the
        columns are far less correlated, which speeds coordinate descent.
        """
        k = len(inputs)
        top = k if max_order is None else min(max_order, k)
        terms = [c for order in range(1, top + 1) for c in itertools.combinations(range(k), order)]
        return cls(tuple(inputs), tuple(terms), None if centers is None else tuple(float(c) for c in centers))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(":".join(self.inputs[j] for j in t) for t in self.terms)

    def expand(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != len(self.inputs):
            raise ValueError(f"expected {len(self.inputs)} input columns, got {x.shape[1]}")
        if self.centers is not None:
            x = x - np.asarray(self.centers)
        out = np.ones((x.shape[0], len(self.terms)))
        for j, t in enumerate(self.terms):
            for i in t:
                out[:, j] *= x[:, i]
        return out


@dataclass(frozen=True)
class PredictionRequest:
    """Rows to predict at (name -> column) with some inputs held fixed."""

    rows: Mapping[str, np.ndarray]
    overrides: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class FittedModel:
    """Coefficients on the original input scale; ``coefficients[0]`` is the
    intercept and ``coefficients[1:]`` follow ``feature_map.terms``."""

    kind: LearnerKind
    coefficients: np.ndarray
    feature_map: FeatureMap
    outcome_type: str
    lam: float = 0.0
    degenerate: bool = False
    clip: float = CLIP
    link: str = "logit"

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        design = self.feature_map.expand(x)
        return self.coefficients[0] + design @ self.coefficients[1:]

    def predict(self, data) -> np.ndarray:
        """Predictions at an input matrix or a :class:`PredictionRequest`.

        Binary models return probabilities clipped to ``[clip, 1 - clip]``.
        """
        x = self._matrix(data) if isinstance(data, PredictionRequest) else np.asarray(data, dtype=float)
        eta = self.linear_predictor(x)
        mean = expit(eta) if self.link == "logit" else eta
        if self.outcome_type == "binary":
            return np.clip(mean, self.clip, 1.0 - self.clip)
        return mean

    def _matrix(self, req: PredictionRequest) -> np.ndarray:
        for name in req.overrides:
            if name not in self.feature_map.inputs:
                raise UnknownColumn(f"override column {name!r} is not a model input")
        n = None
        cols = []
        for name in self.feature_map.inputs:
            if name in req.overrides:
                cols.append(None)
                continue
            if name not in req.rows:
                raise UnknownColumn(f"column {name!r} missing from prediction rows")
            v = np.asarray(req.rows[name], dtype=float)
            n = len(v)
            cols.append(v)
        if n is None:
            n = len(next(iter(req.rows.values()))) if req.rows else 1
        return np.column_stack([
            np.full(n, float(req.overrides[name])) if c is None else c
            for name, c in zip(self.feature_map.inputs, cols)
        ])


def predict(model: FittedModel, req) -> np.ndarray:
    return model.predict(req)


# ---------------------------------------------------------------------------
# small helpers


def _softplus(eta):
    return np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta)))


def compress(x: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Collapse rows with identical design to (pattern, weight, mean y)."""
    if x.shape[1] == 0:
        tw = w.sum()
        return np.zeros((1, 0)), np.array([tw]), np.array([np.dot(w, y) / tw])
    pats, inv = np.unique(x, axis=0, return_inverse=True)
    inv = inv.ravel()
    tw = np.bincount(inv, weights=w, minlength=len(pats))
    ty = np.bincount(inv, weights=w * y, minlength=len(pats))
    keep = tw > 0
    return pats[keep], tw[keep], ty[keep] / tw[keep]


def check_outcome(y, outcome_type: str) -> None:
    if outcome_type == "binary" and not np.all((y == 0) | (y == 1)):
        raise ValueError("binary outcome must take values in {0, 1}")
    if np.ptp(y) == 0:
        raise DegenerateOutcome("outcome is constant")


def _intercept_model(spec, fmap, y, w, outcome_type, degenerate=False) -> FittedModel:
    mean = float(np.dot(w, y) / w.sum())
    if outcome_type == "binary":
        m = min(max(mean, CLIP), 1.0 - CLIP)
        b0 = float(np.log(m / (1.0 - m)))
    else:
        b0 = mean
    coef = np.zeros(len(fmap.terms) + 1)
    coef[0] = b0
    link = "logit" if outcome_type == "binary" else "identity"
    return FittedModel(spec.kind, coef, fmap, outcome_type, degenerate=degenerate, link=link)


# ---------------------------------------------------------------------------
# unpenalized fits


def newton_logistic(design: np.ndarray, y: np.ndarray, w: np.ndarray, ridge: float = 0.0,
                    max_iter: int = 200, tol: float = 1e-12) -> np.ndarray:
    """Weighted logistic regression by Newton steps with step-halving.

    ``design`` excludes the intercept column; returns ``[b0, b...]``.
    ``y`` may be fractional (compressed rows).
    """
    X = np.column_stack([np.ones(len(y)), design])
    w = w / w.sum()
    beta = np.zeros(X.shape[1])
    ybar = float(np.clip(np.dot(w, y), 1e-6, 1 - 1e-6))
    beta[0] = np.log(ybar / (1 - ybar))
    pen = np.full(X.shape[1], ridge)
    pen[0] = 0.0

    def objective(b):
        eta = X @ b
        return float(np.dot(w, _softplus(eta) - y * eta) + 0.5 * np.dot(pen, b * b))

    f = objective(beta)
    for _ in range(max_iter):
        p = expit(X @ beta)
        grad = X.T @ (w * (p - y)) + pen * beta
        hess = (X * (w * p * (1 - p))[:, None]).T @ X + np.diag(pen)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta - t * step
            fc = objective(cand)
            if fc <= f or t < 1e-10:
                break
            t *= 0.5
        done = np.max(np.abs(cand - beta)) < 1e-10 or f - fc < tol * max(1.0, abs(f))
        beta, f = cand, min(f, fc)
        if done:
            break
    return beta


def _least_squares(design, y, w) -> np.ndarray:
    X = np.column_stack([np.ones(len(y)), design])
    sw = w / w.sum()
    xtx = (X * sw[:, None]).T @ X
    xty = X.T @ (sw * y)
    for ridge in (0.0, 1e-10, 1e-8, 1e-6):
        try:
            reg = xtx + ridge * max(np.trace(xtx), 1.0) * np.eye(len(xtx))
            beta = np.linalg.solve(reg, xty)
            if np.all(np.isfinite(beta)) and np.linalg.cond(reg) < 1e12:
                return beta
        except np.linalg.LinAlgError:
            continue
    raise SingularDesign("collinear design in least-squares fit")


# ---------------------------------------------------------------------------
# coordinate descent kernels (standardized design, weights summing to one)


@njit(cache=True)
def _soft(v, lam):
    if v > lam:
        return v - lam
    if v < -lam:
        return v + lam
    return 0.0


@njit(cache=True)
def _logistic_loss(eta, y, w):
    s = 0.0
    for i in range(eta.shape[0]):
        e = eta[i]
        sp = (e if e > 0 else 0.0) + np.log1p(np.exp(-abs(e)))
        s += w[i] * (sp - y[i] * e)
    return s


@njit(cache=True)
def cd_logistic(X, y, w, lam, beta, tol, max_sweeps, trace):
    """Coordinate descent on ``sum_i w_i l(y_i, eta_i) + lam * |beta[1:]|``.

    ``beta[0]`` is the unpenalized intercept and ``beta`` is updated in
    place.  Each sweep is one cyclic pass of exact coordinate minimization
    over the local quadratic model of the log-likelihood (the proximal
    Newton subproblem), followed by a backtracking step on the true
    objective that rejects any increase; the objective is therefore
    nonincreasing across sweeps.  Returns (sweeps, objective after each
    sweep if ``trace`` else an empty array).
    """
    n, p = X.shape
    eta = np.full(n, beta[0])
    for j in range(p):
        if beta[j + 1] != 0.0:
            eta += X[:, j] * beta[j + 1]
    cap = np.empty(p)
    for j in range(p):
        acc = 0.0
        for i in range(n):
            acc += w[i] * X[i, j] * X[i, j]
        cap[j] = 0.25 * acc
    hist = np.empty(max_sweeps if trace else 0)
    pen = 0.0
    for j in range(p):
        pen += abs(beta[j + 1])
    obj = _logistic_loss(eta, y, w) + lam * pen
    wt = np.empty(n)
    res = np.empty(n)
    s = np.empty(n)
    new_eta = np.empty(n)
    delta = np.empty(p + 1)
    sweeps = 0
    for sweep in range(max_sweeps):
        for i in range(n):
            pr = 1.0 / (1.0 + np.exp(-eta[i]))
            wt[i] = w[i] * pr * (1.0 - pr)
            res[i] = w[i] * (pr - y[i])
            s[i] = 0.0
        # intercept
        g0 = 0.0
        h0 = 0.0
        for i in range(n):
            g0 += res[i]
            h0 += wt[i]
        h0 = max(h0, 1e-3 * 0.25)
        d0 = -g0 / h0
        delta[0] = d0
        for i in range(n):
            s[i] = d0
        for j in range(p):
            g = 0.0
            h = 0.0
            for i in range(n):
                g += X[i, j] * (res[i] + wt[i] * s[i])
                h += wt[i] * X[i, j] * X[i, j]
            h = max(h, 1e-3 * cap[j])
            b = beta[j + 1]
            nb = _soft(h * b - g, lam) / h
            d = nb - b
            delta[j + 1] = d
            if d != 0.0:
                for i in range(n):
                    s[i] += d * X[i, j]
        # backtracking on the true objective
        t = 1.0
        accepted = False
        while t > 1e-10:
            for i in range(n):
                new_eta[i] = eta[i] + t * s[i]
            npen = 0.0
            for j in range(p):
                npen += abs(beta[j + 1] + t * delta[j + 1])
            nobj = _logistic_loss(new_eta, y, w) + lam * npen
            if nobj <= obj:
                accepted = True
                break
            t *= 0.5
        max_change = 0.0
        if accepted:
            for j in range(p + 1):
                beta[j] += t * delta[j]
                if abs(t * delta[j]) > max_change:
                    max_change = abs(t * delta[j])
            eta[:] = new_eta
            obj = nobj
        sweeps = sweep + 1
        if trace:
            hist[sweep] = obj
        if max_change < tol:
            break
    return sweeps, hist[:sweeps]


@njit(cache=True)
def cd_gaussian(X, y, w, lam, beta, tol, max_sweeps, trace):
    """Exact coordinate descent on ``0.5 sum_i w_i (y_i - eta_i)^2 + lam |beta[1:]|``."""
    n, p = X.shape
    r = y - beta[0]
    for j in range(p):
        if beta[j + 1] != 0.0:
            r -= X[:, j] * beta[j + 1]
    xx = np.empty(p)
    for j in range(p):
        acc = 0.0
        for i in range(n):
            acc += w[i] * X[i, j] * X[i, j]
        xx[j] = acc
    hist = np.empty(max_sweeps if trace else 0)
    sweeps = 0
    for sweep in range(max_sweeps):
        max_change = 0.0
        d0 = 0.0
        for i in range(n):
            d0 += w[i] * r[i]
        beta[0] += d0
        for i in range(n):
            r[i] -= d0
        max_change = abs(d0)
        for j in range(p):
            if xx[j] <= 0.0:
                continue
            b = beta[j + 1]
            rho = 0.0
            for i in range(n):
                rho += w[i] * X[i, j] * r[i]
            nb = _soft(rho + xx[j] * b, lam) / xx[j]
            d = nb - b
            if d != 0.0:
                for i in range(n):
                    r[i] -= d * X[i, j]
                beta[j + 1] = nb
                if abs(d) > max_change:
                    max_change = abs(d)
        sweeps = sweep + 1
        if trace:
            obj = 0.0
            for i in range(n):
                obj += 0.5 * w[i] * r[i] * r[i]
            for j in range(p):
                obj += lam * abs(beta[j + 1])
            hist[sweep] = obj
        if max_change < tol:
            break
    return sweeps, hist[:sweeps]


# ---------------------------------------------------------------------------
# L1 path


@dataclass
class _Standardized:
    X: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    keep: np.ndarray


def _standardize(design: np.ndarray, w: np.ndarray) -> _Standardized:
    center = w @ design
    scale = np.sqrt(w @ (design - center) ** 2)
    keep = scale > 1e-12 * np.maximum(1.0, np.abs(center))
    X = np.zeros_like(design)
    X[:, keep] = (design[:, keep] - center[keep]) / scale[keep]
    return _Standardized(X[:, keep].copy(), center, scale, keep)


def lambda_max(X: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    """Smallest penalty at which every non-intercept coefficient is zero."""
    if X.shape[1] == 0:
        return 1.0
    r = y - np.dot(w, y)
    return float(np.max(np.abs(X.T @ (w * r))))


def _run_path(std: _Standardized, y, w, lambdas, binary, tol=CD_TOL, max_sweeps=CD_MAX_SWEEPS):
    """Warm-started coefficients (standardized scale) at each lambda."""
    p = std.X.shape[1]
    beta = np.zeros(p + 1)
    ybar = float(np.dot(w, y))
    if binary:
        yb = min(max(ybar, 1e-6), 1 - 1e-6)
        beta[0] = np.log(yb / (1 - yb))
    else:
        beta[0] = ybar
    kernel = cd_logistic if binary else cd_gaussian
    out = np.empty((len(lambdas), p + 1))
    for k, lam in enumerate(lambdas):
        kernel(std.X, y, w, float(lam), beta, tol, max_sweeps, False)
        out[k] = beta
    return out


def _to_original(std: _Standardized, beta_std: np.ndarray) -> np.ndarray:
    p_full = len(std.keep)
    coef = np.zeros(p_full + 1)
    slopes = beta_std[1:] / std.scale[std.keep]
    coef[1:][std.keep] = slopes
    coef[0] = beta_std[0] - np.dot(slopes, std.center[std.keep])
    return coef


def _canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    keys = np.column_stack([x, y])
    return np.lexsort(keys.T[::-1])


def _cv_folds(n: int, k: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(seed))
    fold = np.empty(n, dtype=np.int64)
    fold[rng.permutation(n)] = np.arange(n) % k
    return fold


def _cv_loss(pred, ybar, w, binary):
    """Held-out loss from pattern totals ``w`` and pattern means ``ybar``.

    For squared error the within-pattern variance is omitted; it does not
    depend on the coefficients.
    """
    if binary:
        p = np.clip(pred, CLIP, 1 - CLIP)
        return float(-np.dot(w, ybar * np.log(p) + (1 - ybar) * np.log(1 - p)))
    return float(np.dot(w, (ybar - pred) ** 2))


def _patterns(x: np.ndarray):
    """Distinct input rows and each row's pattern index."""
    if x.shape[1] == 0:
        return np.zeros((1, 0)), np.zeros(len(x), dtype=np.int64)
    pats, inv = np.unique(x, axis=0, return_inverse=True)
    return pats, inv.ravel()


def _aggregate(inv, n_pat, y, w, mask=None):
    if mask is not None:
        inv, y, w = inv[mask], y[mask], w[mask]
    tw = np.bincount(inv, weights=w, minlength=n_pat)
    ty = np.bincount(inv, weights=w * y, minlength=n_pat)
    keep = tw > 0
    return keep, tw[keep], ty[keep] / tw[keep]


def _fit_l1(spec: LearnerSpec, fmap: FeatureMap, x, y, w, binary, seed) -> FittedModel:
    pats, inv = _patterns(x)
    pdesign = fmap.expand(pats)
    keep, cw, cy = _aggregate(inv, len(pats), y, w)
    cw = cw / cw.sum()
    std = _standardize(pdesign[keep], cw)
    if spec.lambda_grid is not None:
        lambdas = np.asarray(spec.lambda_grid)
    else:
        lmax = lambda_max(std.X, cy, cw)
        if lmax <= 0:
            lmax = 1.0
        lambdas = np.geomspace(lmax, lmax * spec.lambda_min_ratio, spec.n_lambda)

    if len(lambdas) == 1:
        best = 0
    else:
        order = _canonical_order(x, y)
        fold = np.empty(len(y), dtype=np.int64)
        fold[order] = _cv_folds(len(y), spec.cv_folds_for_lambda, seed)
        loss = np.zeros(len(lambdas))
        for k in range(spec.cv_folds_for_lambda):
            tr, te = fold != k, fold == k
            if not te.any() or not tr.any():
                continue
            tkeep, tw, ty = _aggregate(inv, len(pats), y, w, tr)
            tw = tw / tw.sum()
            tstd = _standardize(pdesign[tkeep], tw)
            path = _run_path(tstd, ty, tw, lambdas, binary)
            vkeep, vw, vy = _aggregate(inv, len(pats), y, w, te)
            vdesign = pdesign[vkeep]
            for li in range(len(lambdas)):
                coef = _to_original(tstd, path[li])
                eta = coef[0] + vdesign @ coef[1:]
                pred = expit(eta) if binary else eta
                loss[li] += _cv_loss(pred, vy, vw, binary)
        best = int(np.argmin(loss))
    path = _run_path(std, cy, cw, lambdas[: best + 1], binary)
    coef = _to_original(std, path[best])
    return FittedModel(spec.kind, coef, fmap, "binary" if binary else "continuous", lam=float(lambdas[best]),
                       link="logit" if binary else "identity")


# ---------------------------------------------------------------------------
# public entry point


def fit(spec: LearnerSpec, x, y, outcome_type: str = "binary", names: Optional[Sequence[str]] = None,
        weights=None, seed: int = 0, clip: float = CLIP) -> FittedModel:
    """Fit one learner.

    Parameters
    ----------
    spec : LearnerSpec
    x : (n, k) array of inputs; ``names`` labels its columns.
    y : (n,) outcome; binary outcomes must be 0/1.
    outcome_type : ``"binary"`` or ``"continuous"``.  Logistic kinds given a
        continuous outcome fit the squared-error analogue.
    weights : optional nonnegative row weights.
    seed : seed of the internal cross-validation split.
    clip : probability clipping bound applied by ``predict`` (binary only).

    A constant outcome yields an intercept model with ``degenerate=True``.
    """
    model = _fit(spec, x, y, outcome_type, names, weights, seed)
    return replace(model, clip=clip) if clip != model.clip else model


def _fit(spec, x, y, outcome_type, names, weights, seed) -> FittedModel:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != len(y) or len(y) < 2:
        raise ValueError("x and y must have the same number (>= 2) of rows")
    if outcome_type not in ("binary", "continuous"):
        raise ValueError("outcome_type must be 'binary' or 'continuous'")
    if outcome_type == "binary" and not np.all((y == 0) | (y == 1)):
        raise ValueError("binary outcome must take values in {0, 1}")
    names = tuple(names) if names is not None else tuple(f"x{j + 1}" for j in range(x.shape[1]))
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    binary = outcome_type == "binary"

    if spec.kind is LearnerKind.LOGISTIC_L1_INTERACTIONS:
        centers = (w @ x) / w.sum()
        fmap = FeatureMap.interactions(names, spec.max_order, centers)
    else:
        fmap = FeatureMap.main(names)
    live = w > 0
    if np.ptp(y[live]) == 0:
        return _intercept_model(spec, fmap, y, w, outcome_type, degenerate=True)
    if spec.kind is LearnerKind.INTERCEPT_ONLY:
        return _intercept_model(spec, fmap, y, w, outcome_type)
    if spec.kind is LearnerKind.LOGISTIC_L1_INTERACTIONS:
        return _fit_l1(spec, fmap, x, y, w, binary, seed)

    design = fmap.expand(x)
    cx, cw, cy = compress(design, y, w)
    if binary and spec.kind is LearnerKind.LOGISTIC_MAIN:
        coef = None
        for ridge in (0.0, 1e-8, 1e-6, 1e-4):
            coef = newton_logistic(cx, cy, cw, ridge=ridge)
            if np.all(np.isfinite(coef)) and np.max(np.abs(coef)) < 50:
                break
        return FittedModel(spec.kind, coef, fmap, outcome_type)
    coef = _least_squares(cx, cy, cw)
    return FittedModel(spec.kind, coef, fmap, outcome_type, link="identity")

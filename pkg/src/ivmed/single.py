"""Single-instrument estimation: interventional θ contrasts, first stage and
their complier ratios.

The influence-function code is written over row vectors with optional
probability weights, so the same functions serve the cross-fitted sample
estimator (uniform weights) and the population oracle (joint-table weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, MutableMapping, Optional, Tuple, Union

import numpy as np

from . import nuisance
from .crossfit import FoldAssignment, crossfit_nuisances, stitch
from .data import (SINGLE_KINDS, Dataset, EstimandKind, EstimateReport, IvmedError, ScenarioSpec,
                   ValidationError, as_kind, validate)

PAIRS = ((1, 0), (0, 0), (1, 1))


class EmptySubset(IvmedError):
    pass


class WeakInstrument(IvmedError):
    """First-stage estimate too close to zero for a ratio interval.

    ``partial`` carries the numerator and denominator estimates.
    """

    def __init__(self, message: str, partial: Optional[dict] = None):
        super().__init__(message)
        self.partial = partial or {}


def pick(p1: np.ndarray, value) -> np.ndarray:
    """``P(V = value)`` from ``P(V = 1)``."""
    return np.where(np.asarray(value) == 1, p1, 1.0 - p1)


def normalize_weights(n: int, weights: Optional[np.ndarray]) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    return w / w.sum()


def onestep(terms: np.ndarray, weights: np.ndarray) -> Tuple[float, np.ndarray]:
    """Solve the estimating equation: the estimate is the weighted mean of the
    uncentered terms and the influence values are the centered terms."""
    psi = float(np.dot(weights, terms))
    return psi, terms - psi


@dataclass(frozen=True)
class Piece:
    """Point estimate and influence values of one functional."""

    psi: float
    eif: np.ndarray = field(repr=False)
    numerator: float = float("nan")
    denominator: float = 1.0

    def __add__(self, other: "Piece") -> "Piece":
        return Piece(self.psi + other.psi, self.eif + other.eif)

    def __sub__(self, other: "Piece") -> "Piece":
        return Piece(self.psi - other.psi, self.eif - other.eif)

    def ratio(self, den: "Piece") -> "Piece":
        psi = self.psi / den.psi
        eif = self.eif / den.psi - self.psi * den.eif / den.psi ** 2
        return Piece(psi, eif, self.psi, den.psi)


@dataclass
class NuisanceFitSingle:
    """Per-row nuisance values; probabilities stored as ``P(. = 1 | .)``.

    ``q[a]`` is ``P(Z=1 | A=a, W)``; ``r[a]`` is ``P(Z=1 | A=a, M_i, W)``;
    ``e1`` is ``P(A=1 | M_i, W)``; ``mu[z]`` is ``E(Y | Z=z, M_i, W)``.
    ``u[pair]`` holds ``(u(0, W_i), u(1, W_i))`` and ``v[pair]`` holds
    ``v(W_i)``; both are filled by a pseudo-outcome regression step.
    """

    g1: np.ndarray
    q: np.ndarray
    r: np.ndarray
    e1: np.ndarray
    mu: np.ndarray
    u: Dict[tuple, np.ndarray] = field(default_factory=dict)
    v: Dict[tuple, np.ndarray] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.g1)


def compute_h(fit: NuisanceFitSingle, obs: Mapping[str, np.ndarray], pair) -> np.ndarray:
    """Density-ratio weight ``h(Z, M, W)`` at the observed rows.

    ``h = q(Z|a',W)/r(Z|a',M,W) * e(a*|M,W)/e(a'|M,W) * g(a'|W)/g(a*|W)``.
    The last factor turns ``e`` (which conditions on M) into the ratio of
    mediator densities ``P(M|a*,W)/P(M|a',W)``; it equals one when the
    exposure instrument is randomized independently of W.
    """
    ap, ast = pair
    z = obs["z"]
    ratio_z = pick(fit.q[ap], z) / pick(fit.r[ap], z)
    ratio_a = pick(fit.e1, ast) / pick(fit.e1, ap)
    ratio_g = pick(fit.g1, ap) / pick(fit.g1, ast)
    return ratio_z * ratio_a * ratio_g


def mu_observed(fit: NuisanceFitSingle, obs) -> np.ndarray:
    return np.where(obs["z"] == 1, fit.mu[1], fit.mu[0])


def u_pseudo(fit: NuisanceFitSingle, obs, pair) -> np.ndarray:
    """Outcome regressed on (Z, W) among rows with ``A = a'`` to give u."""
    return mu_observed(fit, obs) * compute_h(fit, obs, pair)


def v_pseudo(fit: NuisanceFitSingle, pair) -> np.ndarray:
    """``sum_z mu(z, M, W) q(z | a', W)``, regressed on W among ``A = a*``."""
    qa = fit.q[pair[0]]
    return fit.mu[1] * qa + fit.mu[0] * (1.0 - qa)


def theta_terms(fit: NuisanceFitSingle, obs, pair) -> np.ndarray:
    """Uncentered influence terms of ``theta(a', a*)``; their mean is the
    one-step estimate."""
    ap, ast = pair
    a, z, y = obs["a"], obs["z"], obs["y"]
    u0, u1 = fit.u[pair]
    v = fit.v[pair]
    qa = fit.q[ap]
    w_ap = (a == ap) / pick(fit.g1, ap)
    w_ast = (a == ast) / pick(fit.g1, ast)
    resid = w_ap * compute_h(fit, obs, pair) * (y - mu_observed(fit, obs))
    u_obs = np.where(z == 1, u1, u0)
    u_centre = w_ap * (u_obs - (u1 * qa + u0 * (1.0 - qa)))
    v_centre = w_ast * (v_pseudo(fit, pair) - v)
    return resid + u_centre + v_centre + v


def fs_terms(g1: np.ndarray, q: np.ndarray, obs) -> np.ndarray:
    """Uncentered first-stage influence terms."""
    a, z = obs["a"], obs["z"]
    q_obs = np.where(a == 1, q[1], q[0])
    return (2 * a - 1) / pick(g1, a) * (z - q_obs) + q[1] - q[0]


def first_stage(g1, q, obs, weights=None) -> Piece:
    w = normalize_weights(len(g1), weights)
    return Piece(*onestep(fs_terms(g1, q, obs), w))


def single_pieces(fit: NuisanceFitSingle, obs, weights=None) -> Dict[str, Piece]:
    """All single-instrument estimands (plus the three θ) from one fit."""
    w = normalize_weights(fit.n, weights)
    th = {pair: Piece(*onestep(theta_terms(fit, obs, pair), w)) for pair in PAIRS}
    fs = first_stage(fit.g1, fit.q, obs, w)
    ide = th[(1, 0)] - th[(0, 0)]
    ite = th[(1, 1)] - th[(0, 0)]
    iie = th[(1, 1)] - th[(1, 0)]
    cide = ide.ratio(fs)
    cite = ite.ratio(fs)
    ciie = cite - cide
    ciie = Piece(ciie.psi, ciie.eif, iie.psi, fs.psi)
    out = {
        "FS": Piece(fs.psi, fs.eif, fs.psi, 1.0),
        "ITT_IDE": Piece(ide.psi, ide.eif, ide.psi, 1.0),
        "ITT_IIE": Piece(iie.psi, iie.eif, iie.psi, 1.0),
        "ITT_ITE": Piece(ite.psi, ite.eif, ite.psi, 1.0),
        "CIDE": cide,
        "CITE": cite,
        "CIIE": ciie,
    }
    for pair, piece in th.items():
        out[f"theta_{pair[0]}_{pair[1]}"] = piece
    return out


def fit_from_predictors(pred: Mapping[str, callable], cols: Mapping[str, np.ndarray]) -> NuisanceFitSingle:
    """Evaluate ``P(target = 1 | inputs)`` predictors at the rows of ``cols``
    under every argument setting the influence function needs."""
    n = len(cols["a"])

    def at(name, **override):
        c = dict(cols)
        c.update({k: np.full(n, float(v)) for k, v in override.items()})
        return np.asarray(pred[name](c), dtype=float)

    return NuisanceFitSingle(
        g1=at("g"),
        q=np.stack([at("q", a=0), at("q", a=1)]),
        r=np.stack([at("r", a=0), at("r", a=1)]),
        e1=at("e"),
        mu=np.stack([at("mu", z=0), at("mu", z=1)]),
    )


def fit_u_v(dataset: Dataset, pair, per_fold: Iterable[NuisanceFitSingle], folds: FoldAssignment,
            learner, clip: float = nuisance.CLIP, cache: Optional[MutableMapping] = None,
            cache_key=None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cross-fitted pseudo-outcome regressions for one ``(a', a*)`` pair.

    ``per_fold[k - 1]`` holds the nuisances from the models trained without
    fold ``k``, evaluated on every row.  For each fold the pseudo-outcomes
    are formed on ``T_k``, regressed there (u on ``(Z, W)`` among
    ``A = a'``, v on ``W`` among ``A = a*``) and predicted on ``V_k``.
    Returns out-of-fold ``(u(0, W), u(1, W), v(W))``.
    """
    ap, ast = pair
    cols = dataset.columns()
    obs = {k: cols[k] for k in ("a", "z", "y")}
    w_names = tuple(dataset.w_names)
    u0, u1, v = np.empty(dataset.n), np.empty(dataset.n), np.empty(dataset.n)
    for k, fit in enumerate(per_fold, start=1):
        tr, va = folds.training(k), folds.validation(k)
        key = None if cache is None else ("uv", pair, cache_key, k)
        if key is not None and key in cache:
            mu_model, v_model = cache[key]
        else:
            sel_u = tr[obs["a"][tr] == ap]
            sel_v = tr[obs["a"][tr] == ast]
            if sel_u.size == 0 or sel_v.size == 0:
                raise EmptySubset(f"fold {k} has no training rows with A={ap if sel_u.size == 0 else ast}")
            pseudo_u = u_pseudo(fit, obs, pair)
            pseudo_v = v_pseudo(fit, pair)
            xu = np.column_stack([obs["z"]] + [cols[c] for c in w_names])
            xv = dataset.w
            mu_model = nuisance.fit(learner, xu[sel_u], pseudo_u[sel_u], "continuous",
                                    names=("z",) + w_names, seed=folds.seed + k, clip=clip)
            v_model = nuisance.fit(learner, xv[sel_v], pseudo_v[sel_v], "continuous",
                                   names=w_names, seed=folds.seed + k, clip=clip)
            if key is not None:
                cache[key] = (mu_model, v_model)
        wv = dataset.w[va]
        u0[va] = mu_model.predict(np.column_stack([np.zeros(len(va)), wv]))
        u1[va] = mu_model.predict(np.column_stack([np.ones(len(va)), wv]))
        v[va] = v_model.predict(wv)
    return u0, u1, v


def crossfit_single(dataset: Dataset, scenario: ScenarioSpec, folds: FoldAssignment,
                    clip: float = nuisance.CLIP, cache: Optional[MutableMapping] = None) -> NuisanceFitSingle:
    """Out-of-fold nuisance values with u and v filled for every pair."""
    scenario.check("single")
    cf = crossfit_nuisances(dataset, scenario, folds, clip=clip, cache=cache)
    cols = dataset.columns()
    per_fold = [fit_from_predictors(cf.predictors(k), cols) for k in range(1, folds.j + 1)]
    oof = NuisanceFitSingle(
        g1=stitch([f.g1 for f in per_fold], folds),
        q=stitch([f.q for f in per_fold], folds),
        r=stitch([f.r for f in per_fold], folds),
        e1=stitch([f.e1 for f in per_fold], folds),
        mu=stitch([f.mu for f in per_fold], folds),
    )
    scen_key = tuple(sorted(scenario.learners.items()))
    for pair in PAIRS:
        u0, u1, v = fit_u_v(dataset, pair, per_fold, folds, scenario["mu"], clip=clip,
                            cache=cache, cache_key=scen_key)
        oof.u[pair] = (u0, u1)
        oof.v[pair] = v
    return oof


def observed(dataset: Dataset) -> Dict[str, np.ndarray]:
    cols = {"a": dataset.a, "z": dataset.z, "m": dataset.m, "y": dataset.y}
    if dataset.l is not None:
        cols["l"] = dataset.l
    return cols


def to_report(kind: EstimandKind, piece: Piece, alpha: float, threshold: Optional[float]) -> EstimateReport:
    """Wrap a piece in a report, refusing ratio intervals below ``threshold``."""
    if threshold is not None and abs(piece.denominator) < threshold:
        raise WeakInstrument(
            f"{kind.value}: first-stage estimate {piece.denominator:.4g} is below {threshold:g} in magnitude",
            {"numerator_hat": piece.numerator, "denominator_hat": piece.denominator},
        )
    return EstimateReport.from_eif(kind, piece.psi, piece.eif, alpha, piece.numerator, piece.denominator)


RATIO_SINGLE = (EstimandKind.CIDE, EstimandKind.CITE, EstimandKind.CIIE)
Outcome = Union[EstimateReport, WeakInstrument]


def estimate_all(dataset: Dataset, estimands, scenario: ScenarioSpec, folds: FoldAssignment,
                 alpha: float = 0.05, clip: float = nuisance.CLIP, fs_threshold: float = 0.01,
                 cache: Optional[MutableMapping] = None) -> Dict[EstimandKind, Outcome]:
    """Estimate several single-instrument estimands from one set of fits.

    A weak first stage affects only the ratio estimands; their entries hold
    the :class:`WeakInstrument` error instead of a report.
    """
    kinds = [as_kind(e) for e in estimands]
    for kind in kinds:
        if kind not in SINGLE_KINDS:
            raise ValidationError(f"{kind.value} is not a single-instrument estimand")
        validate(dataset, kind)
    fit = crossfit_single(dataset, scenario, folds, clip=clip, cache=cache)
    pieces = single_pieces(fit, observed(dataset))
    out: Dict[EstimandKind, Outcome] = {}
    for kind in kinds:
        threshold = fs_threshold if kind in RATIO_SINGLE else None
        try:
            out[kind] = to_report(kind, pieces[kind.value], alpha, threshold)
        except WeakInstrument as exc:
            out[kind] = exc
    return out


def estimate(dataset: Dataset, estimand, scenario: ScenarioSpec, folds: FoldAssignment,
             alpha: float = 0.05, clip: float = nuisance.CLIP, fs_threshold: float = 0.01,
             cache: Optional[MutableMapping] = None) -> EstimateReport:
    """Cross-fitted one-step estimate of one single-instrument estimand."""
    kind = as_kind(estimand)
    result = estimate_all(dataset, [kind], scenario, folds, alpha, clip, fs_threshold, cache)[kind]
    if isinstance(result, WeakInstrument):
        raise result
    return result

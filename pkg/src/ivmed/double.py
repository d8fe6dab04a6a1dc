"""Double-instrument estimation: ϑ contrasts, the joint first stage φ and the
double-complier ratios.

All derived nuisances (γ and the two marginalized outcome means) are exact
two-term sums over the binary supports of Z and L, so no pseudo-outcome
regression is needed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, MutableMapping, Optional

import numpy as np

from . import nuisance
from .crossfit import FoldAssignment, crossfit_nuisances, stitch
from .data import DOUBLE_KINDS, Dataset, EstimandKind, EstimateReport, ScenarioSpec, ValidationError, as_kind, validate
from .single import (Outcome, Piece, WeakInstrument, first_stage, normalize_weights, observed, onestep, pick,
                     to_report)

PAIRS = ((1, 1), (1, 0), (0, 0))
PHI_PAIRS = ((1, 1), (1, 0), (0, 1), (0, 0))


@dataclass
class NuisanceFitDouble:
    """Per-row nuisance values, probabilities stored as ``P(. = 1 | .)``.

    ``q[a]``: ``P(Z=1 | a, W)``; ``p[z, a]``: ``P(L=1 | z, a, W)``;
    ``c[l, z]``: ``P(M=1 | l, z, W)``; ``mu[l, z]``: ``E(Y | l, z, W)``.
    """

    g1: np.ndarray
    q: np.ndarray
    p: np.ndarray
    c: np.ndarray
    mu: np.ndarray

    @property
    def n(self) -> int:
        return len(self.g1)

    def gamma1(self, a_star: int) -> np.ndarray:
        """``gamma(1 | a*, W) = sum_{l,z} c(1|l,z,W) p(l|z,a*,W) q(z|a*,W)``."""
        total = np.zeros(self.n)
        for l in (0, 1):
            for z in (0, 1):
                total += self.c[l, z] * pick(self.p[z, a_star], l) * pick(self.q[a_star], z)
        return total

    def mubar_z(self, l, a_prime: int) -> np.ndarray:
        """``sum_z mu(l, z, W) q(z | a', W)``; ``l`` may be a row vector."""
        qa = self.q[a_prime]
        l = np.asarray(l)
        mu1 = np.where(l == 1, self.mu[1, 1], self.mu[0, 1])
        mu0 = np.where(l == 1, self.mu[1, 0], self.mu[0, 0])
        return mu1 * qa + mu0 * (1.0 - qa)

    def mubar_l(self, z, a_star: int, gamma1=None) -> np.ndarray:
        """``sum_l mu(l, z, W) gamma(l | a*, W)``; ``z`` may be a row vector."""
        g = self.gamma1(a_star) if gamma1 is None else gamma1
        z = np.asarray(z)
        mu1 = np.where(z == 1, self.mu[1, 1], self.mu[1, 0])
        mu0 = np.where(z == 1, self.mu[0, 1], self.mu[0, 0])
        return mu1 * g + mu0 * (1.0 - g)


def vartheta_terms(fit: NuisanceFitDouble, obs, pair) -> np.ndarray:
    """Uncentered influence terms of ``vartheta(a', a*)``."""
    ap, ast = pair
    a, z, l, m, y = obs["a"], obs["z"], obs["l"], obs["m"], obs["y"]
    gam = fit.gamma1(ast)
    qa = fit.q[ap]
    w_ap = (a == ap) / pick(fit.g1, ap)
    w_ast = (a == ast) / pick(fit.g1, ast)

    p_obs = pick(np.where(z == 1, fit.p[1, ap], fit.p[0, ap]), l)
    mu_obs = np.where(l == 1, np.where(z == 1, fit.mu[1, 1], fit.mu[1, 0]),
                      np.where(z == 1, fit.mu[0, 1], fit.mu[0, 0]))
    resid = w_ap * pick(gam, l) / p_obs * (y - mu_obs)

    bl1, bl0 = fit.mubar_l(1, ast, gam), fit.mubar_l(0, ast, gam)
    line2 = w_ap * (np.where(z == 1, bl1, bl0) - (bl1 * qa + bl0 * (1.0 - qa)))

    bz1, bz0 = fit.mubar_z(1, ap), fit.mubar_z(0, ap)
    plug = bz1 * gam + bz0 * (1.0 - gam)
    line3 = w_ast * (np.where(m == 1, bz1, bz0) - plug)
    return resid + line2 + line3 + plug


def phi_terms(fit: NuisanceFitDouble, obs, pair) -> np.ndarray:
    """Uncentered influence terms of ``phi(a, l) = E[c(1|l,1,W) q(1|a,W)]``."""
    a_val, l_val = pair
    a, z, l, m = obs["a"], obs["z"], obs["l"], obs["m"]
    w_a = (a == a_val) / pick(fit.g1, a_val)
    c_obs = np.where(z == 1, fit.c[l_val, 1], fit.c[l_val, 0])
    p_obs = pick(np.where(z == 1, fit.p[1, a_val], fit.p[0, a_val]), l_val)
    plug = fit.c[l_val, 1] * fit.q[a_val]
    line1 = w_a * (l == l_val) / p_obs * (m * z - z * c_obs)
    line2 = w_a * (z * c_obs - plug)
    return line1 + line2 + plug


def double_pieces(fit: NuisanceFitDouble, obs, weights=None) -> Dict[str, Piece]:
    w = normalize_weights(fit.n, weights)
    vt = {pair: Piece(*onestep(vartheta_terms(fit, obs, pair), w)) for pair in PAIRS}
    ph = {pair: Piece(*onestep(phi_terms(fit, obs, pair), w)) for pair in PHI_PAIRS}
    jfs = ph[(1, 1)] - ph[(1, 0)] - ph[(0, 1)] + ph[(0, 0)]
    fs = first_stage(fit.g1, fit.q, obs, w)
    tiide = vt[(1, 0)] - vt[(0, 0)]
    tiiie = vt[(1, 1)] - vt[(1, 0)]
    tiite = vt[(1, 1)] - vt[(0, 0)]
    out = {
        "JFS": Piece(jfs.psi, jfs.eif, jfs.psi, 1.0),
        "FS": Piece(fs.psi, fs.eif, fs.psi, 1.0),
        "TIIDE": Piece(tiide.psi, tiide.eif, tiide.psi, 1.0),
        "TIIIE": Piece(tiiie.psi, tiiie.eif, tiiie.psi, 1.0),
        "TIITE": Piece(tiite.psi, tiite.eif, tiite.psi, 1.0),
        "DCIDE": tiide.ratio(jfs),
        "DCIIE": tiiie.ratio(jfs),
        "DCITE": tiite.ratio(jfs),
        "DCIDE_WEAK": tiide.ratio(fs),
    }
    for pair, piece in vt.items():
        out[f"vartheta_{pair[0]}_{pair[1]}"] = piece
    for pair, piece in ph.items():
        out[f"phi_{pair[0]}_{pair[1]}"] = piece
    return out


def fit_from_predictors(pred, cols) -> NuisanceFitDouble:
    """Evaluate ``P(target = 1 | inputs)`` predictors at every argument
    setting the influence functions need."""
    n = len(cols["a"])

    def at(name, **override):
        c = dict(cols)
        c.update({k: np.full(n, float(v)) for k, v in override.items()})
        return np.asarray(pred[name](c), dtype=float)

    return NuisanceFitDouble(
        g1=at("g"),
        q=np.stack([at("q", a=0), at("q", a=1)]),
        p=np.array([[at("p", z=z, a=a) for a in (0, 1)] for z in (0, 1)]),
        c=np.array([[at("c", l=l, z=z) for z in (0, 1)] for l in (0, 1)]),
        mu=np.array([[at("mu", l=l, z=z) for z in (0, 1)] for l in (0, 1)]),
    )


def crossfit_double(dataset: Dataset, scenario: ScenarioSpec, folds: FoldAssignment,
                    clip: float = nuisance.CLIP, cache: Optional[MutableMapping] = None) -> NuisanceFitDouble:
    """Out-of-fold primitive nuisances; derived ones are computed on demand."""
    scenario.check("double")
    cf = crossfit_nuisances(dataset, scenario, folds, clip=clip, cache=cache)
    cols = dataset.columns()
    per_fold = [fit_from_predictors(cf.predictors(k), cols) for k in range(1, folds.j + 1)]
    return NuisanceFitDouble(**{
        name: stitch([getattr(f, name) for f in per_fold], folds) for name in ("g1", "q", "p", "c", "mu")
    })


def estimate_all(dataset: Dataset, estimands, scenario: ScenarioSpec, folds: FoldAssignment,
                 alpha: float = 0.05, clip: float = nuisance.CLIP, jfs_threshold: float = 0.005,
                 fs_threshold: float = 0.01, cache: Optional[MutableMapping] = None) -> Dict[EstimandKind, Outcome]:
    """Estimate several double-instrument estimands from one set of fits."""
    kinds = [as_kind(e) for e in estimands]
    for kind in kinds:
        if kind not in DOUBLE_KINDS:
            raise ValidationError(f"{kind.value} is not a double-instrument estimand")
        validate(dataset, kind)
    fit = crossfit_double(dataset, scenario, folds, clip=clip, cache=cache)
    pieces = double_pieces(fit, observed(dataset))
    out: Dict[EstimandKind, Outcome] = {}
    for kind in kinds:
        if kind is EstimandKind.JFS:
            threshold = None
        elif kind is EstimandKind.DCIDE_WEAK:
            threshold = fs_threshold
        else:
            threshold = jfs_threshold
        try:
            out[kind] = to_report(kind, pieces[kind.value], alpha, threshold)
        except WeakInstrument as exc:
            out[kind] = exc
    return out


def estimate(dataset: Dataset, estimand, scenario: ScenarioSpec, folds: FoldAssignment,
             alpha: float = 0.05, clip: float = nuisance.CLIP, jfs_threshold: float = 0.005,
             fs_threshold: float = 0.01, cache: Optional[MutableMapping] = None) -> EstimateReport:
    """Cross-fitted one-step estimate of one double-instrument estimand."""
    kind = as_kind(estimand)
    result = estimate_all(dataset, [kind], scenario, folds, alpha, clip, jfs_threshold, fs_threshold, cache)[kind]
    if isinstance(result, WeakInstrument):
        raise result
    return result

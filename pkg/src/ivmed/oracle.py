"""Exact ground truth for the simulation designs.

Everything here is computed by summation over the finite support of a
:class:`~ivmed.scm.DiscreteSCM`: identified functionals, counterfactual
complier effects under the shared-uniform coupling, efficiency bounds and
population limits of the one-step estimators under chosen nuisance limits.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Dict, Mapping, Optional, Union

import numpy as np

from . import double as dbl
from . import single as sgl
from .data import IvmedError, formulas
from .scm import W_NAMES, DiscreteSCM

Predictor = Callable[[Mapping[str, np.ndarray]], np.ndarray]
Limit = Union[str, Predictor]


class ZeroDenominator(IvmedError):
    pass


class NoCompliers(IvmedError):
    pass


@dataclass(frozen=True)
class TrueValues:
    """Estimand tag -> exact value, plus efficiency bounds by tag."""

    values: Mapping[str, float]
    efficiency_bound: Mapping[str, float] = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.values[key]


# ---------------------------------------------------------------------------
# nuisance limits


def true_predictor(scm: DiscreteSCM, target: str, inputs) -> Predictor:
    given = tuple(inputs) + W_NAMES

    def predict(cols):
        return scm.cond({target: 1}, {v: cols[v] for v in given})

    return predict


def intercept_predictor(scm: DiscreteSCM, target: str) -> Predictor:
    mean = float(scm.prob({target: 1}))
    return lambda cols: np.full(len(cols["a"]), mean)


def predictors(scm: DiscreteSCM, limits: Optional[Mapping[str, Limit]] = None) -> Dict[str, Predictor]:
    """Predictor per nuisance: ``"true"`` (default), ``"intercept"`` (the
    marginal-mean limit of an intercept-only fit) or a callable."""
    setting = "double" if scm.has_l else "single"
    out = {}
    for name, (target, inputs) in formulas(setting).items():
        spec = (limits or {}).get(name, "true")
        if callable(spec):
            out[name] = spec
        elif spec == "true":
            out[name] = true_predictor(scm, target, inputs)
        elif spec == "intercept":
            out[name] = intercept_predictor(scm, target)
        else:
            raise ValueError(f"unknown limit {spec!r} for nuisance {name!r}")
    return out


def exact_regression(values, keys, mask, weights, queries):
    """Weighted conditional mean of ``values`` given ``keys`` among ``mask``
    rows, evaluated at each key matrix in ``queries``.  Unsupported query
    keys (zero probability) return 0."""
    keys = np.asarray(keys)
    table: Dict[tuple, float] = {}
    sel = np.flatnonzero(mask & (weights > 0))
    sums: Dict[tuple, list] = {}
    for i in sel:
        k = tuple(keys[i])
        acc = sums.setdefault(k, [0.0, 0.0])
        acc[0] += weights[i] * values[i]
        acc[1] += weights[i]
    for k, (s, w) in sums.items():
        table[k] = s / w
    return [np.array([table.get(tuple(row), 0.0) for row in np.asarray(qk)]) for qk in queries]


def attach_exact_uv(fit: sgl.NuisanceFitSingle, cols, weights) -> None:
    """Fill ``fit.u``/``fit.v`` with the exact conditional means of the
    pseudo-outcomes built from ``fit``'s own primitives."""
    wmat = np.column_stack([cols[w] for w in W_NAMES])
    z = cols["z"]
    for pair in sgl.PAIRS:
        ap, ast = pair
        keys = np.column_stack([z, wmat])
        q0 = np.column_stack([np.zeros_like(z), wmat])
        q1 = np.column_stack([np.ones_like(z), wmat])
        u0, u1 = exact_regression(sgl.u_pseudo(fit, cols, pair), keys, cols["a"] == ap, weights, [q0, q1])
        (v,) = exact_regression(sgl.v_pseudo(fit, pair), wmat, cols["a"] == ast, weights, [wmat])
        fit.u[pair] = (u0, u1)
        fit.v[pair] = v


def population_pieces(scm: DiscreteSCM, limits: Optional[Mapping[str, Limit]] = None):
    """Population one-step pieces: every estimand's limit and influence
    values over the support, weighted by the joint table."""
    cols = scm.support()
    pred = predictors(scm, limits)
    if scm.has_l:
        fit = dbl.fit_from_predictors(pred, cols)
        return dbl.double_pieces(fit, cols, scm.joint)
    fit = sgl.fit_from_predictors(pred, cols)
    attach_exact_uv(fit, cols, scm.joint)
    return sgl.single_pieces(fit, cols, scm.joint)


def population_onestep(scm: DiscreteSCM, estimand: str, limits: Optional[Mapping[str, Limit]] = None) -> float:
    """Asymptotic limit of the one-step estimator when each nuisance
    converges to the given limit."""
    pieces = population_pieces(scm, limits)
    piece = pieces[str(getattr(estimand, "value", estimand))]
    if abs(piece.denominator) < 1e-12:
        raise ZeroDenominator(f"denominator of {estimand} is zero")
    return piece.psi


def efficiency_bound(scm: DiscreteSCM, estimand: str) -> float:
    """Variance of the influence function under the true distribution."""
    piece = population_pieces(scm)[str(getattr(estimand, "value", estimand))]
    return float(np.dot(scm.joint, piece.eif ** 2))


# ---------------------------------------------------------------------------
# identified functionals by direct summation


def _w_grid():
    return [dict(zip(W_NAMES, (float(b) for b in bits))) for bits in itertools.product((0, 1), repeat=3)]


def true_identified_functionals(scm: DiscreteSCM) -> TrueValues:
    """Identified functionals evaluated from observational conditionals,
    without going through any influence-function code.

    Outcome and mediator regressions condition on the exposure instrument
    as well (``E(Y | A=a', Z, M, W)``, ``P(M | A=a, L, Z, W)``).  Under the
    exclusion restrictions this changes nothing, but it makes each value a
    functional of the unrestricted observed law whose influence function is
    the one the estimators use, so tilting the joint table checks them.
    """
    vals: Dict[str, float] = {}
    grid = [(w, float(scm.prob(w))) for w in _w_grid()]

    def q1(a, w):
        return float(scm.cond({"z": 1}, {"a": a, **w}))

    fs = sum(pw * (q1(1, w) - q1(0, w)) for w, pw in grid)
    vals["FS"] = fs
    if not scm.has_l:
        def theta(ap, ast):
            total = 0.0
            for w, pw in grid:
                for z, m in itertools.product((0, 1), repeat=2):
                    mu = float(scm.cond({"y": 1}, {"a": ap, "z": z, "m": m, **w}))
                    qz = float(scm.cond({"z": z}, {"a": ap, **w}))
                    pm = float(scm.cond({"m": m}, {"a": ast, **w}))
                    total += pw * mu * qz * pm
            return total

        th = {pair: theta(*pair) for pair in sgl.PAIRS}
        for (ap, ast), v in th.items():
            vals[f"theta_{ap}_{ast}"] = v
        vals["ITT_IDE"] = th[(1, 0)] - th[(0, 0)]
        vals["ITT_IIE"] = th[(1, 1)] - th[(1, 0)]
        vals["ITT_ITE"] = th[(1, 1)] - th[(0, 0)]
        if abs(fs) < 1e-12:
            raise ZeroDenominator("first stage is zero")
        vals["CIDE"] = vals["ITT_IDE"] / fs
        vals["CITE"] = vals["ITT_ITE"] / fs
        vals["CIIE"] = vals["CITE"] - vals["CIDE"]
        return TrueValues(vals)

    def vartheta(ap, ast):
        total = 0.0
        for w, pw in grid:
            for l in (0, 1):
                # mediator law under A = a*, evaluated at M = l
                gam = float(scm.cond({"m": l}, {"a": ast, **w}))
                mubar = sum(
                    float(scm.cond({"y": 1}, {"a": ap, "l": l, "z": z, **w}))
                    * float(scm.cond({"z": z}, {"a": ap, **w}))
                    for z in (0, 1)
                )
                total += pw * mubar * gam
        return total

    def phi(a, l):
        return sum(pw * float(scm.cond({"m": 1}, {"a": a, "l": l, "z": 1, **w})) * q1(a, w) for w, pw in grid)

    vt = {pair: vartheta(*pair) for pair in dbl.PAIRS}
    ph = {pair: phi(*pair) for pair in dbl.PHI_PAIRS}
    for (ap, ast), v in vt.items():
        vals[f"vartheta_{ap}_{ast}"] = v
    for (a, l), v in ph.items():
        vals[f"phi_{a}_{l}"] = v
    jfs = ph[(1, 1)] - ph[(1, 0)] - ph[(0, 1)] + ph[(0, 0)]
    vals["JFS"] = jfs
    vals["TIIDE"] = vt[(1, 0)] - vt[(0, 0)]
    vals["TIIIE"] = vt[(1, 1)] - vt[(1, 0)]
    vals["TIITE"] = vt[(1, 1)] - vt[(0, 0)]
    if abs(jfs) < 1e-12 or abs(fs) < 1e-12:
        raise ZeroDenominator("first stage is zero")
    vals["DCIDE"] = vals["TIIDE"] / jfs
    vals["DCIIE"] = vals["TIIIE"] / jfs
    vals["DCITE"] = vals["TIITE"] / jfs
    vals["DCIDE_WEAK"] = vals["TIIDE"] / fs
    return TrueValues(vals)


# ---------------------------------------------------------------------------
# counterfactual enumeration


def _intervals(probs) -> tuple:
    """Partition (0, 1) at the given thresholds; returns midpoints, lengths."""
    cuts = np.unique(np.concatenate([[0.0, 1.0], np.clip(np.ravel(probs), 0.0, 1.0)]))
    lengths = np.diff(cuts)
    keep = lengths > 0
    return ((cuts[:-1] + cuts[1:]) / 2)[keep], lengths[keep]


@dataclass(frozen=True)
class CounterfactualReport:
    """Counterfactual complier effects and coupling diagnostics."""

    values: Mapping[str, float]
    p_monotone_violation: float
    p_complier: float
    p_double_complier: float = float("nan")
    p_cz_equals_cm: float = float("nan")
    g_draw: str = "instrument"
    mediator_route: str = "instrument"

    def __getitem__(self, key: str) -> float:
        return self.values[key]


def true_counterfactual_effects(scm: DiscreteSCM, g_draw: str = "instrument",
                                mediator_route: str = "instrument") -> CounterfactualReport:
    """Complier effects computed on the counterfactual coupling.

    Each endogenous variable is ``1{U_V < p_V(parents)}`` with one uniform
    shared by all parent settings.  Per covariate stratum each uniform is
    cut at the attainable thresholds so every cell fixes all potential
    outcomes, which makes the enumeration exact.

    ``g_draw`` selects the law of the random mediator draw ``G_a``:
    ``"instrument"`` draws from the mediator under ``A = a`` given W,
    ``"exposure"`` from the mediator under ``Z = a`` given W.
    ``mediator_route`` (double design only) says how the draw is imposed:
    ``"instrument"`` sets the mediator instrument ``L = G`` and lets M
    respond; ``"direct"`` sets ``M = G``.
    """
    if g_draw not in ("instrument", "exposure"):
        raise ValueError("g_draw must be 'instrument' or 'exposure'")
    if mediator_route not in ("instrument", "direct"):
        raise ValueError("mediator_route must be 'instrument' or 'direct'")
    has_l = scm.has_l
    acc = dict.fromkeys(
        ["complier", "violation", "itt_de", "itt_ie", "itt_te", "de", "ie", "te",
         "double", "ddE", "diE", "dtE", "cz_eq_cm", "weak_de"], 0.0)

    for w in _w_grid():
        pw = float(scm.prob(w))
        if pw == 0:
            continue

        def p(var, **par):
            vals = {**w, **{k: np.asarray(float(v)) for k, v in par.items()}, "_n": np.zeros(())}
            return float(scm.structural(var, vals))

        pz = {a: p("z", a=a) for a in (0, 1)}
        if has_l:
            pl = {z: p("l", z=z) for z in (0, 1)}
            pm = {(l, z): p("m", l=l, z=z) for l in (0, 1) for z in (0, 1)}
        else:
            pm = {z: p("m", z=z) for z in (0, 1)}
        py = {(z, m): p("y", z=z, m=m) for z in (0, 1) for m in (0, 1)}

        axes = [_intervals(list(pz.values()))]
        if has_l:
            axes.append(_intervals(list(pl.values())))
        axes.append(_intervals(list(pm.values())))
        axes.append(_intervals(list(py.values())))
        mids = np.meshgrid(*[ax[0] for ax in axes], indexing="ij")
        lens = np.meshgrid(*[ax[1] for ax in axes], indexing="ij")
        cell = np.prod(np.stack([x.ravel() for x in lens]), axis=0)
        u = [x.ravel() for x in mids]
        uz, um, uy = u[0], u[-2], u[-1]

        Z = {a: (uz < pz[a]).astype(float) for a in (0, 1)}
        Y = {(z, m): (uy < py[(z, m)]).astype(float) for z in (0, 1) for m in (0, 1)}
        if has_l:
            ul = u[1]
            L = {z: (ul < pl[z]).astype(float) for z in (0, 1)}
            M = {(l, z): (um < pm[(l, z)]).astype(float) for l in (0, 1) for z in (0, 1)}

            def m_of(l, z):
                return np.where(l == 1, M[(1, z)], M[(0, z)])

            def m_nat(z):
                return m_of(L[z], z)
        else:
            Msingle = {z: (um < pm[z]).astype(float) for z in (0, 1)}

            def m_nat(z):
                return Msingle[z]

        def m_under_a(a):
            return np.where(Z[a] == 1, m_nat(1), m_nat(0))

        # P(G_a = 1 | w)
        if g_draw == "instrument":
            pg = {a: float(np.dot(cell, m_under_a(a))) for a in (0, 1)}
        else:
            pg = {a: float(np.dot(cell, m_nat(a))) for a in (0, 1)}

        def y_set(z, g):
            """Outcome with exposure z and the mediator set to g."""
            if has_l and mediator_route == "instrument":
                mval = M[(g, z)]
                return np.where(mval == 1, Y[(z, 1)], Y[(z, 0)])
            return Y[(z, g)]

        def y_draw(z, a):
            """E over the independent draw G_a of Y_{z, G_a}."""
            return pg[a] * y_set(z, 1) + (1.0 - pg[a]) * y_set(z, 0)

        cz = (Z[1] > Z[0]).astype(float)
        acc["violation"] += pw * float(np.dot(cell, (Z[1] < Z[0]).astype(float)))
        acc["complier"] += pw * float(np.dot(cell, cz))
        de = y_draw(1, 0) - y_draw(0, 0)
        ie = y_draw(1, 1) - y_draw(1, 0)
        te = y_draw(1, 1) - y_draw(0, 0)

        def y_itt(a, g):
            return np.where(Z[a] == 1, y_draw(1, g), y_draw(0, g))

        acc["itt_de"] += pw * float(np.dot(cell, y_itt(1, 0) - y_itt(0, 0)))
        acc["itt_ie"] += pw * float(np.dot(cell, y_itt(1, 1) - y_itt(1, 0)))
        acc["itt_te"] += pw * float(np.dot(cell, y_itt(1, 1) - y_itt(0, 0)))
        acc["de"] += pw * float(np.dot(cell, de * cz))
        acc["ie"] += pw * float(np.dot(cell, ie * cz))
        acc["te"] += pw * float(np.dot(cell, te * cz))
        if has_l:
            cm = (M[(1, 1)] > M[(0, 1)]).astype(float)
            both = cz * cm
            acc["double"] += pw * float(np.dot(cell, both))
            acc["cz_eq_cm"] += pw * float(np.dot(cell, (cz == cm).astype(float)))
            acc["ddE"] += pw * float(np.dot(cell, de * both))
            acc["diE"] += pw * float(np.dot(cell, ie * both))
            acc["dtE"] += pw * float(np.dot(cell, te * both))

    if acc["complier"] <= 0:
        raise NoCompliers("no exposure compliers under this coupling")
    pc = acc["complier"]
    vals = {
        "FS": pc,
        "CIDE": acc["de"] / pc,
        "CIIE": acc["ie"] / pc,
        "CITE": acc["te"] / pc,
        "ITT_IDE": acc["itt_de"],
        "ITT_IIE": acc["itt_ie"],
        "ITT_ITE": acc["itt_te"],
    }
    extra = {}
    if has_l:
        vals["DCIDE_WEAK"] = vals.pop("CIDE")
        for k in ("CIIE", "CITE", "ITT_IDE", "ITT_IIE", "ITT_ITE"):
            vals.pop(k)
        if acc["double"] <= 0:
            raise NoCompliers("no double compliers under this coupling")
        pd = acc["double"]
        vals.update(JFS=pd, DCIDE=acc["ddE"] / pd, DCIIE=acc["diE"] / pd, DCITE=acc["dtE"] / pd)
        extra = dict(p_double_complier=pd, p_cz_equals_cm=acc["cz_eq_cm"])
    return CounterfactualReport(values=vals, p_monotone_violation=acc["violation"], p_complier=pc,
                                g_draw=g_draw, mediator_route=mediator_route, **extra)


# ---------------------------------------------------------------------------
# golden constants


SINGLE_ESTIMANDS = ("FS", "ITT_IDE", "ITT_IIE", "ITT_ITE", "CIDE", "CIIE", "CITE")
DOUBLE_ESTIMANDS = ("FS", "JFS", "TIIDE", "TIIIE", "TIITE", "DCIDE", "DCIIE", "DCITE", "DCIDE_WEAK")


def golden_constants(scm: DiscreteSCM) -> Dict[str, float]:
    """Ordered fixture map: identified values (``psi_*``), the underlying
    θ/ϑ/φ functionals and efficiency bounds (``bound_*``)."""
    truth = true_identified_functionals(scm).values
    pieces = population_pieces(scm)
    names = DOUBLE_ESTIMANDS if scm.has_l else SINGLE_ESTIMANDS
    out: Dict[str, float] = {}
    for k in names:
        out[f"psi_{k}"] = truth[k]
    for k in sorted(truth):
        if k.startswith(("theta_", "vartheta_", "phi_")):
            out[k] = truth[k]
    for k in names:
        out[f"bound_{k}"] = float(np.dot(scm.joint, pieces[k].eif ** 2))
    return out


def format_fixtures(constants: Mapping[str, float], setting: str) -> str:
    lines = [f"# ivmed oracle constants; setting={setting}; format=1"]
    lines += [f"{k}={float(v):.17g}" for k, v in constants.items()]
    return "\n".join(lines) + "\n"


def parse_fixtures(text: str) -> Dict[str, float]:
    out: Dict[str, float] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = float(value)
    return out


def fixtures_text(setting: str) -> str:
    return resources.files("ivmed").joinpath("fixtures", f"{setting}.txt").read_text()


def load_fixtures(setting: str) -> Dict[str, float]:
    """Frozen golden constants shipped with the package."""
    return parse_fixtures(fixtures_text(setting))


# ---------------------------------------------------------------------------
# independent Monte Carlo check of the golden constants


@dataclass(frozen=True)
class MonteCarloEstimate:
    value: float
    se: float

    def agrees(self, target: float, z: float = 3.0) -> bool:
        return abs(self.value - target) <= z * self.se


def _draw(scm: DiscreteSCM, var: str, values, rng) -> np.ndarray:
    p = scm.structural(var, values)
    return (rng.random(p.shape) < p).astype(float)


def _single_draws(scm: DiscreteSCM, n: int, rng) -> np.ndarray:
    """Per-unit draws whose means are ``theta(1,0), theta(0,0), theta(1,1), FS``.

    Each functional is simulated forward from the structural equations: the
    mediator is generated in the ``a*`` world and the outcome in the ``a'``
    world with a fresh instrument draw.
    """
    w = {}
    for v in W_NAMES:
        w[v] = _draw(scm, v, {**w, "_n": np.zeros(n)}, rng)
    ones, zeros = np.ones(n), np.zeros(n)
    cols = []
    for ap, ast in sgl.PAIRS:
        z_star = _draw(scm, "z", {**w, "a": ones * ast}, rng)
        m_star = _draw(scm, "m", {**w, "z": z_star}, rng)
        z_prime = _draw(scm, "z", {**w, "a": ones * ap}, rng)
        cols.append(_draw(scm, "y", {**w, "z": z_prime, "m": m_star}, rng))
    cols.append(_draw(scm, "z", {**w, "a": ones}, rng) - _draw(scm, "z", {**w, "a": zeros}, rng))
    return np.column_stack(cols)


def _double_draws(scm: DiscreteSCM, n: int, rng) -> np.ndarray:
    """Per-unit draws whose means are the three ``vartheta``, the four
    ``phi`` and FS.

    For ``vartheta(a', a*)`` the mediator drawn in the ``a*`` world is
    assigned to the mediator instrument in the ``a'`` world.
    """
    w = {}
    for v in W_NAMES:
        w[v] = _draw(scm, v, {**w, "_n": np.zeros(n)}, rng)
    ones, zeros = np.ones(n), np.zeros(n)
    cols = []
    for ap, ast in dbl.PAIRS:
        z_star = _draw(scm, "z", {**w, "a": ones * ast}, rng)
        l_star = _draw(scm, "l", {**w, "z": z_star}, rng)
        m_star = _draw(scm, "m", {**w, "z": z_star, "l": l_star}, rng)
        z_prime = _draw(scm, "z", {**w, "a": ones * ap}, rng)
        m_prime = _draw(scm, "m", {**w, "z": z_prime, "l": m_star}, rng)
        cols.append(_draw(scm, "y", {**w, "z": z_prime, "m": m_prime}, rng))
    for a, l in dbl.PHI_PAIRS:
        z_a = _draw(scm, "z", {**w, "a": ones * a}, rng)
        cols.append(z_a * _draw(scm, "m", {**w, "z": ones, "l": ones * l}, rng))
    cols.append(_draw(scm, "z", {**w, "a": ones}, rng) - _draw(scm, "z", {**w, "a": zeros}, rng))
    return np.column_stack(cols)


def _contrasts(setting: str):
    """Estimand -> (function of the draw means, gradient)."""

    def linear(coef):
        coef = np.asarray(coef, dtype=float)
        return lambda m: float(coef @ m), lambda m: coef

    def ratio(num, den):
        num, den = np.asarray(num, dtype=float), np.asarray(den, dtype=float)
        return (lambda m: float(num @ m / (den @ m)),
                lambda m: num / (den @ m) - (num @ m) * den / (den @ m) ** 2)

    if setting == "single":
        # columns: theta10, theta00, theta11, FS
        ide, ite, iie, fs = [1, -1, 0, 0], [0, -1, 1, 0], [-1, 0, 1, 0], [0, 0, 0, 1]
        return {"FS": linear(fs), "ITT_IDE": linear(ide), "ITT_IIE": linear(iie), "ITT_ITE": linear(ite),
                "CIDE": ratio(ide, fs), "CIIE": ratio(iie, fs), "CITE": ratio(ite, fs),
                "theta_1_0": linear([1, 0, 0, 0]), "theta_0_0": linear([0, 1, 0, 0]),
                "theta_1_1": linear([0, 0, 1, 0])}
    # columns: vt11, vt10, vt00, phi11, phi10, phi01, phi00, FS
    e = np.eye(8)
    tiide, tiiie, tiite = e[1] - e[2], e[0] - e[1], e[0] - e[2]
    jfs = e[3] - e[4] - e[5] + e[6]
    out = {"FS": linear(e[7]), "JFS": linear(jfs), "TIIDE": linear(tiide), "TIIIE": linear(tiiie),
           "TIITE": linear(tiite), "DCIDE": ratio(tiide, jfs), "DCIIE": ratio(tiiie, jfs),
           "DCITE": ratio(tiite, jfs), "DCIDE_WEAK": ratio(tiide, e[7])}
    for j, (ap, ast) in enumerate(dbl.PAIRS):
        out[f"vartheta_{ap}_{ast}"] = linear(e[j])
    for j, (a, l) in enumerate(dbl.PHI_PAIRS):
        out[f"phi_{a}_{l}"] = linear(e[3 + j])
    return out


def monte_carlo_constants(scm: DiscreteSCM, draws: int = 10_000_000, chunk: int = 1_000_000,
                          seed: int = 20240601) -> Dict[str, MonteCarloEstimate]:
    """Monte Carlo estimates of the golden constants with standard errors.

    Functionals are simulated forward from the structural equations and
    combined by the delta method.  Efficiency bounds are sample variances
    of the true-nuisance influence values over draws from the observed-data
    law, with standard error ``sqrt((m4 - sigma^4) / N)``.
    """
    setting = "double" if scm.has_l else "single"
    draw_fn = _double_draws if scm.has_l else _single_draws
    names = DOUBLE_ESTIMANDS if scm.has_l else SINGLE_ESTIMANDS
    pieces = population_pieces(scm)
    eif_table = np.column_stack([pieces[k].eif for k in names])
    rng = np.random.Generator(np.random.Philox(seed))
    total = 0
    s1 = s2 = None
    e1 = np.zeros(len(names))
    e2 = np.zeros(len(names))
    e4 = np.zeros(len(names))
    chunk_id = 0
    while total < draws:
        n = min(chunk, draws - total)
        x = draw_fn(scm, n, rng)
        s1 = x.sum(axis=0) if s1 is None else s1 + x.sum(axis=0)
        s2 = x.T @ x if s2 is None else s2 + x.T @ x
        obs = scm.sample(n, seed + 1 + chunk_id).columns()
        eif = eif_table[scm.support_index(obs)]
        e1 += eif.sum(axis=0)
        e2 += (eif ** 2).sum(axis=0)
        e4 += (eif ** 4).sum(axis=0)
        total += n
        chunk_id += 1
    mean = s1 / total
    cov = s2 / total - np.outer(mean, mean)
    out: Dict[str, MonteCarloEstimate] = {}
    for key, (fn, grad) in _contrasts(setting).items():
        g = grad(mean)
        se = float(np.sqrt(max(g @ cov @ g, 0.0) / total))
        prefix = "" if key.startswith(("theta_", "vartheta_", "phi_")) else "psi_"
        out[prefix + key] = MonteCarloEstimate(fn(mean), se)
    m1, m2, m4 = e1 / total, e2 / total, e4 / total
    for j, k in enumerate(names):
        var = m2[j] - m1[j] ** 2
        out[f"bound_{k}"] = MonteCarloEstimate(float(var), float(np.sqrt(max(m4[j] - m2[j] ** 2, 0.0) / total)))
    return out

"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test appends a ``CRITERION k PASS|FAIL`` line (with the numbers behind
the verdict) to the terminal summary.  The simulation criteria read results
through ``simcache``; a missing cache entry triggers the full run.
"""

import os
import time

import numpy as np
import pytest

from conftest import VERDICTS
from ivmed import cli, nuisance, oracle, simulation
from ivmed.data import LearnerKind, LearnerSpec
from ivmed.scm import build_dgm

import simcache

JOBS = int(os.environ.get("IVMED_JOBS", "1"))
BAND = 0.04  # 300 replicates: coverage band widened to 0.95 +/- 0.04
MSE_BAND = (0.8, 1.3)


def verdict(number, ok, title, details):
    VERDICTS.append(f"CRITERION {number} {'PASS' if ok else 'FAIL'} {title}")
    VERDICTS.extend(f"    {d}" for d in details)
    print(VERDICTS[-len(details) - 1])
    return ok


# ---------------------------------------------------------------------------
# 1. identified functional equals the counterfactual complier effect


def test_criterion_1_identification_equality():
    details, ok = [], True
    t0 = time.perf_counter()
    checks = [("single", ("CIDE", "CIIE", "CITE")), ("double", ("DCIDE", "DCIIE", "DCIDE_WEAK"))]
    for setting, names in checks:
        scm = build_dgm(setting)
        ident = oracle.true_identified_functionals(scm)
        cf = oracle.true_counterfactual_effects(scm)
        for k in names:
            gap = ident[k] - cf[k]
            good = abs(gap) < 1e-10
            ok &= good
            details.append(f"{k:<11} identified {ident[k]:+.12f} counterfactual {cf[k]:+.12f} "
                           f"delta {gap:+.3e} {'ok' if good else 'FAIL'}")
        if setting == "double":
            details.append(f"P(C_Z = C_M) under the coupling = {cf.p_cz_equals_cm:.4f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 5
    details.append(f"runtime {elapsed:.2f} s (limit 5 s)")
    details.append("the nonzero gaps equal closed-form non-complier terms; see test_oracle.py "
                   "(test_single_indirect_gap_is_noncomplier_mediator_shift, test_double_gaps_are_non_shared_compliance)")
    verdict(1, ok, "identification equality, |delta| < 1e-10", details)
    assert ok


# ---------------------------------------------------------------------------
# 2. EIF mean zero and variance equal to the frozen bound


def test_criterion_2_eif_mean_and_bound():
    details, ok = [], True
    t0 = time.perf_counter()
    checks = [("single", ("FS", "ITT_IDE", "CIDE")), ("double", ("TIIDE", "TIIIE", "TIITE", "JFS", "DCIDE"))]
    for setting, names in checks:
        scm = build_dgm(setting)
        pieces = oracle.population_pieces(scm)
        fixtures = oracle.load_fixtures(setting)
        for k in names:
            eif = pieces[k].eif
            mean = float(np.dot(scm.joint, eif))
            var = float(np.dot(scm.joint, (eif - mean) ** 2))
            bound = fixtures[f"bound_{k}"]
            good = abs(mean) < 1e-10 and abs(var - bound) < 1e-10
            ok &= good
            details.append(f"{setting:<6} {k:<8} E[D] {mean:+.2e}  Var(D) {var:.12f}  bound {bound:.12f} "
                           f"{'ok' if good else 'FAIL'}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 10
    details.append(f"runtime {elapsed:.2f} s (limit 10 s)")
    verdict(2, ok, "EIF mean zero and Var(D) = bound, 1e-10", details)
    assert ok


# ---------------------------------------------------------------------------
# 3. robustness matrix


def _max_delta(scm, names, wrong):
    truth = oracle.true_identified_functionals(scm)
    limits = {k: "intercept" for k in wrong}
    return max(abs(oracle.population_onestep(scm, k, limits) - truth[k]) for k in names)


def test_criterion_3_robustness_matrix():
    details, ok = [], True
    t0 = time.perf_counter()
    single, double = build_dgm("single"), build_dgm("double")
    s_names, d_names = ("CIDE", "CIIE", "CITE"), ("DCIDE", "DCIIE", "DCITE", "DCIDE_WEAK")
    covered = [
        ("single (g,q,e,r) consistent", single, s_names, ("mu",)),
        ("single (g,q,mu) consistent", single, s_names, ("r", "e")),
        ("double (q,mu,c) consistent", double, d_names, ("g", "p")),
        ("double (g,q,mu,p) consistent", double, d_names, ("c",)),
        ("double (g,q,p,c) consistent", double, d_names, ("mu",)),
        ("double (g,mu,p,c) consistent", double, d_names, ("q",)),
    ]
    for label, scm, names, wrong in covered:
        d = _max_delta(scm, names, wrong)
        good = d < 1e-10
        ok &= good
        details.append(f"{label:<32} max|delta| {d:.3e} (need < 1e-10) {'ok' if good else 'FAIL'}")
    outside = [
        ("single only mu consistent", single, ("CIDE",), ("g", "q", "r", "e")),
        ("double only g consistent", double, ("DCIDE",), ("q", "p", "c", "mu")),
    ]
    for label, scm, names, wrong in outside:
        d = _max_delta(scm, names, wrong)
        good = d > 1e-4
        ok &= good
        details.append(f"{label:<32} max|delta| {d:.3e} (need > 1e-4) {'ok' if good else 'FAIL'}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30
    details.append(f"runtime {elapsed:.2f} s (limit 30 s)")
    details.append("the (g,mu,p,c) error equals -E_W sum mu (q - q1)(gamma - gamma1) exactly; "
                   "see test_oracle.py::test_q_wrong_bias_is_product_of_q_and_gamma_errors")
    verdict(3, ok, "robustness matrix", details)
    assert ok


# ---------------------------------------------------------------------------
# 4 and 5. simulation reproduction


def _projected_minutes(plan, workers=8):
    """Time one replicate per sample size here and scale to the full plan."""
    per_n = {}
    for n in plan.sample_sizes:
        t0 = time.perf_counter()
        simulation.run_replicate(plan, n, plan.replicates)  # a seed outside the plan's own
        per_n[n] = time.perf_counter() - t0
    total = sum(per_n.values()) * plan.replicates
    return total / workers / 60, per_n


def _band(value):
    return 0.95 - BAND <= value <= 0.95 + BAND


def _simulation_checks(res, estimands, details):
    ok = True
    for est in estimands:
        for n in (2000, 5000):
            cov = res.value("all-correct", n, est, "coverage_95")
            good = _band(cov)
            ok &= good
            details.append(f"{est:<6} n={n:<5} coverage {cov:.3f} in [{0.95 - BAND:.2f}, {0.95 + BAND:.2f}] "
                           f"{'ok' if good else 'FAIL'}")
        lo, hi = (res.value("all-correct", n, est, "sqrt_n_abs_bias") for n in (500, 5000))
        good = hi < lo
        ok &= good
        details.append(f"{est:<6} sqrt(n)|bias| n=500 {lo:.4f} -> n=5000 {hi:.4f} {'ok' if good else 'FAIL'}")
        ratio = res.value("all-correct", 5000, est, "n_mse_over_bound")
        good = MSE_BAND[0] <= ratio <= MSE_BAND[1]
        ok &= good
        details.append(f"{est:<6} n=5000 n*MSE/bound {ratio:.3f} in [{MSE_BAND[0]}, {MSE_BAND[1]}] "
                       f"{'ok' if good else 'FAIL'}")
    return ok


def _failures(res):
    return int(sum(v for s, n, e, m, v in res.rows if m == "replicate_failures"))


@pytest.mark.slow
def test_criterion_4_single_simulation():
    plan = simcache.bundled("paper-single")
    res, path, cached = simcache.cached_run(plan, JOBS)
    details = [f"{plan.replicates} replicates per n (reduced run, bands +/-{BAND}); result {path.name}"
               f"{' (cached)' if cached else ''}; failed replicates {_failures(res)}"]
    ok = _simulation_checks(res, ("CIDE", "CIIE"), details)
    minutes, per_n = _projected_minutes(plan)
    good = minutes <= 30
    ok &= good
    details.append(f"projected wall time on 8 workers {minutes:.1f} min (limit 30) from per-replicate "
                   + ", ".join(f"n={n}: {t:.1f}s" for n, t in per_n.items()) + f" {'ok' if good else 'FAIL'}")
    verdict(4, ok, "single-instrument simulation bands", details)
    assert ok


@pytest.mark.slow
def test_criterion_5_double_simulation():
    plan = simcache.bundled("paper-double")
    res, path, cached = simcache.cached_run(plan, JOBS)
    details = [f"{plan.replicates} replicates per n (reduced run, bands +/-{BAND}); result {path.name}"
               f"{' (cached)' if cached else ''}; failed replicates {_failures(res)}"]
    ok = _simulation_checks(res, ("DCIDE",), details)
    for scen in plan.scenarios:
        lo, hi = (res.value(scen.name, n, "DCIDE", "abs_bias") for n in (500, 5000))
        good = hi < lo
        ok &= good
        details.append(f"{scen.name:<12} DCIDE |bias| n=500 {lo:.4f} -> n=5000 {hi:.4f} {'ok' if good else 'FAIL'}")
    minutes, per_n = _projected_minutes(plan)
    good = minutes <= 45
    ok &= good
    details.append(f"projected wall time on 8 workers {minutes:.1f} min (limit 45) from per-replicate "
                   + ", ".join(f"n={n}: {t:.1f}s" for n, t in per_n.items()) + f" {'ok' if good else 'FAIL'}")
    verdict(5, ok, "double-instrument simulation bands", details)
    assert ok


# ---------------------------------------------------------------------------
# 6. learner correctness


def test_criterion_6_learner():
    details, ok = [], True
    rng = np.random.default_rng(2024)
    x = rng.normal(size=(800, 6))
    y = (rng.uniform(size=800) < 1 / (1 + np.exp(-(0.2 + x @ np.linspace(-1, 1, 6))))).astype(float)
    spec = LearnerSpec(LearnerKind.LOGISTIC_L1_INTERACTIONS, lambda_grid=(1e-10,), max_order=1)
    model = nuisance.fit(spec, x, y)
    irls = nuisance.newton_logistic(x, y, np.ones(len(y)))
    # the interaction learner centers inputs, so compare slopes and the intercept at the centering point
    b0 = model.coefficients[0] - np.dot(model.coefficients[1:], x.mean(0))
    diff = np.max(np.abs(np.r_[b0, model.coefficients[1:]] - irls))
    good = diff < 1e-4
    ok &= good
    details.append(f"lambda -> 0 vs IRLS on 6 columns: max coefficient difference {diff:.2e} (need < 1e-4)")

    worst, sweeps = -np.inf, 0
    for case in range(100):
        r = np.random.default_rng(case)
        n, p = int(r.integers(20, 80)), int(r.integers(1, 8))
        X = r.normal(size=(n, p))
        X = (X - X.mean(0)) / np.where(X.std(0) > 0, X.std(0), 1)
        yy = (r.uniform(size=n) < r.uniform(0.1, 0.9)).astype(float)
        w = np.full(n, 1 / n)
        lam = r.uniform(1e-4, 1) * max(nuisance.lambda_max(X, yy, w), 1e-3)
        beta = np.zeros(p + 1)
        _, hist = nuisance.cd_logistic(X, yy, w, lam, beta, 1e-10, 1000, True)
        start = nuisance._logistic_loss(np.zeros(n), yy, w)
        steps = np.diff(np.r_[start, hist])
        worst = max(worst, float(steps.max()))
        sweeps += len(hist)
    good = worst <= 0
    ok &= good
    details.append(f"coordinate descent: 100 cases, {sweeps} sweeps, largest objective change {worst:.2e} "
                   f"(need <= 0)")
    verdict(6, ok, "learner correctness", details)
    assert ok


# ---------------------------------------------------------------------------
# 7. determinism


DET_PLAN = """
setting = double
sample_size = 300
sample_size = 500
replicates = 4
base_seed = 9
folds = 3
learner.n_lambda = 6
learner.cv_folds = 3
scenario = all-correct
scenario.all-correct.g = INTERCEPT_ONLY
scenario.all-correct.q = LOGISTIC_L1_INTERACTIONS
scenario.all-correct.p = LOGISTIC_L1_INTERACTIONS
scenario.all-correct.c = LOGISTIC_L1_INTERACTIONS
scenario.all-correct.mu = LOGISTIC_L1_INTERACTIONS
"""


def test_criterion_7_determinism(tmp_path):
    plan = tmp_path / "det.plan"
    plan.write_text(DET_PLAN)
    outputs = {}
    for tag, jobs in (("first", 1), ("second", 1), ("parallel", 8)):
        for ext in ("csv", "json"):
            out = tmp_path / f"{tag}.{ext}"
            code = cli.main(["simulate", "--plan", str(plan), "--out", str(out), "--jobs", str(jobs), "--quiet"])
            assert code == 0
            outputs[tag, ext] = out.read_bytes()
    ok = all(outputs["first", e] == outputs[t, e] for t in ("second", "parallel") for e in ("csv", "json"))
    details = [f"{len(outputs['first', 'csv'])}-byte CSV and {len(outputs['first', 'json'])}-byte JSON: "
               f"repeat run {'identical' if outputs['first', 'csv'] == outputs['second', 'csv'] else 'DIFFERENT'}, "
               f"--jobs 8 {'identical' if outputs['first', 'csv'] == outputs['parallel', 'csv'] else 'DIFFERENT'}"]
    verdict(7, ok, "byte-identical simulate output", details)
    assert ok


# ---------------------------------------------------------------------------
# 8. fixture provenance


@pytest.mark.slow
def test_criterion_8_fixture_monte_carlo():
    details, ok = [], True
    for setting in ("single", "double"):
        scm = build_dgm(setting)
        frozen = oracle.load_fixtures(setting)
        fresh = oracle.golden_constants(scm)
        same = all(abs(fresh[k] - frozen[k]) <= 1e-14 * max(1.0, abs(frozen[k])) for k in frozen)
        ok &= same and list(fresh) == list(frozen)
        t0 = time.perf_counter()
        mc = oracle.monte_carlo_constants(scm, draws=10_000_000)
        zs = {k: (est.value - frozen[k]) / est.se for k, est in mc.items()}
        worst = max(zs, key=lambda k: abs(zs[k]))
        good = all(abs(z) <= 3 for z in zs.values())
        ok &= good
        details.append(f"{setting:<6} {len(zs)} constants, 1e7 draws ({time.perf_counter() - t0:.0f} s): "
                       f"max |z| {abs(zs[worst]):.2f} at {worst}; fixtures match recomputation: {same}")
    verdict(8, ok, "fixtures within 3 SE of a 1e7-draw Monte Carlo", details)
    assert ok

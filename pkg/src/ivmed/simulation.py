"""Replicated estimation on the simulation designs and tidy metric tables."""

from __future__ import annotations

import csv
import functools
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import double, single
from .config import Entries, ParseError, as_int, parse_entries, parse_estimands, parse_scenarios, parse_setting
from .crossfit import assign_folds
from .data import DOUBLE_KINDS, SINGLE_KINDS, EstimandKind, IvmedError, ScenarioSpec, ValidationError
from .oracle import load_fixtures
from .scm import build_dgm

log = logging.getLogger(__name__)

METRICS = ("abs_bias", "sqrt_n_abs_bias", "n_mse_over_bound", "coverage_95", "mean_se", "replicate_failures")
HEADER = ("scenario", "n", "estimand", "metric", "value")
DEFAULT_SIZES = (500, 1000, 2000, 5000)
DEFAULT_ESTIMANDS = {
    "single": (EstimandKind.CIDE, EstimandKind.CIIE, EstimandKind.CITE),
    "double": (EstimandKind.DCIDE, EstimandKind.DCIIE, EstimandKind.DCITE, EstimandKind.DCIDE_WEAK),
}


class IoFailure(IvmedError):
    pass


@dataclass(frozen=True)
class SimulationPlan:
    setting: str
    scenarios: Tuple[ScenarioSpec, ...]
    sample_sizes: Tuple[int, ...] = DEFAULT_SIZES
    replicates: int = 1000
    base_seed: int = 0
    folds_j: int = 5
    estimands: Tuple[EstimandKind, ...] = ()
    alpha: float = 0.05

    def __post_init__(self):
        if self.setting not in ("single", "double"):
            raise ValidationError(f"unknown setting {self.setting!r}", "setting")
        object.__setattr__(self, "scenarios", tuple(self.scenarios))
        object.__setattr__(self, "sample_sizes", tuple(int(n) for n in self.sample_sizes))
        object.__setattr__(self, "estimands", tuple(self.estimands) or DEFAULT_ESTIMANDS[self.setting])
        if not self.scenarios:
            raise ValidationError("plan has no scenarios", "scenario")
        if self.replicates < 1:
            raise ValidationError("replicates must be >= 1", "replicates")
        if not self.sample_sizes or any(n < 1 for n in self.sample_sizes):
            raise ValidationError("sample sizes must be positive", "sample_size")
        if len({s.name for s in self.scenarios}) != len(self.scenarios):
            raise ValidationError("scenario names must be unique", "scenario")
        for s in self.scenarios:
            s.check(self.setting)
        allowed = SINGLE_KINDS if self.setting == "single" else DOUBLE_KINDS
        for k in self.estimands:
            if k not in allowed:
                raise ValidationError(f"{k.value} is not a {self.setting}-instrument estimand", "estimand")

    def fingerprint(self) -> str:
        """Stable digest of everything that determines the output."""
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


def plan_from_entries(entries: Entries) -> SimulationPlan:
    setting = parse_setting(entries)
    sizes = [as_int(v, ln, "sample_size", 1) for v, ln in entries.get_all("sample_size")]
    kw = {}
    for key, minimum in (("replicates", 1), ("base_seed", 0), ("folds", 2)):
        found = entries.get(key)
        if found is not None:
            kw["folds_j" if key == "folds" else key] = as_int(found[0], found[1], key, minimum)
    known = {"setting", "sample_size", "replicates", "base_seed", "folds", "estimand", "scenario"}
    for key, _, line in entries.items:
        if key not in known and not key.startswith(("scenario.", "learner.")):
            raise ParseError("unknown key", line, key)
    scenarios = parse_scenarios(entries, setting)
    if not scenarios:
        raise ParseError("plan declares no scenarios", None, "scenario")
    try:
        return SimulationPlan(setting=setting, scenarios=tuple(scenarios), sample_sizes=tuple(sizes or DEFAULT_SIZES),
                              estimands=tuple(parse_estimands(entries)), **kw)
    except ValidationError as exc:
        raise ParseError(str(exc), None, exc.column) from None


def plan_from_text(text: str) -> SimulationPlan:
    return plan_from_entries(parse_entries(text))


def bundled_plan_text(name: str) -> str:
    """Text of a plan shipped with the package, e.g. ``paper-single``."""
    fname = name if name.endswith(".plan") else name + ".plan"
    path = resources.files("ivmed").joinpath("plans", fname)
    if not path.is_file():
        raise ValidationError(f"no bundled plan named {name!r}", "plan")
    return path.read_text()


# ---------------------------------------------------------------------------
# replicates

Record = Dict[Tuple[str, str], Optional[Tuple[float, float, float, float]]]


@functools.lru_cache(maxsize=None)
def _scm(setting: str):
    return build_dgm(setting)


def run_replicate(plan: SimulationPlan, n: int, r: int) -> Record:
    """Estimates ``(psi, se, lower, upper)`` per (scenario, estimand); None
    marks a failed estimate."""
    seed = plan.base_seed + r
    data = _scm(plan.setting).sample(n, seed)
    folds = assign_folds(n, plan.folds_j, seed)
    module = single if plan.setting == "single" else double
    cache: dict = {}
    out: Record = {}
    for scen in plan.scenarios:
        try:
            res = module.estimate_all(data, plan.estimands, scen, folds, alpha=plan.alpha, cache=cache)
        except IvmedError as exc:
            log.debug("n=%d replicate %d scenario %s failed: %s", n, r, scen.name, exc)
            res = {k: exc for k in plan.estimands}
        for k in plan.estimands:
            rep = res[k]
            if isinstance(rep, Exception):
                out[(scen.name, k.value)] = None
            else:
                out[(scen.name, k.value)] = (rep.psi_hat, rep.se, rep.ci_lower, rep.ci_upper)
    return out


def _run_item(args) -> Record:
    plan, n, r = args
    return run_replicate(plan, n, r)


# ---------------------------------------------------------------------------
# results


def _sig(value: float) -> float:
    return float(f"{float(value):.12g}")


@dataclass
class SimulationResult:
    """Tidy metric rows ``(scenario, n, estimand, metric, value)``, values
    held at 12 significant digits so serialization round-trips exactly."""

    setting: str
    replicates: int
    rows: List[Tuple[str, int, str, str, float]] = field(default_factory=list)

    def value(self, scenario: str, n: int, estimand, metric: str) -> float:
        key = (scenario, int(n), getattr(estimand, "value", estimand), metric)
        for row in self.rows:
            if row[:4] == key:
                return row[4]
        raise KeyError(key)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HEADER)
        for s, n, e, m, v in self.rows:
            writer.writerow([s, n, e, m, f"{v:.12g}"])
        return buf.getvalue()

    def to_json(self) -> str:
        body = {
            "setting": self.setting,
            "replicates": self.replicates,
            "columns": list(HEADER),
            "rows": [list(r) for r in self.rows],
        }
        return json.dumps(body, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SimulationResult":
        body = json.loads(text)
        rows = [(str(s), int(n), str(e), str(m), float(v)) for s, n, e, m, v in body["rows"]]
        return cls(body["setting"], int(body["replicates"]), rows)

    @classmethod
    def from_csv(cls, text: str, setting: str, replicates: int) -> "SimulationResult":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != HEADER:
            raise ValidationError(f"unexpected header {header}")
        rows = [(s, int(n), e, m, float(v)) for s, n, e, m, v in reader]
        return cls(setting, replicates, rows)


def aggregate(plan: SimulationPlan, records: Dict[Tuple[int, int], Record],
              truths: Optional[Dict[str, float]] = None) -> SimulationResult:
    """Metrics per (scenario, n, estimand), reduced in replicate order."""
    truths = truths or load_fixtures(plan.setting)
    result = SimulationResult(plan.setting, plan.replicates)
    for scen in plan.scenarios:
        for n in plan.sample_sizes:
            for kind in plan.estimands:
                key = (scen.name, kind.value)
                ok = [records[(n, r)][key] for r in range(plan.replicates) if records[(n, r)][key] is not None]
                failures = plan.replicates - len(ok)
                truth = truths[f"psi_{kind.value}"]
                bound = truths[f"bound_{kind.value}"]
                if ok:
                    est = np.array(ok)
                    err = est[:, 0] - truth
                    bias = float(np.mean(err))
                    metrics = {
                        "abs_bias": abs(bias),
                        "sqrt_n_abs_bias": np.sqrt(n) * abs(bias),
                        "n_mse_over_bound": n * float(np.mean(err ** 2)) / bound,
                        "coverage_95": float(np.mean((est[:, 2] <= truth) & (truth <= est[:, 3]))),
                        "mean_se": float(np.mean(est[:, 1])),
                    }
                else:
                    metrics = {m: float("nan") for m in METRICS}
                metrics["replicate_failures"] = failures
                for m in METRICS:
                    result.rows.append((scen.name, n, kind.value, m, _sig(metrics[m])))
    return result


def run(plan: SimulationPlan, jobs: int = 1, progress: bool = True) -> SimulationResult:
    """Run every (sample size, replicate) work item and aggregate.

    Items are independent; with ``jobs > 1`` they run in a process pool and
    results are collected in item order, so output does not depend on
    ``jobs``.
    """
    if jobs < 1:
        raise ValidationError("jobs must be >= 1", "jobs")
    items = [(plan, n, r) for n in plan.sample_sizes for r in range(plan.replicates)]
    records: Dict[Tuple[int, int], Record] = {}
    step = max(1, len(items) // 20)

    def collect(results):
        for i, ((_, n, r), rec) in enumerate(zip(items, results), start=1):
            records[(n, r)] = rec
            if progress and (i % step == 0 or i == len(items)):
                log.info("%s: %d/%d replicates done", plan.setting, i, len(items))

    if jobs == 1:
        collect(map(_run_item, items))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            collect(pool.map(_run_item, items, chunksize=max(1, len(items) // (8 * jobs))))
    return aggregate(plan, records)


def emit(result: SimulationResult, path: str, fmt: Optional[str] = None) -> None:
    """Write the tidy table as CSV or JSON (format from ``fmt`` or the file suffix)."""
    if not result.rows:
        raise ValidationError("result is empty")
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    if fmt not in ("csv", "json"):
        raise ValidationError(f"unknown output format {fmt!r}", "format")
    text = result.to_json() if fmt == "json" else result.to_csv()
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc

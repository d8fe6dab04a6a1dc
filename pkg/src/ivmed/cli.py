"""Command-line entry point: ``ivmed estimate | simulate | oracle``.

Exit codes: 0 success, 2 invalid input or configuration, 3 estimation
failure (for example a weak first stage).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, double, single, simulation
from .config import (Entries, ParseError, as_float, as_int, learner_defaults, make_learner, parse_entries,
                     parse_estimands)
from .crossfit import DEFAULT_J, assign_folds
from .data import (DOUBLE_NUISANCES, SINGLE_NUISANCES, Dataset, IvmedError, MissingValue, ScenarioSpec,
                   ValidationError, validate)
from .oracle import format_fixtures, golden_constants
from .scm import build_dgm
from .single import WeakInstrument

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3
ROLES = ("w", "a", "z", "l", "m", "y")
SCENARIO_PRESETS = ("all-correct",)

log = logging.getLogger("ivmed")


@dataclass
class RunConfig:
    """Settings of one ``estimate`` invocation.

    ``roles`` maps CSV column names to ``w``, ``a``, ``z``, ``l``, ``m`` or
    ``y``; every role but ``w`` (one or more columns) and ``l`` (optional)
    takes exactly one column.
    """

    roles: Dict[str, str]
    estimands: List = field(default_factory=list)
    scenario: str = "all-correct"
    learners: Dict[str, object] = field(default_factory=dict)
    learner_options: Dict[str, object] = field(default_factory=dict)
    folds_j: int = DEFAULT_J
    seed: int = 0
    alpha: float = 0.05
    clip: float = 0.001
    fs_threshold: float = 0.01
    jfs_threshold: float = 0.005

    @property
    def setting(self) -> str:
        return "double" if any(k.needs_l for k in self.estimands) else "single"

    def scenario_spec(self) -> ScenarioSpec:
        """Every nuisance gets the L1 interaction learner unless overridden."""
        nuisances = DOUBLE_NUISANCES if self.setting == "double" else SINGLE_NUISANCES
        learners = {}
        for name in nuisances:
            if name in self.learners:
                learners[name] = self.learners[name]
            else:
                learners[name] = make_learner("LOGISTIC_L1_INTERACTIONS", self.learner_options, 0, "scenario")
        extra = set(self.learners) - set(nuisances)
        if extra:
            raise ParseError(f"nuisance {sorted(extra)[0]!r} is not used in the {self.setting} setting",
                             None, f"nuisance.{sorted(extra)[0]}")
        return ScenarioSpec(self.scenario, learners)


def config_from_text(text: str, environ: Optional[Dict[str, str]] = None) -> RunConfig:
    entries = parse_entries(text)
    environ = os.environ if environ is None else environ
    roles: Dict[str, str] = {}
    learners: Dict[str, object] = {}
    opts = learner_defaults(entries)
    scalar = {"folds", "seed", "alpha", "clip", "scenario", "fs_threshold", "jfs_threshold"}
    for key, value, line in entries.items:
        if key.startswith("role."):
            col = key[len("role."):]
            if value not in ROLES:
                raise ParseError(f"unknown role {value!r}; expected one of {', '.join(ROLES)}", line, key)
            roles[col] = value
        elif key.startswith("nuisance."):
            name = key[len("nuisance."):]
            if name not in set(SINGLE_NUISANCES) | set(DOUBLE_NUISANCES):
                raise ParseError(f"unknown nuisance {name!r}", line, key)
            learners[name] = make_learner(value, opts, line, key)
        elif key not in scalar and key != "estimand" and not key.startswith("learner."):
            raise ParseError("unknown key", line, key)
    if not roles:
        raise ParseError("no column roles given; use 'role.<column> = <role>'", None, "role")
    counts = {r: sum(1 for v in roles.values() if v == r) for r in ROLES}
    if counts["w"] < 1:
        raise ParseError("at least one covariate column is required", None, "role")
    for r in ("a", "z", "m", "y"):
        if counts[r] != 1:
            raise ParseError(f"role {r!r} needs exactly one column, got {counts[r]}", None, "role")
    if counts["l"] > 1:
        raise ParseError("role 'l' takes at most one column", None, "role")
    cfg = RunConfig(roles=roles, learners=learners, learner_options=opts)
    cfg.estimands = parse_estimands(entries) or [single.EstimandKind.CIDE]
    for key, conv in (("folds", "int"), ("seed", "int"), ("alpha", "float"), ("clip", "float"),
                      ("fs_threshold", "float"), ("jfs_threshold", "float")):
        found = entries.get(key)
        if found is None:
            continue
        value, line = found
        num = as_int(value, line, key, 2 if key == "folds" else 0) if conv == "int" else as_float(value, line, key)
        setattr(cfg, "folds_j" if key == "folds" else key, num)
    found = entries.get("scenario")
    if found is not None:
        if found[0] not in SCENARIO_PRESETS:
            raise ParseError(f"unknown scenario {found[0]!r}; expected one of {', '.join(SCENARIO_PRESETS)}",
                             found[1], "scenario")
        cfg.scenario = found[0]
    if not 0 < cfg.alpha < 1:
        raise ParseError("alpha must lie in (0, 1)", None, "alpha")
    if not 0 < cfg.clip < 0.5:
        raise ParseError("clip must lie in (0, 0.5)", None, "clip")
    if "IVMED_SEED" in environ:
        try:
            cfg.seed = int(environ["IVMED_SEED"])
        except ValueError:
            raise ParseError(f"IVMED_SEED must be an integer, got {environ['IVMED_SEED']!r}") from None
    return cfg


def read_csv(path: str, roles: Dict[str, str]) -> Dataset:
    """Load the role-mapped columns of a comma-separated file with a header."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("file is empty", 1) from None
        missing = [c for c in roles if c not in header]
        if missing:
            raise ParseError(f"column {missing[0]!r} not found in header", 1, missing[0])
        index = {c: header.index(c) for c in roles}
        values: Dict[str, List[float]] = {c: [] for c in roles}
        for rowno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", rowno)
            for col, j in index.items():
                cell = row[j].strip()
                if cell == "" or cell.upper() in ("NA", "NAN"):
                    raise MissingValue(f"row {rowno}: column {col!r} has a missing value", col)
                try:
                    values[col].append(float(cell))
                except ValueError:
                    raise ParseError(f"non-numeric value {cell!r}", rowno, col) from None
    if not values[next(iter(roles))]:
        raise ParseError("file has no data rows", 2)
    by_role = {r: [c for c in roles if roles[c] == r] for r in ROLES}
    w_cols = by_role["w"]
    return Dataset(
        w=np.column_stack([values[c] for c in w_cols]),
        a=values[by_role["a"][0]], z=values[by_role["z"][0]], m=values[by_role["m"][0]],
        y=values[by_role["y"][0]], l=values[by_role["l"][0]] if by_role["l"] else None, w_names=tuple(w_cols),
    )


def run_estimate(data: Dataset, cfg: RunConfig):
    """Estimate every configured estimand; returns ``(records, failed)``."""
    for kind in cfg.estimands:
        validate(data, kind)
    folds = assign_folds(data.n, cfg.folds_j, cfg.seed)
    scenario = cfg.scenario_spec()
    if cfg.setting == "double":
        results = double.estimate_all(data, cfg.estimands, scenario, folds, alpha=cfg.alpha, clip=cfg.clip,
                                      jfs_threshold=cfg.jfs_threshold, fs_threshold=cfg.fs_threshold)
    else:
        results = single.estimate_all(data, cfg.estimands, scenario, folds, alpha=cfg.alpha, clip=cfg.clip,
                                      fs_threshold=cfg.fs_threshold)
    records, failed = [], False
    for kind in cfg.estimands:
        res = results[kind]
        if isinstance(res, WeakInstrument):
            failed = True
            records.append({"estimand": kind.value, "error": "WeakInstrument", "message": str(res),
                            "numerator_hat": res.partial.get("numerator_hat"),
                            "denominator_hat": res.partial.get("denominator_hat"),
                            "n": data.n, "folds": cfg.folds_j, "seed": cfg.seed})
        else:
            rec = res.to_dict()
            rec.update(folds=cfg.folds_j, seed=cfg.seed)
            records.append(rec)
    return records, failed


def _write(text: str, out: Optional[str]) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def cmd_estimate(args) -> int:
    cfg = config_from_text(Path(args.config).read_text(encoding="utf-8") if args.config else "")
    data = read_csv(args.data, cfg.roles)
    records, failed = run_estimate(data, cfg)
    _write(json.dumps(records, indent=2) + "\n", args.out)
    for rec in records:
        if "error" in rec:
            print(f"error: {rec['message']}", file=sys.stderr)
    return EXIT_FAILED if failed else EXIT_OK


def load_plan(spec: str) -> simulation.SimulationPlan:
    path = Path(spec)
    text = path.read_text(encoding="utf-8") if path.is_file() else simulation.bundled_plan_text(spec)
    return simulation.plan_from_text(text)


def cmd_simulate(args) -> int:
    plan = load_plan(args.plan)
    if args.replicates is not None:
        plan = simulation.SimulationPlan(**{**plan.__dict__, "replicates": args.replicates})
    result = simulation.run(plan, jobs=args.jobs, progress=not args.quiet)
    simulation.emit(result, args.out, args.format)
    return EXIT_OK


def cmd_oracle(args) -> int:
    sys.stdout.write(format_fixtures(golden_constants(build_dgm(args.setting)), args.setting))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivmed", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ivmed {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimate effects from a CSV file")
    p.add_argument("--data", required=True, help="comma-separated input with a header row")
    p.add_argument("--config", help="key=value run configuration")
    p.add_argument("--out", help="JSON output path (default: standard output)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run a simulation plan")
    p.add_argument("--plan", required=True, help="plan file, or the name of a bundled plan")
    p.add_argument("--out", required=True, help="output path; .json selects JSON, anything else CSV")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--replicates", type=int, help="override the plan's replicate count")
    p.add_argument("--quiet", action="store_true", help="suppress progress messages")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="print the exact golden constants")
    p.add_argument("--setting", required=True, choices=("single", "double"))
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ParseError, ValidationError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except IvmedError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())

"""Flat ``key = value`` configuration files.

One entry per line; ``#`` starts a comment; repeated keys build lists.
Used for simulation plans and for the ``estimate`` command's run config.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .data import (DOUBLE_NUISANCES, SINGLE_NUISANCES, IvmedError, LearnerKind, LearnerSpec, ScenarioSpec,
                   ValidationError, as_kind)


class ParseError(IvmedError):
    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if path is not None:
            where.append(path)
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.path = path


@dataclass
class Entries:
    """Parsed entries in file order, with line numbers."""

    items: List[Tuple[str, str, int]] = field(default_factory=list)

    def get_all(self, key: str) -> List[Tuple[str, int]]:
        return [(v, ln) for k, v, ln in self.items if k == key]

    def get(self, key: str, default=None):
        found = self.get_all(key)
        if not found:
            return default
        if len(found) > 1:
            raise ParseError(f"key given {len(found)} times", found[1][1], key)
        return found[0]

    def keys(self) -> List[str]:
        return [k for k, _, _ in self.items]


def parse_entries(text: str) -> Entries:
    out = Entries()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ParseError("expected 'key = value'", lineno)
        out.items.append((key.strip(), value.strip(), lineno))
    return out


def as_int(value: str, line: int, path: str, minimum: Optional[int] = None) -> int:
    try:
        out = int(value)
    except ValueError:
        raise ParseError(f"expected an integer, got {value!r}", line, path) from None
    if minimum is not None and out < minimum:
        raise ParseError(f"must be >= {minimum}, got {out}", line, path)
    return out


def as_float(value: str, line: int, path: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ParseError(f"expected a number, got {value!r}", line, path) from None


LEARNER_OPTIONS = ("max_order", "cv_folds", "n_lambda", "lambda_min_ratio")


def learner_defaults(entries: Entries) -> Dict[str, object]:
    """Options shared by every learner: ``learner.max_order`` (an integer or
    ``all``), ``learner.cv_folds``, ``learner.n_lambda`` and
    ``learner.lambda_min_ratio``."""
    opts: Dict[str, object] = {}
    for key, value, line in entries.items:
        if not key.startswith("learner."):
            continue
        name = key[len("learner."):]
        if name not in LEARNER_OPTIONS:
            raise ParseError(f"unknown learner option; expected one of {', '.join(LEARNER_OPTIONS)}", line, key)
        if name == "max_order":
            opts[name] = None if value.lower() == "all" else as_int(value, line, key, 1)
        elif name == "lambda_min_ratio":
            opts[name] = as_float(value, line, key)
        else:
            opts[name] = as_int(value, line, key, 2 if name == "cv_folds" else 1)
    return opts


def make_learner(kind: str, opts: Dict[str, object], line: int, path: str) -> LearnerSpec:
    try:
        lk = LearnerKind(kind.upper())
    except ValueError:
        valid = ", ".join(k.value for k in LearnerKind)
        raise ParseError(f"unknown learner {kind!r}; expected one of {valid}", line, path) from None
    try:
        return LearnerSpec(lk, cv_folds_for_lambda=opts.get("cv_folds", 10), max_order=opts.get("max_order", 2),
                           n_lambda=opts.get("n_lambda", 50), lambda_min_ratio=opts.get("lambda_min_ratio", 1e-3))
    except ValueError as exc:
        raise ParseError(str(exc), line, path) from None


def parse_scenarios(entries: Entries, setting: str) -> List[ScenarioSpec]:
    """Scenarios from ``scenario = <name>`` plus ``scenario.<name>.<nuisance> = <learner>`` lines."""
    nuisances = SINGLE_NUISANCES if setting == "single" else DOUBLE_NUISANCES
    opts = learner_defaults(entries)
    names = [v for v, _ in entries.get_all("scenario")]
    if len(set(names)) != len(names):
        raise ParseError("duplicate scenario name", None, "scenario")
    assigned: Dict[str, Dict[str, LearnerSpec]] = {n: {} for n in names}
    for key, value, line in entries.items:
        if not key.startswith("scenario."):
            continue
        rest = key[len("scenario."):]
        name, dot, nuis = rest.rpartition(".")
        if not dot or name not in assigned:
            raise ParseError("scenario must be declared with 'scenario = <name>' first", line, key)
        if nuis not in nuisances:
            raise ParseError(f"unknown nuisance {nuis!r} for the {setting} setting", line, key)
        if nuis in assigned[name]:
            raise ParseError("learner assigned twice", line, key)
        assigned[name][nuis] = make_learner(value, opts, line, key)
    out = []
    for name in names:
        missing = [n for n in nuisances if n not in assigned[name]]
        if missing:
            raise ParseError(f"no learner for {', '.join(missing)}", None, f"scenario.{name}")
        out.append(ScenarioSpec(name, assigned[name]))
    return out


def parse_setting(entries: Entries) -> str:
    found = entries.get("setting")
    if found is None:
        raise ParseError("missing required key", None, "setting")
    value, line = found
    if value not in ("single", "double"):
        raise ParseError(f"expected 'single' or 'double', got {value!r}", line, "setting")
    return value


def parse_estimands(entries: Entries, key: str = "estimand"):
    out = []
    for value, line in entries.get_all(key):
        try:
            out.append(as_kind(value))
        except ValidationError as exc:
            raise ParseError(str(exc), line, key) from None
    return out

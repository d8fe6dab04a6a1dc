"""Fold assignment and out-of-fold nuisance prediction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, MutableMapping, Optional, Sequence, Tuple

import numpy as np

from . import nuisance
from .data import Dataset, IvmedError, ScenarioSpec, ValidationError, formulas

DEFAULT_J = 5


class TooFewRows(ValidationError):
    pass


class CrossFitError(IvmedError):
    def __init__(self, message: str, fold: int, nuisance_name: str):
        super().__init__(message)
        self.fold = fold
        self.nuisance_name = nuisance_name


@dataclass(frozen=True)
class FoldAssignment:
    """``fold_of[i]`` in ``1..j`` is the validation fold holding row ``i``."""

    j: int
    fold_of: np.ndarray = field(repr=False)
    seed: int = 0

    @property
    def n(self) -> int:
        return len(self.fold_of)

    def validation(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def training(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold_of, minlength=self.j + 1)[1:]


def assign_folds(n: int, j: int = DEFAULT_J, seed: int = 0) -> FoldAssignment:
    """Shuffle with a counter-based generator and deal rows round-robin."""
    if j < 2:
        raise ValueError("fold count must be >= 2")
    if n < j:
        raise TooFewRows(f"{n} rows cannot fill {j} folds", "n")
    rng = np.random.Generator(np.random.Philox(seed))
    perm = rng.permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % j + 1
    return FoldAssignment(j, fold_of, seed)


def _is_binary(v) -> bool:
    return bool(np.all((v == 0) | (v == 1)))


def _predictor(model: nuisance.FittedModel, names: Sequence[str], clip: float) -> Callable:
    def predict(cols):
        x = np.column_stack([np.asarray(cols[v], dtype=float) for v in names])
        out = model.predict(x)
        if model.outcome_type == "binary":
            out = np.clip(out, clip, 1.0 - clip)
        return out

    return predict


@dataclass
class CrossFitPredictions:
    """Models trained on each fold's complement, plus out-of-fold columns.

    ``columns`` maps ``"name"`` or ``"name|arg=value,..."`` to a length-n
    vector whose row ``i`` comes from the model trained without fold
    ``j(i)``.
    """

    setting: str
    folds: FoldAssignment
    models: Dict[Tuple[str, int], nuisance.FittedModel] = field(repr=False)
    inputs: Dict[str, Tuple[str, ...]]
    clip: float
    columns: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def predictors(self, k: int) -> Dict[str, Callable]:
        """Predictors from the models trained without fold ``k``."""
        return {name: _predictor(self.models[(name, k)], self.inputs[name], self.clip) for name in self.inputs}


def column_key(name: str, overrides: Mapping[str, float]) -> str:
    if not overrides:
        return name
    return name + "|" + ",".join(f"{k}={int(v) if float(v).is_integer() else v}" for k, v in sorted(overrides.items()))


def crossfit_nuisances(dataset: Dataset, scenario: ScenarioSpec, folds: FoldAssignment,
                       required: Optional[Iterable[Tuple[str, Mapping[str, float]]]] = None,
                       clip: float = nuisance.CLIP,
                       cache: Optional[MutableMapping] = None) -> CrossFitPredictions:
    """Fit every nuisance of the scenario's setting on each ``T_j`` and
    predict on ``V_j``.

    ``required`` lists ``(nuisance, {input: value})`` argument settings to
    materialize as out-of-fold columns; the models themselves are always
    returned.  ``cache`` lets several scenarios on the same data and folds
    share fits of identical learners.
    """
    setting = "double" if dataset.has_l else "single"
    spec_setting = scenario.setting
    if spec_setting != setting:
        raise ValidationError(f"scenario {scenario.name!r} is for the {spec_setting} setting", "scenario")
    if folds.n != dataset.n:
        raise ValidationError("fold assignment does not match the dataset size", "folds")
    cols = dataset.columns()
    w_names = tuple(dataset.w_names)
    models: Dict[Tuple[str, int], nuisance.FittedModel] = {}
    inputs: Dict[str, Tuple[str, ...]] = {}
    for name, (target, extra) in formulas(setting).items():
        names = tuple(extra) + w_names
        inputs[name] = names
        spec = scenario[name]
        y = cols[target]
        outcome = "binary" if _is_binary(y) else "continuous"
        x = np.column_stack([cols[v] for v in names])
        for k in range(1, folds.j + 1):
            key = (name, spec, k)
            if cache is not None and key in cache:
                models[(name, k)] = cache[key]
                continue
            tr = folds.training(k)
            try:
                model = nuisance.fit(spec, x[tr], y[tr], outcome, names=names, seed=folds.seed + k, clip=clip)
            except Exception as exc:
                raise CrossFitError(f"fold {k}, nuisance {name}: {exc}", k, name) from exc
            models[(name, k)] = model
            if cache is not None:
                cache[key] = model
    out = CrossFitPredictions(setting, folds, models, inputs, clip)
    for name, overrides in (required or ()):
        if name not in inputs:
            raise ValidationError(f"unknown nuisance {name!r}", name)
        vec = np.empty(dataset.n)
        for k in range(1, folds.j + 1):
            idx = folds.validation(k)
            sub = {v: cols[v][idx] for v in inputs[name]}
            for v, val in overrides.items():
                if v not in inputs[name]:
                    raise nuisance.UnknownColumn(f"{v!r} is not an input of {name}")
                sub[v] = np.full(len(idx), float(val))
            vec[idx] = out.predictors(k)[name](sub)
        out.columns[column_key(name, overrides)] = vec
    return out


def stitch(per_fold: Sequence[np.ndarray], folds: FoldAssignment) -> np.ndarray:
    """Out-of-fold array: rows of fold ``k`` come from ``per_fold[k - 1]``.

    Arrays may carry leading axes; the row axis is the last one.
    """
    out = np.empty_like(per_fold[0])
    for k in range(1, folds.j + 1):
        idx = folds.validation(k)
        out[..., idx] = per_fold[k - 1][..., idx]
    return out

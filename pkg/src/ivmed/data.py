"""Observed-data container, estimand taxonomy and result types."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import norm


class IvmedError(Exception):
    """Base class for all package errors."""


class ValidationError(IvmedError):
    def __init__(self, message: str, column: Optional[str] = None):
        super().__init__(message)
        self.column = column


class LengthMismatch(ValidationError):
    pass


class NonBinaryColumn(ValidationError):
    pass


class MissingInstrumentL(ValidationError):
    pass


class MissingValue(ValidationError):
    pass


class EmptyEif(IvmedError):
    pass


class EstimandKind(str, enum.Enum):
    CIDE = "CIDE"
    CIIE = "CIIE"
    CITE = "CITE"
    DCIDE = "DCIDE"
    DCIIE = "DCIIE"
    DCITE = "DCITE"
    DCIDE_WEAK = "DCIDE_WEAK"
    ITT_IDE = "ITT_IDE"
    ITT_IIE = "ITT_IIE"
    ITT_ITE = "ITT_ITE"
    FS = "FS"
    JFS = "JFS"

    @property
    def needs_l(self) -> bool:
        return self in DOUBLE_KINDS


SINGLE_KINDS = (
    EstimandKind.CIDE, EstimandKind.CIIE, EstimandKind.CITE,
    EstimandKind.ITT_IDE, EstimandKind.ITT_IIE, EstimandKind.ITT_ITE,
    EstimandKind.FS,
)
DOUBLE_KINDS = (
    EstimandKind.DCIDE, EstimandKind.DCIIE, EstimandKind.DCITE,
    EstimandKind.DCIDE_WEAK, EstimandKind.JFS,
)


def as_kind(value) -> EstimandKind:
    if isinstance(value, EstimandKind):
        return value
    try:
        return EstimandKind(str(value).upper())
    except ValueError:
        raise ValidationError(f"unknown estimand {value!r}") from None


@dataclass(frozen=True)
class Dataset:
    """Columnar observed data.

    ``w`` is an ``(n, k)`` covariate matrix with names in ``w_names``;
    ``a``, ``z``, ``l`` are binary; ``m`` must be binary when ``l`` is given.
    Construction does not validate; call :func:`validate`.
    """

    w: np.ndarray
    a: np.ndarray
    z: np.ndarray
    m: np.ndarray
    y: np.ndarray
    l: Optional[np.ndarray] = None
    w_names: tuple = ()

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        object.__setattr__(self, "w", w)
        for name in ("a", "z", "m", "y", "l"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.asarray(v, dtype=float).ravel())
        if not self.w_names:
            object.__setattr__(self, "w_names", tuple(f"w{j + 1}" for j in range(w.shape[1])))
        else:
            object.__setattr__(self, "w_names", tuple(self.w_names))

    @property
    def n(self) -> int:
        return len(self.a)

    @property
    def has_l(self) -> bool:
        return self.l is not None

    def columns(self) -> dict:
        """Name -> vector map with W expanded into its named columns."""
        cols = {name: self.w[:, j] for j, name in enumerate(self.w_names)}
        cols.update(a=self.a, z=self.z, m=self.m, y=self.y)
        if self.l is not None:
            cols["l"] = self.l
        return cols

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            w=self.w[idx], a=self.a[idx], z=self.z[idx], m=self.m[idx], y=self.y[idx],
            l=None if self.l is None else self.l[idx], w_names=self.w_names,
        )


def _is_binary(v: np.ndarray) -> bool:
    return bool(np.all((v == 0) | (v == 1)))


def validate(dataset: Dataset, estimand=None) -> None:
    """Raise a :class:`ValidationError` subclass naming the offending column."""
    n = len(dataset.a)
    if n < 1:
        raise LengthMismatch("dataset has no rows", "a")
    cols = [("w", dataset.w), ("a", dataset.a), ("z", dataset.z), ("m", dataset.m), ("y", dataset.y)]
    if dataset.l is not None:
        cols.append(("l", dataset.l))
    for name, v in cols:
        if v.shape[0] != n:
            raise LengthMismatch(f"column {name!r} has length {v.shape[0]}, expected {n}", name)
    if dataset.w.shape[1] < 1:
        raise ValidationError("at least one covariate column is required", "w")
    for name, v in cols:
        if np.isnan(v).any():
            bad = name
            if name == "w":
                bad = dataset.w_names[int(np.where(np.isnan(v).any(axis=0))[0][0])]
            raise MissingValue(f"column {bad!r} has missing values", bad)
    binary = ["a", "z"] + (["l", "m"] if dataset.l is not None else [])
    for name in binary:
        if not _is_binary(getattr(dataset, name)):
            raise NonBinaryColumn(f"column {name!r} must be binary", name)
    if estimand is not None:
        kind = as_kind(estimand)
        if kind.needs_l and dataset.l is None:
            raise MissingInstrumentL(f"{kind.value} requires the mediator instrument column 'l'", "l")


def wald_interval(psi_hat: float, eif_values, alpha: float = 0.05):
    """Return ``(se, lower, upper)`` from influence-function values."""
    eif = np.asarray(eif_values, dtype=float)
    if eif.size == 0:
        raise EmptyEif("influence-function vector is empty")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    n = eif.size
    var = float(np.var(eif, ddof=1)) if n > 1 else 0.0
    se = float(np.sqrt(var / n))
    zq = float(norm.ppf(1 - alpha / 2))
    return se, psi_hat - zq * se, psi_hat + zq * se


@dataclass(frozen=True)
class EstimateReport:
    estimand: EstimandKind
    psi_hat: float
    se: float
    ci_lower: float
    ci_upper: float
    alpha: float
    eif_values: np.ndarray = field(repr=False)
    numerator_hat: float
    denominator_hat: float = 1.0

    @classmethod
    def from_eif(cls, estimand, psi_hat, eif_values, alpha=0.05, numerator_hat=None,
                 denominator_hat=1.0) -> "EstimateReport":
        se, lo, hi = wald_interval(psi_hat, eif_values, alpha)
        return cls(
            estimand=as_kind(estimand), psi_hat=float(psi_hat), se=se, ci_lower=lo, ci_upper=hi,
            alpha=alpha, eif_values=np.asarray(eif_values, dtype=float),
            numerator_hat=float(psi_hat if numerator_hat is None else numerator_hat),
            denominator_hat=float(denominator_hat),
        )

    @property
    def n(self) -> int:
        return int(self.eif_values.size)

    def covers(self, value: float) -> bool:
        return self.ci_lower <= value <= self.ci_upper

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand.value,
            "psi_hat": self.psi_hat,
            "se": self.se,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "numerator_hat": self.numerator_hat,
            "denominator_hat": self.denominator_hat,
            "n": self.n,
        }


class LearnerKind(str, enum.Enum):
    INTERCEPT_ONLY = "INTERCEPT_ONLY"
    LOGISTIC_MAIN = "LOGISTIC_MAIN"
    LOGISTIC_L1_INTERACTIONS = "LOGISTIC_L1_INTERACTIONS"
    LINEAR_MAIN = "LINEAR_MAIN"


@dataclass(frozen=True)
class LearnerSpec:
    """Regression learner configuration.

    ``lambda_grid=None`` means the default path: ``n_lambda`` log-spaced values
    from the smallest penalty that zeroes every coefficient down to
    ``lambda_min_ratio`` times that value. ``max_order`` bounds the degree of
    the product terms in the interaction expansion; ``None`` keeps every
    order (a saturated expansion for binary inputs).
    """

    kind: LearnerKind
    lambda_grid: Optional[tuple] = None
    cv_folds_for_lambda: int = 10
    max_order: Optional[int] = 2
    n_lambda: int = 50
    lambda_min_ratio: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "kind", LearnerKind(self.kind))
        if self.lambda_grid is not None:
            grid = tuple(float(v) for v in np.atleast_1d(self.lambda_grid))
            if any(v <= 0 for v in grid) or any(b >= a for a, b in zip(grid, grid[1:])):
                raise ValueError("lambda_grid must be positive and strictly decreasing")
            object.__setattr__(self, "lambda_grid", grid)
        if self.cv_folds_for_lambda < 2:
            raise ValueError("cv_folds_for_lambda must be >= 2")
        if self.max_order is not None and self.max_order < 1:
            raise ValueError("max_order must be >= 1")


INTERCEPT = LearnerSpec(LearnerKind.INTERCEPT_ONLY)
MAIN = LearnerSpec(LearnerKind.LOGISTIC_MAIN)
LINEAR = LearnerSpec(LearnerKind.LINEAR_MAIN)
L1 = LearnerSpec(LearnerKind.LOGISTIC_L1_INTERACTIONS)

SINGLE_NUISANCES = ("g", "q", "r", "e", "mu")
DOUBLE_NUISANCES = ("g", "q", "p", "c", "mu")

# nuisance -> (target column, non-covariate inputs); every nuisance also
# conditions on all covariate columns.
SINGLE_FORMULAS = {
    "g": ("a", ()),
    "q": ("z", ("a",)),
    "r": ("z", ("a", "m")),
    "e": ("a", ("m",)),
    "mu": ("y", ("z", "m")),
}
DOUBLE_FORMULAS = {
    "g": ("a", ()),
    "q": ("z", ("a",)),
    "p": ("l", ("z", "a")),
    "c": ("m", ("l", "z")),
    "mu": ("y", ("l", "z")),
}


def formulas(setting: str) -> dict:
    if setting == "single":
        return SINGLE_FORMULAS
    if setting == "double":
        return DOUBLE_FORMULAS
    raise ValueError(f"unknown setting {setting!r}")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    learners: Mapping[str, LearnerSpec]

    def __post_init__(self):
        object.__setattr__(self, "learners", dict(self.learners))

    @property
    def setting(self) -> str:
        keys = set(self.learners)
        if keys == set(SINGLE_NUISANCES):
            return "single"
        if keys == set(DOUBLE_NUISANCES):
            return "double"
        raise ValidationError(
            f"scenario {self.name!r} assigns {sorted(keys)}; expected "
            f"{sorted(SINGLE_NUISANCES)} or {sorted(DOUBLE_NUISANCES)}", "scenario")

    def check(self, setting: str) -> None:
        if self.setting != setting:
            raise ValidationError(f"scenario {self.name!r} is for the {self.setting} setting, not {setting}", "scenario")

    def __getitem__(self, nuisance: str) -> LearnerSpec:
        return self.learners[nuisance]

    def with_learner(self, nuisance: str, spec: LearnerSpec, name: Optional[str] = None) -> "ScenarioSpec":
        learners = dict(self.learners)
        learners[nuisance] = spec
        return ScenarioSpec(name or self.name, learners)


def scenario_from_kinds(name: str, kinds: Mapping[str, str], base: Optional[LearnerSpec] = None) -> ScenarioSpec:
    base = base or L1
    learners = {}
    for k, v in kinds.items():
        learners[k] = LearnerSpec(LearnerKind(v), max_order=base.max_order, cv_folds_for_lambda=base.cv_folds_for_lambda)
    return ScenarioSpec(name, learners)


def pair_key(pair: Sequence[int]) -> str:
    return f"{int(pair[0])}{int(pair[1])}"

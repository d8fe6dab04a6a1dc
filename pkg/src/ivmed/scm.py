"""Finite-support structural causal models for the two simulation designs.

Every variable is binary.  A model is a list of variables in topological
order, each with a structural probability ``P(V = 1 | parents)``.  Sampling
uses one uniform per variable and unit, ``V = 1{U_V < p_V(parents)}``, which
is the same comonotone rule the counterfactual enumeration relies on.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np
from scipy.special import expit

from .data import Dataset

StructuralFn = Callable[[Mapping[str, np.ndarray]], np.ndarray]

W_NAMES = ("w1", "w2", "w3")


def _y_single(v):
    # The design's logit is 1/(-W1-W2-W3+Z+M-1); a zero denominator is read
    # as +inf, i.e. P(Y=1) = 1 in that cell.
    denom = -v["w1"] - v["w2"] - v["w3"] + v["z"] + v["m"] - 1.0
    with np.errstate(divide="ignore"):
        return expit(1.0 / np.asarray(denom, dtype=float))


def _common() -> Dict[str, Tuple[tuple, StructuralFn]]:
    return {
        "w1": ((), lambda v: np.full(np.shape(v.get("_n", 0.0)), 0.6)),
        "w2": ((), lambda v: np.full(np.shape(v.get("_n", 0.0)), 0.3)),
        "w3": (("w1", "w2"), lambda v: 0.2 + (v["w1"] + v["w2"]) / 3.0),
        "a": ((), lambda v: np.full(np.shape(v.get("_n", 0.0)), 0.5)),
        "z": (("a",) + W_NAMES,
              lambda v: expit(-np.log(1.1) * (v["w1"] + v["w2"] + v["w3"]) / 3.0 + 3.0 * v["a"])),
    }


def _single_equations():
    eq = _common()
    eq["m"] = (("z", "w1", "w2"), lambda v: expit(-np.log(3.0) * (v["w1"] + v["w2"]) + 2.0 * v["z"]))
    eq["y"] = (("m", "z") + W_NAMES, _y_single)
    return eq


def _double_equations():
    eq = _common()
    eq["l"] = (("z",) + W_NAMES,
               lambda v: expit(-np.log(2.0) * (v["w1"] + v["w2"] + v["w3"]) / 3.0 + 3.0 * v["z"] - 1.0))
    eq["m"] = (("l", "z", "w1", "w2"),
               lambda v: expit(-np.log(3.0) * (v["w1"] + v["w2"]) + 3.0 * v["l"] + v["z"] - 1.0))
    eq["y"] = (("m", "z") + W_NAMES,
               lambda v: expit(0.3 - np.log(5.0) * (v["w1"] + v["w2"] + v["w3"]) + v["z"] + v["m"]))
    return eq


SINGLE_ORDER = W_NAMES + ("a", "z", "m", "y")
DOUBLE_ORDER = W_NAMES + ("a", "z", "l", "m", "y")


@dataclass(frozen=True)
class DiscreteSCM:
    """Binary SCM with its exact joint probability table."""

    setting: str
    variables: Tuple[str, ...]
    equations: Mapping[str, Tuple[tuple, StructuralFn]] = field(repr=False)
    configs: np.ndarray = field(repr=False)
    joint: np.ndarray = field(repr=False)
    _marginals: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def k(self) -> int:
        return len(self.variables)

    @property
    def has_l(self) -> bool:
        return "l" in self.variables

    def structural(self, var: str, values: Mapping[str, np.ndarray]) -> np.ndarray:
        """``P(var = 1 | parents)`` evaluated at the given parent values."""
        parents, fn = self.equations[var]
        arrays = {p: np.asarray(values[p], dtype=float) for p in parents}
        shape = np.broadcast_shapes(*[a.shape for a in arrays.values()]) if arrays else np.shape(values.get("_n", 0.0))
        arrays["_n"] = np.zeros(shape)
        return np.broadcast_to(np.asarray(fn(arrays), dtype=float), shape).copy()

    def support(self) -> Dict[str, np.ndarray]:
        """Column view of every configuration, aligned with :attr:`joint`."""
        return {v: self.configs[:, j].astype(float) for j, v in enumerate(self.variables)}

    def _marginal(self, names: Tuple[str, ...]) -> np.ndarray:
        key = tuple(sorted(names, key=self.variables.index))
        if key not in self._marginals:
            table = self.joint.reshape((2,) * self.k)
            drop = tuple(j for j, v in enumerate(self.variables) if v not in key)
            self._marginals[key] = table.sum(axis=drop) if drop else table
        return self._marginals[key]

    def prob(self, event: Mapping[str, object]) -> np.ndarray:
        """Marginal probability ``P(V = v for V in event)``; values broadcast."""
        if not event:
            return np.asarray(1.0)
        key = tuple(sorted(event, key=self.variables.index))
        table = self._marginal(key)
        idx = tuple(np.asarray(event[v]).astype(int) for v in key)
        return table[idx]

    def cond(self, target: Mapping[str, object], given: Mapping[str, object]) -> np.ndarray:
        """``P(target | given)``; both are variable -> value(s) maps.

        Conditioning events of probability zero give 0 rather than NaN.
        """
        both = dict(given)
        both.update(target)
        num, den = self.prob(both), self.prob(given)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)

    def with_joint(self, joint: np.ndarray) -> "DiscreteSCM":
        """Same support with a different (renormalized) joint table.

        The structural equations no longer describe the table; only the
        observational queries are meaningful on the result.
        """
        joint = np.asarray(joint, dtype=float)
        return replace(self, joint=joint / joint.sum(), _marginals={})

    def support_index(self, cols: Mapping[str, np.ndarray]) -> np.ndarray:
        """Row of :attr:`configs` matching each observation."""
        idx = np.zeros(len(cols[self.variables[0]]), dtype=np.int64)
        for v in self.variables:
            idx = idx * 2 + np.asarray(cols[v]).astype(np.int64)
        return idx

    def w_given(self, cols: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        return {w: cols[w] for w in W_NAMES}

    def sample(self, n: int, seed: int) -> Dataset:
        """Draw ``n`` i.i.d. units; deterministic in ``seed``."""
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.Generator(np.random.Philox(seed))
        u = rng.random((n, self.k))
        vals: Dict[str, np.ndarray] = {}
        for j, var in enumerate(self.variables):
            p = self.structural(var, {**vals, "_n": np.zeros(n)})
            vals[var] = (u[:, j] < p).astype(float)
        return Dataset(
            w=np.column_stack([vals[w] for w in W_NAMES]), a=vals["a"], z=vals["z"],
            m=vals["m"], y=vals["y"], l=vals.get("l"), w_names=W_NAMES,
        )


def _build(setting: str, order: Tuple[str, ...], equations) -> DiscreteSCM:
    configs = np.array(list(itertools.product((0, 1), repeat=len(order))), dtype=np.int8)
    cols = {v: configs[:, j].astype(float) for j, v in enumerate(order)}
    cols["_n"] = np.zeros(len(configs))
    joint = np.ones(len(configs))
    for var in order:
        parents, fn = equations[var]
        p1 = np.broadcast_to(np.asarray(fn({**{p: cols[p] for p in parents}, "_n": cols["_n"]}), dtype=float),
                             joint.shape)
        joint = joint * np.where(cols[var] == 1, p1, 1.0 - p1)
    return DiscreteSCM(setting=setting, variables=order, equations=dict(equations), configs=configs, joint=joint)


def build_dgm(setting: str, overrides: Optional[Mapping[str, object]] = None) -> DiscreteSCM:
    """Build the single- or double-instrument simulation design.

    ``overrides`` replaces structural equations, either with a callable of
    the parent-value map or with ``(parents, callable)``; used to build the
    null and degenerate variants.
    """
    if setting == "single":
        eq, order = _single_equations(), SINGLE_ORDER
    elif setting == "double":
        eq, order = _double_equations(), DOUBLE_ORDER
    else:
        raise ValueError(f"setting must be 'single' or 'double', got {setting!r}")
    for var, spec in (overrides or {}).items():
        if var not in eq:
            raise KeyError(var)
        if callable(spec):
            eq[var] = (eq[var][0], spec)
        elif isinstance(spec, (int, float)):
            const = float(spec)
            eq[var] = ((), lambda v, c=const: np.full(np.shape(v.get("_n", 0.0)), c))
        else:
            eq[var] = (tuple(spec[0]), spec[1])
    return _build(setting, order, eq)

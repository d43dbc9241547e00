"""Subject-level data, stored column-wise.

A ``Records`` table holds any mix of cross-sectional and external-target
rows. Integer indicator columns use ``MISSING`` (-1) for absent values and
``subtype`` uses the empty string.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterable, Optional, Sequence

import numpy as np

MISSING = -1
CROSS_SECTIONAL = "cross_sectional"
EXTERNAL_TARGET = "external_target"
_POP_CODES = {CROSS_SECTIONAL: 0, EXTERNAL_TARGET: 1}
_POP_NAMES = {v: k for k, v in _POP_CODES.items()}


@dataclass(frozen=True)
class SubjectRecord:
    covariates: tuple
    hiv_positive: Optional[int] = None
    recent: Optional[int] = None
    recency_tested: Optional[int] = None
    subtype: Optional[str] = None
    in_target: Optional[int] = None
    population: str = CROSS_SECTIONAL


def _opt(v):
    return None if v == MISSING else int(v)


@dataclass(frozen=True)
class Records:
    covariates: np.ndarray  # (n, k) int64
    hiv: np.ndarray  # D
    recent: np.ndarray  # R
    tested: np.ndarray  # Q
    subtype: np.ndarray  # U, str
    in_target: np.ndarray  # S
    population: np.ndarray  # 0 cross-sectional, 1 external target
    covariate_names: tuple = ()

    def __post_init__(self):
        n = self.covariates.shape[0]
        for f in ("hiv", "recent", "tested", "subtype", "in_target", "population"):
            if getattr(self, f).shape != (n,):
                raise ValueError(f"column {f} has shape {getattr(self, f).shape}, expected ({n},)")
        if self.covariates.ndim != 2:
            raise ValueError("covariates must be a 2-d array")
        if len(self.covariate_names) != self.covariates.shape[1]:
            raise ValueError("covariate_names must name every covariate column")

    def __len__(self):
        return self.covariates.shape[0]

    @classmethod
    def build(cls, covariates, hiv=None, recent=None, tested=None, subtype=None, in_target=None,
              population=None, covariate_names: Sequence[str] | None = None) -> "Records":
        cov = np.asarray(covariates, dtype=np.int64)
        if cov.ndim == 1:
            cov = cov[:, None]
        n = cov.shape[0]

        def col(v, default=MISSING):
            if v is None:
                return np.full(n, default, dtype=np.int8)
            return np.asarray(v, dtype=np.int8).reshape(n)

        sub = np.full(n, "", dtype="<U16") if subtype is None else np.asarray(subtype, dtype="<U16").reshape(n)
        pop = np.zeros(n, dtype=np.int8) if population is None else np.asarray(
            [_POP_CODES[p] if isinstance(p, str) else p for p in np.asarray(population).reshape(n)], dtype=np.int8)
        names = tuple(covariate_names) if covariate_names is not None else tuple(f"x{i}" for i in range(cov.shape[1]))
        return cls(cov, col(hiv), col(recent), col(tested), sub, col(in_target), pop, names)

    @classmethod
    def from_records(cls, rows: Iterable[SubjectRecord], covariate_names: Sequence[str] | None = None) -> "Records":
        rows = list(rows)
        if not rows:
            k = len(covariate_names or ())
            return cls.build(np.zeros((0, k), dtype=np.int64), covariate_names=covariate_names)

        def m(v):
            return MISSING if v is None else v

        return cls.build(
            [r.covariates for r in rows],
            hiv=[m(r.hiv_positive) for r in rows],
            recent=[m(r.recent) for r in rows],
            tested=[m(r.recency_tested) for r in rows],
            subtype=[r.subtype or "" for r in rows],
            in_target=[m(r.in_target) for r in rows],
            population=[r.population for r in rows],
            covariate_names=covariate_names,
        )

    def row(self, i: int) -> SubjectRecord:
        return SubjectRecord(
            covariates=tuple(int(c) for c in self.covariates[i]),
            hiv_positive=_opt(self.hiv[i]),
            recent=_opt(self.recent[i]),
            recency_tested=_opt(self.tested[i]),
            subtype=str(self.subtype[i]) or None,
            in_target=_opt(self.in_target[i]),
            population=_POP_NAMES[int(self.population[i])],
        )

    def __iter__(self):
        return (self.row(i) for i in range(len(self)))

    def take(self, idx) -> "Records":
        return Records(self.covariates[idx], self.hiv[idx], self.recent[idx], self.tested[idx],
                       self.subtype[idx], self.in_target[idx], self.population[idx], self.covariate_names)

    def where(self, mask) -> "Records":
        return self.take(np.flatnonzero(mask))

    def replace(self, **cols) -> "Records":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(cols)
        return Records(**kw)

    def concat(self, other: "Records") -> "Records":
        if other.covariate_names != self.covariate_names:
            raise ValueError("cannot concatenate records with different covariates")
        return Records(*(np.concatenate([getattr(self, f), getattr(other, f)])
                         for f in ("covariates", "hiv", "recent", "tested", "subtype", "in_target", "population")),
                       self.covariate_names)

    @property
    def cross_sectional(self) -> "Records":
        return self.where(self.population == 0)

    @property
    def external(self) -> "Records":
        return self.where(self.population == 1)

    def subtypes(self) -> list[str]:
        return sorted(set(self.subtype.tolist()))

    def __eq__(self, other):
        if not isinstance(other, Records):
            return NotImplemented
        return self.covariate_names == other.covariate_names and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("covariates", "hiv", "recent", "tested", "subtype", "in_target", "population"))

    __hash__ = None

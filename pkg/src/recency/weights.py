"""Extension weights for transporting a cross-sectional estimate to a target population.

External target (pooled cross-sectional + target sample)::

    w_ext(x) = P(S=1 | x) / P(S=0, D=0 | x)

Internal target (enrolled subset of the cross-sectional HIV-negatives)::

    w_int(x) = P(S=1 | D=0, x)

Both are fitted per subtype stratum with logistic regression on a one-hot
covariate encoding. Fits run on covariate-pattern counts rather than raw rows,
which gives the same maximizer as the row-level likelihood.
"""

from __future__ import annotations

import itertools
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .errors import (ExtrapolationError, PreconditionError, RankError, SeparationError)
from .numkernel import LogisticModel, logistic_fit, logistic_predict
from .records import MISSING, Records, SubjectRecord

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeatureEncoding:
    """One-hot encoding with the first (smallest) level of each covariate as reference.

    ``order`` is the highest interaction order kept: 1 means main effects only,
    ``len(names)`` gives the saturated model for binary covariates.
    """

    names: tuple
    levels: tuple  # one tuple of integer levels per covariate
    order: int = 1

    @classmethod
    def fit(cls, covariates: np.ndarray, names, order: int = 1) -> "FeatureEncoding":
        levels = tuple(tuple(int(v) for v in np.unique(covariates[:, j])) for j in range(covariates.shape[1]))
        return cls(tuple(names), levels, order)

    def _dummies(self, covariates):
        blocks, labels = [], []
        for j, (name, lv) in enumerate(zip(self.names, self.levels)):
            col = covariates[:, j]
            unknown = ~(col[:, None] == np.asarray(lv)).any(axis=1)
            if unknown.any():
                raise ExtrapolationError(f"covariate {name!r} has unseen level {int(col[unknown][0])}")
            blocks.append([(col == v).astype(float) for v in lv[1:]])
            labels.append([f"{name}={v}" for v in lv[1:]])
        return blocks, labels

    def transform(self, covariates) -> tuple[np.ndarray, tuple]:
        covariates = np.atleast_2d(np.asarray(covariates, dtype=np.int64))
        blocks, labels = self._dummies(covariates)
        cols, names = [], []
        for r in range(1, min(self.order, len(self.names)) + 1):
            for combo in itertools.combinations(range(len(self.names)), r):
                for parts in itertools.product(*(range(len(blocks[j])) for j in combo)):
                    c = np.ones(covariates.shape[0])
                    for j, p in zip(combo, parts):
                        c = c * blocks[j][p]
                    cols.append(c)
                    names.append(":".join(labels[j][p] for j, p in zip(combo, parts)))
        X = np.column_stack(cols) if cols else np.zeros((covariates.shape[0], 0))
        return X, tuple(names)

    def to_dict(self):
        return {"names": list(self.names), "levels": [list(v) for v in self.levels], "order": self.order}


def _pattern_codes(covariates: np.ndarray) -> np.ndarray:
    """Mixed-radix integer code per row; equal rows get equal codes."""
    if covariates.shape[1] == 0:
        return np.zeros(covariates.shape[0], dtype=np.int64)
    lo = covariates.min(axis=0)
    span = covariates.max(axis=0) - lo + 1
    stride = np.cumprod(np.concatenate([[1], span[:-1]]))
    return (covariates - lo) @ stride


def _patterns(covariates: np.ndarray):
    """Distinct covariate rows and the pattern index of every input row."""
    _, first, inverse = np.unique(_pattern_codes(covariates), return_index=True, return_inverse=True)
    return covariates[first], inverse.reshape(-1)


def _fit_component(X, names, ones, totals, what):
    # one weighted row per (pattern, label) cell with a positive count
    zeros = totals - ones
    feats = np.concatenate([X, X])
    ys = np.concatenate([np.ones(len(X)), np.zeros(len(X))])
    ws = np.concatenate([ones, zeros])
    keep = ws > 0
    try:
        return logistic_fit(feats[keep], ys[keep], ws[keep], feature_names=names)
    except (SeparationError, RankError) as exc:
        raise type(exc)(f"{what}: {exc}") from exc


@dataclass(frozen=True)
class StratumFit:
    encoding: FeatureEncoding
    numerator: Optional[LogisticModel] = None
    denominator: Optional[LogisticModel] = None
    constant: Optional[float] = None

    def evaluate(self, covariates: np.ndarray) -> np.ndarray:
        n = covariates.shape[0]
        if self.constant is not None:
            return np.full(n, self.constant)
        if n == 0:
            return np.zeros(0)
        pats, inv = _patterns(covariates)
        X, _ = self.encoding.transform(pats)
        w = np.atleast_1d(logistic_predict(self.numerator, X))
        if self.denominator is not None:
            w = w / np.atleast_1d(logistic_predict(self.denominator, X))
        return np.asarray(w, dtype=float)[inv]


@dataclass(frozen=True)
class WeightModel:
    kind: str  # "external" or "internal"
    per_subtype: Mapping[str, StratumFit] = field(default_factory=dict)
    stratified: bool = True

    def _key(self, subtype: str) -> str:
        return subtype if self.stratified else ""

    def __call__(self, records: Records) -> np.ndarray:
        out = np.empty(len(records))
        if not self.stratified:
            out[:] = self.per_subtype[""].evaluate(records.covariates)
        for sub in (np.unique(records.subtype) if self.stratified else ()):
            if sub not in self.per_subtype:
                raise ExtrapolationError(f"no weight model for subtype {sub!r}")
            mask = records.subtype == sub
            out[mask] = self.per_subtype[sub].evaluate(records.covariates[mask])
        if not np.all(np.isfinite(out)) or np.any(out <= 0):
            raise PreconditionError("evaluated weights must be finite and positive")
        return out

    def to_json(self) -> str:
        def comp(m):
            if m is None:
                return None
            return {"coefficients": m.coefficients.tolist(), "features": list(m.feature_names)}
        return json.dumps({
            "kind": self.kind,
            "stratified": self.stratified,
            "strata": [
                {"subtype": s, "encoding": f.encoding.to_dict(), "constant": f.constant,
                 "numerator": comp(f.numerator), "denominator": comp(f.denominator)}
                for s, f in sorted(self.per_subtype.items())
            ],
        })

    @classmethod
    def from_json(cls, text: str) -> "WeightModel":
        d = json.loads(text)

        def comp(c):
            if c is None:
                return None
            return LogisticModel(np.asarray(c["coefficients"]), tuple(c["features"]))

        strata = {}
        for s in d["strata"]:
            e = s["encoding"]
            enc = FeatureEncoding(tuple(e["names"]), tuple(tuple(v) for v in e["levels"]), e["order"])
            strata[s["subtype"]] = StratumFit(enc, comp(s["numerator"]), comp(s["denominator"]), s["constant"])
        return cls(d["kind"], strata, d.get("stratified", True))


def _strata(records: Records, stratify: bool):
    if not stratify:
        return {"": np.ones(len(records), dtype=bool)}
    return {s: records.subtype == s for s in records.subtypes()}


def fit_weight_external(pooled: Records, order: int = 1, stratify: bool = True) -> WeightModel:
    """Fit ``P(S=1|x)`` and ``P(S=0, D=0|x)`` on the pooled sample, per subtype."""
    if len(pooled) == 0:
        raise PreconditionError("pooled sample is empty")
    is_target = pooled.population == 1
    if not is_target.any():
        raise PreconditionError("pooled sample has no external-target rows")
    if is_target.all():
        raise PreconditionError("pooled sample has no cross-sectional rows")
    cross_neg = (pooled.population == 0) & (pooled.hiv == 0)
    strata = {}
    for sub, mask in _strata(pooled, stratify).items():
        label = sub or "(all)"
        s_target, s_neg = is_target[mask], cross_neg[mask]
        if not s_target.any():
            raise PreconditionError(f"subtype {label}: no external-target rows")
        if not s_neg.any():
            raise PreconditionError(f"subtype {label}: no cross-sectional HIV-negative rows")
        cov = pooled.covariates[mask]
        enc = FeatureEncoding.fit(cov, pooled.covariate_names, order)
        pats, inv = _patterns(cov)
        X, names = enc.transform(pats)
        totals = np.bincount(inv, minlength=len(pats)).astype(float)
        num = _fit_component(X, names, np.bincount(inv, s_target, len(pats)), totals,
                             f"subtype {label}, numerator P(S=1|x)")
        den = _fit_component(X, names, np.bincount(inv, s_neg, len(pats)), totals,
                             f"subtype {label}, denominator P(S=0,D=0|x)")
        strata[sub] = StratumFit(enc, num, den)
    return WeightModel("external", strata, stratify)


def fit_weight_internal(cross: Records, order: int = 1, stratify: bool = True) -> WeightModel:
    """Fit ``P(S=1 | D=0, x)`` on cross-sectional HIV-negatives, per subtype.

    When every HIV-negative in a stratum is enrolled the weight is the constant 1.
    """
    neg = cross.where((cross.population == 0) & (cross.hiv == 0))
    if len(neg) == 0:
        raise PreconditionError("no cross-sectional HIV-negative rows")
    if np.any(neg.in_target == MISSING):
        raise PreconditionError("target membership must be observed on every HIV-negative row")
    strata = {}
    for sub, mask in _strata(neg, stratify).items():
        label = sub or "(all)"
        s = neg.in_target[mask].astype(float)
        cov = neg.covariates[mask]
        enc = FeatureEncoding.fit(cov, neg.covariate_names, order)
        if np.all(s == 1):
            warnings.warn(f"subtype {label}: every HIV-negative is enrolled; using constant weight 1",
                          stacklevel=2)
            strata[sub] = StratumFit(enc, constant=1.0)
            continue
        if not s.any():
            raise PreconditionError(f"subtype {label}: no enrolled HIV-negatives")
        pats, inv = _patterns(cov)
        X, names = enc.transform(pats)
        totals = np.bincount(inv, minlength=len(pats)).astype(float)
        strata[sub] = StratumFit(enc, _fit_component(X, names, np.bincount(inv, s, len(pats)), totals,
                                                     f"subtype {label}, P(S=1|D=0,x)"))
    return WeightModel("internal", strata, stratify)


def evaluate_weight(model: WeightModel, record: SubjectRecord) -> float:
    """Weight of a single record."""
    sub = model._key(record.subtype or "")
    if sub not in model.per_subtype:
        raise ExtrapolationError(f"no weight model for subtype {sub!r}")
    w = float(model.per_subtype[sub].evaluate(np.asarray([record.covariates], dtype=np.int64))[0])
    if not (np.isfinite(w) and w > 0):
        raise PreconditionError("evaluated weight must be finite and positive")
    return w


def constant_weight(value: float = 1.0):
    """Weight function returning ``value`` for every record."""
    def fn(records: Records) -> np.ndarray:
        return np.full(len(records), float(value))
    return fn

"""Cross-sectional incidence estimators and their closed-form probability limits.

All estimators take MDRI/FRR either as floats or as ``CalibrationEstimate``
objects, and durations in years. Weighted estimators consume a weight
function ``records -> array`` so that fitted models and oracle weights are
interchangeable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .assay import CalibrationEstimate
from .errors import DegenerateDesignError, PreconditionError, StratumError
from .records import MISSING, Records
from .weights import fit_weight_external, fit_weight_internal

Value = Union[float, CalibrationEstimate]
WeightFn = Callable[[Records], np.ndarray]


def _v(x: Value) -> float:
    return float(x.point) if isinstance(x, CalibrationEstimate) else float(x)


@dataclass(frozen=True)
class CountSummary:
    n_pos: int
    n_neg: int
    n_rec: int
    n_pos_tested: int | None = None

    def __post_init__(self):
        if self.n_pos_tested is None:
            object.__setattr__(self, "n_pos_tested", self.n_pos)
        if min(self.n_pos, self.n_neg, self.n_rec, self.n_pos_tested) < 0:
            raise ValueError("counts must be nonnegative")
        if not self.n_rec <= self.n_pos_tested <= self.n_pos:
            raise ValueError("counts must satisfy n_rec <= n_pos_tested <= n_pos")

    @property
    def n(self) -> int:
        return self.n_pos + self.n_neg

    @classmethod
    def from_records(cls, records: Records) -> "CountSummary":
        cross = records.where(records.population == 0)
        pos = cross.hiv == 1
        tested = pos & (cross.tested != 0) & (cross.recent != MISSING)
        return cls(int(pos.sum()), int((cross.hiv == 0).sum()),
                   int((pos & (cross.recent == 1)).sum()), int(tested.sum()))


def counts_by_subtype(records: Records) -> dict[str, CountSummary]:
    cross = records.where(records.population == 0)
    return {s: CountSummary.from_records(cross.where(cross.subtype == s)) for s in cross.subtypes()}


@dataclass(frozen=True)
class IncidenceResult:
    estimate: float
    method: str
    ci_lo: float | None = None
    ci_hi: float | None = None
    n_bootstrap: int | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "estimate", float(self.estimate))
        if not math.isfinite(self.estimate):
            raise DegenerateDesignError(f"{self.method}: estimate is not finite")

    @property
    def negative(self) -> bool:
        return self.estimate < 0

    def with_ci(self, lo, hi, n_bootstrap, **diag) -> "IncidenceResult":
        d = dict(self.diagnostics)
        d.update(diag)
        return IncidenceResult(self.estimate, self.method, lo, hi, n_bootstrap, d)


def _assay_scale(mdri: Value, frr: Value, t_star: float, what: str) -> tuple[float, float]:
    omega, beta = _v(mdri), _v(frr)
    scale = omega - beta * t_star
    if scale <= 0:
        raise DegenerateDesignError(f"{what}: MDRI - FRR*T* must be positive (got {scale:.6g})")
    return beta, scale


# ---------------------------------------------------------------------------
# Standard estimator and its count-based variants
# ---------------------------------------------------------------------------


def kassanjee(counts: CountSummary, mdri: Value, frr: Value, t_star: float = 2.0) -> IncidenceResult:
    """(N_rec - N_pos*FRR) / (N_neg * (MDRI - FRR*T*))."""
    if counts.n_neg <= 0:
        raise DegenerateDesignError("standard estimator needs at least one HIV-negative")
    beta, scale = _assay_scale(mdri, frr, t_star, "standard estimator")
    est = (counts.n_rec - counts.n_pos * beta) / (counts.n_neg * scale)
    return IncidenceResult(est, "standard", diagnostics={"n_pos": counts.n_pos, "n_neg": counts.n_neg,
                                                          "n_rec": counts.n_rec})


def standard_incidence(records: Records, mdri: Value, frr: Value, t_star: float = 2.0) -> IncidenceResult:
    """Standard estimator computed from subject records."""
    return kassanjee(CountSummary.from_records(records), mdri, frr, t_star)


def modified_kassanjee(counts: CountSummary, mdri: Value, frr: Value, t_star: float = 2.0) -> IncidenceResult:
    """Standard estimator when only ``n_pos_tested`` of the positives had a recency test."""
    if counts.n_pos_tested <= 0:
        raise PreconditionError("modified estimator needs at least one tested HIV-positive")
    if counts.n_neg <= 0:
        raise DegenerateDesignError("modified estimator needs at least one HIV-negative")
    beta, scale = _assay_scale(mdri, frr, t_star, "modified estimator")
    est = (counts.n_rec - counts.n_pos_tested * beta) / (
        counts.n_pos_tested / counts.n_pos * counts.n_neg * scale)
    return IncidenceResult(est, "modified-standard", diagnostics={
        "n_pos": counts.n_pos, "n_neg": counts.n_neg, "n_rec": counts.n_rec,
        "n_pos_tested": counts.n_pos_tested})


# ---------------------------------------------------------------------------
# Weighted (extended) estimators
# ---------------------------------------------------------------------------


def _cross(records: Records) -> Records:
    cross = records.where(records.population == 0)
    if len(cross) == 0:
        raise PreconditionError("no cross-sectional records")
    if np.any(cross.hiv == MISSING):
        raise PreconditionError("HIV status missing on cross-sectional records")
    return cross


def _weighted_parts(cross: Records, w: np.ndarray, beta: float, scale: float, tested_only: bool):
    d = cross.hiv == 1
    if tested_only:
        d = d & (cross.tested == 1)
    r = np.where(d, cross.recent, 0).astype(float)
    num = np.sum(w * d * (r - beta))
    den = np.sum(w * (cross.hiv == 0)) * scale
    return num, den


def _ess(w):
    s2 = np.sum(w * w)
    return float(np.sum(w) ** 2 / s2) if s2 > 0 else 0.0


def extended_incidence(records: Records, weight_fn: WeightFn, mdri: Value, frr: Value,
                       t_star: float = 2.0, method: str = "extended") -> IncidenceResult:
    """Weighted estimator: weights multiply both numerator and denominator contributions."""
    cross = _cross(records)
    untested = (cross.hiv == 1) & (cross.recent == MISSING)
    if untested.any():
        raise PreconditionError(f"{int(untested.sum())} HIV-positive records lack a recency result; "
                                "use the modified estimators")
    beta, scale = _assay_scale(mdri, frr, t_star, method)
    w = np.asarray(weight_fn(cross), dtype=float)
    if w.shape != (len(cross),) or not np.all(np.isfinite(w)) or np.any(w < 0):
        raise PreconditionError("weights must be finite and nonnegative, one per record")
    if not np.any(w[cross.hiv == 0] > 0):
        raise DegenerateDesignError(f"{method}: all HIV-negative weights are zero")
    num, den = _weighted_parts(cross, w, beta, scale, tested_only=False)
    if den <= 0:
        raise DegenerateDesignError(f"{method}: denominator is not positive")
    return IncidenceResult(num / den, method, diagnostics={"ess_negative": _ess(w[cross.hiv == 0]),
                                                           "n": len(cross)})


def incidence_external_target(cross: Records, target: Records, mdri: Value, frr: Value,
                              t_star: float = 2.0, order: int = 1) -> IncidenceResult:
    """Extended estimator with weights fitted against an external target sample."""
    if len(target) == 0:
        raise PreconditionError("external target sample is empty")
    pooled = cross.replace(population=np.zeros(len(cross), dtype=np.int8)).concat(
        target.replace(population=np.ones(len(target), dtype=np.int8)))
    model = fit_weight_external(pooled, order=order, stratify=False)
    return extended_incidence(cross, model, mdri, frr, t_star, method="extended-external")


def incidence_internal_target(cross: Records, mdri: Value, frr: Value, t_star: float = 2.0,
                              order: int = 1) -> IncidenceResult:
    """Extended estimator with enrollment-probability weights fitted on the HIV-negatives."""
    model = fit_weight_internal(_cross(cross), order=order, stratify=False)
    return extended_incidence(cross, model, mdri, frr, t_star, method="extended-internal")


def modified_extended(records: Records, weight_fn: WeightFn, mdri: Value, frr: Value,
                      t_star: float = 2.0, method: str = "modified-extended") -> IncidenceResult:
    """Weighted estimator when some HIV-positives were not recency tested (tested indicator Q)."""
    cross = _cross(records)
    pos = cross.hiv == 1
    if np.any(pos & (cross.tested == MISSING)):
        raise PreconditionError("recency-tested indicator must be observed for every HIV-positive")
    if np.any(pos & (cross.tested == 1) & (cross.recent == MISSING)):
        raise PreconditionError("tested HIV-positives must carry a recency result")
    n_pos = int(pos.sum())
    n_test = int((pos & (cross.tested == 1)).sum())
    if n_test == 0:
        raise PreconditionError("no HIV-positive record was recency tested")
    beta, scale = _assay_scale(mdri, frr, t_star, method)
    w = np.asarray(weight_fn(cross), dtype=float)
    num, den = _weighted_parts(cross, w, beta, scale, tested_only=True)
    den *= n_test / n_pos
    if den <= 0:
        raise DegenerateDesignError(f"{method}: denominator is not positive")
    return IncidenceResult(num / den, method, diagnostics={"n_pos": n_pos, "n_pos_tested": n_test,
                                                           "ess_negative": _ess(w[cross.hiv == 0])})


def modified_internal(records: Records, mdri: Value, frr: Value, t_star: float = 2.0,
                      order: int = 1, weight_fn: WeightFn | None = None) -> IncidenceResult:
    """Internal-target extended estimator allowing untested HIV-positives."""
    cross = _cross(records)
    if weight_fn is None:
        weight_fn = fit_weight_internal(cross, order=order, stratify=False)
    return modified_extended(cross, weight_fn, mdri, frr, t_star, method="modified-internal")


# ---------------------------------------------------------------------------
# Mixed subtypes
# ---------------------------------------------------------------------------

AssayValues = Mapping[str, Sequence[Value]]  # subtype -> (mdri, frr)


def _check_assays(subtypes, assays):
    missing = [s for s in subtypes if s not in assays]
    if missing:
        raise StratumError(f"no MDRI/FRR supplied for subtype(s) {missing}")


def subtype_old(counts: Mapping[str, CountSummary], assays: AssayValues, t_star: float = 2.0) -> IncidenceResult:
    """Standard estimator with sample-proportion-weighted MDRI and FRR (inconsistent comparator)."""
    _check_assays(counts, assays)
    n = sum(c.n for c in counts.values())
    if n == 0:
        raise DegenerateDesignError("no cross-sectional records")
    pi = {s: c.n / n for s, c in counts.items()}
    omega = sum(pi[s] * _v(assays[s][0]) for s in counts)
    beta = sum(pi[s] * _v(assays[s][1]) for s in counts)
    pooled = CountSummary(sum(c.n_pos for c in counts.values()), sum(c.n_neg for c in counts.values()),
                          sum(c.n_rec for c in counts.values()))
    res = kassanjee(pooled, omega, beta, t_star)
    return IncidenceResult(res.estimate, "subtype-old", diagnostics={"pi": pi, "mdri_bar": omega, "frr_bar": beta})


def subtype_stratified(counts: Mapping[str, CountSummary], assays: AssayValues,
                       t_star: float = 2.0) -> IncidenceResult:
    """Per-subtype standard estimates combined with sample proportions."""
    _check_assays(counts, assays)
    n = sum(c.n for c in counts.values())
    if n == 0:
        raise DegenerateDesignError("no cross-sectional records")
    pi, comp = {}, {}
    for s, c in counts.items():
        if c.n_neg == 0:
            raise StratumError(f"subtype {s!r} has no HIV-negative records")
        pi[s] = c.n / n
        comp[s] = kassanjee(c, assays[s][0], assays[s][1], t_star).estimate
    est = sum(pi[s] * comp[s] for s in counts)
    return IncidenceResult(est, "subtype-stratified", diagnostics={"pi": pi, "components": comp})


def subtype_weighted(records: Records, weight_fn: WeightFn, assays: AssayValues,
                     target_props: Mapping[str, float], t_star: float = 2.0,
                     method: str = "subtype-weighted") -> IncidenceResult:
    """Sum over subtypes of target proportion times the subtype's weighted estimate."""
    cross = _cross(records)
    _check_assays(target_props, assays)
    w_all = np.asarray(weight_fn(cross), dtype=float)
    comp = {}
    for s, pj in target_props.items():
        mask = cross.subtype == s
        if not np.any(mask & (cross.hiv == 0)):
            raise StratumError(f"subtype {s!r} has no cross-sectional HIV-negative records")
        w = w_all[mask]
        comp[s] = extended_incidence(cross.where(mask), lambda _r, w=w: w, assays[s][0], assays[s][1],
                                     t_star, method=f"{method}[{s}]").estimate
    est = sum(target_props[s] * comp[s] for s in target_props)
    return IncidenceResult(est, method, diagnostics={"pi_star": dict(target_props), "components": comp})


def _proportions(subtypes: np.ndarray) -> dict[str, float]:
    if len(subtypes) == 0:
        raise PreconditionError("target sample is empty")
    vals, cnt = np.unique(subtypes, return_counts=True)
    return {str(v): c / len(subtypes) for v, c in zip(vals, cnt)}


def subtype_external(cross: Records, target: Records, assays: AssayValues, t_star: float = 2.0,
                     order: int = 1) -> IncidenceResult:
    """External-target estimator with subtype-specific weights and target subtype proportions."""
    if len(target) == 0:
        raise PreconditionError("external target sample is empty")
    pooled = cross.replace(population=np.zeros(len(cross), dtype=np.int8)).concat(
        target.replace(population=np.ones(len(target), dtype=np.int8)))
    model = fit_weight_external(pooled, order=order, stratify=True)
    return subtype_weighted(cross, model, assays, _proportions(target.subtype), t_star, "subtype-external")


def subtype_internal(cross: Records, assays: AssayValues, t_star: float = 2.0,
                     order: int = 1) -> IncidenceResult:
    """Internal-target estimator with subtype-specific weights; proportions from enrolled negatives."""
    cross = _cross(cross)
    model = fit_weight_internal(cross, order=order, stratify=True)
    enrolled = (cross.hiv == 0) & (cross.in_target == 1)
    return subtype_weighted(cross, model, assays, _proportions(cross.subtype[enrolled]), t_star,
                            "subtype-internal")


# ---------------------------------------------------------------------------
# Efficacy
# ---------------------------------------------------------------------------


def prevention_efficacy(trial_infections: int, trial_person_years: float,
                        counterfactual: IncidenceResult | float) -> float:
    """1 - (trial incidence / counterfactual placebo incidence)."""
    if trial_person_years <= 0:
        raise PreconditionError("trial person-years must be positive")
    lam = counterfactual.estimate if isinstance(counterfactual, IncidenceResult) else float(counterfactual)
    if lam <= 0:
        raise DegenerateDesignError("counterfactual incidence must be positive")
    return 1.0 - (trial_infections / trial_person_years) / lam


# ---------------------------------------------------------------------------
# Probability limits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PlimParams:
    proportions: tuple
    prevalences: tuple
    incidences: tuple
    mdris: tuple
    frrs: tuple
    t_star: float = 2.0

    def __post_init__(self):
        k = len(self.proportions)
        if not all(len(v) == k for v in (self.prevalences, self.incidences, self.mdris, self.frrs)):
            raise ValueError("all per-subtype vectors must have the same length")
        if abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ValueError("subtype proportions must sum to 1")
        if any(not 0 <= v <= 1 for v in (*self.proportions, *self.prevalences, *self.frrs)):
            raise ValueError("proportions, prevalences and FRRs must be probabilities")
        if any(v < 0 for v in self.incidences):
            raise ValueError("incidences must be nonnegative")


def plim_subtype_old(params: PlimParams) -> float:
    """Large-sample limit of the proportion-weighted-MDRI/FRR estimator."""
    pi, p, lam = np.asarray(params.proportions), np.asarray(params.prevalences), np.asarray(params.incidences)
    om, be, T = np.asarray(params.mdris), np.asarray(params.frrs), params.t_star
    num = np.sum((om - be * T) * (1 - p) * pi * lam + p * pi * be) - np.sum(p * pi) * np.sum(pi * be)
    den = (1 - np.sum(p * pi)) * np.sum(pi * (om - be * T))
    if den == 0:
        raise DegenerateDesignError("probability-limit denominator is zero")
    return float(num / den)


def plim_true_mean(params: PlimParams) -> float:
    """Average incidence sum_j pi_j * lambda_j."""
    return float(np.dot(params.proportions, params.incidences))


def plim_standard(incidence, prevalence, proportion) -> float:
    """Limit of the standard estimator under covariate heterogeneity: mean incidence of the HIV-negatives."""
    lam, p, g = (np.asarray(v, dtype=float) for v in (incidence, prevalence, proportion))
    return float(np.sum(lam * (1 - p) * g) / np.sum((1 - p) * g))


def plim_extended(weights, incidence, prevalence, proportion) -> float:
    """Limit of the weighted estimator for cell weights ``weights``."""
    w, lam, p, g = (np.asarray(v, dtype=float) for v in (weights, incidence, prevalence, proportion))
    return float(np.sum(w * lam * (1 - p) * g) / np.sum(w * (1 - p) * g))

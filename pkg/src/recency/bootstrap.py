"""Bootstrap confidence intervals on the log scale.

An estimator for bootstrapping is any callable ``estimator(sample) -> dict``
mapping quantity names to floats. ``sample`` is a :class:`Sample` carrying
the (resampled) records and calibration values, so the same callable serves
the point estimate and both bootstrap schemes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .assay import (CalibrationEstimate, CalibrationPanel, Z95, estimate_frr, estimate_mdri,
                    mdri_curve_coefficients)
from .errors import DomainError, PreconditionError, RecencyError
from .numkernel import RngStream
from .records import Records

NONPARAMETRIC = "nonparametric"
PARAMETRIC = "parametric"
NORMAL_APPROX = "lognormal_normal_approx"
PERCENTILE = "log_percentile"
FAIL_LIMIT = 0.10


@dataclass(frozen=True)
class BootstrapPlan:
    scheme: str = NONPARAMETRIC
    rounds: int = 500
    resample_cross: bool = True
    resample_target: bool = True
    resample_panels: bool = True
    interval: str = NORMAL_APPROX

    def __post_init__(self):
        if self.scheme not in (NONPARAMETRIC, PARAMETRIC):
            raise ValueError(f"unknown bootstrap scheme {self.scheme!r}")
        if self.interval not in (NORMAL_APPROX, PERCENTILE):
            raise ValueError(f"unknown interval method {self.interval!r}")
        if self.rounds < 2:
            raise ValueError("bootstrap needs at least 2 rounds")


@dataclass(frozen=True)
class Sample:
    """Everything an estimator sees in one bootstrap round."""

    cross: Records
    mdri: Mapping[str, float]
    frr: Mapping[str, float]
    target: Optional[Records] = None
    extras: Mapping[str, np.ndarray] = field(default_factory=dict)  # aligned with ``cross`` rows


@dataclass(frozen=True)
class DataSources:
    cross: Records
    panels: Mapping[str, CalibrationPanel] = field(default_factory=dict)
    target: Optional[Records] = None
    extras: Mapping[str, np.ndarray] = field(default_factory=dict)
    t_star: float = 2.0


@dataclass(frozen=True)
class CIResult:
    ci_lo: float
    ci_hi: float
    replicates: np.ndarray  # usable (positive) replicates, round order
    se: float  # sd of the usable replicates
    n_failed: int
    n_nonpositive: int

    @property
    def unreliable(self) -> bool:
        total = len(self.replicates) + self.n_failed + self.n_nonpositive
        return total == 0 or (self.n_failed + self.n_nonpositive) / total > FAIL_LIMIT


def lognormal_from_ci(point: float, ci_lo: float, ci_hi: float) -> tuple[float, float]:
    """(mu, sigma) of a log-normal with median ``point`` and 95% CI width matching ``(ci_lo, ci_hi)``."""
    if not (ci_lo > 0 and point > 0 and ci_hi > 0):
        raise DomainError("log-normal fit needs positive point and CI bounds")
    if not ci_lo <= point <= ci_hi:
        raise DomainError("point must lie inside the CI")
    return math.log(point), math.log(ci_hi / ci_lo) / (2 * Z95)


def log_interval(replicates, method: str = NORMAL_APPROX) -> tuple[float, float]:
    r = np.asarray(replicates, dtype=float)
    if r.size < 2:
        raise PreconditionError("fewer than 2 usable bootstrap replicates")
    if np.any(r <= 0):
        raise DomainError("log interval needs positive replicates")
    if np.all(r == r[0]):
        # the mean of equal logs can round off the common value, leaving a spurious width
        return float(r[0]), float(r[0])
    lr = np.log(r)
    if method == NORMAL_APPROX:
        m, s = lr.mean(), lr.std(ddof=1)
        return float(math.exp(m - Z95 * s)), float(math.exp(m + Z95 * s))
    if method == PERCENTILE:
        # empirical (inverted-CDF) quantiles commute with exp, so this equals the plain percentile interval
        lo, hi = np.percentile(lr, [2.5, 97.5], method="inverted_cdf")
        return float(math.exp(lo)), float(math.exp(hi))
    raise ValueError(f"unknown interval method {method!r}")


def _summarize(rounds: list, names, plan: BootstrapPlan) -> dict[str, CIResult]:
    out = {}
    for name in names:
        vals = [r.get(name) if r is not None else None for r in rounds]
        failed = sum(v is None or not math.isfinite(v) for v in vals)
        good = np.asarray([v for v in vals if v is not None and math.isfinite(v)], dtype=float)
        pos = good[good > 0]
        try:
            lo, hi = log_interval(pos, plan.interval)
        except PreconditionError:
            lo = hi = math.nan
        se = float(np.std(good, ddof=1)) if good.size > 1 else math.nan
        out[name] = CIResult(lo, hi, pos, se, failed, int(good.size - pos.size))
    return out


def _resample(records: Optional[Records], rng, on: bool):
    if records is None or not on:
        return records, None
    idx = rng.integers(0, len(records), len(records))
    return records.take(idx), idx


def _run(estimator, rounds_fn, plan: BootstrapPlan, rng: RngStream, names):
    results = []
    for b in range(plan.rounds):
        g = rng.substream(b).generator
        try:
            results.append(estimator(rounds_fn(g)))
        except (RecencyError, ArithmeticError, ValueError):
            results.append(None)
    if names is None:
        names = next((tuple(r) for r in results if r is not None), ())
    return _summarize(results, names, plan)


def _calibrate(panels: Mapping[str, CalibrationPanel], t_star: float, starts=None):
    starts = starts or {}
    mdri = {s: estimate_mdri(p, t_star, n_boot=0, start=starts.get(s)).point for s, p in panels.items()}
    frr = {s: estimate_frr(p).point for s, p in panels.items()}
    return mdri, frr


def nonparametric_ci(sources: DataSources, estimator: Callable[[Sample], dict], plan: BootstrapPlan,
                     rng: RngStream, names=None) -> dict[str, CIResult]:
    """Resample records and calibration panels each round, recalibrate, re-estimate."""

    starts = {}
    for s, p in sources.panels.items():
        try:
            starts[s] = mdri_curve_coefficients(p, sources.t_star)
        except RecencyError:
            starts[s] = None

    def one(g):
        cross, idx = _resample(sources.cross, g, plan.resample_cross)
        target, _ = _resample(sources.target, g, plan.resample_target)
        extras = {k: (v[idx] if idx is not None else v) for k, v in sources.extras.items()}
        panels = {s: (p.resample(g) if plan.resample_panels else p) for s, p in sorted(sources.panels.items())}
        mdri, frr = _calibrate(panels, sources.t_star, starts)
        return Sample(cross, mdri, frr, target, extras)

    return _run(estimator, one, plan, rng, names)


def _draw(est: CalibrationEstimate, g) -> float:
    if est.point == 0 or est.ci_lo == est.ci_hi:
        return float(est.point)
    lo = est.ci_lo if est.ci_lo > 0 else None
    if lo is None:
        # CI touching 0: use the upper half-width on the log scale
        sigma = math.log(est.ci_hi / est.point) / Z95
        return float(math.exp(math.log(est.point) + sigma * g.standard_normal()))
    mu, sigma = lognormal_from_ci(est.point, lo, est.ci_hi)
    return float(math.exp(mu + sigma * g.standard_normal()))


def parametric_ci(sources: DataSources, mdri: Mapping[str, CalibrationEstimate],
                  frr: Mapping[str, CalibrationEstimate], estimator: Callable[[Sample], dict],
                  plan: BootstrapPlan, rng: RngStream, names=None) -> dict[str, CIResult]:
    """Resample records; draw MDRI and FRR per subtype from log-normals fitted to their CIs.

    An FRR (or MDRI) with point 0 or a zero-width CI is held fixed.
    """

    def one(g):
        cross, idx = _resample(sources.cross, g, plan.resample_cross)
        target, _ = _resample(sources.target, g, plan.resample_target)
        extras = {k: (v[idx] if idx is not None else v) for k, v in sources.extras.items()}
        m = {s: _draw(mdri[s], g) for s in sorted(mdri)}
        f = {s: _draw(frr[s], g) for s in sorted(frr)}
        return Sample(cross, m, f, target, extras)

    return _run(estimator, one, plan, rng, names)

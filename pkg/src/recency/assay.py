"""Recency-assay models: test-recent probability curves, MDRI/FRR, and their calibration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import DomainError, PreconditionError, SeparationError, RankError
from .numkernel import GammaParams, RngStream, expit, gamma_cdf, integrate, logistic_fit

DAYS_PER_YEAR = 365.25
Z95 = 1.959963984540054


@dataclass(frozen=True)
class GammaSurvival:
    params: GammaParams


@dataclass(frozen=True)
class GammaSurvivalWithPlateau:
    """Gamma survival up to ``cut`` years, constant ``plateau`` after."""

    params: GammaParams
    plateau: float
    cut: float

    def __post_init__(self):
        if not 0.0 <= self.plateau <= 1.0:
            raise DomainError("plateau must be a probability")
        if self.cut <= 0:
            raise DomainError("cut must be positive")


@dataclass(frozen=True)
class Tabulated:
    """Piecewise-linear curve through (duration, probability) nodes; flat past the last node."""

    durations: tuple
    probabilities: tuple

    def __post_init__(self):
        d = np.asarray(self.durations, dtype=float)
        p = np.asarray(self.probabilities, dtype=float)
        if d.ndim != 1 or d.shape != p.shape or d.size == 0:
            raise DomainError("tabulated curve needs matching, non-empty node vectors")
        if np.any(np.diff(d) <= 0) or d[0] < 0:
            raise DomainError("tabulated durations must be nonnegative and strictly increasing")
        if np.any((p < 0) | (p > 1)):
            raise DomainError("tabulated probabilities must lie in [0, 1]")


PhiSpec = Union[GammaSurvival, GammaSurvivalWithPlateau, Tabulated]


@dataclass(frozen=True)
class RecencyAssay:
    subtype_label: str
    phi_spec: PhiSpec
    t_star: float = 2.0

    def __post_init__(self):
        if not self.t_star > 0:
            raise DomainError("t_star must be positive")


SUBTYPE_B = RecencyAssay("B", GammaSurvival(GammaParams(11.40, 23.66)), 2.0)
SUBTYPE_A = RecencyAssay("A", GammaSurvivalWithPlateau(GammaParams(0.84, 1.66), plateau=0.026, cut=2.0), 2.0)


def phi(assay: RecencyAssay, u):
    """Probability of testing recent at infection duration ``u`` years."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0) or np.any(np.isnan(u_arr)):
        raise DomainError("infection duration must be nonnegative")
    spec = assay.phi_spec
    if isinstance(spec, GammaSurvival):
        out = 1.0 - gamma_cdf(u_arr, spec.params)
    elif isinstance(spec, GammaSurvivalWithPlateau):
        surv = 1.0 - gamma_cdf(np.minimum(u_arr, spec.cut), spec.params)
        out = np.where(u_arr <= spec.cut, surv, spec.plateau)
    elif isinstance(spec, Tabulated):
        out = np.interp(u_arr, spec.durations, spec.probabilities)
    else:
        raise TypeError(f"unknown phi spec {spec!r}")
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


def _breakpoints(assay):
    spec = assay.phi_spec
    if isinstance(spec, GammaSurvivalWithPlateau):
        return (spec.cut,)
    if isinstance(spec, Tabulated):
        return tuple(spec.durations)
    return ()


def mdri(assay: RecencyAssay) -> float:
    """Mean duration of recent infection in years: the integral of phi over [0, T*]."""
    return integrate(lambda u: phi(assay, u), 0.0, assay.t_star, points=_breakpoints(assay))


def frr(assay: RecencyAssay) -> float:
    """False-recent rate: the plateau if the curve has one, else phi(T*)."""
    spec = assay.phi_spec
    if isinstance(spec, GammaSurvivalWithPlateau):
        return spec.plateau
    return phi(assay, assay.t_star)


# ---------------------------------------------------------------------------
# Calibration from simulated or observed panels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibrationEstimate:
    quantity: str  # "MDRI" (years) or "FRR" (probability)
    point: float
    se: float
    ci_lo: float
    ci_hi: float

    def __post_init__(self):
        if self.quantity not in ("MDRI", "FRR"):
            raise ValueError(f"unknown calibration quantity {self.quantity!r}")
        if not (self.ci_lo <= self.point <= self.ci_hi):
            raise ValueError("calibration CI must contain the point estimate")
        if self.point < 0 or self.se < 0:
            raise ValueError("calibration point and se must be nonnegative")
        if self.quantity == "FRR" and self.point > 1:
            raise ValueError("FRR must be a probability")

    @classmethod
    def exact(cls, quantity: str, value: float) -> "CalibrationEstimate":
        """A known value with no uncertainty."""
        return cls(quantity, value, 0.0, value, value)


@dataclass(frozen=True)
class CalibrationPanel:
    """Longitudinal recency results with known durations plus long-infected results.

    ``long_infected`` rows carry no duration: those subjects are only known to
    have been infected longer than T*.
    """

    subject_id: np.ndarray
    duration: np.ndarray
    recent: np.ndarray
    long_subject_id: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    long_recent: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))

    def __post_init__(self):
        if not (len(self.subject_id) == len(self.duration) == len(self.recent)):
            raise ValueError("longitudinal columns must have equal length")
        if len(self.long_subject_id) != len(self.long_recent):
            raise ValueError("long-infected columns must have equal length")
        if np.any(np.asarray(self.duration) < 0):
            raise DomainError("longitudinal durations must be nonnegative")

    @property
    def n_subjects(self) -> int:
        return len(np.unique(self.subject_id))

    def resample(self, rng: np.random.Generator) -> "CalibrationPanel":
        """Subject-level resample of the longitudinal part, row-level of the long-infected part."""
        subjects, inverse = np.unique(self.subject_id, return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse, minlength=len(subjects))
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pick = rng.integers(0, len(subjects), len(subjects))
        idx = np.concatenate([order[starts[s]:starts[s] + counts[s]] for s in pick]) if len(pick) else np.zeros(0, int)
        new_ids = np.repeat(np.arange(len(pick)), counts[pick])
        lpick = rng.integers(0, len(self.long_recent), len(self.long_recent))
        return CalibrationPanel(new_ids, self.duration[idx], self.recent[idx],
                                np.arange(len(lpick)), self.long_recent[lpick])


def _cubic_features(u, t_star):
    s = np.asarray(u, dtype=float) / t_star
    return np.column_stack([s, s * s, s * s * s])


def _mdri_point(panel: CalibrationPanel, t_star: float, window: float, start=None):
    keep = panel.duration <= t_star + window
    u = panel.duration[keep]
    r = panel.recent[keep].astype(float)
    if u.size < 2:
        raise PreconditionError("calibration panel has fewer than 2 usable longitudinal rows")
    if np.all(r == 1):
        return t_star, None
    if np.all(r == 0):
        return 0.0, None
    model = logistic_fit(_cubic_features(u, t_star), r, feature_names=("s", "s2", "s3"), start=start)
    b = model.coefficients
    return integrate(lambda x: expit(b[0] + _cubic_features(x, t_star) @ b[1:]), 0.0, t_star), b


def estimate_mdri(panel: CalibrationPanel, t_star: float = 2.0, n_boot: int = 200,
                  rng: np.random.Generator | None = None, window: float = 0.5,
                  start=None) -> CalibrationEstimate:
    """MDRI from a longitudinal panel.

    Test-recent probability is modelled by binomial regression on a cubic in
    duration over ``[0, t_star + window]``; the point estimate integrates the
    fitted curve over ``[0, t_star]``. The standard error comes from
    ``n_boot`` subject-level bootstrap resamples and the CI is
    ``point +/- 1.96 se`` (floored at 0). ``n_boot=0`` skips the bootstrap.
    ``start`` warm-starts the regression (coefficients of a previous fit).
    """
    if panel.n_subjects < 2:
        raise PreconditionError("MDRI estimation needs at least 2 subjects")
    try:
        point, coef = _mdri_point(panel, t_star, window, start)
    except (SeparationError, RankError) as exc:
        raise type(exc)(f"MDRI fit on calibration panel failed: {exc}") from exc
    if n_boot <= 0:
        return CalibrationEstimate("MDRI", point, 0.0, point, point)
    if rng is None:
        rng = RngStream(0).generator
    reps = []
    for _ in range(n_boot):
        try:
            reps.append(_mdri_point(panel.resample(rng), t_star, window, coef)[0])
        except (SeparationError, RankError, PreconditionError):
            continue
    se = float(np.std(reps, ddof=1)) if len(reps) > 1 else 0.0
    return CalibrationEstimate("MDRI", point, se, max(point - Z95 * se, 0.0), point + Z95 * se)


def mdri_curve_coefficients(panel: CalibrationPanel, t_star: float = 2.0, window: float = 0.5):
    """Coefficients of the cubic logistic MDRI fit (None for single-class panels)."""
    return _mdri_point(panel, t_star, window)[1]


def wilson_interval(k: int, n: int, z: float = Z95) -> tuple[float, float]:
    p = k / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(centre - half, 0.0), min(centre + half, 1.0)


def estimate_frr(panel: CalibrationPanel) -> CalibrationEstimate:
    """FRR as the recent proportion among long-infected subjects, with a Wilson interval."""
    n = len(panel.long_recent)
    if n == 0:
        raise PreconditionError("FRR estimation needs at least one long-infected row")
    k = int(np.sum(panel.long_recent))
    p = k / n
    lo, hi = wilson_interval(k, n)
    return CalibrationEstimate("FRR", p, math.sqrt(p * (1 - p) / n), min(lo, p), max(hi, p))

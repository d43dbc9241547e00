"""Monte Carlo generators for cross-sectional surveys, target populations, trials and calibration panels."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .assay import (CalibrationEstimate, CalibrationPanel, RecencyAssay, SUBTYPE_A, SUBTYPE_B,
                    estimate_frr, estimate_mdri, phi)
from .errors import FeasibilityError, PreconditionError, SchemaError
from .numkernel import RngStream
from .records import MISSING, Records

_VALUE_COLS = ("incidence", "prevalence", "prop_cross", "prop_target", "enroll_setting1", "enroll_setting2")
_NORMALIZE_TOL = 5e-3


@dataclass(frozen=True)
class PopulationTable:
    """One row per covariate cell (and subtype, when present)."""

    covariates: np.ndarray  # (C, k) int64
    covariate_names: tuple
    subtype: np.ndarray  # (C,) str; "" when the table has no subtype column
    incidence: np.ndarray
    prevalence: np.ndarray
    prop_cross: np.ndarray
    prop_target: np.ndarray
    enroll: Mapping[int, np.ndarray] = field(default_factory=dict)
    sum_tol: float = 1e-6  # allowed deviation of sum(g) and sum(h) from 1

    def __post_init__(self):
        c = len(self.incidence)
        for name in ("prevalence", "prop_cross", "prop_target"):
            if getattr(self, name).shape != (c,):
                raise SchemaError(f"column {name} has the wrong length")
        for name in ("prevalence", "prop_cross", "prop_target"):
            v = getattr(self, name)
            bad = np.flatnonzero((v < 0) | (v > 1))
            if bad.size:
                raise SchemaError(f"row {bad[0] + 1}: {name} must be a probability")
        for s, e in self.enroll.items():
            bad = np.flatnonzero((e < 0) | (e > 1))
            if bad.size:
                raise SchemaError(f"row {bad[0] + 1}: enroll_setting{s} must be a probability")
        bad = np.flatnonzero(self.incidence < 0)
        if bad.size:
            raise SchemaError(f"row {bad[0] + 1}: incidence must be nonnegative")
        for name in ("prop_cross", "prop_target"):
            if abs(getattr(self, name).sum() - 1.0) > self.sum_tol:
                raise SchemaError(f"{name} must sum to 1")

    def __len__(self):
        return len(self.incidence)

    @property
    def has_subtype(self) -> bool:
        return bool(np.any(self.subtype != ""))

    @property
    def subtypes(self) -> list[str]:
        return sorted(set(self.subtype.tolist()))

    def recent_mass(self, t_star: float = 2.0) -> np.ndarray:
        """lambda (1 - p) T* / p: probability that an infected subject is within T* of infection."""
        p = self.prevalence
        with np.errstate(divide="ignore", invalid="ignore"):
            m = np.where(p > 0, self.incidence * (1 - p) * t_star / np.where(p > 0, p, 1.0), 0.0)
        return m

    def check_feasible(self, t_star: float = 2.0) -> None:
        m = self.recent_mass(t_star)
        bad = np.flatnonzero(m > 1)
        if bad.size:
            i = bad[0]
            raise FeasibilityError(f"row {i + 1}: recent mass {m[i]:.4f} exceeds 1 "
                                   f"(incidence {self.incidence[i]}, prevalence {self.prevalence[i]})")

    def cell_index(self, records: Records) -> np.ndarray:
        """Row index of each record's (covariates, subtype) cell; raises if a cell is unknown."""
        key = {(tuple(c), s if self.has_subtype else ""): i
               for i, (c, s) in enumerate(zip(self.covariates.tolist(), self.subtype.tolist()))}
        subs = records.subtype if self.has_subtype else np.full(len(records), "")
        out = np.empty(len(records), dtype=np.int64)
        for j, (c, s) in enumerate(zip(records.covariates.tolist(), subs.tolist())):
            try:
                out[j] = key[(tuple(c), s)]
            except KeyError:
                raise PreconditionError(f"record {j}: no table row for covariates {c} subtype {s!r}") from None
        return out

    def true_target_incidence(self) -> float:
        """Target-population mean incidence sum_c h_c lambda_c."""
        return float(np.dot(self.prop_target, self.incidence))

    def true_cross_incidence(self) -> float:
        """Mean incidence over the cross-sectional population, sum_c g_c lambda_c."""
        return float(np.dot(self.prop_cross, self.incidence))

    def true_internal_incidence(self, probs: np.ndarray) -> float:
        """Mean incidence among enrolled HIV-negatives in the population limit."""
        w = probs * (1 - self.prevalence) * self.prop_cross
        return float(np.dot(w, self.incidence) / w.sum())


def _parse_table(rows: list[dict], source: str, normalize: bool) -> PopulationTable:
    if not rows:
        raise SchemaError(f"{source}: table is empty")
    header = list(rows[0].keys())
    missing = [c for c in _VALUE_COLS if c not in header]
    if missing:
        raise SchemaError(f"{source}: missing column(s) {missing}")
    has_sub = "subtype" in header
    cov_names = tuple(c for c in header if c not in _VALUE_COLS and c != "subtype")
    cov, vals, subs = [], {c: [] for c in _VALUE_COLS}, []
    for i, row in enumerate(rows, start=2):
        try:
            cov.append([int(row[c]) for c in cov_names])
        except (TypeError, ValueError):
            bad = next(c for c in cov_names if not str(row[c]).strip().lstrip("-").isdigit())
            raise SchemaError(f"{source}: row {i}, column {bad!r}: covariate must be an integer") from None
        for c in _VALUE_COLS:
            try:
                vals[c].append(float(row[c]))
            except (TypeError, ValueError):
                raise SchemaError(f"{source}: row {i}, column {c!r}: not a number") from None
        subs.append(row["subtype"].strip() if has_sub else "")
    arr = {c: np.asarray(v, dtype=float) for c, v in vals.items()}
    for c in ("prop_cross", "prop_target"):
        total = arr[c].sum()
        if normalize and abs(total - 1.0) <= _NORMALIZE_TOL and total > 0:
            arr[c] = arr[c] / total
    return PopulationTable(
        covariates=np.asarray(cov, dtype=np.int64).reshape(len(rows), len(cov_names)),
        covariate_names=cov_names,
        subtype=np.asarray(subs, dtype="<U16"),
        incidence=arr["incidence"], prevalence=arr["prevalence"],
        prop_cross=arr["prop_cross"], prop_target=arr["prop_target"],
        enroll={1: arr["enroll_setting1"], 2: arr["enroll_setting2"]},
        sum_tol=1e-6 if normalize else _NORMALIZE_TOL,
    )


def load_table(path: Union[str, Path], normalize: bool = True) -> PopulationTable:
    """Read a population table CSV.

    Published tables round proportions to three decimals, so ``prop_cross`` and
    ``prop_target`` are rescaled to sum to one when they are off by at most 0.005.
    ``normalize=False`` keeps the values as written (for the enrollment formula).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        return _parse_table(list(csv.DictReader(fh)), str(path), normalize)


BUNDLED_TABLES = ("table5", "table6", "mixed2")


def bundled_table(name: str, normalize: bool = True) -> PopulationTable:
    """A shipped table: ``table5`` (single subtype), ``table6`` (subtypes A/B) or ``mixed2`` (two-cell A/B)."""
    if name not in BUNDLED_TABLES:
        raise SchemaError(f"unknown bundled table {name!r}")
    ref = resources.files("recency") / "data" / f"{name}.csv"
    with ref.open("r", encoding="utf-8", newline="") as fh:
        return _parse_table(list(csv.DictReader(fh)), name, normalize)


DEFAULT_ASSAYS = {"": SUBTYPE_B, "B": SUBTYPE_B, "A": SUBTYPE_A}


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CrossDraw:
    """A simulated cross-section with the latent quantities kept alongside."""

    records: Records
    cell: np.ndarray
    duration: np.ndarray  # years since infection; NaN for HIV-negatives


def _assay_for(assays, sub: str) -> RecencyAssay:
    if isinstance(assays, RecencyAssay):
        return assays
    if sub in assays:
        return assays[sub]
    raise PreconditionError(f"no assay for subtype {sub!r}")


def draw_cross_sectional(table: PopulationTable, n: int, assays, rng: np.random.Generator,
                         t_star: float = 2.0, tail_cap: float = 10.0) -> CrossDraw:
    """Cross-sectional sample with cell, infection duration and recency result."""
    table.check_feasible(t_star)
    if tail_cap <= t_star:
        raise PreconditionError("epidemic tail cap must exceed T*")
    cell = rng.choice(len(table), size=n, p=table.prop_cross)
    d = (rng.random(n) < table.prevalence[cell]).astype(np.int8)
    pos = np.flatnonzero(d == 1)
    recent_mass = table.recent_mass(t_star)[cell[pos]]
    is_recent = rng.random(pos.size) < recent_mass
    u_unit = rng.random(pos.size)
    dur_pos = np.where(is_recent, u_unit * t_star, t_star + u_unit * (tail_cap - t_star))
    duration = np.full(n, np.nan)
    duration[pos] = dur_pos
    subs = table.subtype[cell]
    prob = np.empty(pos.size)
    for s in np.unique(subs[pos]):
        m = subs[pos] == s
        prob[m] = phi(_assay_for(assays, str(s)), dur_pos[m])
    recent = np.full(n, MISSING, dtype=np.int8)
    recent[pos] = (rng.random(pos.size) < prob).astype(np.int8)
    tested = np.full(n, MISSING, dtype=np.int8)
    tested[pos] = 1
    rec = Records(table.covariates[cell], d, recent, tested, subs.astype("<U16"),
                  np.full(n, MISSING, dtype=np.int8), np.zeros(n, dtype=np.int8), table.covariate_names)
    return CrossDraw(rec, cell, duration)


def gen_cross_sectional(table: PopulationTable, n: int, assays, rng: np.random.Generator,
                        t_star: float = 2.0, tail_cap: float = 10.0) -> Records:
    return draw_cross_sectional(table, n, assays, rng, t_star, tail_cap).records


def gen_external_target(table: PopulationTable, m: int, rng: np.random.Generator) -> Records:
    """Covariates (and subtype) only, drawn from the target proportions."""
    cell = rng.choice(len(table), size=m, p=table.prop_target)
    miss = np.full(m, MISSING, dtype=np.int8)
    return Records(table.covariates[cell].reshape(m, len(table.covariate_names)), miss, miss.copy(), miss.copy(),
                   table.subtype[cell].astype("<U16"), np.ones(m, dtype=np.int8), np.ones(m, dtype=np.int8),
                   table.covariate_names)


@dataclass(frozen=True)
class EnrollmentProbabilities:
    raw: np.ndarray
    truncated: np.ndarray


def truncate_enrollment(raw) -> np.ndarray:
    """Map raw enrollment probabilities into [0, 0.95].

    Values up to 1 are kept. Values above 1 are remapped affinely and in order
    onto ``(e_m + 0.05, 0.95]``, where ``e_m`` is the largest raw value below
    0.9 (0 if there is none). A single distinct value above 1 maps to 0.95.
    """
    raw = np.asarray(raw, dtype=float)
    if np.any(raw < 0) or np.any(~np.isfinite(raw)):
        raise PreconditionError("raw enrollment probabilities must be finite and nonnegative")
    out = raw.copy()
    over = raw > 1
    if not over.any():
        return out
    below = raw[raw < 0.9]
    e_m = below.max() if below.size else 0.0
    e_ma, e_mi = raw[over].max(), raw[over].min()
    if e_ma == e_mi:
        out[over] = 0.95
    else:
        # e_m + 0.05 + (0.9 - e_m)(e - e_mi)/(e_ma - e_mi), anchored at 0.95 so the top value is exact
        out[over] = 0.95 - (0.9 - e_m) * (e_ma - raw[over]) / (e_ma - e_mi)
    return out


def enrollment_probabilities(table: PopulationTable, n: int, m: int) -> EnrollmentProbabilities:
    """Raw probabilities h M / ((1 - p) g N) per cell and their truncation."""
    if n <= 0 or m < 0:
        raise PreconditionError("N must be positive and M nonnegative")
    denom = (1 - table.prevalence) * table.prop_cross * n
    bad = np.flatnonzero((denom <= 0) & (table.prop_target > 0))
    if bad.size:
        raise PreconditionError(f"row {bad[0] + 1}: zero HIV-negative mass in the cross-section "
                                "but positive target proportion")
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(denom > 0, table.prop_target * m / np.where(denom > 0, denom, 1.0), 0.0)
    return EnrollmentProbabilities(raw, truncate_enrollment(raw))


def gen_internal_enrollment(cross: Records, table: PopulationTable, probs, rng: np.random.Generator,
                            cell: np.ndarray | None = None) -> Records:
    """Set S ~ Bernoulli(probs[cell]) on HIV-negatives; S stays missing for HIV-positives."""
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (len(table),):
        raise PreconditionError("need one enrollment probability per table row")
    if cell is None:
        cell = table.cell_index(cross)
    neg = cross.hiv == 0
    s = np.full(len(cross), MISSING, dtype=np.int8)
    u = rng.random(len(cross))
    s[neg] = (u[neg] < probs[cell[neg]]).astype(np.int8)
    return cross.replace(in_target=s)


@dataclass(frozen=True)
class TrialOutcome:
    infected: np.ndarray  # 0/1 per enrolled subject
    person_years: np.ndarray

    @property
    def infections(self) -> int:
        return int(self.infected.sum())

    @property
    def total_person_years(self) -> float:
        return float(self.person_years.sum())


def simulate_trial(enrolled_cells: np.ndarray, table: PopulationTable, efficacy: float, followup: float,
                   rng: np.random.Generator) -> TrialOutcome:
    """Exponential time to infection at rate lambda_c (1 - E), censored at ``followup``."""
    if not 0 <= efficacy <= 1:
        raise PreconditionError("efficacy must lie in [0, 1]")
    if not followup > 0:
        raise PreconditionError("follow-up must be positive")
    rate = table.incidence[np.asarray(enrolled_cells, dtype=np.int64)] * (1 - efficacy)
    e = rng.standard_exponential(rate.size)
    with np.errstate(divide="ignore"):
        t = np.where(rate > 0, e / np.where(rate > 0, rate, 1.0), np.inf)
    infected = (t < followup).astype(np.int8)
    return TrialOutcome(infected, np.minimum(t, followup))


VISITS = 6
VISIT_SPACING = 2.0 / 12.0
LAST_VISIT = 2.8


def gen_calibration_panel(assay: RecencyAssay, n_subjects: int = 175, n_long: int = 1500,
                          rng: np.random.Generator | None = None, tail_cap: float = 10.0) -> CalibrationPanel:
    """Longitudinal visits at known durations plus a long-infected cross-section.

    Each subject has 6 visits two months apart; the first visit falls uniformly
    in ``[0, 2.8 - 10/12]`` years after infection so that all visits lie in
    ``[0, 2.8]``.
    """
    if n_subjects <= 0 or n_long <= 0:
        raise PreconditionError("calibration panel counts must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    span = (VISITS - 1) * VISIT_SPACING
    first = rng.uniform(0.0, LAST_VISIT - span, n_subjects)
    u = (first[:, None] + np.arange(VISITS) * VISIT_SPACING).ravel()
    r = (rng.random(u.size) < phi(assay, u)).astype(np.int8)
    lu = rng.uniform(assay.t_star, tail_cap, n_long)
    lr = (rng.random(n_long) < phi(assay, lu)).astype(np.int8)
    return CalibrationPanel(np.repeat(np.arange(n_subjects), VISITS), u, r,
                            np.arange(n_long), lr)


# ---------------------------------------------------------------------------
# One replication of a simulation study
# ---------------------------------------------------------------------------

MODES = ("external", "internal", "cross")


@dataclass(frozen=True)
class SimConfig:
    n_cross: int = 5000
    n_target: int = 2500
    setting: int = 1
    mode: str = "external"  # external | internal | cross
    subtype_mode: str = "single"  # single | mixed
    efficacy: float = 0.5
    followup_years: float = 1.0
    t_star: float = 2.0
    tail_cap: float = 10.0
    seed: int = 20240101
    replications: int = 500
    bootstrap_rounds: int = 500
    mdri_boot: int = 200
    panel_subjects: int = 175
    panel_long: int = 1500
    weight_order: int = 1
    ci: str = "both"  # nonparametric | parametric | both | none
    interval: str = "lognormal_normal_approx"

    def __post_init__(self):
        if self.mode not in MODES:
            raise PreconditionError(f"mode must be one of {MODES}")
        if self.subtype_mode not in ("single", "mixed"):
            raise PreconditionError("subtype_mode must be 'single' or 'mixed'")
        if self.setting not in (1, 2):
            raise PreconditionError("setting must be 1 or 2")
        if self.ci not in ("nonparametric", "parametric", "both", "none"):
            raise PreconditionError("ci must be nonparametric, parametric, both or none")
        if self.ci != "none" and self.bootstrap_rounds < 2:
            raise PreconditionError("bootstrap_rounds must be at least 2")
        if self.n_cross <= 0 or self.n_target < 0 or self.replications < 0:
            raise PreconditionError("sample sizes must be positive and replications nonnegative")
        if not 0 <= self.efficacy <= 1 or self.followup_years <= 0:
            raise PreconditionError("efficacy must be in [0, 1] and follow-up positive")


@dataclass(frozen=True)
class SimulatedData:
    cross: Records
    cell: np.ndarray
    target: Records | None
    panels: dict
    trial: TrialOutcome | None
    truth: float
    enrolled_cells: np.ndarray | None = None


def simulate_data(config: SimConfig, table: PopulationTable, assays, rng: RngStream) -> SimulatedData:
    """Steps (a)-(c): cross-section, calibration panels, target population (and trial)."""
    g_cross = rng.substream(0).generator
    draw = draw_cross_sectional(table, config.n_cross, assays, g_cross, config.t_star, config.tail_cap)
    g_panel = rng.substream(1)
    panels = {s: gen_calibration_panel(_assay_for(assays, s), config.panel_subjects, config.panel_long,
                                       g_panel.substream(i).generator, config.tail_cap)
              for i, s in enumerate(table.subtypes)}
    g_target = rng.substream(2).generator
    cross, target, trial, enrolled = draw.records, None, None, None
    if config.mode == "external":
        target = gen_external_target(table, config.n_target, g_target)
        truth = table.true_target_incidence()
    elif config.mode == "internal":
        cross = gen_internal_enrollment(cross, table, table.enroll[config.setting], g_target, draw.cell)
        enrolled = draw.cell[cross.in_target == 1]
        if enrolled.size == 0:
            raise PreconditionError("no subject enrolled in the trial")
        truth = float(table.incidence[enrolled].mean())
        trial = simulate_trial(enrolled, table, config.efficacy, config.followup_years,
                               rng.substream(3).generator)
    else:
        truth = table.true_cross_incidence()
    return SimulatedData(cross, draw.cell, target, panels, trial, truth, enrolled)


def replication_estimator(config: SimConfig, trial_followup: bool = False):
    """The ``sample -> {name: value}`` callable used for point estimates and bootstrap rounds.

    Names are ``standard`` and ``proposed``; internal mode adds the trial-to-
    counterfactual incidence ratios ``ratio_standard`` and ``ratio_proposed``
    (efficacy is one minus the ratio).
    """
    from . import estimators as est

    t, order = config.t_star, config.weight_order

    def assays_of(sample):
        return {s: (sample.mdri[s], sample.frr[s]) for s in sample.mdri}

    def fn(sample) -> dict:
        cross = sample.cross
        out = {}
        if config.subtype_mode == "single":
            (key,) = sample.mdri
            m, f = sample.mdri[key], sample.frr[key]
            out["standard"] = est.standard_incidence(cross, m, f, t).estimate
            if config.mode == "external":
                out["proposed"] = est.incidence_external_target(cross, sample.target, m, f, t, order).estimate
            elif config.mode == "internal":
                out["proposed"] = est.incidence_internal_target(cross, m, f, t, order).estimate
            else:
                out["proposed"] = out["standard"]
        else:
            counts = est.counts_by_subtype(cross)
            a = assays_of(sample)
            strat = est.subtype_stratified(counts, a, t).estimate
            if config.mode == "cross":
                out["standard"] = est.subtype_old(counts, a, t).estimate
                out["proposed"] = strat
            elif config.mode == "external":
                out["standard"] = strat
                out["proposed"] = est.subtype_external(cross, sample.target, a, t, order).estimate
            else:
                out["standard"] = strat
                out["proposed"] = est.subtype_internal(cross, a, t, order).estimate
        if config.mode == "internal":
            py = float(np.sum(sample.extras["trial_py"]))
            if py <= 0:
                raise PreconditionError("no trial person-time")
            lam_trial = float(np.sum(sample.extras["trial_infected"])) / py
            for k in ("standard", "proposed"):
                out[f"ratio_{k}"] = lam_trial / out[k] if out[k] > 0 else math.nan
        return out

    return fn


def _trial_extras(data: SimulatedData) -> dict:
    n = len(data.cross)
    inf, py = np.zeros(n), np.zeros(n)
    if data.trial is not None:
        enrolled = np.flatnonzero(data.cross.in_target == 1)
        inf[enrolled] = data.trial.infected
        py[enrolled] = data.trial.person_years
    return {"trial_infected": inf, "trial_py": py}


def run_replication(config: SimConfig, table: PopulationTable, assays, rep_index: int) -> dict:
    """Simulate, estimate and bootstrap one replication; returns a flat result row.

    Failures are recorded in the row's ``error`` field instead of raised.
    """
    from .bootstrap import BootstrapPlan, DataSources, Sample, nonparametric_ci, parametric_ci
    from .errors import RecencyError

    rng = RngStream(config.seed, rep_index)
    row = {"rep": rep_index, "error": ""}
    try:
        data = simulate_data(config, table, assays, rng)
        row["truth"] = data.truth
        mdri = {s: estimate_mdri(p, config.t_star, n_boot=config.mdri_boot, rng=rng.substream(4).substream(i).generator)
                for i, (s, p) in enumerate(sorted(data.panels.items()))}
        frr = {s: estimate_frr(p) for s, p in data.panels.items()}
        extras = _trial_extras(data)
        fn = replication_estimator(config)
        point = fn(Sample(data.cross, {s: e.point for s, e in mdri.items()},
                          {s: e.point for s, e in frr.items()}, data.target, extras))
        for s in mdri:
            row[f"mdri[{s}]"] = mdri[s].point
            row[f"frr[{s}]"] = frr[s].point
        for k, v in point.items():
            row[k] = v
        if config.mode == "internal":
            row["trial_infections"] = data.trial.infections
            row["trial_person_years"] = data.trial.total_person_years
            row["efficacy_truth"] = config.efficacy
        sources = DataSources(data.cross, data.panels, data.target, extras, config.t_star)
        schemes = {"nonparametric": ("np",), "parametric": ("p",), "both": ("np", "p"), "none": ()}[config.ci]
        for tag in schemes:
            plan = BootstrapPlan("nonparametric" if tag == "np" else "parametric", config.bootstrap_rounds,
                                 interval=config.interval)
            sub = rng.substream(5 if tag == "np" else 6)
            if tag == "np":
                cis = nonparametric_ci(sources, fn, plan, sub, names=tuple(point))
            else:
                cis = parametric_ci(sources, mdri, frr, fn, plan, sub, names=tuple(point))
            for k, ci in cis.items():
                row[f"{k}_{tag}_lo"] = ci.ci_lo
                row[f"{k}_{tag}_hi"] = ci.ci_hi
                row[f"{k}_{tag}_se"] = ci.se
                row[f"{k}_{tag}_failed"] = ci.n_failed + ci.n_nonpositive
                row[f"{k}_{tag}_unreliable"] = ci.unreliable
    except (RecencyError, ArithmeticError, ValueError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row

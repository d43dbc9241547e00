import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recency.assay import SUBTYPE_A, SUBTYPE_B, CalibrationEstimate, frr, mdri
from recency.errors import DegenerateDesignError, PreconditionError, StratumError
from recency.estimators import (CountSummary, IncidenceResult, PlimParams, counts_by_subtype, extended_incidence,
                                incidence_external_target, incidence_internal_target, kassanjee, modified_extended,
                                modified_internal, modified_kassanjee, plim_extended, plim_standard,
                                plim_subtype_old, plim_true_mean, prevention_efficacy, standard_incidence,
                                subtype_external, subtype_internal, subtype_old, subtype_stratified)
from recency.numkernel import RngStream
from recency.records import MISSING, Records
from recency.simulate import bundled_table, draw_cross_sectional
from recency.weights import constant_weight

PLIM_SUBTYPE_OLD = 0.038499746007436164  # closed form for the two-subtype configuration below


def random_records(g, n=400, subtypes=("",), tested_rate=1.0, enrolled=True):
    x = g.integers(0, 2, size=(n, 2))
    d = (g.random(n) < 0.2).astype(np.int8)
    d[:2] = [0, 1]
    tested = np.where(d == 1, (g.random(n) < tested_rate).astype(np.int8), MISSING)
    tested[1] = 1
    recent = np.where(tested == 1, (g.random(n) < 0.15).astype(np.int8), MISSING)
    sub = np.asarray(subtypes)[g.integers(0, len(subtypes), n)]
    s = np.where(d == 0, (g.random(n) < 0.6).astype(np.int8), MISSING) if enrolled else np.full(n, MISSING)
    if enrolled:
        for u in subtypes:
            idx = np.flatnonzero((d == 0) & (sub == u))
            s[idx[:2]] = [0, 1]
    return Records.build(x, hiv=d, recent=recent, tested=tested, subtype=sub, in_target=s)


def mean_form(records, omega, beta, t_star=2.0):
    """Individual-contribution form of the standard estimator."""
    d = records.hiv.astype(float)
    r = np.where(records.recent == 1, 1.0, 0.0)
    return np.mean(d * (r - beta)) / np.mean((1 - d) * (omega - beta * t_star))


def plim_params():
    return PlimParams((0.5, 0.5), (0.25, 0.15), (0.02, 0.05),
                      (mdri(SUBTYPE_A), mdri(SUBTYPE_B)), (frr(SUBTYPE_A), frr(SUBTYPE_B)))


class TestKassanjee:
    def test_zero_frr(self):
        r = kassanjee(CountSummary(500, 4000, 48), 0.48, 0.0, 2.0)
        assert r.estimate == pytest.approx(0.025, abs=1e-15)

    def test_hand_evaluation(self):
        r = kassanjee(CountSummary(500, 5000, 56), 0.5, 0.012, 2.0)
        assert r.estimate == pytest.approx(50 / (5000 * 0.476), rel=1e-14)
        assert r.estimate == pytest.approx(0.021008, abs=1e-6)

    def test_negative_is_flagged(self):
        r = kassanjee(CountSummary(500, 5000, 1), 0.5, 0.012, 2.0)
        assert r.negative and r.estimate < 0

    def test_degenerate_denominator(self):
        with pytest.raises(DegenerateDesignError):
            kassanjee(CountSummary(10, 100, 1), 0.02, 0.01, 2.0)
        with pytest.raises(DegenerateDesignError):
            kassanjee(CountSummary(10, 0, 1), 0.5, 0.0, 2.0)

    def test_calibration_estimates_accepted(self):
        m = CalibrationEstimate("MDRI", 0.48, 0.01, 0.46, 0.50)
        f = CalibrationEstimate.exact("FRR", 0.0)
        assert kassanjee(CountSummary(500, 4000, 48), m, f).estimate == pytest.approx(0.025)

    def test_count_invariants(self):
        with pytest.raises(ValueError):
            CountSummary(10, 10, 11)
        with pytest.raises(ValueError):
            CountSummary(10, 10, 5, n_pos_tested=4)


class TestModifiedKassanjee:
    def test_full_testing_matches_standard(self):
        c = CountSummary(500, 5000, 56)
        assert modified_kassanjee(c, 0.5, 0.012).estimate == kassanjee(c, 0.5, 0.012).estimate

    @pytest.mark.parametrize("r", [0, 17, 40])
    def test_missing_tests_hand_evaluation(self, r):
        omega = 202 / 365.25
        c = CountSummary(643, 2466, r, n_pos_tested=614)
        assert modified_kassanjee(c, omega, 0.0).estimate == pytest.approx(r / ((614 / 643) * 2466 * omega),
                                                                           rel=1e-14)

    def test_no_tested(self):
        with pytest.raises(PreconditionError):
            modified_kassanjee(CountSummary(10, 10, 0, n_pos_tested=0), 0.5, 0.0)

    def test_mcar_half_tested_is_unbiased(self):
        # each replicate: full-testing estimate vs the same data with half the tests dropped at random
        table = bundled_table("table5")
        diffs = []
        for rep in range(60):
            g = RngStream(31, rep).generator
            rec = draw_cross_sectional(table, 20_000, SUBTYPE_B, g).records
            drop = (rec.hiv == 1) & (g.random(len(rec)) < 0.5)
            partial = rec.replace(tested=np.where(drop, 0, rec.tested).astype(np.int8),
                                  recent=np.where(drop, MISSING, rec.recent).astype(np.int8))
            om, be = mdri(SUBTYPE_B), 0.0
            diffs.append(modified_kassanjee(CountSummary.from_records(partial), om, be).estimate
                         - standard_incidence(rec, om, be).estimate)
        diffs = np.asarray(diffs)
        assert abs(diffs.mean()) <= 3 * diffs.std(ddof=1) / math.sqrt(len(diffs))


class TestExtended:
    def test_constant_weight_equals_standard(self):
        g = RngStream(1).generator
        rec = random_records(g)
        a = extended_incidence(rec, constant_weight(), 0.5, 0.01).estimate
        assert abs(a - kassanjee(CountSummary.from_records(rec), 0.5, 0.01).estimate) <= 1e-12

    def test_doubled_weights(self):
        g = RngStream(2).generator
        rec = random_records(g)
        w = g.random(len(rec)) + 0.1
        a = extended_incidence(rec, lambda r: w, 0.5, 0.01).estimate
        b = extended_incidence(rec, lambda r: 2 * w, 0.5, 0.01).estimate
        assert abs(a - b) <= 1e-12 * abs(a)

    def test_all_zero_weights(self):
        rec = random_records(RngStream(3).generator)
        with pytest.raises(DegenerateDesignError):
            extended_incidence(rec, constant_weight(0.0), 0.5, 0.01)

    def test_untested_positives_rejected(self):
        rec = random_records(RngStream(4).generator, tested_rate=0.5)
        with pytest.raises(PreconditionError):
            extended_incidence(rec, constant_weight(), 0.5, 0.01)

    def test_internal_all_enrolled_equals_standard(self):
        rec = random_records(RngStream(5).generator)
        rec = rec.replace(in_target=np.where(rec.hiv == 0, 1, MISSING).astype(np.int8))
        with pytest.warns(UserWarning):
            a = incidence_internal_target(rec, 0.5, 0.01).estimate
        assert abs(a - standard_incidence(rec, 0.5, 0.01).estimate) <= 1e-12

    def test_external_identical_target_near_standard(self):
        table = bundled_table("table5")
        g = RngStream(6).generator
        big = draw_cross_sectional(table, 60_000, SUBTYPE_B, g).records
        cross = big.take(np.arange(40_000))
        rest = big.take(np.arange(40_000, 60_000))
        neg = rest.where(rest.hiv == 0)
        target = Records.build(neg.covariates, population=np.ones(len(neg), dtype=int),
                               in_target=np.ones(len(neg), dtype=int), covariate_names=neg.covariate_names)
        a = incidence_external_target(cross, target, mdri(SUBTYPE_B), 0.0).estimate
        b = standard_incidence(cross, mdri(SUBTYPE_B), 0.0).estimate
        se = b / math.sqrt(CountSummary.from_records(cross).n_rec)  # Poisson scale of the recent count
        assert abs(a - b) <= 3 * se

    def test_empty_target(self):
        rec = random_records(RngStream(7).generator)
        with pytest.raises(PreconditionError):
            incidence_external_target(rec, rec.take(np.zeros(0, dtype=int)), 0.5, 0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6), st.floats(1e-3, 1e3))
    def test_weight_scale_invariance(self, seed, c):
        g = RngStream(seed).generator
        rec = random_records(g, subtypes=("A", "B"), tested_rate=0.8)
        w = g.random(len(rec)) + 0.05
        base = modified_extended(rec, lambda r: w, 0.5, 0.01).estimate
        scaled = modified_extended(rec, lambda r: c * w, 0.5, 0.01).estimate
        assert abs(base - scaled) <= 1e-12 * max(abs(base), 1e-300)


class TestModifiedInternal:
    def test_full_testing_equals_internal(self):
        rec = random_records(RngStream(8).generator)
        a = modified_internal(rec, 0.5, 0.01).estimate
        b = incidence_internal_target(rec, 0.5, 0.01).estimate
        assert abs(a - b) <= 1e-12

    def test_all_untested(self):
        rec = random_records(RngStream(9).generator)
        rec = rec.replace(tested=np.where(rec.hiv == 1, 0, MISSING).astype(np.int8),
                          recent=np.full(len(rec), MISSING, dtype=np.int8))
        with pytest.raises(PreconditionError):
            modified_internal(rec, 0.5, 0.01)

    def test_mcar_ninety_percent(self):
        table = bundled_table("table5")
        diffs = []
        for rep in range(60):
            g = RngStream(41, rep).generator
            rec = draw_cross_sectional(table, 20_000, SUBTYPE_B, g).records
            s = np.where(rec.hiv == 0, (g.random(len(rec)) < 0.5), MISSING).astype(np.int8)
            rec = rec.replace(in_target=s)
            drop = (rec.hiv == 1) & (g.random(len(rec)) >= 0.9)
            partial = rec.replace(tested=np.where(drop, 0, rec.tested).astype(np.int8),
                                  recent=np.where(drop, MISSING, rec.recent).astype(np.int8))
            om = mdri(SUBTYPE_B)
            diffs.append(modified_internal(partial, om, 0.0).estimate - modified_internal(rec, om, 0.0).estimate)
        diffs = np.asarray(diffs)
        assert abs(diffs.mean()) <= 3 * diffs.std(ddof=1) / math.sqrt(len(diffs))


class TestSubtypes:
    assays = {"A": (0.49, 0.026), "B": (0.48, 0.0)}

    def test_old_single_subtype(self):
        c = CountSummary(500, 5000, 56)
        assert subtype_old({"B": c}, {"B": (0.5, 0.012)}).estimate == pytest.approx(
            kassanjee(c, 0.5, 0.012).estimate, abs=1e-15)

    def test_old_equal_assays_zero_frr(self):
        counts = {"A": CountSummary(200, 2000, 20), "B": CountSummary(300, 2500, 31)}
        pooled = CountSummary(500, 4500, 51)
        got = subtype_old(counts, {"A": (0.5, 0.0), "B": (0.5, 0.0)}).estimate
        assert got == pytest.approx(kassanjee(pooled, 0.5, 0.0).estimate, rel=1e-14)

    def test_stratified_single_subtype(self):
        c = CountSummary(500, 5000, 56)
        assert subtype_stratified({"B": c}, {"B": (0.5, 0.012)}).estimate == pytest.approx(
            kassanjee(c, 0.5, 0.012).estimate, abs=1e-15)

    def test_stratified_identical_strata(self):
        c = CountSummary(250, 2500, 28)
        two = subtype_stratified({"A": c, "B": c}, {"A": (0.5, 0.01), "B": (0.5, 0.01)}).estimate
        assert two == pytest.approx(kassanjee(c, 0.5, 0.01).estimate, rel=1e-14)

    def test_stratified_empty_stratum(self):
        with pytest.raises(StratumError, match="A"):
            subtype_stratified({"A": CountSummary(5, 0, 1), "B": CountSummary(5, 50, 1)}, self.assays)

    def test_missing_assay(self):
        with pytest.raises(StratumError):
            subtype_stratified({"C": CountSummary(5, 50, 1)}, self.assays)

    def test_counts_by_subtype(self):
        rec = random_records(RngStream(10).generator, subtypes=("A", "B"))
        parts = counts_by_subtype(rec)
        assert sum(c.n for c in parts.values()) == len(rec)

    def test_internal_single_subtype_equals_unstratified(self):
        rec = random_records(RngStream(11).generator, subtypes=("B",))
        a = subtype_internal(rec, {"B": (0.5, 0.01)}).estimate
        b = incidence_internal_target(rec, 0.5, 0.01).estimate
        assert abs(a - b) <= 1e-12

    def test_external_single_subtype_equals_unstratified(self):
        g = RngStream(12).generator
        rec = random_records(g, subtypes=("B",), enrolled=False)
        target = Records.build(g.integers(0, 2, size=(300, 2)), subtype=["B"] * 300,
                               population=np.ones(300, dtype=int), in_target=np.ones(300, dtype=int))
        a = subtype_external(rec, target, {"B": (0.5, 0.01)}).estimate
        b = incidence_external_target(rec, target, 0.5, 0.01).estimate
        assert abs(a - b) <= 1e-12

    def test_internal_uses_enrolled_proportions(self):
        rec = random_records(RngStream(13).generator, subtypes=("A", "B"))
        r = subtype_internal(rec, self.assays)
        enrolled = (rec.hiv == 0) & (rec.in_target == 1)
        assert r.diagnostics["pi_star"]["A"] == pytest.approx(np.mean(rec.subtype[enrolled] == "A"))


class TestEfficacy:
    def test_no_infections(self):
        assert prevention_efficacy(0, 100.0, 0.03) == 1.0

    def test_equal_rates(self):
        assert prevention_efficacy(3, 100.0, IncidenceResult(0.03, "x")) == pytest.approx(0.0, abs=1e-15)

    def test_nonpositive_counterfactual(self):
        with pytest.raises(DegenerateDesignError):
            prevention_efficacy(3, 100.0, -0.01)

    def test_zero_person_years(self):
        with pytest.raises(PreconditionError):
            prevention_efficacy(0, 0.0, 0.03)


class TestPlim:
    def test_single_subtype_zero_frr(self):
        p = PlimParams((1.0,), (0.2,), (0.03,), (0.5,), (0.0,))
        assert plim_subtype_old(p) == pytest.approx(0.03, rel=1e-14)
        assert plim_true_mean(p) == 0.03

    def test_equal_assays_equal_prevalence(self):
        p = PlimParams((0.3, 0.7), (0.2, 0.2), (0.02, 0.05), (0.5, 0.5), (0.01, 0.01))
        assert plim_subtype_old(p) == pytest.approx(plim_true_mean(p), rel=1e-13)

    def test_pinned_two_subtype_value(self):
        p = plim_params()
        assert plim_subtype_old(p) == pytest.approx(PLIM_SUBTYPE_OLD, rel=1e-12)
        assert plim_true_mean(p) == pytest.approx(0.035, abs=1e-15)
        assert abs(plim_subtype_old(p) - plim_true_mean(p)) > 1e-3

    def test_matches_moment_derivation(self):
        # limits of N_rec/N, N_pos/N, N_neg/N plugged into the estimator with pi-averaged assay values
        p = plim_params()
        pi, prev, lam = map(np.asarray, (p.proportions, p.prevalences, p.incidences))
        om, be = np.asarray(p.mdris), np.asarray(p.frrs)
        rec = np.sum(pi * (lam * (1 - prev) * (om - be * 2.0) + prev * be))
        pos = np.sum(pi * prev)
        om_bar, be_bar = np.dot(pi, om), np.dot(pi, be)
        ref = (rec - pos * be_bar) / ((1 - pos) * (om_bar - be_bar * 2.0))
        assert plim_subtype_old(p) == pytest.approx(ref, rel=1e-13)

    def test_standard_and_extended_limits(self):
        t = bundled_table("table5")
        assert plim_extended(np.ones(len(t)), t.incidence, t.prevalence, t.prop_cross) == pytest.approx(
            plim_standard(t.incidence, t.prevalence, t.prop_cross), rel=1e-14)
        w = t.prop_target / ((1 - t.prevalence) * t.prop_cross)
        assert plim_extended(w, t.incidence, t.prevalence, t.prop_cross) == pytest.approx(
            t.true_target_incidence(), rel=1e-12)

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            PlimParams((0.5, 0.6), (0.1, 0.1), (0.01, 0.01), (0.5, 0.5), (0, 0))

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recency.assay import SUBTYPE_A, SUBTYPE_B, RecencyAssay, Tabulated
from recency.errors import FeasibilityError, PreconditionError, SchemaError
from recency.numkernel import RngStream
from recency.simulate import (BUNDLED_TABLES, PopulationTable, SimConfig, bundled_table, draw_cross_sectional,
                              enrollment_probabilities, gen_calibration_panel, gen_cross_sectional,
                              gen_external_target, gen_internal_enrollment, run_replication, simulate_trial,
                              truncate_enrollment)

NEVER = RecencyAssay("never", Tabulated((0.0,), (0.0,)), 2.0)


def one_cell(incidence=0.02, prevalence=0.2):
    return PopulationTable(np.zeros((1, 1), dtype=np.int64), ("x",), np.array([""]), np.array([incidence]),
                           np.array([prevalence]), np.array([1.0]), np.array([1.0]), {1: np.array([0.5])})


class TestTable:
    @pytest.mark.parametrize("name", BUNDLED_TABLES)
    def test_bundled_tables_feasible(self, name):
        t = bundled_table(name)
        t.check_feasible()
        assert abs(t.prop_cross.sum() - 1) <= 1e-6 and abs(t.prop_target.sum() - 1) <= 1e-6

    def test_table5_worst_recent_mass(self):
        # the largest row is (1,0,1,0): 0.063 * 0.741 * 2 / 0.259
        m = bundled_table("table5").recent_mass()
        assert m.max() == pytest.approx(0.063 * 0.741 * 2 / 0.259, rel=1e-12)
        assert m.max() < 1

    def test_infeasible_row_named(self):
        t = one_cell(incidence=0.5, prevalence=0.2)
        with pytest.raises(FeasibilityError, match="row 1"):
            gen_cross_sectional(t, 10, SUBTYPE_B, RngStream(0).generator)

    def test_proportions_must_sum_to_one(self):
        with pytest.raises(SchemaError):
            PopulationTable(np.zeros((2, 1), dtype=np.int64), ("x",), np.array(["", ""]), np.array([0.01, 0.01]),
                            np.array([0.1, 0.1]), np.array([0.5, 0.4]), np.array([0.5, 0.5]))

    def test_target_truth(self):
        t = bundled_table("table5")
        assert t.true_target_incidence() == pytest.approx(np.dot(t.prop_target, t.incidence), rel=1e-14)
        # the published columns are rounded to 3 decimals, which moves the mean by under 1e-4
        assert abs(t.true_target_incidence() - 0.0259) < 1e-4


class TestCrossSectional:
    def test_zero_prevalence(self):
        t = one_cell(incidence=0.0, prevalence=0.0)
        rec = gen_cross_sectional(t, 1000, SUBTYPE_B, RngStream(1).generator)
        assert rec.hiv.sum() == 0

    def test_recent_fraction(self):
        n = 100_000
        d = draw_cross_sectional(one_cell(), n, SUBTYPE_B, RngStream(2).generator)
        pos = d.records.hiv == 1
        frac = np.mean(d.duration[pos] < 2.0)
        se = math.sqrt(0.16 * 0.84 / pos.sum())
        assert abs(frac - 0.16) <= 3 * se

    def test_table5_prevalence(self):
        t = bundled_table("table5")
        rec = gen_cross_sectional(t, 5000, SUBTYPE_B, RngStream(3).generator)
        p = float(np.dot(t.prop_cross, t.prevalence))
        assert abs(rec.hiv.mean() - p) <= 3 * math.sqrt(p * (1 - p) / 5000)

    def test_fields(self):
        rec = gen_cross_sectional(bundled_table("table5"), 2000, SUBTYPE_B, RngStream(4).generator)
        pos = rec.hiv == 1
        assert np.all(rec.tested[pos] == 1) and np.all(rec.recent[~pos] == -1)
        assert set(np.unique(rec.recent[pos])) <= {0, 1}

    def test_never_recent_assay(self):
        rec = gen_cross_sectional(one_cell(), 2000, NEVER, RngStream(5).generator)
        assert rec.recent[rec.hiv == 1].sum() == 0


class TestExternalTarget:
    def test_empty(self):
        assert len(gen_external_target(bundled_table("table5"), 0, RngStream(6).generator)) == 0

    def test_concentrated(self):
        t = bundled_table("table5")
        h = np.zeros(len(t))
        h[5] = 1.0
        t2 = PopulationTable(t.covariates, t.covariate_names, t.subtype, t.incidence, t.prevalence,
                             t.prop_cross, h, t.enroll)
        rec = gen_external_target(t2, 100, RngStream(7).generator)
        assert np.all(rec.covariates == t.covariates[5])

    def test_cell_frequencies(self):
        t = bundled_table("table5")
        m = 100_000
        rec = gen_external_target(t, m, RngStream(8).generator)
        freq = np.bincount(t.cell_index(rec), minlength=len(t)) / m
        se = np.sqrt(t.prop_target * (1 - t.prop_target) / m)
        assert np.all(np.abs(freq - t.prop_target) <= 3 * se + 1e-12)
        assert np.all(rec.hiv == -1) and np.all(rec.population == 1)

    def test_large_n_mean_incidence(self):
        t = bundled_table("table5")
        m = 200_000
        lam = t.incidence[t.cell_index(gen_external_target(t, m, RngStream(9).generator))]
        assert abs(lam.mean() - 0.0259) <= 3 * lam.std(ddof=1) / math.sqrt(m) + 5e-5


class TestEnrollment:
    def test_identity_when_at_most_one(self):
        raw = np.array([0.1, 0.5, 1.0, 0.95])
        np.testing.assert_array_equal(truncate_enrollment(raw), raw)

    def test_hand_example(self):
        np.testing.assert_allclose(truncate_enrollment([0.4, 1.2, 3.0]), [0.4, 0.45, 0.95], atol=1e-15)

    def test_single_value_over_one(self):
        np.testing.assert_allclose(truncate_enrollment([0.3, 1.5, 1.5]), [0.3, 0.95, 0.95])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 5), min_size=1, max_size=30))
    def test_map_properties(self, raw):
        raw = np.asarray(raw)
        out = truncate_enrollment(raw)
        assert np.all(out[raw > 1] <= 0.95)
        np.testing.assert_array_equal(out[raw <= 1], raw[raw <= 1])
        over = np.flatnonzero(raw > 1)
        for i in over:
            for j in over:
                if raw[i] < raw[j]:
                    assert out[i] < out[j]

    def test_row_one_from_rounded_inputs(self):
        t = bundled_table("table5", normalize=False)
        e = enrollment_probabilities(t, 5000, 2500)
        assert e.raw[0] == pytest.approx(40 / (0.908 * 165), rel=1e-12)
        assert round(e.raw[0], 4) == 0.2670

    def test_all_and_none_enrolled(self):
        t = bundled_table("table5")
        d = draw_cross_sectional(t, 3000, SUBTYPE_B, RngStream(10).generator)
        neg = d.records.hiv == 0
        all_in = gen_internal_enrollment(d.records, t, np.ones(len(t)), RngStream(11).generator, d.cell)
        none_in = gen_internal_enrollment(d.records, t, np.zeros(len(t)), RngStream(11).generator, d.cell)
        assert np.all(all_in.in_target[neg] == 1) and np.all(none_in.in_target[neg] == 0)
        assert np.all(all_in.in_target[~neg] == -1)

    def test_table5_fractions(self):
        t = bundled_table("table5")
        d = draw_cross_sectional(t, 100_000, SUBTYPE_B, RngStream(12).generator)
        rec = gen_internal_enrollment(d.records, t, t.enroll[1], RngStream(13).generator, d.cell)
        neg = rec.hiv == 0
        for c in range(len(t)):
            m = neg & (d.cell == c)
            p = t.enroll[1][c]
            assert abs(rec.in_target[m].mean() - p) <= 3 * math.sqrt(p * (1 - p) / m.sum()) + 1e-12

    def test_wrong_length(self):
        t = bundled_table("table5")
        rec = gen_cross_sectional(t, 100, SUBTYPE_B, RngStream(14).generator)
        with pytest.raises(PreconditionError):
            gen_internal_enrollment(rec, t, np.ones(3), RngStream(15).generator)


class TestTrial:
    def test_full_efficacy(self):
        out = simulate_trial(np.zeros(500, dtype=int), one_cell(), 1.0, 1.0, RngStream(16).generator)
        assert out.infections == 0 and out.total_person_years == pytest.approx(500.0)

    def test_rate(self):
        n = 100_000
        out = simulate_trial(np.zeros(n, dtype=int), one_cell(0.02), 0.5, 1.0, RngStream(17).generator)
        rate = out.infections / out.total_person_years
        assert abs(rate - 0.01) <= 3 * math.sqrt(out.infections) / out.total_person_years

    def test_short_followup(self):
        n = 1000
        out = simulate_trial(np.zeros(n, dtype=int), one_cell(), 0.0, 1e-6, RngStream(18).generator)
        assert out.total_person_years == pytest.approx(n * 1e-6, rel=1e-3)


class TestCalibrationPanel:
    def test_never_recent(self):
        p = gen_calibration_panel(NEVER, 20, 50, RngStream(19).generator)
        assert p.recent.sum() == 0 and p.long_recent.sum() == 0

    def test_subtype_a_frr(self):
        p = gen_calibration_panel(SUBTYPE_A, 175, 1500, RngStream(20).generator)
        assert abs(p.long_recent.mean() - 0.026) <= 3 * 0.0041

    def test_visit_counts(self):
        p = gen_calibration_panel(SUBTYPE_B, 175, 1500, RngStream(21).generator)
        assert len(p.duration) == 1050 and len(p.long_recent) == 1500
        assert p.duration.min() >= 0 and p.duration.max() <= 2.8 + 1e-12


class TestReplication:
    config = SimConfig(n_cross=1500, n_target=600, setting=2, bootstrap_rounds=5, mdri_boot=5, replications=1,
                       seed=77)

    def test_deterministic(self):
        t = bundled_table("table5")
        a = run_replication(self.config, t, {"": SUBTYPE_B}, 0)
        b = run_replication(self.config, t, {"": SUBTYPE_B}, 0)
        assert a == b and a["error"] == ""

    def test_different_reps_differ(self):
        t = bundled_table("table5")
        a = run_replication(self.config, t, {"": SUBTYPE_B}, 0)
        b = run_replication(self.config, t, {"": SUBTYPE_B}, 1)
        assert a["proposed"] != b["proposed"]

    def test_internal_row_fields(self):
        cfg = SimConfig(n_cross=1500, setting=2, mode="internal", ci="none", mdri_boot=5, replications=1, seed=5)
        row = run_replication(cfg, bundled_table("table5"), {"": SUBTYPE_B}, 0)
        assert row["error"] == ""
        assert {"ratio_standard", "ratio_proposed", "trial_infections", "efficacy_truth"} <= set(row)

    def test_errors_are_recorded(self):
        cfg = SimConfig(n_cross=50, n_target=10, ci="none", mdri_boot=0, replications=1, seed=1,
                        panel_subjects=2, panel_long=5)
        row = run_replication(cfg, one_cell(incidence=0.5), {"": SUBTYPE_B}, 0)
        assert "Feasibility" in row["error"]

    def test_zero_replications_allowed(self):
        assert SimConfig(replications=0).replications == 0

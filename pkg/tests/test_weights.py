import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recency.assay import SUBTYPE_B
from recency.errors import ExtrapolationError, PreconditionError
from recency.numkernel import RngStream, expit
from recency.records import Records, SubjectRecord
from recency.simulate import bundled_table, draw_cross_sectional, gen_internal_enrollment
from recency.weights import WeightModel, evaluate_weight, fit_weight_external, fit_weight_internal


def concat(*parts):
    cols = ("covariates", "hiv", "recent", "tested", "subtype", "in_target", "population")
    return Records(*[np.concatenate([getattr(p, c) for p in parts]) for c in cols], parts[0].covariate_names)


def cross_and_target(g, n, m, probs_cross, prev, probs_target, subtype=None):
    """Single binary covariate; exact counts are drawn from the stated cell probabilities."""
    x = (g.random(n) < probs_cross).astype(int)
    d = (g.random(n) < np.where(x == 1, prev[1], prev[0])).astype(int)
    cross = Records.build(x, hiv=d, subtype=subtype and [subtype] * n)
    xt = (g.random(m) < probs_target).astype(int)
    target = Records.build(xt, population=np.ones(m, dtype=int), in_target=np.ones(m, dtype=int),
                           subtype=subtype and [subtype] * m)
    return cross, target


class TestExternal:
    def test_same_distribution_constant_prevalence(self):
        g = RngStream(1).generator
        cross, target = cross_and_target(g, 20000, 10000, 0.4, (0.2, 0.2), 0.4)
        w = fit_weight_external(concat(cross, target))(cross)
        assert w.max() / w.min() <= 1.10

    def test_single_binary_covariate_cell_ratio(self):
        g = RngStream(2).generator
        n, m = 100_000, 50_000
        cross, target = cross_and_target(g, n, m, 0.4, (0.1, 0.3), 0.7)
        model = fit_weight_external(concat(cross, target))
        got = model.per_subtype[""].evaluate(np.array([[0], [1]]))
        exact = np.array([m * 0.3 / (n * 0.6 * 0.9), m * 0.7 / (n * 0.4 * 0.7)])
        np.testing.assert_allclose(got, exact, rtol=0.04)

    def test_no_target_rows(self):
        g = RngStream(3).generator
        cross, _ = cross_and_target(g, 200, 10, 0.5, (0.1, 0.1), 0.5)
        with pytest.raises(PreconditionError):
            fit_weight_external(cross)

    def test_held_out_record_matches_components(self):
        g = RngStream(4).generator
        cross, target = cross_and_target(g, 3000, 1500, 0.5, (0.1, 0.3), 0.3)
        model = fit_weight_external(concat(cross, target))
        fit = model.per_subtype[""]
        bn, bd = fit.numerator.coefficients, fit.denominator.coefficients
        rec = SubjectRecord(covariates=(1,), population="external_target")
        assert evaluate_weight(model, rec) == pytest.approx(expit(bn[0] + bn[1]) / expit(bd[0] + bd[1]), rel=1e-12)

    def test_weights_positive(self):
        g = RngStream(5).generator
        cross, target = cross_and_target(g, 3000, 1500, 0.5, (0.1, 0.3), 0.3)
        w = fit_weight_external(concat(cross, target))(concat(cross, target))
        assert np.all(w > 0) and np.all(np.isfinite(w))

    def test_stratified_single_subtype_equals_unstratified(self):
        g = RngStream(6).generator
        cross, target = cross_and_target(g, 3000, 1500, 0.5, (0.1, 0.3), 0.3, subtype="B")
        pooled = concat(cross, target)
        a = fit_weight_external(pooled, stratify=True).per_subtype["B"]
        b = fit_weight_external(pooled, stratify=False).per_subtype[""]
        np.testing.assert_allclose(a.numerator.coefficients, b.numerator.coefficients, atol=1e-10)
        np.testing.assert_allclose(a.denominator.coefficients, b.denominator.coefficients, atol=1e-10)

    def test_unseen_level(self):
        g = RngStream(7).generator
        cross, target = cross_and_target(g, 500, 200, 0.5, (0.1, 0.3), 0.3)
        model = fit_weight_external(concat(cross, target))
        with pytest.raises(ExtrapolationError):
            evaluate_weight(model, SubjectRecord(covariates=(2,)))

    def test_unknown_subtype(self):
        g = RngStream(8).generator
        cross, target = cross_and_target(g, 500, 200, 0.5, (0.1, 0.3), 0.3, subtype="B")
        model = fit_weight_external(concat(cross, target))
        with pytest.raises(ExtrapolationError):
            evaluate_weight(model, SubjectRecord(covariates=(1,), subtype="C"))


class TestInternal:
    def test_everyone_enrolled_short_circuits(self):
        r = Records.build(np.array([0, 1, 0, 1]), hiv=[0, 0, 0, 1], in_target=[1, 1, 1, -1])
        with pytest.warns(UserWarning):
            model = fit_weight_internal(r)
        np.testing.assert_array_equal(model(r), 1.0)

    def test_half_enrollment(self):
        g = RngStream(9).generator
        n = 100_000
        x = g.integers(0, 2, size=(n, 3))
        s = (g.random(n) < 0.5).astype(int)
        r = Records.build(x, hiv=np.zeros(n, dtype=int), in_target=s)
        w = fit_weight_internal(r)(r)
        assert 0.47 <= w.min() and w.max() <= 0.53

    def test_table5_enrollment_column(self):
        table = bundled_table("table5")
        g = RngStream(0).generator
        draw = draw_cross_sectional(table, 100_000, SUBTYPE_B, g)
        cross = gen_internal_enrollment(draw.records, table, table.enroll[1], g, draw.cell)
        model = fit_weight_internal(cross, order=len(table.covariate_names))
        fitted = model.per_subtype[""].evaluate(table.covariates)
        np.testing.assert_allclose(fitted, table.enroll[1], atol=0.03)

    def test_table5_enrollment_within_binomial_error(self):
        # cell-wise bound scaled by the expected number of HIV-negatives in the cell
        table = bundled_table("table5")
        g = RngStream(0).generator
        n = 100_000
        draw = draw_cross_sectional(table, n, SUBTYPE_B, g)
        cross = gen_internal_enrollment(draw.records, table, table.enroll[1], g, draw.cell)
        fitted = fit_weight_internal(cross, order=4).per_subtype[""].evaluate(table.covariates)
        p = table.enroll[1]
        se = np.sqrt(p * (1 - p) / (n * table.prop_cross * (1 - table.prevalence)))
        assert np.all(np.abs(fitted - p) <= 4 * se)

    def test_constant_model(self):
        r = Records.build(np.zeros(400, dtype=int), hiv=np.zeros(400, dtype=int),
                          in_target=np.r_[np.ones(200), np.zeros(200)].astype(int))
        model = fit_weight_internal(r)
        assert evaluate_weight(model, SubjectRecord(covariates=(0,))) == pytest.approx(0.5, abs=1e-12)

    def test_no_enrolled(self):
        r = Records.build(np.array([0, 1, 0]), hiv=[0, 0, 0], in_target=[0, 0, 0])
        with pytest.raises(PreconditionError):
            fit_weight_internal(r)

    def test_missing_membership(self):
        r = Records.build(np.array([0, 1, 0]), hiv=[0, 0, 0], in_target=[0, 1, -1])
        with pytest.raises(PreconditionError):
            fit_weight_internal(r)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
    def test_in_unit_interval(self, seed, p0, p1):
        g = RngStream(seed).generator
        n = 400
        x = g.integers(0, 2, n)
        s = (g.random(n) < np.where(x == 1, p1, p0)).astype(int)
        s[:4] = [0, 1, 0, 1]
        x[:4] = [0, 0, 1, 1]
        r = Records.build(x, hiv=np.zeros(n, dtype=int), in_target=s)
        w = fit_weight_internal(r)(r)
        assert np.all((w > 0) & (w < 1))


class TestSerialization:
    def test_json_round_trip(self):
        g = RngStream(11).generator
        cross, target = cross_and_target(g, 2000, 1000, 0.5, (0.1, 0.3), 0.3, subtype="B")
        model = fit_weight_external(concat(cross, target))
        again = WeightModel.from_json(model.to_json())
        pooled = concat(cross, target)
        np.testing.assert_array_equal(model(pooled), again(pooled))

    def test_constant_stratum_round_trip(self):
        r = Records.build(np.array([0, 1]), hiv=[0, 0], in_target=[1, 1])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = fit_weight_internal(r)
        assert WeightModel.from_json(model.to_json())(r).tolist() == [1.0, 1.0]

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cura.metrics import (
    DEFAULT_FRACTIONS,
    MetricError,
    ScoredSet,
    aggregate,
    auprc,
    aurc,
    auroc,
    brier,
    evaluate,
    false_reassurance_rate,
    frr_sweep,
    nll,
    retained_auprc_curve,
    risk_coverage,
    uncertainty_bins,
    workload_safety_curve,
    write_table,
)
from cura.objective import EPS

import oracles


def random_set(rng, n=None, ties=False):
    n = n or int(rng.integers(2, 201))
    p = rng.uniform(0.001, 0.999, n)
    if ties:
        p = np.round(p, 1).clip(0.05, 0.95)
    y = (rng.uniform(size=n) < rng.uniform(0.1, 0.6)).astype(int)
    y[0], y[1] = 1, 0
    return ScoredSet.from_probs(p, y)


class TestScoredSet:
    def test_inconsistent_uncertainty(self):
        with pytest.raises(MetricError, match="entropy"):
            ScoredSet(np.array([0.2]), np.array([0.5]), np.array([1]))

    def test_lengths_and_labels(self):
        with pytest.raises(MetricError):
            ScoredSet.from_probs([0.2, 0.3], [1])
        with pytest.raises(MetricError):
            ScoredSet.from_probs([0.2], [2])

    def test_take_and_concat(self):
        s = ScoredSet.from_probs([0.1, 0.6, 0.8], [0, 1, 1], method="m", fold="0")
        t = s.take([2, 0])
        assert t.prob.tolist() == [0.8, 0.1] and t.method == "m"
        both = ScoredSet.concat([s, t])
        assert len(both) == 5 and both.fold == "all"


class TestOracles:
    @pytest.mark.parametrize("seed", range(100))
    def test_against_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        s = random_set(rng, ties=seed % 2 == 1)
        p, y = s.prob.tolist(), s.label.tolist()
        assert abs(auroc(s) - oracles.auroc(p, y)) < 1e-12
        assert abs(auprc(s) - oracles.auprc(p, y)) < 1e-12
        assert abs(aurc(s) - oracles.aurc(p, y, s.uncertainty.tolist())) < 1e-12


class TestAuroc:
    def test_perfect(self):
        assert auroc(ScoredSet.from_probs([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0

    def test_all_ties(self):
        assert auroc(ScoredSet.from_probs([0.3] * 6, [0, 1, 0, 1, 1, 0])) == 0.5

    def test_single_class(self):
        with pytest.raises(MetricError):
            auroc(ScoredSet.from_probs([0.3, 0.4], [1, 1]))


class TestAuprc:
    def test_perfect(self):
        assert auprc(ScoredSet.from_probs([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])) == 1.0

    def test_positive_ranked_last(self):
        n = 8
        p = np.linspace(0.9, 0.1, n)
        y = np.zeros(n, int)
        y[-1] = 1
        assert auprc(ScoredSet.from_probs(p, y)) == pytest.approx(1 / n)

    def test_ties_broken_by_index(self):
        # equal scores: the earlier row is ranked first
        assert auprc(ScoredSet.from_probs([0.5, 0.5], [0, 1])) == 0.5
        assert auprc(ScoredSet.from_probs([0.5, 0.5], [1, 0])) == 1.0

    def test_no_positives(self):
        with pytest.raises(MetricError):
            auprc(ScoredSet.from_probs([0.3, 0.4], [0, 0]))

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_rank_invariance(self, seed):
        rng = np.random.default_rng(seed)
        s = random_set(rng, 60)
        # strictly increasing map of (0, 1) onto itself
        t = ScoredSet.from_probs(s.prob ** 3, s.label)
        assert auroc(t) == pytest.approx(auroc(s), abs=1e-15)
        assert auprc(t) == pytest.approx(auprc(s), abs=1e-15)


class TestCalibration:
    def test_examples(self):
        s = ScoredSet.from_probs([0.9, 0.2], [1, 0])
        assert brier(s) == pytest.approx(0.025)
        assert nll(s) == pytest.approx(0.1643, abs=1e-4)

    def test_coin_flip(self):
        s = ScoredSet.from_probs([0.5] * 4, [1, 0, 0, 1])
        assert brier(s) == 0.25 and nll(s) == pytest.approx(math.log(2))

    def test_perfect_clamped(self):
        s = ScoredSet.from_probs([1 - EPS, EPS], [1, 0])
        assert brier(s) <= EPS ** 2 * (1 + 1e-9)
        assert nll(s) <= -math.log(1 - EPS) * (1 + 1e-9)


class TestAurc:
    def test_all_correct_and_all_wrong(self):
        assert aurc(ScoredSet.from_probs([0.9, 0.1, 0.7], [1, 0, 1])) == 0.0
        assert aurc(ScoredSet.from_probs([0.9, 0.1, 0.7], [0, 1, 0])) == 1.0

    def test_four_sample_enumeration(self):
        s = ScoredSet.from_probs([0.1, 0.2, 0.4, 0.9], [0, 0, 1, 0])
        # certainty order: 0.1 (u=.469), 0.9 (u=.469, later index), 0.2, 0.4
        # errors in that order: 0, 1, 0, 1 -> risks 0, 1/2, 1/3, 2/4
        assert aurc(s) == pytest.approx((0 + 1 / 2 + 1 / 3 + 2 / 4) / 4, abs=1e-15)
        cov, risk = risk_coverage(s)
        assert cov.tolist() == [0.25, 0.5, 0.75, 1.0]

    def test_empty(self):
        with pytest.raises(MetricError):
            aurc(ScoredSet.from_probs([], []))


class TestBins:
    def test_all_in_first_bin(self):
        p = 0.00585  # u(p) ~ 0.052
        s = ScoredSet.from_probs([p] * 5, [0] * 5)
        rows = uncertainty_bins(s, 10)
        assert rows[0]["count"] == 5 and all(r["count"] == 0 for r in rows[1:])
        assert rows[1]["accuracy"] is None and rows[1]["positive_rate"] is None

    def test_right_closed_last_bin_and_edges(self):
        s = ScoredSet.from_probs([0.5, 0.5], [1, 0])
        rows = uncertainty_bins(s, 5)
        assert rows[-1]["count"] == 2 and rows[-1]["positive_rate"] == 0.5
        assert [r["lo"] for r in rows] == [0.0, 0.2, 0.4, 0.6, 0.8]

    @given(st.integers(0, 10_000), st.integers(1, 20))
    @settings(max_examples=40, deadline=None)
    def test_partition_and_exact_ratios(self, seed, n_bins):
        s = random_set(np.random.default_rng(seed))
        rows = uncertainty_bins(s, n_bins)
        assert sum(r["count"] for r in rows) == len(s)
        for r in rows:
            if r["count"]:
                inside = (s.uncertainty >= r["lo"]) & ((s.uncertainty < r["hi"]) | (r["hi"] == 1.0))
                assert r["count"] == inside.sum()
                assert r["positive_rate"] == s.label[inside].sum() / inside.sum()

    def test_bad_bins(self):
        with pytest.raises(MetricError):
            uncertainty_bins(ScoredSet.from_probs([0.3], [1]), 0)


class TestRetainedAuprc:
    def test_full_fraction_is_global(self):
        s = random_set(np.random.default_rng(0), 100)
        assert retained_auprc_curve(s, [1.0])[0]["auprc"] == auprc(s)

    def test_undefined_without_positives(self):
        s = ScoredSet.from_probs([0.01, 0.02, 0.4, 0.5], [0, 0, 1, 1])
        assert retained_auprc_curve(s, [0.25, 0.5])[0]["auprc"] is None

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        # distinct uncertainties so the certainty order has no index ties
        s = ScoredSet.from_probs(rng.uniform(0.01, 0.49, 150), (rng.uniform(size=150) < 0.3).astype(int))
        perm = rng.permutation(150)
        assert retained_auprc_curve(s) == retained_auprc_curve(s.take(perm))

    def test_ceil_count(self):
        # 0.05 * 30 = 1.5 -> 2 retained
        s = ScoredSet.from_probs(np.linspace(0.01, 0.3, 30), [1, 1] + [0] * 28)
        assert retained_auprc_curve(s, [0.05])[0]["auprc"] == 1.0

    def test_fraction_bounds(self):
        with pytest.raises(MetricError):
            retained_auprc_curve(ScoredSet.from_probs([0.3], [1]), [0.0])


class TestWorkloadSafety:
    def test_endpoints(self):
        s = ScoredSet.from_probs([0.1, 0.2, 0.7, 0.4, 0.05], [1, 0, 1, 1, 0])
        rows = workload_safety_curve(s, [0.0, 1.0])
        assert rows[0]["missed_per_1000"] == 0.0
        assert rows[1]["missed_per_1000"] == 1000 * 2 / 5

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_monotone(self, seed):
        s = random_set(np.random.default_rng(seed))
        values = [r["missed_per_1000"] for r in workload_safety_curve(s)]
        assert all(b >= a for a, b in zip(values, values[1:]))


class TestFrr:
    def test_counting(self):
        p = [0.01, 0.02] + [0.6] * 8 + [0.3] * 5
        y = [1] * 10 + [0] * 5
        s = ScoredSet.from_probs(p, y)
        # u(0.01) ~ 0.081, u(0.02) ~ 0.141: both below 0.15 only
        assert false_reassurance_rate(s, 0.15) == 0.2
        assert false_reassurance_rate(s, 0.1) == 0.1

    def test_tau_zero(self):
        assert false_reassurance_rate(ScoredSet.from_probs([EPS, 0.3], [1, 1]), 0.0) == 0.0

    def test_no_positives(self):
        with pytest.raises(MetricError):
            false_reassurance_rate(ScoredSet.from_probs([0.3], [0]), 0.1)

    @given(st.integers(0, 10_000), st.lists(st.floats(0, 1), min_size=2, max_size=6))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_tau(self, seed, taus):
        rng = np.random.default_rng(seed)
        s = ScoredSet.from_probs(rng.uniform(0, 0.3, 80) ** 2, rng.integers(0, 2, 80) | np.eye(80, dtype=int)[0])
        values = [r["frr"] for r in frr_sweep(s, sorted(taus))]
        assert all(b >= a for a, b in zip(values, values[1:]))


class TestReport:
    def test_evaluate_fields_and_bounds(self, tmp_path):
        s = random_set(np.random.default_rng(9), 120)
        rep = evaluate(s)
        for k in ("auroc", "auprc", "brier", "aurc"):
            assert 0 <= getattr(rep, k) <= 1
        assert set(rep.frr) == {0.05, 0.1, 0.15}
        assert len(rep.curves["retained_auprc"]) == len(DEFAULT_FRACTIONS)
        rep.write_curves(tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["bins.csv", "frr.csv", "retained_auprc.csv", "risk_coverage.csv", "workload_safety.csv"]
        with (tmp_path / "risk_coverage.csv").open() as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["coverage", "risk"] and len(rows) == 121
        assert float(rows[-1][1]) == rep.curves["risk_coverage"][-1]["risk"]

    def test_undefined_cells_are_empty(self, tmp_path):
        write_table(tmp_path / "x" / "t.csv", ("a", "b"), [{"a": 1, "b": None}, {"a": 0.1, "b": 2.5}])
        assert (tmp_path / "x" / "t.csv").read_text() == "a,b\n1,\n0.1,2.5\n"

    def test_aggregate(self):
        reps = [evaluate(random_set(np.random.default_rng(i), 80)) for i in range(3)]
        agg = aggregate(reps)
        values = np.array([r.brier for r in reps])
        assert agg["brier"]["mean"] == pytest.approx(values.mean()) and agg["brier"]["sd"] == pytest.approx(values.std())
        assert "frr@0.1" in agg

"""Metrics, interval widths, paired t-test, uncertainty report, ribbons."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phasediff import evaluation as ev
from phasediff.data import MASKED
from phasediff.diffusion import TrajectorySet
from phasediff.errors import PhasediffError


class TestFrameMetrics:
    def test_perfect_predictions(self):
        labels = np.array([0, 0, 1, 2, 2])
        rep = ev.frame_metrics(labels.copy(), labels)
        assert rep.accuracy_mean == 1.0
        assert rep.macro_precision == 1.0
        assert rep.macro_recall == 1.0
        assert rep.macro_jaccard == 1.0

    def test_relaxed_boundary_hand_trace(self):
        # 20 frames of phase 0 then 20 of phase 1 at 1 fps; one early flip at 18
        labels = np.array([0] * 20 + [1] * 20)
        preds = labels.copy()
        preds[18] = 1
        strict = ev.frame_metrics(preds, labels, relaxed=False)
        relaxed = ev.frame_metrics(preds, labels, relaxed=True, fps=1.0)
        assert strict.accuracy_mean == pytest.approx(39 / 40)
        assert relaxed.accuracy_mean == pytest.approx(40 / 40)

    def test_relaxed_does_not_forgive_outside_window(self):
        labels = np.array([0] * 20 + [1] * 20)
        preds = labels.copy()
        preds[5] = 1  # 15 frames before the transition: outside the 10-frame window
        relaxed = ev.frame_metrics(preds, labels, relaxed=True, fps=1.0)
        assert relaxed.accuracy_mean == pytest.approx(39 / 40)

    def test_macro_two_class_hand_count(self):
        preds = np.array([0, 0, 1, 1, 1, 1])
        labels = np.array([0, 0, 0, 0, 1, 1])
        rep = ev.frame_metrics(preds, labels)
        assert rep.macro_precision == pytest.approx(0.75)
        assert rep.macro_recall == pytest.approx(0.75)
        assert rep.macro_jaccard == pytest.approx(0.5)

    def test_relaxed_never_below_strict(self):
        g = np.random.default_rng(0)
        for _ in range(30):
            labels = np.repeat(g.integers(0, 3, size=6), g.integers(3, 15, size=6))
            preds = labels.copy()
            flip = g.random(labels.size) < 0.2
            preds[flip] = g.integers(0, 3, size=int(flip.sum()))
            strict = ev.frame_metrics(preds, labels, relaxed=False)
            relaxed = ev.frame_metrics(preds, labels, relaxed=True)
            assert relaxed.accuracy_mean >= strict.accuracy_mean - 1e-12

    def test_masked_frames_excluded(self):
        labels = np.array([0, MASKED, 1, 1])
        preds = np.array([0, 2, 0, 1])
        rep = ev.frame_metrics(preds, labels)
        assert rep.accuracy_mean == pytest.approx(2 / 3)

    def test_relabeling_invariance(self):
        g = np.random.default_rng(1)
        labels = np.repeat(g.integers(0, 4, size=8), 5)
        preds = labels.copy()
        preds[g.random(labels.size) < 0.3] = g.integers(0, 4)
        rep = ev.frame_metrics(preds, labels)
        perm = np.array([2, 3, 0, 1])
        rep_p = ev.frame_metrics(perm[preds], perm[labels])
        assert rep_p.macro_precision == pytest.approx(rep.macro_precision)
        assert rep_p.macro_jaccard == pytest.approx(rep.macro_jaccard)

    def test_length_mismatch(self):
        with pytest.raises(Exception):
            ev.frame_metrics(np.zeros(3, dtype=int), np.zeros(4, dtype=int))


class TestPiw:
    def test_constant_sample_zero(self):
        assert ev.piw(np.full(10, 0.3)) == 0.0

    def test_hand_interpolation(self):
        values = np.array([0.1, 0.2, 0.3, 0.4, 0.5])
        assert ev.piw(values) == pytest.approx(0.38, abs=1e-12)
        assert np.percentile(values, 2.5) == pytest.approx(0.11)
        assert np.percentile(values, 97.5) == pytest.approx(0.49)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=30),
           st.randoms(use_true_random=False))
    def test_permutation_invariance(self, values, rnd):
        arr = np.asarray(values)
        shuffled = arr.copy()
        rnd.shuffle(shuffled)
        assert ev.piw(arr) == pytest.approx(ev.piw(shuffled), abs=1e-12)

    def test_nonnegative(self):
        g = np.random.default_rng(2)
        for _ in range(20):
            assert ev.piw(g.random(g.integers(2, 40))) >= 0.0

    def test_too_few_samples(self):
        with pytest.raises(PhasediffError):
            ev.piw(np.array([0.3]))


class TestPtst:
    def test_hand_computed_statistic(self):
        top1 = np.array([0.9, 0.8, 0.6, 0.9])
        top2 = top1 - np.array([0.5, 0.5, 0.3, 0.7])
        res = ev.ptst(top1, top2)
        assert res.t == pytest.approx(6.1237, abs=2e-4)
        assert res.rejected

    def test_sign_flips_when_swapped(self):
        g = np.random.default_rng(3)
        a, b = g.random(10), g.random(10)
        assert ev.ptst(a, b).t == pytest.approx(-ev.ptst(b, a).t, rel=1e-12)

    def test_symmetric_jitter_not_rejected(self):
        hits = 0
        for seed in range(20):
            g = np.random.default_rng(seed)
            base = g.random(100)
            jitter = g.standard_normal(100) * 1e-3
            if ev.ptst(base + jitter, base).rejected:
                hits += 1
        assert hits <= 4  # ~5% false-rejection rate at rho = 0.05

    def test_zero_variance_nonzero_mean(self):
        res = ev.ptst(np.full(5, 0.9), np.full(5, 0.1))
        assert res.rejected and res.p == 0.0

    def test_zero_variance_zero_mean_degenerate(self):
        with pytest.raises(PhasediffError):
            ev.ptst(np.full(5, 0.5), np.full(5, 0.5))

    def test_p_value_matches_tables(self):
        # two-sided critical values: t_{0.025, df}
        for df, crit in [(1, 12.706), (4, 2.776), (9, 2.262), (29, 2.045)]:
            assert ev.student_t_two_sided_p(crit, df) == pytest.approx(0.05, abs=2e-4)

    def test_p_value_matches_scipy(self):
        from scipy import stats

        g = np.random.default_rng(4)
        for _ in range(50):
            t = float(g.standard_normal() * 3)
            df = int(g.integers(2, 60))
            ours = ev.student_t_two_sided_p(abs(t), df)
            ref = 2.0 * stats.t.sf(abs(t), df)
            assert ours == pytest.approx(ref, abs=1e-10)

    def test_p_monotone_in_t(self):
        ts = np.linspace(0, 6, 25)
        ps = [ev.student_t_two_sided_p(t, 7) for t in ts]
        assert all(a >= b for a, b in zip(ps, ps[1:]))
        assert all(0.0 <= p <= 1.0 for p in ps)


def _traj_for(label, classes, m, sharp, seed=0):
    g = np.random.default_rng(seed)
    rows = g.standard_normal((m, classes)) * (0.1 if sharp else 1.5)
    rows[:, label] += 4.0 if sharp else 0.3
    return TrajectorySet(rows)


class TestUncertaintyReport:
    def test_zero_variance_perfect_predictor(self):
        classes = 3
        sets, labels = [], []
        for label in (0, 1, 2, 1):
            row = np.full((5, classes), -3.0)
            row[:, label] = 5.0
            sets.append(TrajectorySet(row))
            labels.append(label)
        rep = ev.uncertainty_report(sets, np.array(labels), classes)
        top = rep.rows[0]
        assert top["accuracy"] == 1.0
        assert top["piw_correct"] == 0.0
        assert top["piw_incorrect"] is None  # empty group reported absent

    def test_row_count_is_classes_plus_one(self):
        classes = 4
        sets = [_traj_for(i % classes, classes, 8, True, seed=i) for i in range(12)]
        labels = np.array([i % classes for i in range(12)])
        rep = ev.uncertainty_report(sets, labels, classes)
        assert len(rep.rows) == classes + 1
        assert rep.rows[0]["phase"] == "all"

    def test_sharp_predictions_narrower_than_diffuse(self):
        classes = 3
        sets, labels = [], []
        for i in range(30):
            label = i % classes
            sets.append(_traj_for(label, classes, 20, sharp=(i % 2 == 0), seed=i))
            labels.append(label)
        rep = ev.uncertainty_report(sets, np.array(labels), classes)
        top = rep.rows[0]
        if top["piw_incorrect"] is not None and top["piw_correct"] is not None:
            assert top["piw_correct"] < top["piw_incorrect"]

    def test_m_one_notice(self):
        sets = [TrajectorySet(np.array([[1.0, 0.0]]))]
        rep = ev.uncertainty_report(sets, np.array([0]), 2)
        assert rep.notice is not None
        assert rep.rows[0]["piw_correct"] is None

    def test_text_rendering_includes_all_row(self):
        sets = [_traj_for(0, 2, 6, True, seed=1)]
        rep = ev.uncertainty_report(sets, np.array([0]), 2)
        text = rep.to_text()
        assert "all" in text and "piw_correct" in text


class TestRibbon:
    def test_basic_rle(self):
        bands = ev.ribbon(np.array([0, 0, 1]))
        assert bands == [(0, 0, 2), (1, 2, 1)]

    def test_decode_roundtrip(self):
        g = np.random.default_rng(5)
        labels = np.repeat(g.integers(0, 5, size=10), g.integers(1, 6, size=10))
        assert np.array_equal(ev.ribbon_decode(ev.ribbon(labels)), labels)

    def test_total_length(self):
        labels = np.array([2, 2, 2, 0, 1, 1])
        assert sum(n for _, _, n in ev.ribbon(labels)) == labels.size

    def test_csv_shape(self):
        text = ev.ribbon_csv(ev.ribbon(np.array([0, 1, 1])))
        lines = text.strip().split("\n")
        assert lines[0] == "phase,start,length"
        assert len(lines) == 3

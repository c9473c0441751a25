import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchattn import metrics as mt


def oracle(preds, labels, n_classes):
    """Per-sample counting without a confusion matrix."""
    recalls, specs, f1s = [], [], []
    for c in range(n_classes):
        tp = sum(1 for p, y in zip(preds, labels) if y == c and p == c)
        fn = sum(1 for p, y in zip(preds, labels) if y == c and p != c)
        fp = sum(1 for p, y in zip(preds, labels) if y != c and p == c)
        tn = sum(1 for p, y in zip(preds, labels) if y != c and p != c)
        if tp + fn:
            recalls.append(tp / (tp + fn))
        if tn + fp:
            specs.append(tn / (tn + fp))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(recalls) / len(recalls), sum(specs) / len(specs), sum(f1s) / n_classes


class TestConfusion:
    def test_diagonal(self):
        cm = mt.confusion([0, 1, 2, 2], [0, 1, 2, 2], 3)
        assert np.array_equal(cm, np.diag([1, 1, 2]))

    def test_single(self):
        cm = mt.confusion([1], [0], 3)
        expected = np.zeros((3, 3), int)
        expected[0, 1] = 1
        assert np.array_equal(cm, expected)

    def test_counting_oracle(self):
        rng = np.random.default_rng(0)
        p, y = rng.integers(0, 5, 300), rng.integers(0, 5, 300)
        cm = mt.confusion(p, y, 5)
        for t in range(5):
            for q in range(5):
                assert cm[t, q] == sum(1 for a, b in zip(p, y) if b == t and a == q)
        assert cm.sum() == 300

    def test_out_of_range(self):
        with pytest.raises(mt.MetricsError):
            mt.confusion([0, 3], [0, 1], 3)

    def test_length_mismatch(self):
        with pytest.raises(mt.MetricsError):
            mt.confusion([0, 1], [0], 3)


class TestMetrics:
    cm = np.array([[9, 1], [5, 5]])

    def test_perfect(self):
        cm = np.diag([3, 4, 5])
        assert mt.mc_sensitivity(cm) == 1.0
        assert mt.mc_specificity(cm) == 1.0
        assert mt.macro_f1(cm) == 1.0

    def test_two_class_sensitivity(self):
        assert mt.mc_sensitivity(self.cm) == pytest.approx(0.7, abs=1e-15)

    def test_two_class_specificity(self):
        assert mt.mc_specificity(self.cm) == pytest.approx(0.7, abs=1e-15)

    def test_two_class_f1(self):
        p0, r0 = 9 / 14, 0.9
        p1, r1 = 5 / 6, 0.5
        expected = (2 * p0 * r0 / (p0 + r0) + 2 * p1 * r1 / (p1 + r1)) / 2
        assert mt.macro_f1(self.cm) == pytest.approx(expected, abs=1e-15)

    @pytest.mark.parametrize("n_classes", [2, 5, 7])
    def test_majority_predictor(self, n_classes):
        labels = np.repeat(np.arange(n_classes), [100] + [3] * (n_classes - 1))
        cm = mt.confusion(np.zeros_like(labels), labels, n_classes)
        assert mt.mc_sensitivity(cm) == pytest.approx(1 / n_classes, abs=1e-15)

    def test_zero_support_class_excluded(self):
        cm = np.array([[4, 0, 0], [1, 3, 0], [0, 0, 0]])
        assert mt.mc_sensitivity(cm) == pytest.approx((1 + 0.75) / 2)

    def test_empty(self):
        for f in (mt.mc_sensitivity, mt.mc_specificity, mt.macro_f1):
            with pytest.raises(mt.MetricsError):
                f(np.zeros((3, 3), int))

    def test_oracle_100_instances(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            c = int(rng.integers(2, 8))
            n = int(rng.integers(c, 200))
            y = rng.integers(0, c, n)
            p = np.where(rng.random(n) < 0.5, y, rng.integers(0, c, n))
            cm = mt.confusion(p, y, c)
            sens, spec, f1 = oracle(p.tolist(), y.tolist(), c)
            assert abs(mt.mc_sensitivity(cm) - sens) < 1e-12
            assert abs(mt.mc_specificity(cm) - spec) < 1e-12
            assert abs(mt.macro_f1(cm) - f1) < 1e-12

    @given(st.integers(2, 6), st.integers(0, 10_000))
    @settings(max_examples=60)
    def test_range_and_relabeling(self, c, seed):
        rng = np.random.default_rng(seed)
        cm = rng.integers(0, 20, size=(c, c))
        cm[0, 0] += 1
        perm = rng.permutation(c)
        permuted = cm[np.ix_(perm, perm)]
        for f in (mt.mc_sensitivity, mt.mc_specificity, mt.macro_f1):
            v = f(cm)
            assert 0.0 <= v <= 1.0
            assert f(permuted) == pytest.approx(v, abs=1e-12)

    def test_sensitivity_ignores_class_size(self):
        y = np.array([0, 0, 1, 1, 1, 2])
        p = np.array([0, 1, 1, 1, 0, 2])
        base = mt.mc_sensitivity(mt.confusion(p, y, 3))
        dup = y == 1
        y2 = np.concatenate([y, y[dup], y[dup]])
        p2 = np.concatenate([p, p[dup], p[dup]])
        assert mt.mc_sensitivity(mt.confusion(p2, y2, 3)) == pytest.approx(base, abs=1e-15)


def test_metrics_row_format(tmp_path):
    cm = np.array([[9, 1], [5, 5]])
    header = mt.metrics_header(["A", "B"])
    row = mt.metrics_row("run", "test", cm)
    assert header == ["run_id", "split", "mc_sensitivity", "mc_specificity", "macro_f1", "recall_A", "recall_B"]
    assert row[:3] == ["run", "test", "0.700000"]
    assert row[-2:] == ["0.900000", "0.500000"]
    mt.write_rows(tmp_path / "m.csv", header, [row])
    assert (tmp_path / "m.csv").read_text().splitlines()[1].startswith("run,test,0.700000,0.700000")

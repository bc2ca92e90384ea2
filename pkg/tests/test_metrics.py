import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from medfuse.heads import BBox
from medfuse.metrics import (REPORT_COLUMNS, EvalReport, append_report, bleu, classification_metrics,
                             confusion_counts, iou, lcs_length, mean_iou, per_class_scores, read_reports,
                             rouge_l)
from medfuse.tensor import Rng

N_INSTANCES = 1000


# -- brute-force oracles --------------------------------------------------------

def confusion_oracle(y_true, y_pred, k):
    matrix = [[0] * k for _ in range(k)]
    for t, p in zip(y_true, y_pred):
        matrix[t][p] += 1
    rows = []
    for c in range(k):
        tp = matrix[c][c]
        fp = sum(matrix[r][c] for r in range(k)) - tp
        fn = sum(matrix[c]) - tp
        rows.append((tp, fp, fn))
    return rows


def classification_oracle(y_true, y_pred, k):
    rows = confusion_oracle(y_true, y_pred, k)
    prec = [Fraction(tp, tp + fp) if tp + fp else Fraction(0) for tp, fp, _ in rows]
    rec = [Fraction(tp, tp + fn) if tp + fn else Fraction(0) for tp, _, fn in rows]
    f1 = [2 * p * r / (p + r) if p + r else Fraction(0) for p, r in zip(prec, rec)]
    acc = Fraction(sum(t == p for t, p in zip(y_true, y_pred)), len(y_true))
    return acc, sum(rec) / k, sum(prec) / k, sum(f1) / k


def iou_oracle(a, b):
    a = [Fraction(v) for v in (a.x1, a.y1, a.x2, a.y2)]
    b = [Fraction(v) for v in (b.x1, b.y1, b.x2, b.y2)]
    iw = max(Fraction(0), min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(Fraction(0), min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def clipped_matches(cand, ref, n):
    cand_grams = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
    ref_grams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
    return sum(min(cand_grams.count(g), ref_grams.count(g)) for g in set(cand_grams)), len(cand_grams)


def bleu_oracle(cand, ref, max_n):
    if not cand:
        return 0.0
    precisions = []
    for n in range(1, max_n + 1):
        m, total = clipped_matches(cand, ref, n)
        if n == 1:
            if m == 0:
                return 0.0
            precisions.append(Fraction(m, total))
        else:
            precisions.append(Fraction(m + 1, total + 1))
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(sum(math.log(p) for p in precisions) / max_n)


def lcs_oracle(a, b):
    """Longest common subsequence by enumerating subsequences of ``a``."""
    for size in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), size):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(tok in it for tok in sub):
                return size
    return 0


def rouge_oracle(cand, ref):
    lcs = lcs_oracle(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = Fraction(lcs, len(cand)), Fraction(lcs, len(ref))
    return float(2 * p * r / (p + r))


def random_box(rng):
    x = sorted(rng.uniform(2))
    y = sorted(rng.uniform(2))
    if x[0] == x[1] or y[0] == y[1]:
        return random_box(rng)
    return BBox(x[0], y[0], x[1], y[1])


def random_tokens(rng, lo=1):
    return [rng.below(6) for _ in range(lo + rng.below(9 - lo))]


# -- worked examples ------------------------------------------------------------

class TestWorkedExamples:
    def test_classification(self):
        acc, rec, prec, f1 = classification_metrics([1, 1, 1, 0, 0], [1, 1, 0, 0, 1], 2)
        assert acc == pytest.approx(0.6)
        assert rec == pytest.approx(7 / 12) and prec == pytest.approx(7 / 12)
        assert f1 == pytest.approx(0.58333, abs=1e-5)

    def test_one_class_predictions(self):
        acc, rec, _, _ = classification_metrics([0, 1, 0, 1], [1, 1, 1, 1], 2)
        assert acc == 0.5 and rec == 0.5

    def test_per_class(self):
        prec, rec, _ = per_class_scores(confusion_counts([1, 1, 1, 0, 0], [1, 1, 0, 0, 1], 2))
        assert rec == pytest.approx([1 / 2, 2 / 3]) and prec == pytest.approx([1 / 2, 2 / 3])

    def test_iou(self):
        a, b = BBox(0, 0, 0.5, 0.5), BBox(0.25, 0.25, 0.75, 0.75)
        assert iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
        assert iou(a, a) == 1.0
        assert iou(a, BBox(0.6, 0.6, 0.9, 0.9)) == 0.0
        assert mean_iou([(a, a), (a, b)]) == pytest.approx(0.571429, abs=1e-6)

    def test_bleu(self):
        assert bleu("a b c".split(), "a b d".split(), 1) == pytest.approx(2 / 3)
        assert bleu("a a".split(), "a b c".split(), 1) == pytest.approx(0.30327, abs=1e-5)
        assert bleu([], ["a"], 2) == 0.0

    def test_rouge(self):
        assert lcs_length("a b c".split(), "a c d".split()) == 2
        assert rouge_l("a b c".split(), "a c d".split()) == pytest.approx(2 / 3)

    def test_errors(self):
        with pytest.raises(ValueError):
            confusion_counts([0], [0, 1], 2)
        with pytest.raises(ValueError):
            confusion_counts([], [], 2)
        with pytest.raises(ValueError):
            confusion_counts([2], [0], 2)
        with pytest.raises(ValueError):
            mean_iou([])
        with pytest.raises(ValueError):
            bleu(["a"], [], 2)
        with pytest.raises(ValueError):
            rouge_l([], ["a"])


# -- oracle equivalence ---------------------------------------------------------

class TestOracleEquivalence:
    def test_classification_counts_exact(self):
        rng = Rng(101)
        for _ in range(N_INSTANCES):
            k = 2 + rng.below(3)
            n = 1 + rng.below(20)
            y_true = [rng.below(k) for _ in range(n)]
            y_pred = [rng.below(k) for _ in range(n)]
            counts = confusion_counts(y_true, y_pred, k)
            assert list(zip(counts.tp, counts.fp, counts.fn)) == confusion_oracle(y_true, y_pred, k)
            assert all(tn >= 0 for tn in counts.tn)
            got = classification_metrics(y_true, y_pred, k)
            for g, want in zip(got, classification_oracle(y_true, y_pred, k)):
                assert abs(g - float(want)) < 1e-12

    def test_iou(self):
        rng = Rng(202)
        for _ in range(N_INSTANCES):
            a, b = random_box(rng), random_box(rng)
            assert abs(iou(a, b) - float(iou_oracle(a, b))) < 1e-12
            assert iou(a, b) == iou(b, a)

    def test_bleu(self):
        rng = Rng(303)
        for _ in range(N_INSTANCES):
            cand, ref = random_tokens(rng, 0), random_tokens(rng)
            max_n = 1 + rng.below(4)
            assert abs(bleu(cand, ref, max_n) - bleu_oracle(cand, ref, max_n)) < 1e-12

    def test_rouge_and_lcs(self):
        rng = Rng(404)
        for _ in range(N_INSTANCES):
            cand, ref = random_tokens(rng), random_tokens(rng)
            assert lcs_length(cand, ref) == lcs_oracle(cand, ref)
            assert abs(rouge_l(cand, ref) - rouge_oracle(cand, ref)) < 1e-12


# -- properties -----------------------------------------------------------------

tokens = st.lists(st.integers(0, 5), min_size=1, max_size=8)


class TestProperties:
    @given(tokens, tokens, st.integers(1, 4))
    def test_ranges(self, cand, ref, max_n):
        assert 0.0 <= bleu(cand, ref, max_n) <= 1.0
        assert 0.0 <= rouge_l(cand, ref) <= 1.0

    @given(tokens, tokens)
    def test_perfect_score_iff_equal(self, cand, ref):
        # with max_n = len(reference) a full score forces the whole sequence to match
        n = len(ref)
        assert (bleu(cand, ref, n) == 1.0) == (cand == ref)
        assert (rouge_l(cand, ref) == 1.0) == (cand == ref)

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)),
                    min_size=1, max_size=5))
    def test_iou_range(self, raw):
        boxes = [BBox.from_prediction(r) for r in raw]
        for a in boxes:
            for b in boxes:
                assert 0.0 <= iou(a, b) <= 1.0


class TestReportRows:
    def test_row_round_trip(self):
        rep = EvalReport("m", 0.5, 0.25, 0.1, 1 / 3, None, 0.7, 0.0)
        row = rep.to_row()
        assert row[5] == "NA"
        assert EvalReport.from_row(row) == rep

    def test_range_validation(self):
        with pytest.raises(ValueError, match="accuracy"):
            EvalReport("m", accuracy=1.5)

    def test_append_and_read(self, tmp_path):
        path = tmp_path / "r.csv"
        append_report(path, EvalReport("a", 1.0))
        append_report(path, EvalReport("b", bleu=0.5))
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(REPORT_COLUMNS) and len(lines) == 3
        assert [r.model_name for r in read_reports(path)] == ["a", "b"]

    def test_read_errors_name_line(self, tmp_path):
        path = tmp_path / "r.csv"
        path.write_text(",".join(REPORT_COLUMNS) + "\nm,0.5,NA\n")
        with pytest.raises(ValueError, match="line 2"):
            read_reports(path)

import re
import xml.etree.ElementTree as ET

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medfuse.metrics import REPORT_COLUMNS, EvalReport
from medfuse.report import bar_chart, markdown_table

SVG_NS = "{http://www.w3.org/2000/svg}"


def sample_reports():
    return [EvalReport("image-gated", 0.5, 0.5, 0.25, 0.33, 0.02, 0.66, 0.73),
            EvalReport("text-gated", 0.46, 0.46, 0.46, 0.46, 0.85, 0.92, 0.92),
            EvalReport("both-gated", 1.0, 1.0, 1.0, 1.0, 0.91, 1.0, 1.0)]


class TestMarkdown:
    def test_header_notes_macro_averaging(self):
        text = markdown_table(sample_reports())
        assert text.splitlines()[0].startswith("Recall, precision and F1 are macro-averaged")

    def test_shape(self):
        lines = [ln for ln in markdown_table(sample_reports()).splitlines() if ln.startswith("|")]
        assert len(lines) == 2 + 3
        assert all(ln.count("|") == len(REPORT_COLUMNS) + 1 for ln in lines)

    def test_na_cells(self):
        text = markdown_table([EvalReport("m", accuracy=0.5)])
        row = text.splitlines()[-1]
        assert row.count("NA") == len(REPORT_COLUMNS) - 2
        assert "0.5000" in row

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.text(alphabet="abcxyz-", min_size=1, max_size=8), min_size=1, max_size=6))
    def test_rows_follow_input_order(self, names):
        text = markdown_table([EvalReport(n, accuracy=0.1) for n in names])
        rows = text.splitlines()[4:]
        assert [r.split("|")[1].strip() for r in rows] == names


class TestBarChart:
    def test_well_formed_with_one_group_per_metric(self, tmp_path):
        path = tmp_path / "c.svg"
        bar_chart(sample_reports(), path)
        root = ET.parse(path).getroot()
        ids = [g.get("id") for g in root.iter(f"{SVG_NS}g") if (g.get("id") or "").startswith("bar-")]
        metrics = {re.match(r"bar-(\w+)-\d+$", i).group(1) for i in ids}
        assert metrics == set(REPORT_COLUMNS[1:])
        assert len(ids) == 3 * len(metrics)

    def test_na_bars_omitted(self, tmp_path):
        path = tmp_path / "c.svg"
        bar_chart([EvalReport("m", accuracy=0.5, bleu=0.2)], path)
        text = path.read_text()
        assert 'id="bar-accuracy-0"' in text and 'id="bar-bleu-0"' in text
        assert "bar-mean_iou-0" not in text

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        bar_chart(sample_reports(), a)
        bar_chart(sample_reports(), b)
        assert a.read_bytes() == b.read_bytes()


class TestEvalReportValidation:
    @pytest.mark.parametrize("value", [-0.1, 1.5])
    def test_out_of_range(self, value):
        with pytest.raises(ValueError):
            EvalReport("m", accuracy=value)

import csv
import json
from pathlib import Path

import pytest

from medfuse.cli import main
from medfuse.fusion import FUSION_KINDS
from medfuse.metrics import NA, REPORT_COLUMNS

GOLDEN = Path(__file__).resolve().parent.parent / "golden" / "case0.jsonl"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert run("gen-data", "--out", out, "--cases", 8, "--grid", 8, "--seed", 3) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(corpus, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    assert run("train", "--data", corpus / "train.jsonl", "--modality", "both", "--fusion", "gated",
               "--epochs", 3, "--out", ckpt) == 0
    return ckpt


class TestGenData:
    def test_golden_file_reproduced(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--cases", 1, "--grid", 8, "--mask-grid", 4,
                   "--noise", 0, "--seed", 0) == 0
        assert (tmp_path / "train.jsonl").read_bytes() == GOLDEN.read_bytes()

    def test_rerun_is_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            assert run("gen-data", "--out", tmp_path / d, "--cases", 100, "--grid", 8, "--seed", 42) == 0
        for split in ("train", "val", "test"):
            assert (tmp_path / "a" / f"{split}.jsonl").read_bytes() == \
                (tmp_path / "b" / f"{split}.jsonl").read_bytes()

    def test_default_split_sizes(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--cases", 100, "--grid", 8) == 0
        sizes = [len((tmp_path / f"{s}.jsonl").read_text().splitlines()) for s in ("train", "val", "test")]
        assert sizes == [70, 15, 15]

    def test_manifest_written(self, corpus):
        doc = json.loads((corpus / "manifest.json").read_text())
        assert doc["command"] == "gen-data"
        assert doc["seed"] == 3 and doc["config"]["num_cases"] == 8
        assert set(doc["outputs"]) == {"train", "val", "test"}
        assert doc["duration_s"] >= 0

    def test_zero_cases_is_usage_error(self, tmp_path, capsys):
        assert run("gen-data", "--out", tmp_path, "--cases", 0) == 2
        assert "--cases" in capsys.readouterr().err

    def test_mask_grid_must_divide(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--cases", 4, "--grid", 8, "--mask-grid", 3) == 2

    def test_unknown_flag(self, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--bogus") == 2

    def test_unwritable_output_is_io_error(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run("gen-data", "--out", blocker / "sub", "--cases", 2, "--grid", 8) == 1


class TestTrain:
    def test_outputs_and_loss_rows(self, checkpoint):
        assert checkpoint.exists()
        rows = list(csv.reader(checkpoint.with_suffix(".loss.csv").open()))
        assert rows[0] == ["epoch", "mean_loss"]
        assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
        doc = json.loads(checkpoint.with_suffix(".manifest.json").read_text())
        assert doc["command"] == "train" and doc["config"]["epochs"] == 3
        assert doc["config"]["fusion"] == "gated"

    def test_golden_corpus_trains(self, tmp_path):
        ckpt = tmp_path / "g.ckpt"
        assert run("train", "--data", GOLDEN, "--modality", "both", "--fusion", "gated",
                   "--epochs", 4, "--out", ckpt) == 0
        assert len(ckpt.with_suffix(".loss.csv").read_text().splitlines()) == 1 + 4

    def test_same_flags_same_loss_csv(self, corpus, tmp_path):
        for name in ("a", "b"):
            assert run("train", "--data", corpus / "train.jsonl", "--epochs", 2, "--seed", 7,
                       "--out", tmp_path / f"{name}.ckpt") == 0
        assert (tmp_path / "a.loss.csv").read_bytes() == (tmp_path / "b.loss.csv").read_bytes()

    def test_unknown_fusion_lists_valid_names(self, corpus, tmp_path, capsys):
        assert run("train", "--data", corpus / "train.jsonl", "--fusion", "nope",
                   "--out", tmp_path / "m.ckpt") == 2
        err = capsys.readouterr().err
        assert all(name in err for name in FUSION_KINDS)

    def test_missing_data_file(self, tmp_path):
        assert run("train", "--data", tmp_path / "absent.jsonl", "--out", tmp_path / "m.ckpt") == 1

    def test_config_file_and_flag_precedence(self, corpus, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 5, "lr": 0.02, "fusion": "concat"}))
        ckpt = tmp_path / "m.ckpt"
        assert run("train", "--data", corpus / "train.jsonl", "--config", cfg, "--epochs", 1,
                   "--out", ckpt) == 0
        doc = json.loads(ckpt.with_suffix(".manifest.json").read_text())
        assert doc["config"]["epochs"] == 1
        assert doc["config"]["lr"] == 0.02 and doc["config"]["fusion"] == "concat"

    @pytest.mark.parametrize("content", ["not json", "[1, 2]", '{"d_z": -1}', '{"nonsense": 1}'])
    def test_bad_config_is_usage_error(self, corpus, tmp_path, content):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(content)
        assert run("train", "--data", corpus / "train.jsonl", "--config", cfg,
                   "--out", tmp_path / "m.ckpt") == 2

    def test_negative_epochs(self, corpus, tmp_path):
        assert run("train", "--data", corpus / "train.jsonl", "--epochs", -1,
                   "--out", tmp_path / "m.ckpt") == 2


class TestEval:
    def test_appends_one_row_per_call(self, corpus, checkpoint, tmp_path):
        out = tmp_path / "r.csv"
        for n in (1, 2, 3):
            assert run("eval", "--data", corpus / "test.jsonl", "--ckpt", checkpoint, "--out", out) == 0
            rows = list(csv.reader(out.open()))
            assert tuple(rows[0]) == REPORT_COLUMNS and len(rows) == 1 + n
        doc = json.loads(out.with_suffix(".manifest.json").read_text())
        assert doc["command"] == "eval" and "per_class" in doc["details"]

    def test_classify_only_marks_na(self, corpus, checkpoint, tmp_path):
        out = tmp_path / "r.csv"
        assert run("eval", "--data", corpus / "train.jsonl", "--ckpt", checkpoint,
                   "--tasks", "classify", "--out", out) == 0
        row = list(csv.reader(out.open()))[1]
        assert row[0] == "both-gated"
        assert all(v != NA for v in row[1:5])
        assert row[5:] == [NA, NA, NA]

    def test_rerun_row_is_identical(self, corpus, checkpoint, tmp_path):
        out = tmp_path / "r.csv"
        for _ in range(2):
            run("eval", "--data", corpus / "test.jsonl", "--ckpt", checkpoint, "--out", out)
        rows = out.read_text().splitlines()
        assert rows[1] == rows[2]

    def test_unknown_task(self, corpus, checkpoint, tmp_path, capsys):
        assert run("eval", "--data", corpus / "train.jsonl", "--ckpt", checkpoint,
                   "--tasks", "classify,segment", "--out", tmp_path / "r.csv") == 2
        assert "segment" in capsys.readouterr().err

    def test_unreadable_checkpoint(self, corpus, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        assert run("eval", "--data", corpus / "train.jsonl", "--ckpt", bad,
                   "--out", tmp_path / "r.csv") == 1
        assert run("eval", "--data", corpus / "train.jsonl", "--ckpt", tmp_path / "absent.ckpt",
                   "--out", tmp_path / "r.csv") == 1


class TestGradcheck:
    def test_one_line_per_group_and_pass(self, capsys):
        assert run("gradcheck", "--seeds", 1) == 0
        out = capsys.readouterr()
        lines = out.out.splitlines()
        assert lines and all(line.endswith("\tok") for line in lines)
        assert f"all {len(lines)} groups passed" in out.err

    def test_zero_tolerance_fails(self, capsys):
        assert run("gradcheck", "--seeds", 1, "--tol", 0) == 1
        assert "failed" in capsys.readouterr().err

    def test_bad_flags(self):
        assert run("gradcheck", "--seeds", 0) == 2
        assert run("gradcheck", "--eps", 0) == 2


class TestReport:
    @pytest.fixture
    def csv_path(self, tmp_path):
        path = tmp_path / "in.csv"
        rows = [",".join(REPORT_COLUMNS),
                "image-gated,0.5,0.5,0.25,0.33,0.1,0.6,0.7",
                "text-gated,0.5,0.5,0.25,0.33,0.4,0.8,0.8",
                "both-gated,1.0,1.0,1.0,1.0,0.9,1.0,1.0"]
        path.write_text("\n".join(rows) + "\n")
        return path

    def test_markdown_rows_in_input_order(self, csv_path, tmp_path):
        md = tmp_path / "t.md"
        assert run("report", "--in", csv_path, "--out-md", md) == 0
        body = [ln for ln in md.read_text().splitlines() if ln.startswith("| ") and "---" not in ln][1:]
        assert [ln.split("|")[1].strip() for ln in body] == ["image-gated", "text-gated", "both-gated"]
        assert json.loads(md.with_suffix(".manifest.json").read_text())["command"] == "report"

    def test_svg_written(self, csv_path, tmp_path):
        svg = tmp_path / "t.svg"
        assert run("report", "--in", csv_path, "--out-md", tmp_path / "t.md", "--out-svg", svg) == 0
        assert svg.read_text().lstrip().startswith("<?xml")

    def test_empty_csv(self, tmp_path):
        empty = tmp_path / "e.csv"
        empty.write_text("")
        assert run("report", "--in", empty, "--out-md", tmp_path / "t.md") == 1

    def test_malformed_row_names_line(self, csv_path, tmp_path, capsys):
        with csv_path.open("a") as fh:
            fh.write("broken,0.5\n")
        assert run("report", "--in", csv_path, "--out-md", tmp_path / "t.md") == 1
        assert "line 5" in capsys.readouterr().err


class TestParser:
    def test_no_command(self):
        assert run() == 2

    def test_version(self, capsys):
        assert run("--version") == 0

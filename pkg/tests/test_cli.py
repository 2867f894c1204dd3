import json
from pathlib import Path

import pytest

from fiadd.cli import main


def read_jsonl(path):
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


def write_config(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


TRAIN_INI = """
[paths]
dataset = {dataset}
report_dir = {report_dir}

[train]
epochs = 3
k = 2
m = 2
d = 4
d_proj = 3
eval_every = 1
seeds = 1,4
learning_rate = 0.05
minority_class = 2
warmup_epochs = 1
"""


@pytest.fixture
def dataset_file(tmp_path):
    out = tmp_path / "data"
    out.mkdir()
    code = main(["synth", "--report-dir", str(out), "--out", "synthetic.jsonl",
                 "--seed", "1", "--count", "15", "--no-timestamp"])
    assert code == 0
    return out / "synthetic.jsonl"


class TestSynth:
    def test_default_counts(self, tmp_path, capsys):
        code = main(["synth", "--report-dir", str(tmp_path), "--seed", "1"])
        assert code == 0
        lines = (tmp_path / "synthetic.jsonl").read_text().splitlines()
        assert len(lines) == 151  # header + 150 records

    def test_zero_count_rejected(self, tmp_path, capsys):
        code = main(["synth", "--report-dir", str(tmp_path), "--count", "0"])
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for sub in (a, b):
            sub.mkdir()
            assert main(["synth", "--report-dir", str(sub), "--seed", "9"]) == 0
        assert (a / "synthetic.jsonl").read_bytes() == (b / "synthetic.jsonl").read_bytes()

    def test_custom_class_sections(self, tmp_path):
        cfg = write_config(tmp_path / "synth.ini", """
[synth]
out = two.jsonl
seed = 3
class_names = neg,pos
implicit_labels =

[class.neg]
count = 5
mean = 0,0
cov = 1,1

[class.pos]
count = 7
mean = 4,0
cov = 1,1
""")
        assert main(["synth", "--config", cfg, "--report-dir", str(tmp_path)]) == 0
        lines = (tmp_path / "two.jsonl").read_text().splitlines()
        assert len(lines) == 13


class TestTrain:
    def test_checkpoints_and_summary(self, tmp_path, dataset_file, capsys):
        report = tmp_path / "run"
        cfg = write_config(tmp_path / "train.ini",
                           TRAIN_INI.format(dataset=dataset_file, report_dir=report))
        assert main(["train", "--config", cfg, "--no-timestamp"]) == 0
        assert (report / "checkpoint.seed1.json").exists()
        assert (report / "checkpoint.seed4.json").exists()
        summary = (report / "summary.txt").read_text()
        assert "best seed:" in summary
        rows = read_jsonl(report / "summary.jsonl")
        assert {r.get("seed") for r in rows if "seed" in r} == {1, 4}

    def test_epochs_zero(self, tmp_path, dataset_file):
        report = tmp_path / "run0"
        cfg = write_config(tmp_path / "train.ini",
                           TRAIN_INI.format(dataset=dataset_file, report_dir=report))
        assert main(["train", "--config", cfg, "--no-timestamp", "--train.epochs", "0",
                     "--train.seeds", "1"]) == 0
        history = read_jsonl(report / "history.seed1.jsonl")
        assert len(history) == 1 and history[0]["epoch"] == 0

    def test_rerun_byte_identical(self, tmp_path, dataset_file):
        outputs = []
        for name in ("r1", "r2"):
            report = tmp_path / name
            cfg = write_config(tmp_path / f"{name}.ini",
                               TRAIN_INI.format(dataset=dataset_file, report_dir=report))
            assert main(["train", "--config", cfg, "--no-timestamp"]) == 0
            outputs.append(report)
        for fname in ("checkpoint.seed1.json", "history.seed1.jsonl", "summary.txt"):
            assert (outputs[0] / fname).read_bytes() == (outputs[1] / fname).read_bytes()

    def test_variant_override(self, tmp_path, dataset_file):
        report = tmp_path / "ace"
        cfg = write_config(tmp_path / "train.ini",
                           TRAIN_INI.format(dataset=dataset_file, report_dir=report))
        assert main(["train", "--config", cfg, "--no-timestamp",
                     "--train.variant", "ace_only", "--train.seeds", "1"]) == 0
        history = read_jsonl(report / "history.seed1.jsonl")
        assert all(rec["add_loss"] is None for rec in history)


@pytest.fixture
def trained_run(tmp_path, dataset_file):
    report = tmp_path / "trained"
    cfg = write_config(tmp_path / "train.ini",
                       TRAIN_INI.format(dataset=dataset_file, report_dir=report))
    assert main(["train", "--config", cfg, "--no-timestamp", "--train.seeds", "1"]) == 0
    return report / "checkpoint.seed1.json", dataset_file


class TestEval:
    def test_three_way_rows(self, tmp_path, trained_run, capsys):
        ckpt, dataset = trained_run
        report = tmp_path / "eval3"
        code = main(["eval", "--report-dir", str(report), "--no-timestamp",
                     "--paths.checkpoint", str(ckpt), "--paths.dataset", str(dataset)])
        assert code == 0
        text = (report / "metrics.txt").read_text()
        for name in ("Macro", "non-hate", "explicit", "implicit"):
            assert name in text

    def test_two_way_merge(self, tmp_path, trained_run):
        ckpt, dataset = trained_run
        report = tmp_path / "eval2"
        code = main(["eval", "--report-dir", str(report), "--no-timestamp",
                     "--paths.checkpoint", str(ckpt), "--paths.dataset", str(dataset),
                     "--eval.merge", "1:1,2:1", "--eval.merged_names", "0:N-Hate,1:Hate"])
        assert code == 0
        text = (report / "metrics.txt").read_text()
        assert "Macro" in text and "N-Hate" in text and "Hate" in text
        assert "implicit" not in text

    def test_nearest_cluster_mode(self, tmp_path, trained_run):
        ckpt, dataset = trained_run
        report = tmp_path / "evaln"
        code = main(["eval", "--report-dir", str(report), "--no-timestamp", "--mode",
                     "nearest-cluster", "--paths.checkpoint", str(ckpt),
                     "--paths.dataset", str(dataset)])
        assert code == 0
        rows = read_jsonl(report / "metrics.jsonl")
        assert all(r["mode"] == "nearest-cluster" for r in rows)

    def test_best_params_mode(self, tmp_path, trained_run):
        ckpt, dataset = trained_run
        report = tmp_path / "evalbest"
        code = main(["eval", "--report-dir", str(report), "--no-timestamp",
                     "--params", "best", "--paths.checkpoint", str(ckpt),
                     "--paths.dataset", str(dataset)])
        assert code == 0

    def test_best_params_rejects_nearest_cluster(self, tmp_path, trained_run, capsys):
        ckpt, dataset = trained_run
        code = main(["eval", "--report-dir", str(tmp_path / "evalx"), "--no-timestamp",
                     "--params", "best", "--mode", "nearest-cluster",
                     "--paths.checkpoint", str(ckpt), "--paths.dataset", str(dataset)])
        assert code == 2

    def test_dimension_mismatch_is_validation_error(self, tmp_path, trained_run, capsys):
        ckpt, _ = trained_run
        bad = tmp_path / "bad.jsonl"
        bad.write_text(
            '{"d_in":3,"class_names":["a","b","c"],"implicit_labels":[2]}\n'
            '{"id":"x","label":0,"vector":[0.0,0.0,0.0]}\n', encoding="utf-8")
        code = main(["eval", "--report-dir", str(tmp_path / "evalbad"), "--no-timestamp",
                     "--paths.checkpoint", str(ckpt), "--paths.dataset", str(bad)])
        assert code == 2


class TestAnalyze:
    def test_raw_dataset_report(self, tmp_path, dataset_file):
        report = tmp_path / "an"
        code = main(["analyze", "--report-dir", str(report), "--no-timestamp",
                     "--paths.dataset", str(dataset_file)])
        assert code == 0
        text = (report / "analysis.txt").read_text()
        for col in ("ALD N-E", "ALD N-I", "ACLD N-E", "ACLD N-I"):
            assert col in text

    def test_with_checkpoint_sections(self, tmp_path, trained_run):
        ckpt, dataset = trained_run
        report = tmp_path / "anfull"
        code = main(["analyze", "--report-dir", str(report), "--no-timestamp",
                     "--paths.dataset", str(dataset), "--paths.checkpoint", str(ckpt)])
        assert code == 0
        text = (report / "analysis.txt").read_text()
        assert "subcluster silhouettes" in text
        assert "implicit vs implied silhouette" in text
        assert (report / "latent.jsonl").exists()

    def test_no_implied_vectors_notice(self, tmp_path, trained_run):
        ckpt, dataset = trained_run
        # strip implied vectors
        lines = Path(dataset).read_text().splitlines()
        stripped = [lines[0]]
        for ln in lines[1:]:
            rec = json.loads(ln)
            rec.pop("implied_vector", None)
            stripped.append(json.dumps(rec))
        bare = tmp_path / "bare.jsonl"
        bare.write_text("\n".join(stripped) + "\n", encoding="utf-8")
        report = tmp_path / "annotice"
        code = main(["analyze", "--report-dir", str(report), "--no-timestamp",
                     "--paths.dataset", str(bare), "--paths.checkpoint", str(ckpt)])
        assert code == 0
        assert "skipped" in (report / "analysis.txt").read_text()


class TestSweep:
    def test_gamma_grid(self, tmp_path, dataset_file):
        report = tmp_path / "sweep"
        cfg = write_config(tmp_path / "sweep.ini", f"""
[paths]
dataset = {dataset_file}
report_dir = {report}

[train]
epochs = 2
k = 2
m = 2
d = 4
d_proj = 3
eval_every = 1
seeds = 1
minority_class = 2
warmup_epochs = 1

[sweep]
param = train.gamma
values = 1,2,3
""")
        assert main(["sweep", "--config", cfg, "--no-timestamp"]) == 0
        rows = read_jsonl(report / "sweep.jsonl")
        assert len(rows) == 3
        assert sum(r["argmax"] for r in rows) == 1

    def test_empty_grid_rejected(self, tmp_path, dataset_file, capsys):
        cfg = write_config(tmp_path / "sweep.ini", f"""
[paths]
dataset = {dataset_file}

[sweep]
param = train.gamma
values =
""")
        assert main(["sweep", "--config", cfg, "--no-timestamp"]) == 2


class TestGradcheckCommand:
    def test_passes(self, tmp_path, capsys):
        code = main(["gradcheck", "--report-dir", str(tmp_path), "--no-timestamp",
                     "--gradcheck.batches", "2"])
        assert code == 0
        rows = read_jsonl(tmp_path / "gradcheck.jsonl")
        assert len(rows) == 6
        assert all(r["passed"] for r in rows)

    def test_corruption_fails_named_op(self, tmp_path, capsys):
        code = main(["gradcheck", "--report-dir", str(tmp_path), "--no-timestamp",
                     "--gradcheck.batches", "1", "--corrupt", "combined_loss"])
        assert code == 1
        out = capsys.readouterr().out
        assert "combined_loss" in out and "FAIL" in out


class TestOverrides:
    def test_unknown_flag_rejected(self, tmp_path, capsys):
        assert main(["synth", "--report-dir", str(tmp_path), "--bogus", "1"]) == 2

    def test_missing_config_file(self, capsys):
        assert main(["train", "--config", "/does/not/exist.ini"]) == 2

import json
import subprocess
import sys

import pytest

from pyranet.cli import count_table, main
from pyranet.variance import parse_report

TINY_TRAIN = ["--stacks", "1", "--depth", "1", "--channels", "4", "--epochs", "1", "--train-count", "8",
              "--val-count", "4"]


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGenData:
    def test_writes_and_is_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert main(["gen-data", "--count", "6", "--val-count", "2", "--seed", "1", "--out",
                         str(tmp_path / d)]) == 0
        a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
        assert a == b
        idx = json.loads(a["index.json"])
        assert "train" in json.dumps(idx) and len(a["train.f32"]) == 6 * 64 * 64 * 4

    def test_zero_count_is_usage_error(self, tmp_path, capsys):
        assert main(["gen-data", "--count", "0", "--out", str(tmp_path)]) == 1
        assert "count" in capsys.readouterr().err

    def test_missing_required_flag(self):
        assert main(["gen-data", "--out", "x"]) == 1


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", *TINY_TRAIN, "--prm", "Bstar", "--levels", "2", "--init", "branch",
                 "--out", str(out)]) == 0
    return out


class TestTrainEval:
    def test_run_directory_is_self_describing(self, run):
        cfg = json.loads((run / "config.json").read_text())
        assert cfg["model"]["block"]["variant"] == "Bstar" and cfg["init"]["kind"] == "branch_aware"
        assert "numpy" in cfg["versions"]
        assert (run / "metrics.csv").read_text().startswith("epoch,lr,loss_stack0")
        assert (run / "manifest.json").is_file()

    def test_eval_twice_identical(self, run, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(run), "--out", str(tmp_path / "r1.json")]) == 0
        assert main(["eval", "--checkpoint", str(run), "--out", str(tmp_path / "r2.json")]) == 0
        assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()
        rep = json.loads((tmp_path / "r1.json").read_text())
        assert rep["samples"] == 4 and 0 <= rep["mean_pck"] <= 1

    def test_eval_on_dataset_directory(self, run, tmp_path):
        main(["gen-data", "--count", "3", "--val-count", "0", "--out", str(tmp_path / "d")])
        assert main(["eval", "--checkpoint", str(run), "--data", str(tmp_path / "d"), "--split", "train"]) == 0

    def test_corrupted_blob_rejected(self, run, tmp_path, capsys):
        bad = tmp_path / "bad"
        bad.mkdir()
        for f in ("manifest.json", "config.json"):
            (bad / f).write_bytes((run / f).read_bytes())
        (bad / "weights.f32").write_bytes((run / "weights.f32").read_bytes()[:-4])
        assert main(["eval", "--checkpoint", str(bad)]) == 2
        assert "manifest expects" in capsys.readouterr().err

    def test_missing_dataset_path(self, tmp_path, capsys):
        assert main(["train", *TINY_TRAIN, "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) != 0
        assert "does not exist" in capsys.readouterr().err

    def test_baseline_flag(self, tmp_path):
        assert main(["train", *TINY_TRAIN, "--prm", "none", "--no-augment", "--out", str(tmp_path)]) == 0
        cfg = json.loads((tmp_path / "config.json").read_text())
        assert cfg["model"]["block"] is None and cfg["optimization"]["augment"] is False

    def test_config_file_with_flag_override(self, run, tmp_path):
        out = tmp_path / "again"
        assert main(["train", "--config", str(run / "config.json"), "--seed", "3", "--out", str(out)]) == 0
        cfg = json.loads((out / "config.json").read_text())
        assert cfg["seed"] == 3 and cfg["model"]["block"]["variant"] == "Bstar"


class TestProbe:
    def test_residual_twenty_rows_nondecreasing(self, tmp_path, capsys):
        assert main(["probe", "--scenario", "residual", "--depth", "20", "--trials", "30", "--out",
                     str(tmp_path)]) == 0
        tr = parse_report(capsys.readouterr().out)
        v = [r.variance for r in tr.records]
        assert len(v) == 20 and all(b >= 0.99 * a for a, b in zip(v, v[1:]))
        assert (tmp_path / "variance.csv").is_file() and (tmp_path / "variance.json").is_file()

    def test_chain_msr_vs_branch_contrast(self, capsys):
        res = {}
        for init in ("msr", "branch"):
            assert main(["probe", "--scenario", "chain", "--init", init, "--alpha", "0.5", "--trials", "20",
                         "--init-compromise", "forward"]) == 0
            v = [r.variance for r in parse_report(capsys.readouterr().out).records]
            res[init] = v[-1] / v[0]
        assert res["msr"] > 1000 and 0.25 <= res["branch"] <= 4

    def test_unknown_scenario(self, capsys):
        assert main(["probe", "--scenario", "spiral"]) == 1

    def test_hourglass_sum(self, capsys):
        assert main(["probe", "--scenario", "hourglass-sum", "--stacks", "1", "--depth", "2", "--channels",
                     "4", "--trials", "2"]) == 0
        assert len(parse_report(capsys.readouterr().out).records) == 2


class TestCount:
    def test_six_rows_positive(self, tmp_path, capsys):
        assert main(["count", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "counts.txt").read_text().splitlines()
        assert [l.split()[0] for l in lines[1:]] == ["residual", "A", "B", "Bstar", "C", "D"]

    def test_bstar_below_b(self):
        rows = {r[0]: r for r in count_table()}
        assert all(r[1] > 0 and r[3] > 0 for r in rows.values())
        assert rows["Bstar"][1] < rows["B"][1]
        assert rows["B"][2] == pytest.approx(rows["B"][1] / rows["residual"][1] - 1)


def test_console_script_exit_code():
    r = subprocess.run([sys.executable, "-m", "pyranet.cli", "gen-data", "--count", "0", "--out", "unused"],
                       capture_output=True)
    assert r.returncode == 1
    r = subprocess.run([sys.executable, "-m", "pyranet.cli", "frobnicate"], capture_output=True)
    assert r.returncode == 1


def test_thread_env_validated(monkeypatch):
    monkeypatch.setenv("PYRANET_THREADS", "zero")
    assert main(["count"]) == 1
    monkeypatch.setenv("PYRANET_THREADS", "1")
    assert main(["count"]) == 0

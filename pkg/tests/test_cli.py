import json

import pytest

import cli
from Modules.config import OUTPUT_ROOT_ENV


@pytest.fixture
def config_file(tmp_path, config_factory, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "runs"))
    config = config_factory()
    path = tmp_path / "naive.json"
    path.write_text(json.dumps(config.resolved()))
    return path, config


def experiment(tmp_path, config):
    return tmp_path / "runs" / config.digest()


class TestValidate:
    def test_valid_config(self, config_file, capsys):
        path, config = config_file
        assert cli.main(["validate", str(path)]) == 0
        assert config.digest() in capsys.readouterr().out

    def test_unknown_key_exits_two(self, tmp_path, capsys):
        path = tmp_path / "typo.json"
        path.write_text(json.dumps({"schedule": {"epocs": 3}}))
        assert cli.main(["validate", str(path)]) == 2
        assert "epocs" in capsys.readouterr().err

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert cli.main(["validate", str(path)]) == 2

    def test_missing_file(self, tmp_path):
        assert cli.main(["validate", str(tmp_path / "nope.json")]) == 1


class TestRun:
    def test_run_writes_artifacts(self, config_file, tmp_path, capsys):
        path, config = config_file
        assert cli.main(["run", str(path)]) == 0
        exp = experiment(tmp_path, config)
        assert (exp / "config.json").exists()
        assert (exp / "metrics_mean.json").exists()
        assert (exp / "0" / "cka.csv").exists()
        assert "Naive" in capsys.readouterr().out

    def test_second_run_refuses_without_force(self, config_file, capsys):
        path, _ = config_file
        assert cli.main(["run", str(path)]) == 0
        assert cli.main(["run", str(path)]) == 1
        assert "artifacts exist" in capsys.readouterr().err
        assert cli.main(["run", str(path), "--force"]) == 0


class TestAnalysis:
    def test_report_table(self, config_file, tmp_path, capsys):
        path, config = config_file
        cli.main(["run", str(path)])
        exp = experiment(tmp_path, config)
        assert cli.main(["report", str(exp)]) == 0
        out = capsys.readouterr().out
        assert "A_1:N" in out and "Naive (Soft)" in out
        assert (exp / "report.csv").exists()

    def test_report_on_incomplete_directory(self, config_file, tmp_path, capsys):
        path, config = config_file
        cli.main(["run", str(path)])
        exp = experiment(tmp_path, config)
        (exp / "0" / "acc_matrix.csv").unlink()
        assert cli.main(["report", str(exp)]) == 1
        assert "acc_matrix.csv" in capsys.readouterr().err

    def test_cka_recompute_matches_run(self, config_file, tmp_path):
        path, config = config_file
        cli.main(["run", str(path)])
        seed = experiment(tmp_path, config) / "0"
        before = (seed / "cka.csv").read_text()
        assert cli.main(["cka", str(seed.parent)]) == 0
        assert (seed / "cka.csv").read_text() == before

    def test_cka_missing_checkpoint(self, config_file, tmp_path, capsys):
        path, config = config_file
        cli.main(["run", str(path)])
        seed = experiment(tmp_path, config) / "0"
        (seed / "ckpt_task_2.bin").unlink()
        assert cli.main(["cka", str(seed)]) == 1
        assert "ckpt_task_2.bin" in capsys.readouterr().err

    def test_report_files_appear_whole_or_not_at_all(self, config_file, tmp_path, capsys, monkeypatch):
        path, config = config_file
        cli.main(["run", str(path)])
        exp = experiment(tmp_path, config)
        assert cli.main(["report", str(exp)]) == 0
        assert (exp / "report.txt").read_text(encoding="utf-8") in capsys.readouterr().out

        (exp / "report.txt").unlink()
        (exp / "report.csv").unlink()

        def no_rename(src, dst):
            raise OSError("rename failed")

        monkeypatch.setattr("Modules.store.os.replace", no_rename)
        assert cli.main(["report", str(exp)]) == 1
        assert not any(p.name.startswith(("report", ".report")) for p in exp.iterdir())

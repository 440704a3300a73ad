import json

import pytest

from memnet.cli import _lengths, build_parser, main
from memnet.core import Dims
from memnet.training import MemNet


def _rows(out):
    return [line.split("\t") for line in out.strip().splitlines()]


@pytest.fixture
def airline_ckpt(tmp_path):
    path = tmp_path / "air.ckpt"
    MemNet(Dims(1, 3, 1, 4), seed=0).save(path)
    return path


def test_lengths_parser():
    assert _lengths("1-3,120") == [1, 2, 3, 120]
    assert _lengths("5") == [5]


def test_subcommands_present():
    parser = build_parser()
    for cmd in ("train", "eval", "forecast", "sync", "copygen", "babi", "dump", "gradcheck"):
        args = parser.parse_args([cmd, "--checkpoint", "x", "--task", "henon"]
                                 if cmd in ("eval",) else
                                 [cmd, "--checkpoint", "x"] if cmd in ("forecast", "sync", "copygen", "dump")
                                 else [cmd])
        assert args.command == cmd


class TestGradcheck:
    def test_pass(self, capsys):
        assert main(["gradcheck", "--trials", "3", "--seed", "1"]) == 0
        rows = _rows(capsys.readouterr().out)
        assert rows[0] == ["trials", "max_rel_error", "tolerance", "passed"]
        assert rows[1][0] == "3" and rows[1][3] == "True"

    def test_nonzero_exit_on_failure(self, capsys):
        assert main(["gradcheck", "--trials", "2", "--tol", "0"]) == 1


class TestTrain:
    def test_henon_with_overrides(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = main(["train", "--task", "henon", "--n-h", "3", "--n-mem", "4", "--epochs", "1",
                     "--seed", "0", "1", "--out", str(out), "--set", "henon_length=30",
                     "--set", "dump_memory=false"])
        assert code == 0
        rows = _rows(capsys.readouterr().out)
        assert rows[0][:2] == ["seed", "status"] and rows[1][1] == "ok"
        report = json.loads((out / "report.json").read_text())
        assert report["config"]["henon_length"] == 30 and report["config"]["sigma"] == 0.3
        assert report["config"]["lr"] == 0.01 and len(report["seeds"]) == 2

    def test_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"task": "airline", "n_h": 2, "n_mem": 3, "epochs": 1,
                                   "lstm_baseline": False, "out": str(tmp_path / "a")}))
        assert main(["train", "--config", str(cfg)]) == 0
        assert (tmp_path / "a" / "seed0_forecast.csv").exists()


class TestCheckpointCommands:
    def test_eval_airline(self, airline_ckpt, capsys):
        assert main(["eval", "--checkpoint", str(airline_ckpt), "--task", "airline"]) == 0
        keys = [r[0] for r in _rows(capsys.readouterr().out)]
        assert keys == ["forecast_nrmse", "sync_error_first", "sync_error_after"]

    def test_eval_henon(self, tmp_path, capsys):
        path = tmp_path / "h.ckpt"
        MemNet(Dims(1, 3, 1, 4), seed=0).save(path)
        assert main(["eval", "--checkpoint", str(path), "--task", "henon", "--sigma", "0.3"]) == 0
        assert _rows(capsys.readouterr().out)[0][0] == "test_mse"

    def test_forecast(self, airline_ckpt, capsys):
        code = main(["forecast", "--checkpoint", str(airline_ckpt), "--horizon", "5"])
        rows = _rows(capsys.readouterr().out)
        assert rows[0] == ["index", "target", "prediction"] and len(rows) == 6
        assert code in (0, 1)

    def test_sync(self, airline_ckpt, capsys):
        assert main(["sync", "--checkpoint", str(airline_ckpt)]) == 0
        assert len(_rows(capsys.readouterr().out)) == 1 + 47

    def test_copygen(self, tmp_path, capsys):
        path = tmp_path / "c.ckpt"
        MemNet(Dims(5, 4, 3, 8), seed=0).save(path)
        out = tmp_path / "grids"
        code = main(["copygen", "--checkpoint", str(path), "--lengths", "1-2,6", "--n", "3",
                     "--out", str(out)])
        assert code == 0
        rows = _rows(capsys.readouterr().out)
        assert [r[0] for r in rows[1:]] == ["1", "2", "6"]
        assert (out / "grid_len6.csv").exists()

    def test_dump(self, tmp_path, capsys):
        path = tmp_path / "h.ckpt"
        MemNet(Dims(1, 3, 1, 5), seed=0).save(path)
        assert main(["dump", "--checkpoint", str(path), "--length", "12", "--out", str(tmp_path / "d")]) == 0
        names = {r[0] for r in _rows(capsys.readouterr().out)}
        assert names == {"keys", "values", "similarity"}
        assert len((tmp_path / "d" / "similarity.csv").read_text().splitlines()) == 13

    def test_dump_rejects_baseline(self, tmp_path):
        from memnet.baselines import RNN
        path = tmp_path / "r.ckpt"
        RNN(1, 2, 1).save(path)
        with pytest.raises(SystemExit):
            main(["dump", "--checkpoint", str(path)])


def test_babi_synthetic(tmp_path, capsys):
    code = main(["babi", "--n-h", "4", "--n-mem", "16", "--epochs", "1", "--seed", "0",
                 "--out", str(tmp_path), "--set", "babi_train_stories=20",
                 "--set", "babi_test_stories=10"])
    assert code == 0
    rows = _rows(capsys.readouterr().out)
    assert rows[0] == ["seed", "status", "test_error_rate", "failed"]
    assert rows[-1][0] == "best_seed"
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["seeds"][0]["metrics"]["test_questions"] == 50

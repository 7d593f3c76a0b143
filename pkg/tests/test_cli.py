import csv
import json
import pytest

from span.cli import main
from span.model import load_checkpoint
from span.train import RunConfig, load_split


@pytest.fixture(scope="module")
def cls_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cls")
    spec = {"task": "classification", "num_train": 10, "num_val": 4,
            "num_test": 4, "seed": 0}
    cfg = root / "spec.json"
    cfg.write_text(json.dumps(spec))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def tiny_run(cls_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run = {
        "data_dir": str(cls_data), "out_dir": str(out / "r0"),
        "model": {"input_dim": 8, "stage_dims": [8, 8, 8], "num_heads": 2,
                  "w_side": 4, "num_classes": 2},
        "optim": {"epochs": 1, "lr": 1e-3},
        "seed": 0,
    }
    cfg = out / "run.json"
    cfg.write_text(json.dumps(run))
    assert main(["train", "--config", str(cfg)]) == 0
    return out / "r0"


class TestGenData:
    def test_deterministic(self, tmp_path):
        spec = tmp_path / "s.json"
        spec.write_text(json.dumps({"num_train": 4, "num_val": 2, "num_test": 2,
                                    "seed": 3}))
        assert main(["gen-data", "--config", str(spec), "--out", str(tmp_path / "a")]) == 0
        assert main(["gen-data", "--config", str(spec), "--out", str(tmp_path / "b")]) == 0
        for rel in ("manifest.json", "train/map_00000.span"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


class TestTrainEval:
    def test_artifacts_written(self, tiny_run):
        assert (tiny_run / "checkpoint.spnc").exists()
        assert (tiny_run / "config.json").exists()
        metrics = (tiny_run / "metrics.txt").read_text()
        assert "accuracy=" in metrics
        # key=value section then a JSON block with config + build id
        blob = metrics[metrics.index("{"):]
        doc = json.loads(blob)
        assert doc["config"]["model"]["num_classes"] == 2
        assert doc["build"]

    def test_ablation_echoed(self, cls_data, tmp_path):
        run = {
            "data_dir": str(cls_data), "out_dir": str(tmp_path / "abl"),
            "model": {"input_dim": 8, "stage_dims": [8, 8, 8], "num_heads": 2,
                      "w_side": 4, "num_classes": 2},
            "optim": {"epochs": 0},
        }
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(run))
        assert main(["train", "--config", str(cfg), "--ablation", "no_shift"]) == 0
        metrics = (tmp_path / "abl" / "metrics.txt").read_text()
        assert "model.use_shift=False" in metrics

    def test_epochs_zero_near_chance(self, cls_data, tmp_path):
        run = {
            "data_dir": str(cls_data), "out_dir": str(tmp_path / "e0"),
            "model": {"input_dim": 8, "stage_dims": [8, 8, 8], "num_heads": 2,
                      "w_side": 4, "num_classes": 2},
            "optim": {"epochs": 0},
        }
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(run))
        assert main(["train", "--config", str(cfg)]) == 0
        doc = json.loads((tmp_path / "e0" / "metrics.txt").read_text().split("\n\n", 1)[1])
        assert 0.0 <= doc["metrics"]["accuracy"] <= 1.0

    def test_eval_command(self, tiny_run, capsys):
        assert main(["eval", "--run", str(tiny_run), "--split", "val"]) == 0
        out = capsys.readouterr().out
        assert "accuracy=" in out

    def test_checkpoint_loadable(self, tiny_run):
        values = load_checkpoint(tiny_run / "checkpoint.spnc")
        assert "head.w" in values


class TestOracleCheckCmd:
    def test_small_pass(self, capsys):
        assert main(["oracle-check", "--trials", "3", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        assert "PASS conv_dense_oracle" in out
        assert "grad_mil_composite" in out

    def test_inject_fault_fails(self, capsys):
        assert main(["oracle-check", "--trials", "2", "--inject-fault"]) == 1
        out = capsys.readouterr().out
        assert "FAIL conv_dense_oracle" in out

    def test_zero_trials_vacuous(self, capsys):
        assert main(["oracle-check", "--trials", "0"]) == 0
        out = capsys.readouterr().out
        assert "warning" in out.lower()


class TestBenchCmd:
    def test_csv_columns(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert main(["bench", "--occupancies", "0.1,1.0", "--sizes", "24",
                     "--repeats", "3", "--dim", "4", "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2
        assert {"occupancy", "rulebook_build_ms", "sparse_forward_ms",
                "dense_oracle_ms", "sparse_peak_bytes",
                "dense_embed_bytes"} <= set(rows[0])
        for row in rows:
            assert float(row["max_abs_diff"]) < 1e-4


class TestAlignGrid:
    def test_trace(self, tmp_path, capsys):
        rects = tmp_path / "rects.txt"
        rects.write_text("300 450 500 500\n")
        out = tmp_path / "coords.txt"
        assert main(["align-grid", str(rects), "--step", "224", "--out", str(out)]) == 0
        got = [tuple(map(int, line.split())) for line in out.read_text().splitlines()]
        assert got == [(1, 2), (2, 2), (1, 3), (2, 3)]

    def test_empty_input(self, tmp_path):
        rects = tmp_path / "empty.txt"
        rects.write_text("")
        assert main(["align-grid", str(rects), "--out", str(tmp_path / "o.txt")]) == 0
        assert (tmp_path / "o.txt").read_text() == ""

    def test_malformed_line_number(self, tmp_path, capsys):
        rects = tmp_path / "bad.txt"
        rects.write_text("0 0 224 224\nbogus line here\n")
        assert main(["align-grid", str(rects)]) == 1
        err = capsys.readouterr().err
        assert "line 2" in err


class TestDumpRpb:
    def test_csv_export(self, tiny_run, tmp_path):
        out = tmp_path / "rpb.csv"
        assert main(["dump-rpb", "--run", str(tiny_run),
                     "--param", "enc0.car0.a.attn.rpb", "--out", str(out)]) == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        # (2*4-1)^2 offsets x 2 heads
        assert len(rows) == 7 * 7 * 2
        dxs = sorted({int(r["dx"]) for r in rows})
        assert dxs == list(range(-3, 4))

    def test_list_params(self, tiny_run, capsys):
        assert main(["dump-rpb", "--run", str(tiny_run), "--list"]) == 0
        out = capsys.readouterr().out
        assert "enc0.car0.a.attn.rpb" in out

    def test_unknown_param(self, tiny_run, capsys):
        assert main(["dump-rpb", "--run", str(tiny_run), "--param", "nope"]) == 1


class TestRunConfig:
    def test_split_loading(self, cls_data):
        task, samples, spec = load_split(cls_data, "train")
        assert task == "classification"
        assert len(samples) == 10

    def test_unknown_config_key(self):
        from span.errors import ConfigError

        with pytest.raises(ConfigError):
            RunConfig.from_dict({"data_dir": "x", "out_dir": "y",
                                 "model": {"input_dim": 4}, "bogus": 3})

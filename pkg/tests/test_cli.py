import csv
import io
import json
import subprocess
import sys

import pytest

from sempl.cli import COMMAND_OPTIONS, build_parser, main
from sempl.dataset import SynthSpec, SystemDataset, generate_synthetic_system, write_system

FAST = ["--epochs", "20", "--pretrain-epochs", "20", "--selection-repeats", "5"]


def run(*argv, env=None, monkeypatch=None):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture()
def data_dir(tmp_path, small_system):
    return write_system(small_system, tmp_path / "sys")


def predictions(path):
    with open(path, newline="") as fh:
        return [float(r["prediction"]) for r in csv.DictReader(fh)]


class TestSubcommands:
    def test_sequence_two_meta_envs(self, tmp_path, small_system):
        system = SystemDataset("s", small_system.schema, small_system.environments[:3])
        root = write_system(system, tmp_path / "three")
        code, out, _ = run("sequence", "--data", str(root), "--target", "e0",
                           "--out", str(tmp_path / "o"))
        assert code == 0
        doc = json.loads(out)
        assert sorted(doc["order"]) == ["e1", "e2"]
        assert set(doc) == {"target", "order", "mean_ranks", "mean_mres", "elapsed_ms",
                            "surrogate"}
        saved = json.loads((tmp_path / "o" / "plan.json").read_text())
        assert saved["order"] == doc["order"]

    def test_pretrain_finetune_predict_continuity(self, tmp_path, data_dir):
        pt, ft, pr = tmp_path / "pt", tmp_path / "ft", tmp_path / "pr"
        assert run("pretrain", "--data", str(data_dir), "--target", "e0",
                   "--out", str(pt), *FAST[2:])[0] == 0
        checkpoint = json.loads((pt / "meta.json").read_text())
        assert checkpoint["provenance"]["target"] == "e0"
        assert len(checkpoint["provenance"]["stages"]) == 3
        code, out, _ = run("finetune", "--data", str(data_dir), "--target", "e0",
                           "--checkpoint", str(pt / "meta.json"), "--epochs", "0",
                           "--out", str(ft))
        assert code == 0
        report = json.loads(out)
        assert report["size"] == 6 and report["n_test"] == 58
        assert run("predict", "--checkpoint", str(pt / "meta.json"),
                   "--configs", str(ft / "predictions.csv"), "--out", str(pr))[0] == 0
        assert predictions(ft / "predictions.csv") == predictions(pr / "predictions.csv")
        assert (ft / "model.json").exists()

    def test_parallel_pretrain_and_plan_file(self, tmp_path, data_dir):
        plan = tmp_path / "plan.json"
        plan.write_text(json.dumps({"order": ["e3", "e1"], "target": "e0"}))
        code, out, _ = run("pretrain", "--data", str(data_dir), "--target", "e0", "--plan",
                           str(plan), "--out", str(tmp_path / "a"), *FAST[2:])
        assert code == 0 and json.loads(out)["order"] == ["e3", "e1"]
        code, out, _ = run("pretrain", "--data", str(data_dir), "--target", "e0", "--method",
                           "parallel", "--out", str(tmp_path / "b"), *FAST[2:])
        assert code == 0 and json.loads(out)["method"] == "parallel"

    def test_evaluate_deterministic(self, tmp_path, data_dir):
        args = ["evaluate", "--data", str(data_dir), "--target", "e0", "--sizes", "6,12",
                "--repeats", "2", "--seed", "11", *FAST]
        assert run(*args, "--out", str(tmp_path / "a"))[0] == 0
        assert run(*args, "--out", str(tmp_path / "b"), "--jobs", "2")[0] == 0
        a = (tmp_path / "a" / "records.csv").read_bytes()
        assert a == (tmp_path / "b" / "records.csv").read_bytes()
        assert len(a.decode().splitlines()) == 1 + 4 * 2 * 2
        assert json.loads((tmp_path / "a" / "summary.json").read_text())["failures"] == 0

    def test_synth_spec_and_seed(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"n_options": 4, "n_samples": 16, "deltas": [0, 0.5]}))
        assert run("synth", "--spec", str(spec), "--seed", "2", "--out", str(tmp_path / "a"))[0] == 0
        assert sorted(p.name for p in (tmp_path / "a").iterdir()) == \
            ["e0.csv", "e1.csv", "manifest.json"]
        run("synth", "--spec", str(spec), "--seed", "2", "--out", str(tmp_path / "b"))
        assert (tmp_path / "a" / "e1.csv").read_bytes() == (tmp_path / "b" / "e1.csv").read_bytes()

    def test_rank(self, tmp_path):
        m = tmp_path / "m.csv"
        rows = ["label,value"] + [f"A,{1 + 0.01 * i}" for i in range(10)] \
            + [f"B,{10 + 0.01 * i}" for i in range(10)]
        m.write_text("\n".join(rows) + "\n")
        code, out, _ = run("rank", "--measurements", str(m))
        assert code == 0
        assert json.loads(out)["ranks"] == {"A": 1, "B": 2}


class TestConfigAndSeeds:
    def test_config_file_and_flag_precedence(self, tmp_path, data_dir, monkeypatch):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"data": str(data_dir), "target": "e0", "seed": 5,
                                   "selection-repeats": 5}))
        _, a, _ = run("sequence", "--config", str(cfg))
        _, b, _ = run("sequence", "--data", str(data_dir), "--target", "e0", "--seed", "5",
                      "--selection-repeats", "5")
        strip = lambda s: {k: v for k, v in json.loads(s).items() if k != "elapsed_ms"}
        assert strip(a) == strip(b)
        # the flag wins over the file
        _, c, _ = run("sequence", "--config", str(cfg), "--target", "e1")
        assert json.loads(c)["target"] == "e1"

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"n_options": 4, "n_samples": 16}))
        monkeypatch.setenv("SEMPL_SEED", "9")
        run("synth", "--spec", str(spec), "--out", str(tmp_path / "env"))
        run("synth", "--spec", str(spec), "--seed", "9", "--out", str(tmp_path / "flag"))
        assert (tmp_path / "env" / "e1.csv").read_bytes() == \
            (tmp_path / "flag" / "e1.csv").read_bytes()

    def test_grid_file_enables_search(self, tmp_path, data_dir):
        pt = tmp_path / "pt"
        run("pretrain", "--data", str(data_dir), "--target", "e0", "--out", str(pt), *FAST[2:])
        grid = tmp_path / "grid.json"
        grid.write_text(json.dumps({"learning_rate": [0.1], "l1": [0.001, 0.01]}))
        code, _, _ = run("finetune", "--data", str(data_dir), "--target", "e0", "--checkpoint",
                         str(pt / "meta.json"), "--grid", str(grid), "--epochs", "20",
                         "--out", str(tmp_path / "ft"))
        assert code == 0
        model = json.loads((tmp_path / "ft" / "model.json").read_text())
        assert model["provenance"]["learner"]["grid_l1"] == [0.001, 0.01]


class TestErrors:
    def error(self, *argv):
        code, _, err = run(*argv)
        doc = json.loads(err.strip().splitlines()[-1])
        assert doc["code"] == code
        return code, doc

    def test_usage_errors(self):
        assert self.error("sequence", "--bogus")[0] == 1
        assert self.error("nonsense")[0] == 1
        assert self.error("sequence")[1]["error"] == "usage"
        assert self.error("evaluate", "--repeats", "x")[0] == 1

    def test_data_errors(self, tmp_path, data_dir):
        assert self.error("sequence", "--data", str(tmp_path / "none"), "--target", "e0")[0] == 2
        assert self.error("sequence", "--data", str(data_dir), "--target", "zz")[0] == 2
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert self.error("predict", "--checkpoint", str(bad), "--configs", str(bad))[0] == 2
        (tmp_path / "cfg.json").write_text(json.dumps({"unknown_key": 1}))
        assert self.error("sequence", "--config", str(tmp_path / "cfg.json"))[0] == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_error(self, tmp_path, data_dir):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"learner": {"learning_rate": 1e9}}))
        code, doc = self.error("pretrain", "--data", str(data_dir), "--target", "e0",
                               "--config", str(cfg), "--out", str(tmp_path / "pt"),
                               "--pretrain-epochs", "50", "--selection-repeats", "3")
        assert code == 3 and doc["error"] == "numeric"

    def test_help_lists_every_flag(self):
        parser = build_parser()
        sub = parser._subparsers._group_actions[0].choices
        for name, (_, options) in COMMAND_OPTIONS.items():
            text = sub[name].format_help()
            for opt in options:
                assert "--" + opt.replace("_", "-") in text
            assert "--config" in text

    def test_console_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "sempl.cli", "rank"], capture_output=True,
                              text=True)
        assert proc.returncode == 1
        assert json.loads(proc.stderr)["error"] == "usage"

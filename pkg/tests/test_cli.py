import json
import subprocess
import sys

import pytest

from onenet.cli import build_parser, main
from onenet.config import FLAG_NAMES
from onenet.metrics import read_csv
from onenet.model import checkpoint_bytes, load_checkpoint, strip

TINY_SETS = ["--set", "train_subset=120", "--set", "test_subset=60", "--set", "batch_size=30",
             "--set", "trunk=conv:4,maxpool:4", "--set", "branch=conv:6,gap,linear",
             "--set", "teacher_trunk=conv:6,maxpool:4", "--set", "teacher_branch=conv:8,gap,linear"]


def run_train(out, *extra):
    argv = ["train", "--preset", "desk-mnist", "--epochs", "2", *TINY_SETS, "--out", str(out), *extra]
    assert main(argv) == 0
    return out


@pytest.fixture(scope="module")
def one_run(tmp_path_factory):
    return run_train(tmp_path_factory.mktemp("one"))


@pytest.fixture(scope="module")
def vanilla_run(tmp_path_factory):
    return run_train(tmp_path_factory.mktemp("vanilla"), "--method", "vanilla")


def final_test(run, head):
    rows = [r for r in read_csv(run / "metrics.csv") if r["phase"] == "test" and r["head"] == head]
    return rows[-1]


class TestTrain:
    def test_run_directory(self, one_run):
        for name in ("final.ckpt", "metrics.csv", "metrics.jsonl", "manifest.json"):
            assert (one_run / name).is_file()
        m = json.loads((one_run / "manifest.json").read_text())
        assert m["status"] == "ok" and m["method"] == "one"
        assert m["config"]["epochs"] == 2 and m["config"]["trunk"] == "conv:4,maxpool:4"
        assert len(m["epoch_seconds"]) == 2 and m["train_flops"] > 0
        assert set(m["final_test_top1"]) == {"branch0", "branch1", "branch2", "teacher"}
        assert {"final.ckpt", "metrics.csv", "metrics.jsonl"} <= set(m["artifacts"])

    def test_rerun_is_identical(self, one_run, tmp_path):
        again = run_train(tmp_path / "again")
        for name in ("final.ckpt", "metrics.csv", "metrics.jsonl"):
            assert (again / name).read_bytes() == (one_run / name).read_bytes()

    def test_flags_and_branches(self, tmp_path):
        out = run_train(tmp_path / "r", "--epochs", "1", "--branches", "1", "--flags", "no_gating")
        m = json.loads((out / "manifest.json").read_text())
        assert m["config"]["aux_branches"] == 1 and m["config"]["no_gating"] is True
        assert set(m["final_test_top1"]) == {"branch0", "branch1", "teacher"}

    @pytest.mark.parametrize("method,heads", [("kd", {"net"}),
                                              ("ensemble", {"member0", "member1", "ensemble"})])
    def test_baselines(self, tmp_path, method, heads):
        out = run_train(tmp_path / method, "--epochs", "1", "--method", method, "--members", "2")
        m = json.loads((out / "manifest.json").read_text())
        assert set(m["final_test_top1"]) == heads

    def test_resume(self, one_run, tmp_path):
        run_train(tmp_path / "half", "--set", "checkpoint_every=1")
        ck = tmp_path / "half" / "checkpoints" / "epoch_0001.ckpt"
        out = run_train(tmp_path / "resumed", "--resume", str(ck))
        assert (out / "final.ckpt").read_bytes() == (one_run / "final.ckpt").read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_exit_4(self, tmp_path, capsys):
        argv = ["train", "--preset", "desk-mnist", "--epochs", "1", *TINY_SETS,
                "--set", "base_lr=1e30", "--out", str(tmp_path / "nan")]
        assert main(argv) == 4
        dump = json.loads((tmp_path / "nan" / "numeric_failure.json").read_text())
        assert "error" in dump
        assert json.loads((tmp_path / "nan" / "manifest.json").read_text())["status"] == "numeric_failure"
        assert "error" in capsys.readouterr().err

    @pytest.mark.parametrize("extra", [["--set", "epochs=0"], ["--set", "bogus=1"], ["--set", "noequals"],
                                       ["--preset", "nope"], ["--config", "/nonexistent.cfg"]])
    def test_config_errors_exit_2(self, tmp_path, extra):
        argv = ["train", "--preset", "desk-mnist", "--out", str(tmp_path / "x"), *extra]
        assert main(argv) == 2

    def test_missing_data_root_exit_3(self, tmp_path):
        argv = ["train", "--epochs", "1", "--data-root", str(tmp_path / "empty"), "--out", str(tmp_path / "x")]
        (tmp_path / "empty").mkdir()
        assert main(argv) == 3


class TestEval:
    def test_single_mode_equals_final_branch0(self, one_run, tmp_path, capsys):
        assert main(["eval", str(one_run / "final.ckpt"), "--out", str(tmp_path / "e.json")]) == 0
        got = json.loads((tmp_path / "e.json").read_text())
        assert got["top1_error"] == final_test(one_run, "branch0")["top1_error"]
        assert got["top5_error"] == final_test(one_run, "branch0")["top5_error"]
        assert (tmp_path / "e.json.manifest.json").is_file()
        assert json.loads(capsys.readouterr().out) == got

    def test_ensemble_mode_equals_teacher(self, one_run, capsys):
        assert main(["eval", str(one_run / "final.ckpt"), "--mode", "ensemble"]) == 0
        got = json.loads(capsys.readouterr().out)
        assert got["top1_error"] == final_test(one_run, "teacher")["top1_error"]

    def test_vanilla_checkpoint(self, vanilla_run, capsys):
        assert main(["eval", str(vanilla_run / "final.ckpt")]) == 0
        got = json.loads(capsys.readouterr().out)
        assert got["top1_error"] == final_test(vanilla_run, "net")["top1_error"]
        assert main(["eval", str(vanilla_run / "final.ckpt"), "--mode", "ensemble"]) == 2

    def test_missing_checkpoint_exit_3(self, tmp_path, capsys):
        assert main(["eval", str(tmp_path / "none.ckpt")]) == 3
        assert "not found" in capsys.readouterr().err

    def test_corrupt_checkpoint_exit_3(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"garbage!" * 4)
        assert main(["eval", str(tmp_path / "bad.ckpt")]) == 3


class TestAnalysisCommands:
    def test_perturb(self, one_run, tmp_path):
        out = tmp_path / "p.csv"
        ck = one_run / "final.ckpt"
        before = ck.read_bytes()
        args = ["perturb", str(ck), "--dmax", "2", "--points", "3", "--dirs", "2", "--out", str(out)]
        assert main(args) == 0
        rows = out.read_text().splitlines()
        assert rows[0] == "d,direction,train_ce,train_error,test_error" and len(rows) == 1 + 3 * 2
        first = out.read_bytes()
        assert main(args) == 0
        assert out.read_bytes() == first
        assert ck.read_bytes() == before
        m = json.loads((tmp_path / "p.csv.manifest.json").read_text())
        assert m["spec"]["magnitudes"] == [0.0, 1.0, 2.0] and m["spec"]["directions"] == 2

    def test_perturb_protocol_defaults(self):
        args = build_parser().parse_args(["perturb", "x.ckpt", "--out", "y.csv"])
        assert (args.dmax, args.points, args.dirs) == (5.0, 11, 5)

    def test_variance_branches(self, one_run, tmp_path, capsys):
        out = tmp_path / "v.csv"
        assert main(["variance", str(one_run / "final.ckpt"), "--samples", "50", "--out", str(out)]) == 0
        row = json.loads(capsys.readouterr().out)
        assert row["source"] == "branches" and row["heads"] == 3 and row["samples"] == 50
        assert row["variance"] > 0
        assert out.read_text().splitlines()[0] == "source,heads,samples,variance"

    def test_variance_models(self, one_run, vanilla_run, capsys):
        args = ["variance", str(one_run / "final.ckpt"), str(vanilla_run / "final.ckpt"), "--samples", "40"]
        assert main(args) == 0
        row = json.loads(capsys.readouterr().out)
        assert row["source"] == "models" and row["heads"] == 2

    def test_variance_single_net_is_error(self, vanilla_run, capsys):
        assert main(["variance", str(vanilla_run / "final.ckpt")]) == 2
        assert "2 prediction heads" in capsys.readouterr().err

    def test_export_json_mirrors_csv(self, one_run, tmp_path):
        assert main(["export", str(one_run / "metrics.csv"), "--out", str(tmp_path / "m.json")]) == 0
        assert json.loads((tmp_path / "m.json").read_text()) == read_csv(one_run / "metrics.csv")
        assert main(["export", str(one_run / "metrics.csv"), "--format", "csv",
                     "--out", str(tmp_path / "m.csv")]) == 0
        assert (tmp_path / "m.csv").read_bytes() == (one_run / "metrics.csv").read_bytes()

    def test_export_missing(self, tmp_path):
        assert main(["export", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o.json")]) == 3

    def test_aggregate(self, one_run, tmp_path, capsys):
        metrics = str(one_run / "metrics.csv")
        assert main(["aggregate", metrics, metrics, "--out", str(tmp_path / "a.csv")]) == 0
        rows = (tmp_path / "a.csv").read_text().splitlines()
        assert rows[0] == "head,metric,n,mean,std"
        assert all(r.split(",")[2] == "2" and r.endswith(",0.0") for r in rows[1:])
        assert main(["aggregate", metrics]) == 0
        assert "branch0" in capsys.readouterr().out

    def test_checkpoint_untouched_by_analysis(self, one_run, tmp_path):
        ck = one_run / "final.ckpt"
        net = load_checkpoint(ck).net
        ref = checkpoint_bytes(strip(net))
        main(["variance", str(ck), "--samples", "20"])
        assert checkpoint_bytes(strip(load_checkpoint(ck).net)) == ref


class TestParser:
    SUBCOMMANDS = ("train", "eval", "perturb", "variance", "export", "aggregate")

    @pytest.mark.parametrize("cmd", SUBCOMMANDS)
    def test_help_lists_every_flag(self, cmd, capsys):
        with pytest.raises(SystemExit) as exc:
            main([cmd, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        sub = next(a for a in build_parser()._subparsers._group_actions[0].choices.items() if a[0] == cmd)[1]
        for action in sub._actions:
            for opt in action.option_strings:
                assert opt in text

    def test_train_help_mentions_flags(self, capsys):
        with pytest.raises(SystemExit):
            main(["train", "--help"])
        text = capsys.readouterr().out
        for flag in FLAG_NAMES:
            assert flag in text

    @pytest.mark.parametrize("argv", [["train", "--out", "x", "--bogus"], ["eval"], ["frobnicate"],
                                      ["train", "--method", "boosting", "--out", "x"],
                                      ["train", "--flags", "no_teacher", "--out", "x"]])
    def test_bad_usage_exits_2(self, argv):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "onenet.cli", "--version"], capture_output=True, text=True)
        assert res.returncode == 0 and res.stdout.startswith("onenet ")

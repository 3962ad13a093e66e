import json
import os

import pytest

from physsm.cli import main
from physsm.config import save_config

from conftest import micro_config


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("PHYSSM_OUT", str(tmp_path / "out"))
    return tmp_path


def micro_cfg_file(tmp_path, **overrides) -> str:
    path = tmp_path / "exp.cfg"
    save_config(str(path), micro_config(**overrides))
    return str(path)


def gen_args(out, seed=7):
    return [
        "generate", "--system", "pendulum", "--n", "3", "--n-val", "1",
        "--n-test", "1", "--horizon", "50", "--dt", "0.05", "--noise", "0.3",
        "--drop", "0.2", "--seed", str(seed), "--out", out,
    ]


class TestGenerate:
    def test_writes_corrupted_dataset(self, workdir, capsys):
        assert main(gen_args(str(workdir / "ds"))) == 0
        files = sorted(os.listdir(workdir / "ds"))
        assert "manifest.json" in files and "train.tsv" in files
        assert "train.retained.tsv" in files
        manifest = json.loads((workdir / "ds" / "manifest.json").read_text())
        assert manifest["system"] == "pendulum"
        # 20% of 50 dropped -> 40 retained per trajectory
        lines = (workdir / "ds" / "train.tsv").read_text().splitlines()
        assert len(lines) == 1 + 3 * 40

    def test_missing_system_exits_2(self, workdir, capsys):
        assert main(["generate", "--n", "4"]) == 2

    def test_rerun_requires_overwrite_and_is_byte_identical(self, workdir):
        out = str(workdir / "ds")
        assert main(gen_args(out)) == 0
        payload = {
            name: (workdir / "ds" / name).read_bytes()
            for name in ("manifest.json", "train.tsv", "train.retained.tsv")
        }
        assert main(gen_args(out)) == 2  # refuses without --overwrite
        assert main(gen_args(out) + ["--overwrite"]) == 0
        for name, blob in payload.items():
            assert (workdir / "ds" / name).read_bytes() == blob

    def test_unknown_system_exits_2(self, workdir):
        code = main(["generate", "--system", "lorenz", "--out", str(workdir / "x")])
        assert code == 2


class TestPipeline:
    def test_train_eval_plot_roundtrip(self, workdir, capsys):
        cfg_path = micro_cfg_file(workdir)
        run_dir = str(workdir / "run")
        assert main(["train", "--config", cfg_path, "--seed", "0", "--out", run_dir]) == 0
        assert os.path.exists(os.path.join(run_dir, "checkpoint_seed0.npz"))
        assert os.path.exists(os.path.join(run_dir, "history_seed0.csv"))
        assert os.path.exists(os.path.join(run_dir, "run.json"))
        history = open(os.path.join(run_dir, "history_seed0.csv")).read().splitlines()
        assert history[0] == "epoch,recon,kl,reg,total,val_extrap_mse"
        assert len(history) == 1 + 3  # micro config trains 3 epochs

        eval_dir = str(workdir / "eval")
        code = main([
            "eval", "--ckpt", os.path.join(run_dir, "checkpoint_seed0.npz"),
            "--config", cfg_path, "--out", eval_dir, "--dump",
        ])
        assert code == 0
        metrics = json.loads(open(os.path.join(eval_dir, "metrics.json")).read())
        assert set(metrics["mean"]) == {"interp_mae", "interp_mse", "extrap_mae", "extrap_mse"}
        dump = os.path.join(eval_dir, "predictions.tsv")
        assert os.path.exists(dump)

        fig_dir = str(workdir / "figs")
        assert main(["plot", "--dump", dump, "--traj", "0", "--out", fig_dir]) == 0
        csv_path = os.path.join(fig_dir, "traj0.csv")
        rows = open(csv_path).read().splitlines()
        cfg = micro_config()
        assert len(rows) == 1 + cfg.window + cfg.forecast
        assert os.path.exists(os.path.join(fig_dir, "traj0_dim0.png"))

        blob = open(csv_path, "rb").read()
        assert main(["plot", "--dump", dump, "--traj", "0", "--out", fig_dir]) == 0
        assert open(csv_path, "rb").read() == blob  # replot is byte-identical

    def test_eval_missing_checkpoint_exits_2(self, workdir):
        cfg_path = micro_cfg_file(workdir)
        assert main(["eval", "--ckpt", "nope.npz", "--config", cfg_path]) == 2

    def test_plot_missing_dump_exits_2(self, workdir):
        assert main(["plot", "--dump", "missing.tsv"]) == 2

    def test_plot_zero_horizon(self, workdir):
        cfg_path = micro_cfg_file(workdir, forecast=0)
        run_dir = str(workdir / "run0")
        assert main(["train", "--config", cfg_path, "--seed", "0", "--out", run_dir]) == 0
        eval_dir = str(workdir / "eval0")
        assert main([
            "eval", "--ckpt", os.path.join(run_dir, "checkpoint_seed0.npz"),
            "--config", cfg_path, "--out", eval_dir, "--dump",
        ]) == 0
        fig_dir = str(workdir / "figs0")
        assert main(["plot", "--dump", os.path.join(eval_dir, "predictions.tsv"),
                     "--traj", "0", "--out", fig_dir]) == 0
        rows = open(os.path.join(fig_dir, "traj0.csv")).read().splitlines()
        assert len(rows) == 1 + micro_config().window  # no extrap rows, CSV still there

    def test_inputs_never_mutated(self, workdir):
        ds_dir = str(workdir / "ds")
        assert main(gen_args(ds_dir)) == 0
        before = {
            name: (workdir / "ds" / name).read_bytes()
            for name in os.listdir(ds_dir) if name.endswith(".tsv")
        }
        cfg_path = micro_cfg_file(workdir, n_train=3, n_val=1, n_test=1)
        assert main(["train", "--config", cfg_path, "--seed", "0",
                     "--data", ds_dir, "--out", str(workdir / "run")]) == 0
        for name, blob in before.items():
            assert (workdir / "ds" / name).read_bytes() == blob


class TestBatchCommands:
    def test_ablate_writes_three_rows(self, workdir):
        cfg_path = micro_cfg_file(workdir, epochs=2)
        out = str(workdir / "ab")
        assert main(["ablate", "--config", cfg_path, "--out", out]) == 0
        rows = open(os.path.join(out, "table.csv")).read().splitlines()
        assert len(rows) == 1 + 3
        assert rows[0].startswith("variant,")
        report = json.loads(open(os.path.join(out, "report.json")).read())
        assert set(report) == {"full", "no_unit", "no_reg"}

    def test_sweep_grid_rows(self, workdir):
        cfg_path = micro_cfg_file(workdir, epochs=2)
        out = str(workdir / "sw")
        assert main(["sweep", "--config", cfg_path, "--beta", "0.1,1",
                     "--lambda", "1", "--out", out]) == 0
        rows = open(os.path.join(out, "grid.csv")).read().splitlines()
        assert len(rows) == 1 + 2

    def test_uniqueness_command(self, workdir):
        out = str(workdir / "uni")
        assert main(["uniqueness", "--seed", "0", "--out", out]) == 0
        report = json.loads(open(os.path.join(out, "recovery.json")).read())
        assert report["known_bit_identical"] is True
        assert report["max_abs_error"] < 1e-2


def test_version_flag(capsys):
    assert main(["--version"]) == 0

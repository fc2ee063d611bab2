"""End-to-end CLI tests on a miniature problem (fast settings throughout)."""

import json
from pathlib import Path

import pytest

from spikecp import io
from spikecp.cli import main

GEN = [
    "gen-data", "--count", "120", "--classes", "3", "--channels", "12",
    "--steps", "24", "--seed", "3",
]
TRAIN = ["train", "--mode", "de", "--k", "2", "--hidden", "8", "--epochs", "2", "--seed", "1"]
CKPTS = ["--checkpoints", "8,16,24"]


def run(args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset + ensemble + posterior + calibration table, built once."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "pool.npz"
    ens = root / "ens.npz"
    post = root / "post.npz"
    cal = root / "cal.csv"
    assert run(GEN + ["--out", data]) == 0
    assert run(TRAIN + ["--data", data, "--out", ens]) == 0
    assert run([
        "train", "--mode", "vi", "--epochs", "2", "--hidden", "8",
        "--prior-var", "0.03", "--seed", "2", "--data", data, "--out", post,
    ]) == 0
    assert run(["calibrate", "--ensemble", ens, "--data", data, "--out", cal] + CKPTS) == 0
    return {"root": root, "data": data, "ens": ens, "post": post, "cal": cal}


class TestPipeline:
    def test_artifacts_exist(self, workspace):
        meta = io.read_artifact_meta(workspace["ens"])
        assert meta["kind"] == "ensemble"
        assert len(meta["seeds"]) == 2
        assert meta["config_hash"]

    def test_decide_cm(self, workspace, capsys):
        out = workspace["root"] / "dec_cm.jsonl"
        code = run([
            "decide", "--ensemble", workspace["ens"], "--cal", workspace["cal"],
            "--data", workspace["data"], "--merge", "cm", "--r", "1",
            "--p-targ", "0.9", "--i-th", "2", "--out", out,
        ])
        assert code == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["examples"] == 120
        assert 0 <= summary["coverage"] <= 1
        records, header = io.read_decisions_jsonl(out)
        assert len(records) == 120
        assert header["config_hash"]
        assert {"example", "stop_time", "set", "set_size", "p_values"} <= set(records[0])

    def test_decide_pm_r45(self, workspace):
        out = workspace["root"] / "dec_pm.jsonl"
        code = run([
            "decide", "--ensemble", workspace["ens"], "--cal", workspace["cal"],
            "--data", workspace["data"], "--merge", "pm", "--r", "45",
            "--p-targ", "0.9", "--i-th", "2", "--out", out,
        ])
        assert code == 0

    def test_decide_from_posterior(self, workspace):
        cal = workspace["root"] / "cal_vi.csv"
        assert run([
            "calibrate", "--posterior", workspace["post"], "--k", "2",
            "--sample-seed", "5", "--data", workspace["data"], "--out", cal,
        ] + CKPTS) == 0
        out = workspace["root"] / "dec_vi.jsonl"
        assert run([
            "decide", "--posterior", workspace["post"], "--k", "2", "--sample-seed", "5",
            "--cal", cal, "--data", workspace["data"], "--merge", "pm", "--out", out,
        ]) == 0

    def test_decide_dc_auto(self, workspace, capsys):
        out = workspace["root"] / "dec_dc.jsonl"
        code = run([
            "decide", "--ensemble", workspace["ens"], "--cal", workspace["cal"],
            "--data", workspace["data"], "--baseline", "dc", "--p-th", "auto",
            "--cal-data", workspace["data"], "--out", out,
        ])
        assert code == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert 0.0 <= summary["p_th"] <= 1.0
        records, _ = io.read_decisions_jsonl(out)
        assert "label" in records[0]

    def test_decide_dc_every_step(self, workspace):
        out = workspace["root"] / "dec_dc_step.jsonl"
        assert run([
            "decide", "--ensemble", workspace["ens"], "--cal", workspace["cal"],
            "--data", workspace["data"], "--baseline", "dc", "--p-th", "0.8",
            "--dc-every-step", "--out", out,
        ]) == 0
        records, _ = io.read_decisions_jsonl(out)
        assert all(1 <= r["stop_time"] <= 24 for r in records)

    def test_sweep(self, workspace):
        prefix = workspace["root"] / "sw"
        code = run([
            "sweep", "--param", "k", "--values", "1,2", "--ensemble", workspace["ens"],
            "--pool", workspace["data"], "--merge", "cm", "--resamples", "2",
            "--cal-size", "40", "--seed", "0", "--out-prefix", prefix,
        ] + CKPTS)
        assert code == 0
        rows, cfg_hash = io.read_summary_csv(f"{prefix}_summary.csv")
        assert len(rows) == 2
        assert cfg_hash
        assert Path(f"{prefix}_plot.svg").exists()

    def test_train_six_member_initialization_only(self, workspace, tmp_path):
        # epochs 0: the artifact holds the Gaussian initializations unchanged
        out = tmp_path / "init.npz"
        assert run([
            "train", "--mode", "de", "--k", "6", "--epochs", "0", "--hidden", "8",
            "--seed", "7", "--data", workspace["data"], "--out", out,
        ]) == 0
        ens = io.load_ensemble(out)
        assert len(ens.members) == 6
        thetas = {m.theta.tobytes() for m in ens.members}
        assert len(thetas) == 6  # independent initializations

    def test_validate(self, workspace, capsys):
        out = workspace["root"] / "validate.txt"
        code = run(["validate", "--trials", "2000", "--merge-trials", "5000", "--out", out])
        assert code == 0
        text = capsys.readouterr().out
        assert "p-variable" in text and "FAIL" not in text
        assert out.exists()


class TestErrors:
    def test_hash_mismatch_refused(self, workspace, capsys):
        other = workspace["root"] / "other.npz"
        assert run(TRAIN + ["--hidden", "6", "--data", workspace["data"], "--out", other]) == 0
        code = run([
            "decide", "--ensemble", other, "--cal", workspace["cal"],
            "--data", workspace["data"], "--out", workspace["root"] / "x.jsonl",
        ])
        assert code == 1
        assert "architecture hash" in capsys.readouterr().err

    def test_unknown_config_key(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"bogus_key": 1}))
        assert run(GEN + ["--out", tmp_path / "d.npz", "--config", cfg]) == 1

    def test_bad_mode(self, workspace, tmp_path):
        code = run([
            "train", "--mode", "nope", "--data", workspace["data"], "--out", tmp_path / "m.npz",
        ])
        assert code == 1  # argparse choice violation -> usage error

    def test_missing_ensemble(self, workspace, tmp_path):
        code = run([
            "decide", "--cal", workspace["cal"], "--data", workspace["data"],
            "--out", tmp_path / "d.jsonl",
        ])
        assert code == 1

    def test_validate_violation_exit_code(self, workspace, tmp_path):
        # negative tolerance makes the bound unsatisfiable
        code = run(["validate", "--trials", "2000", "--merge-trials", "2000",
                    "--tolerance", "-0.2"])
        assert code == 2

    def test_config_file_precedence(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"count": 7, "classes": 3, "channels": 6, "steps": 10}))
        out = tmp_path / "d.npz"
        assert run(["gen-data", "--config", cfg, "--count", "9", "--out", out]) == 0
        from spikecp.io import load_dataset

        assert len(load_dataset(out)) == 9  # flag beats file


class TestDeterminism:
    def test_rerun_is_byte_identical(self, tmp_path):
        data = tmp_path / "pool.npz"
        ens = tmp_path / "ens.npz"
        cal = tmp_path / "cal.csv"
        dec = tmp_path / "dec.jsonl"

        def build():
            assert run(GEN + ["--out", data]) == 0
            assert run(TRAIN + ["--data", data, "--out", ens]) == 0
            assert run(["calibrate", "--ensemble", ens, "--data", data, "--out", cal] + CKPTS) == 0
            assert run([
                "decide", "--ensemble", ens, "--cal", cal, "--data", data,
                "--merge", "pm", "--r", "45", "--out", dec,
            ]) == 0
            return cal.read_bytes(), dec.read_bytes()

        assert build() == build()

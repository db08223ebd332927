import json
import shutil
import subprocess
import sys

import pytest

from cptlab.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main, preset_names

from .oracles import cosine_bits

FAST = ["epochs=4", "data.n_train=200", "data.n_test=100", "precision.num_cycles=2"]


@pytest.fixture(autouse=True)
def _isolated(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("CPTLAB_OUT", str(tmp_path / "out"))


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_presets_bundled():
    assert {"cnn6_cpt", "cnn6_static8", "probe_bitgated", "mlp3_blobs"} <= set(preset_names())


def test_schedule_table(capsys):
    code, out, _ = run(capsys, "schedule", "--b-min", "3", "--b-max", "8", "--epochs", "160", "--cycles", "32")
    lines = out.strip().splitlines()
    assert code == EXIT_OK and lines[0] == "epoch,bits" and len(lines) == 161
    bits = [int(line.split(",")[1]) for line in lines[1:]]
    assert bits == [cosine_bits(3, 8, t % 5, 5) for t in range(160)]


def test_cost_report(capsys):
    code, out, _ = run(capsys, "cost", "--a", "fw3-8_bw8", "--b", "fw8_bw8", "--config", "cnn6_cpt")
    rep = json.loads(out)
    assert code == EXIT_OK and 25 <= rep["total_reduction_pct"] <= 45
    code, out, _ = run(capsys, "cost", "--a", "fw6_bw6", "--b", "fw8_bw8", "--config", "mlp3_blobs")
    assert json.loads(out)["forward_reduction_pct"] == 43.75


def test_train_dry_run(capsys):
    code, out, _ = run(capsys, "train", "--config", "cnn6_cpt", "--dry-run")
    lines = out.strip().splitlines()
    assert code == EXIT_OK and lines[0] == "epoch,fw_bits,bw_bits,lr" and len(lines) == 41
    assert lines[1].split(",")[:3] == ["0", "3", "8"]


def test_train_writes_under_cptlab_out(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--config", "mlp3_blobs", *FAST)
    assert code == EXIT_OK
    info = json.loads(out)
    run_dir = tmp_path / "out" / "train" / "mlp3_blobs"
    assert info["out"] == str(run_dir) and (run_dir / "metrics.jsonl").exists()


def test_train_is_idempotent(capsys, tmp_path):
    for d in ("a", "b"):
        assert run(capsys, "train", "--config", "mlp3_blobs", "--out", d, *FAST)[0] == EXIT_OK
    for name in ("metrics.jsonl", "metrics.csv", "cost.json", "cost_trace.csv", "resolved_config.json", "last.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_resume_and_report(capsys, tmp_path):
    assert run(capsys, "train", "--config", "mlp3_blobs", "--out", "r", *FAST, "checkpoint_every=2")[0] == 0
    code, out, _ = run(capsys, "train", "--config", "mlp3_blobs", "--out", "r2", *FAST, "checkpoint_every=2",
                       "--resume", "r/epoch0002.ckpt")
    assert code == EXIT_OK
    assert (tmp_path / "r" / "metrics.jsonl").read_bytes() == (tmp_path / "r2" / "metrics.jsonl").read_bytes()
    code, out, _ = run(capsys, "report", "r", "r2", "--group-by", "")
    lines = out.strip().splitlines()
    assert code == EXIT_OK and len(lines) == 3 and lines[0].startswith("run,epochs,test_acc")
    code, out, _ = run(capsys, "report", "r", "r2", "--group-by", "name,seed")
    rows = out.strip().splitlines()
    assert len(rows) == 2
    header, row = rows
    assert dict(zip(header.split(","), row.split(",")))["n"] == "2"


def test_landscape_from_run_dir(capsys, tmp_path):
    assert run(capsys, "train", "--config", "mlp3_blobs", "--out", "r", *FAST)[0] == 0
    code, out, _ = run(capsys, "landscape", "r", "--points", "3", "--samples", "50")
    assert code == EXIT_OK
    lines = (tmp_path / "r" / "landscape.csv").read_text().splitlines()
    assert len(lines) == 4 and json.loads(out)["center_loss"] > 0


def test_prt_chain(capsys, tmp_path):
    code, out, _ = run(capsys, "prt", "--config", "probe_bitgated", "--out", "p", "--max-bits", "6",
                       "--threshold", "5", "--window", "20", "--chain", "epochs=16", "data.n_train=2000",
                       "data.n_test=500", "precision.num_cycles=2")
    assert code == EXIT_OK
    summary = json.loads(out)
    assert summary["b_max"] == 8 and 2 <= summary["b_min"] <= 6
    assert (tmp_path / "p" / "prt.json").exists() and (tmp_path / "p" / "prt_trace.csv").exists()
    assert (tmp_path / "p" / "train" / "metrics.jsonl").exists()


def test_sweep(capsys, tmp_path):
    code, out, _ = run(capsys, "sweep", "--config", "mlp3_blobs", "--out", "s", "--cycles", "1,2",
                       "--bounds", "3-8", "--seeds", "0", "epochs=4", "data.n_train=100", "data.n_test=50")
    assert code == EXIT_OK
    trials = (tmp_path / "s" / "trials.csv").read_text().splitlines()
    assert len(trials) == 3 and "reduction_vs_static_pct" in trials[0]


@pytest.mark.parametrize("argv,code", [
    ([], EXIT_USAGE),
    (["frobnicate"], EXIT_USAGE),
    (["schedule", "--b-min", "3"], EXIT_USAGE),
    (["sweep", "--bounds", "3:8"], EXIT_USAGE),
    (["train", "--config", "no_such_preset"], EXIT_CONFIG),
    (["train", "--config", "cnn6_cpt", "precision.bogus=1"], EXIT_CONFIG),
    (["schedule", "--b-min", "8", "--b-max", "3", "--epochs", "10"], EXIT_CONFIG),
    (["prt", "--config", "probe_bitgated", "--epochs-per-probe", "50"], EXIT_CONFIG),
    (["report", "empty_dir"], EXIT_CONFIG),
    (["landscape", "missing.ckpt", "--config", "mlp3_blobs"], EXIT_RUNTIME),
])
def test_exit_codes(capsys, argv, code):
    assert run(capsys, *argv)[0] == code


def test_help_exits_zero(capsys):
    assert run(capsys, "--help")[0] == EXIT_OK


def test_divergence_exit_code(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--config", "mlp3_blobs", "--out", "d", "epochs=2",
                       "data.n_train=100", "data.n_test=50", "precision.num_cycles=1", "precision.pattern=static",
                       "precision.b_min=32", "precision.b_max=32", "precision.bw_bits=32", "lr.kind=constant",
                       "lr.lrs=[1e25]")
    assert code == EXIT_RUNTIME and "diverged" in err
    assert (tmp_path / "d" / "last_good.ckpt").exists()


@pytest.mark.skipif(shutil.which("cptlab") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["cptlab", "schedule", "--b-min", "3", "--b-max", "8", "--epochs", "8", "--cycles", "2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.splitlines()[1] == "0,3"
    assert subprocess.run(["cptlab", "nope"], capture_output=True).returncode == EXIT_USAGE


def test_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cptlab.cli", "train", "--config", "nope"], capture_output=True)
    assert proc.returncode == EXIT_CONFIG

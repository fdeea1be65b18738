import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from vfdt_fingerprint.cli import main
from vfdt_fingerprint.signal_core import CaptureStream, write_cf32

TINY_SPEC = {
    "population_size": 3,
    "frames_per_device_per_domain": 6,
    "train_domains": ["D1"],
    "test_domains": ["D1", "D2"],
    "train_config": {"epochs": 1, "batch_size": 8},
}


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(TINY_SPEC))
    return path


def test_gradcheck_succeeds(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_usage_errors_exit_1():
    with pytest.raises(SystemExit) as exc:
        main(["nope"])
    assert exc.value.code == 1
    proc = subprocess.run([sys.executable, "-m", "vfdt_fingerprint", "nope"], capture_output=True, text=True)
    assert proc.returncode == 1
    proc = subprocess.run([sys.executable, "-m", "vfdt_fingerprint", "train", "--representation", "fft"],
                          capture_output=True, text=True)
    assert proc.returncode == 1


def test_vfdt_writes_trace_csv(tmp_path, capsys):
    rng = np.random.default_rng(0)
    path = tmp_path / "cap.cf32"
    write_cf32(CaptureStream(rng.standard_normal(4096) + 1j * rng.standard_normal(4096), 1e6), path)
    assert main(["vfdt", str(path), "--out", str(tmp_path / "out")]) == 0
    rows = list(csv.reader(open(tmp_path / "out" / "cap_i.csv")))
    assert rows[0] == ["index", "value"]
    assert len(rows) == 1 + 61
    assert all(1.0 <= float(v) <= 2.0 for _, v in rows[1:])


def test_vfdt_custom_config(tmp_path):
    path = tmp_path / "cap.cf32"
    write_cf32(CaptureStream(np.exp(1j * np.arange(2048.0)), 1e6), path)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"window_len": 512, "window_offset": 512, "increment_lag": 4, "variance_floor": 1e-12}))
    assert main(["vfdt", str(path), "--spec", str(cfg), "--out", str(tmp_path)]) == 0
    assert len(open(tmp_path / "cap_q.csv").read().splitlines()) == 1 + 4


def test_missing_or_corrupt_input_exit_2(tmp_path):
    assert main(["vfdt", str(tmp_path / "absent.cf32"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.cf32"
    bad.write_bytes(b"\x00" * 12)
    (tmp_path / "bad.cf32.json").write_text('{"sample_rate_hz": 1e6}')
    assert main(["vfdt", str(bad), "--out", str(tmp_path)]) == 2


def test_invalid_spec_exit_1(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"population_size": 1}))
    assert main(["domain-adapt", "--spec", str(path), "--out", str(tmp_path)]) == 1
    path.write_text("{not json")
    assert main(["domain-adapt", "--spec", str(path), "--out", str(tmp_path)]) == 1


def test_simulate_train_eval_round_trip(tmp_path, spec_file, capsys):
    sim = tmp_path / "sim"
    assert main(["simulate", "--spec", str(spec_file), "--out", str(sim), "--seed", "4"]) == 0
    assert json.loads((sim / "spec.json").read_text())["seed"] == 4
    assert len(json.loads((sim / "population.json").read_text())) == 3
    assert (sim / "dataset_raw_iq.npz").exists() and (sim / "dataset_vfdt.npz").exists()

    model_dir = tmp_path / "model"
    argv = ["train", "--spec", str(spec_file), "--dataset", str(sim / "dataset_vfdt.npz"), "--out", str(model_dir)]
    assert main(argv) == 0
    assert len(json.loads((model_dir / "history.json").read_text())) == 1

    ev = tmp_path / "eval"
    argv = ["eval", "--model", str(model_dir / "model.pt"), "--dataset", str(sim / "dataset_vfdt.npz"), "--out", str(ev)]
    assert main(argv) == 0
    rows = list(csv.DictReader(open(ev / "accuracy.csv")))
    assert [r["test_domain"] for r in rows] == ["D1", "D2"]
    assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in rows)

    mismatch = ["eval", "--model", str(model_dir / "model.pt"), "--dataset", str(sim / "dataset_raw_iq.npz"), "--out", str(ev)]
    assert main(mismatch) == 1


def test_domain_adapt_and_scale(tmp_path, spec_file):
    out = tmp_path / "da"
    assert main(["domain-adapt", "--spec", str(spec_file), "--representation", "vfdt", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert [c["test_domain"] for c in report["cells"]] == ["D1", "D2"]
    assert report["spec"]["representations"] == ["vfdt"]

    spec = dict(TINY_SPEC, device_subset_sizes=[2, 3], test_domains=["D1"])
    spec_file.write_text(json.dumps(spec))
    out = tmp_path / "sc"
    assert main(["scale", "--spec", str(spec_file), "--representation", "vfdt", "--out", str(out)]) == 0
    cells = json.loads((out / "report.json").read_text())["cells"]
    assert [c["n_devices"] for c in cells] == [2, 3]


def test_sweep_command(tmp_path, capsys):
    assert main(["sweep", "--parameter", "iq_amp_imbalance_db", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "sweeps.csv")))
    assert len(rows) == 5
    assert "monotone=True" in capsys.readouterr().out

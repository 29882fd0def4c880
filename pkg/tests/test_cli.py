import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from tsdm.cli import RunConfig, main
from tsdm.data import LabeledDataset, load_dataset, save_dataset
from tsdm.spectral import dominant_peaks, magnitude_spectrum

TINY_RUN = {
    "unet": {"length": 32, "base_channels": 4, "norm_groups": 2},
    "train": {"batch_size": 4, "epochs": 2, "total_steps": 10, "beta_start": 0.001, "beta_end": 0.2},
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def tiny_ckpt(tmp_path):
    data = tmp_path / "d.bin"
    assert run("gen-data", "--mode", "single", "--freqs", "3", "--n", "8", "--len", "32", "--seed", "1", "--out", data) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY_RUN))
    ckpt = tmp_path / "m.ckpt"
    assert run("train", "--data", data, "--config", cfg, "--out-ckpt", ckpt, "--seed", "0") == 0
    return ckpt


def test_gen_data_single(tmp_path):
    out = tmp_path / "single.bin"
    assert run("gen-data", "--mode", "single", "--freqs", "10", "--n", "20", "--len", "256", "--seed", "3", "--out", out) == 0
    ds = load_dataset(out)
    assert ds.series.shape == (20, 256)
    assert dominant_peaks(magnitude_spectrum(ds.series[0]), 1).bins == [10]
    stamp = json.loads((tmp_path / "run.json").read_text())
    assert stamp["seed"] == 3 and stamp["command"] == "gen-data" and stamp["version"]


def test_gen_data_multi_csv(tmp_path):
    out = tmp_path / "multi.csv"
    assert run("gen-data", "--mode", "multi", "--freqs", "88,222,333", "--n", "3", "--len", "2048", "--label", "m", "--out", out) == 0
    ds = load_dataset(out)
    assert ds.series.shape == (3, 2048) and ds.labels == ["m"] * 3
    assert sorted(dominant_peaks(magnitude_spectrum(ds.series[0]), 3).bins) == [88, 222, 333]


def test_absent_seed_is_generated_and_recorded(tmp_path):
    out = tmp_path / "a.bin"
    assert run("gen-data", "--mode", "single", "--freqs", "5", "--n", "2", "--len", "16", "--out", out) == 0
    seed = json.loads((tmp_path / "run.json").read_text())["seed"]
    assert isinstance(seed, int)
    again = tmp_path / "b.bin"
    run("gen-data", "--mode", "single", "--freqs", "5", "--n", "2", "--len", "16", "--seed", seed, "--out", again)
    assert out.read_bytes() == again.read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["gen-data", "--mode", "single", "--freqs", "10"],
        ["gen-data", "--mode", "sweep", "--freqs", "10", "--out", "x"],
        ["gen-data", "--mode", "single", "--freqs", "10,20", "--out", "x"],
        ["gen-data", "--mode", "single", "--freqs", "ten", "--out", "x"],
        ["sample", "--ckpt", "c", "--count", "-1", "--out", "x"],
        [],
    ],
)
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    assert run("sample", "--ckpt", tmp_path / "missing.ckpt", "--count", "1", "--out", tmp_path / "o.bin") == 1
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert run("sample", "--ckpt", bad, "--count", "1", "--out", tmp_path / "o.bin") == 1
    assert "error" in capsys.readouterr().err
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"unet": {}, "bogus": 1}))
    data = tmp_path / "d.bin"
    run("gen-data", "--mode", "single", "--freqs", "3", "--n", "4", "--len", "32", "--out", data)
    assert run("train", "--data", data, "--config", cfg, "--out-ckpt", tmp_path / "m.ckpt") == 1


def test_run_config_round_trip_and_unknown_keys():
    cfg = RunConfig.from_dict(TINY_RUN)
    assert RunConfig.from_dict(json.loads(cfg.to_json())).to_json() == cfg.to_json()
    for doc in ({"cnn": {"filters": [4], "nope": 1}}, {"train": {"lr": 1}}, {"extra": {}}):
        with pytest.raises(ValueError, match="unknown"):
            RunConfig.from_dict(doc)


def test_train_outputs(tmp_path, tiny_ckpt):
    rows = list(csv.reader(open(str(tiny_ckpt) + ".loss.csv")))
    assert rows[0] == ["step", "loss"]
    assert len(rows) - 1 == 2 * 2  # 8 series / batch 4, 2 epochs
    stamp = json.loads((tmp_path / "run.json").read_text())
    assert stamp["config"]["train"]["seed"] == 0 and stamp["config"]["unet"]["length"] == 32


def test_train_same_seed_identical_bytes(tmp_path, tiny_ckpt):
    other = tmp_path / "again.ckpt"
    run("train", "--data", tmp_path / "d.bin", "--config", tmp_path / "cfg.json", "--out-ckpt", other, "--seed", "0")
    assert other.read_bytes() == tiny_ckpt.read_bytes()


def test_train_zero_epochs_writes_checkpoint(tmp_path):
    data = tmp_path / "d.bin"
    run("gen-data", "--mode", "single", "--freqs", "3", "--n", "4", "--len", "32", "--out", data)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**TINY_RUN, "train": {**TINY_RUN["train"], "epochs": 0}}))
    assert run("train", "--data", data, "--config", cfg, "--out-ckpt", tmp_path / "z.ckpt") == 0
    assert (tmp_path / "z.ckpt").exists()


def test_sample_counts_trace_and_reproducibility(tmp_path, tiny_ckpt):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert run("sample", "--ckpt", tiny_ckpt, "--count", 40, "--seed", 9, "--trace-every", 4, "--svg", "--out", a) == 0
    assert run("sample", "--ckpt", tiny_ckpt, "--count", 40, "--seed", 9, "--out", b) == 0
    assert load_dataset(a).series.shape == (40, 32)
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.reader(open(str(a) + ".trace.csv")))
    assert sorted({int(r[0]) for r in rows[1:]}, reverse=True) == [10, 6, 2, 1, 0]
    assert (tmp_path / "a.bin.trace.svg").read_text().startswith("<svg")


def test_sample_zero_count(tmp_path, tiny_ckpt):
    out = tmp_path / "empty.bin"
    assert run("sample", "--ckpt", tiny_ckpt, "--count", 0, "--seed", 1, "--out", out) == 0
    assert load_dataset(out).series.shape == (0, 32)


def test_spectrum_reports(tmp_path):
    data = tmp_path / "sine.bin"
    run("gen-data", "--mode", "single", "--freqs", "10", "--n", "12", "--len", "128", "--seed", "2", "--out", data)
    out = tmp_path / "spectra"
    assert run("spectrum", "--data", data, "--summary", "--avg", "--peaks", 1, "--svg", "--out", out) == 0
    peaks = list(csv.DictReader(open(out / "peaks.csv")))
    assert len(peaks) == 12 and all(r["bin"] == "10" for r in peaks)
    summary = list(csv.DictReader(open(out / "summary.csv")))
    for r in summary:
        vals = [float(r[k]) for k in ("min", "q1", "median", "q3", "max")]
        assert vals == sorted(vals)
    assert (out / "summary.svg").exists() and (out / "average.svg").exists() and (out / "run.json").exists()


def test_spectrum_of_zero_dataset(tmp_path):
    data = tmp_path / "zero.bin"
    save_dataset(LabeledDataset(np.zeros((3, 16))), data)
    out = tmp_path / "spectra"
    assert run("spectrum", "--data", data, "--avg", "--out", out) == 0
    avg = list(csv.DictReader(open(out / "average.csv")))
    assert all(float(r["magnitude"]) == 0.0 for r in avg)


def test_augment_and_diagnose(tmp_path, tiny_ckpt):
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"a": {"checkpoint": tiny_ckpt.name, "count": 3}, "b": {"checkpoint": tiny_ckpt.name, "count": 2}}))
    gen = tmp_path / "gen.bin"
    assert run("augment", "--plan", plan, "--seed", 1, "--out", gen) == 0
    ds = load_dataset(gen)
    assert ds.series.shape == (5, 32) and ds.labels == ["a", "a", "a", "b", "b"]

    rng = np.random.default_rng(0)
    small = tmp_path / "small.bin"
    save_dataset(LabeledDataset(rng.standard_normal((4, 32)), ["a", "a", "b", "b"]), small)
    cfg = tmp_path / "cnn.json"
    cfg.write_text(json.dumps({"cnn": {"epochs": 2, "filters": [4, 4, 4], "batch_size": 2}}))
    out = tmp_path / "diag"
    args = ["diagnose", "--train", small, "--augmented", small, "--test", small, "--seeds", 3, "--config", cfg, "--seed", 0, "--replace", "--out", out]
    assert run(*args) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["relative_improvement_percent"] == 0.0
    assert len(report["small_accuracy"]) == 3
    assert run("diagnose", "--train", small, "--augmented", gen, "--test", small, "--seeds", 3, "--config", cfg, "--out", out) == 0


def test_console_entry_point_and_determinism_env(tmp_path):
    env = {**os.environ, "TSDM_DETERMINISTIC": "1"}
    outs = []
    for name in ("x.bin", "y.bin"):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "tsdm.cli", "gen-data", "--mode", "single", "--freqs", "4", "--n", "3", "--len", "16", "--seed", "5", "--out", str(out)],
            env=env, capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert json.loads((tmp_path / "run.json").read_text())["deterministic"] is True
    proc = subprocess.run([sys.executable, "-m", "tsdm.cli", "gen-data"], capture_output=True, text=True)
    assert proc.returncode == 2

import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from stpsm.cli import main
from stpsm.core import load_cohort, read_particles
from stpsm.lds import load_params, log_likelihood


def write_cfg(path, doc):
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return str(path)


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    cfg = write_cfg(root / "cfg.yaml", {"synth": {"n_subjects": 4, "n_timepoints": 3, "n_points": 16}})
    assert main(["synth", "--config", cfg, "--seed", "7", "--out", str(root / "out")]) == 0
    return root / "out"


@pytest.fixture(scope="module")
def optimized_dir(synth_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("opt")
    cfg = write_cfg(root / "cfg.yaml", {"optimize": {"target_particles": 8, "iterations_per_split": 10,
                                                     "checkpoint_every": 5}})
    assert main(["optimize", "--config", cfg, "--input", str(synth_dir / "manifest.json"),
                 "--out", str(root / "out")]) == 0
    return root / "out"


def test_synth_writes_grid_and_is_reproducible(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", {"synth": {"n_subjects": 2, "n_timepoints": 3, "n_points": 16}})
    assert main(["synth", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    a = tree(tmp_path / "a")
    assert len([k for k in a if k.startswith("domains/")]) == 6
    assert len([k for k in a if k.startswith("truth/")]) == 6
    assert a == tree(tmp_path / "b")
    assert read_particles(tmp_path / "a" / "truth" / "subject2_time3.particles").shape == (16, 3)


def test_unknown_key_is_rejected_without_outputs(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", {"optimize": {"iterations_per_splitt": 10}})
    out = tmp_path / "out"
    assert main(["optimize", "--config", cfg, "--out", str(out)]) == 2
    assert "optimize.iterations_per_splitt" in capsys.readouterr().err
    assert not out.exists()


def test_dry_run_prints_defaults(capsys):
    assert main(["optimize", "--dry-run"]) == 0
    doc = yaml.safe_load(capsys.readouterr().out)
    assert doc["optimize"]["target_particles"] == 256
    assert doc["optimize"]["alpha_start"] == 100 and doc["optimize"]["alpha_end"] == 0.1
    assert doc["lds"]["L"] == 64 and doc["lds"]["iters"] == 50
    assert doc["eval"]["folds"] == 5
    assert isinstance(doc["optimize"]["rng_seed"], int)


def test_missing_input_is_config_error(tmp_path):
    assert main(["lds-fit", "--out", str(tmp_path / "x")]) == 2


def test_optimize_outputs(optimized_dir):
    cohort = load_cohort(optimized_dir / "manifest.json")
    assert cohort.points.shape == (4, 3, 8, 3)
    for f in (optimized_dir / "particles").iterdir():
        assert len(f.read_text().splitlines()) == 8
    summary = json.loads((optimized_dir / "summary.json").read_text())
    assert summary["mode"] == "spatiotemporal"
    trace = (optimized_dir / "trace.csv").read_text().splitlines()
    assert len(trace) == 1 + 4 * 10


def test_optimize_resume_is_identical(synth_dir, optimized_dir, tmp_path):
    cfg = write_cfg(tmp_path / "cfg.yaml", {"optimize": {"target_particles": 8, "iterations_per_split": 10,
                                                         "checkpoint_every": 5}})
    assert main(["optimize", "--config", cfg, "--input", str(synth_dir / "manifest.json"),
                 "--out", str(optimized_dir), "--resume"]) == 0
    again = load_cohort(optimized_dir / "manifest.json")
    fresh_dir = tmp_path / "fresh"
    assert main(["optimize", "--config", cfg, "--input", str(synth_dir / "manifest.json"),
                 "--out", str(fresh_dir)]) == 0
    np.testing.assert_array_equal(again.points, load_cohort(fresh_dir / "manifest.json").points)


def test_cross_sectional_mode(synth_dir, tmp_path):
    cfg = write_cfg(tmp_path / "cfg.yaml", {"optimize": {"target_particles": 4, "iterations_per_split": 5,
                                                         "mode": "cross_sectional"}})
    assert main(["optimize", "--config", cfg, "--input", str(synth_dir / "manifest.json"),
                 "--out", str(tmp_path / "out")]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["mode"] == "cross_sectional" and summary["n_times"] == 1


def test_lds_fit_and_reload(optimized_dir, tmp_path):
    cfg = write_cfg(tmp_path / "cfg.yaml", {"lds": {"L": 3, "iters": 4}})
    out = tmp_path / "lds"
    assert main(["lds-fit", "--config", cfg, "--input", str(optimized_dir / "manifest.json"),
                 "--out", str(out)]) == 0
    rows = (out / "loglik.csv").read_text().splitlines()
    assert rows[0] == "iteration,loglik" and len(rows) == 1 + 4
    params, scaler = load_params(out / "lds_params.npz")
    obs = scaler.transform(load_cohort(optimized_dir / "manifest.json").observations())
    # The trace records the likelihood of the parameters entering each M-step,
    # so the reloaded final parameters score at least the last recorded value.
    ll = log_likelihood(params, obs)
    assert ll >= float(rows[-1].split(",")[1]) - 1e-9


def test_eval_two_approaches(synth_dir, optimized_dir, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "cfg.yaml", {
        "inputs": {"truth": str(synth_dir / "manifest.json"), "pdm": str(optimized_dir / "manifest.json")},
        "eval": {"folds": 2, "L": 2, "iters": 3, "n_samples": 5, "mask_fractions": [0.4]}})
    out = tmp_path / "eval"
    assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
    rows = json.loads((out / "summary.json").read_text())["rows"]
    assert [r["approach"] for r in rows] == ["truth", "pdm"]
    for r in rows:
        assert r["full_sequence"]["rmse"] > 0 and r["specificity"]["rmse"] > 0
        assert r["partial_sequence"]["0.4"]["rmse"] > 0
    assert (out / "metrics_long.csv").read_text().startswith("approach,")


def test_modes(synth_dir, tmp_path):
    out = tmp_path / "modes"
    assert main(["modes", "--input", str(synth_dir / "manifest.json"), "--out", str(out)]) == 0
    doc = json.loads((out / "modes.json").read_text())
    assert len(doc["eigenvalues"]) == 2
    assert (out / "mode1_+2sd.particles").exists() and (out / "mean.particles").exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stpsm.cli", "synth", "--dry-run"],
                          capture_output=True, text=True, check=True)
    assert "n_subjects" in proc.stdout

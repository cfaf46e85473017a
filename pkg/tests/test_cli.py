"""End-to-end checks of the command-line workflows."""

import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from esotune import cli, dataset, plants, tuner
from esotune.sim import CriterionWeights, SimConfig

M1D_PLANT = {
    "kind": "M1D",
    "b1": -8.8255,
    "b2": -20.169,
    "b3": 0.25,
    "b4": 0.25,
    "b5": 2.0,
    "b6": 1.0,
    "b7": 5.0,
    "g_hat": -20.0,
    "sigma_n": 0.0059,
    "noise_seed": 0,
}
M1D_SIM = {"x0": [1.0, 0.0], "zhat0": [1.0, 0.0, 0.0], "k": 4.0}

# NS zero-initialized observer at the fastest gains: the estimation
# transient overwhelms the quadratic drift and the run blows up.
DIVERGING_NS = {
    "plant": {
        "kind": "NS", "a1": 1.0, "a2": 0.5, "a3": 1.0, "a4": 1.0,
        "a5": 0.15, "a6": 1.0, "g_hat": 1.0, "sigma_n": 0.0,
    },
    "sim": {"x0": [-0.9, -0.5], "zhat0": [0.0, 0.0, 0.0]},
    "lambda": [-80.0, -80.0, -80.0],
}


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run_cli(command, config_path, out_dir, *extra):
    return cli.main([
        command, "--config", str(config_path), "--out-dir", str(out_dir), *extra])


def artifact_digests(out_dir, skip=("manifest.json",)):
    """Digest of every non-figure artifact, keyed by file name."""
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(out_dir.iterdir())
        if p.suffix != ".png" and p.name not in skip
    }


def read_manifest(out_dir):
    return json.loads((out_dir / "manifest.json").read_text())


# ---------------------------------------------------------------------------
# exit codes and validation


def test_missing_top_level_field_named(tmp_path, capsys):
    cfg = write_config(tmp_path, {"sim": M1D_SIM, "lambda": [-25.0, -25.0, -25.0]})
    assert run_cli("simulate", cfg, tmp_path / "out") == 2
    assert "'plant'" in capsys.readouterr().err


def test_missing_nested_field_named(tmp_path, capsys):
    cfg = write_config(tmp_path, {"kind": "M1D", "data": {"val": "x.jsonl"}})
    assert run_cli("train", cfg, tmp_path / "out") == 2
    assert "'data.train'" in capsys.readouterr().err


def test_missing_plant_parameter_named(tmp_path, capsys):
    cfg = write_config(tmp_path, {
        "plant": {"kind": "M1D", "b1": -8.0, "b2": -20.0},
        "lambda": [-25.0, -25.0, -25.0],
    })
    assert run_cli("simulate", cfg, tmp_path / "out") == 2
    assert "'b3'" in capsys.readouterr().err


def test_invalid_json_is_config_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert run_cli("simulate", path, tmp_path / "out") == 2


def test_missing_config_file_is_io_error(tmp_path):
    assert run_cli("simulate", tmp_path / "absent.json", tmp_path / "out") == 4


def test_divergence_is_numerical_failure(tmp_path, capsys):
    cfg = write_config(tmp_path, DIVERGING_NS)
    assert run_cli("simulate", cfg, tmp_path / "out") == 3
    assert "diverged" in capsys.readouterr().err


def test_unknown_selector_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, {
        "plant": M1D_PLANT, "weights": {"iae": 1.0}, "selector": "exhaustive"})
    assert run_cli("tune", cfg, tmp_path / "out") == 2
    assert "selector" in capsys.readouterr().err


def test_unknown_weight_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, {
        "plant": M1D_PLANT, "weights": {"ise": 1.0}, "selector": "ideal"})
    assert run_cli("tune", cfg, tmp_path / "out") == 2
    assert "ise" in capsys.readouterr().err


def test_all_diverged_landscape_is_numerical_failure(tmp_path):
    doc = {
        "plant": DIVERGING_NS["plant"],
        "sim": DIVERGING_NS["sim"],
        "weights": {"iae": 1.0},
        "grid": {"count": 2, "lo": -80.0, "hi": -75.0},
        "seeds": 1,
    }
    cfg = write_config(tmp_path, doc)
    assert run_cli("landscape", cfg, tmp_path / "out", "--no-plots") == 3


# ---------------------------------------------------------------------------
# simulate


def test_simulate_artifacts_and_manifest(tmp_path):
    cfg = write_config(tmp_path, {
        "plant": M1D_PLANT, "sim": M1D_SIM, "omega0": 25.0,
        "weights": {"iae": 10.0, "iac": 1.0},
    })
    out = tmp_path / "out"
    assert run_cli("simulate", cfg, out) == 0

    criteria = json.loads((out / "criteria.json").read_text())
    assert set(criteria) == {"iae", "iac", "iacd", "iadee", "cost"}
    assert all(np.isfinite(v) for v in criteria.values())
    assert criteria["cost"] == pytest.approx(
        10.0 * criteria["iae"] + criteria["iac"])

    lines = (out / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "t,x1,x2,z1,z2,z3,u,d,y"
    assert len(lines) == 1 + 10_001
    first = [float(v) for v in lines[1].split(",")]
    assert first[0] == 0.0 and first[1] == 1.0

    manifest = read_manifest(out)
    assert set(manifest) == {
        "command", "config_digest", "code_version", "seeds", "jobs",
        "wall_clock_s", "outputs"}
    assert manifest["command"] == "simulate"
    assert len(manifest["config_digest"]) == 64
    written = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert sorted(written) == manifest["outputs"]
    assert (out / "trajectory.png").exists()


def test_no_plots_skips_figures(tmp_path):
    cfg = write_config(tmp_path, {
        "plant": M1D_PLANT, "sim": M1D_SIM, "lambda": [-25.0, -25.0, -25.0]})
    out = tmp_path / "out"
    assert run_cli("simulate", cfg, out, "--no-plots") == 0
    assert not list(out.glob("*.png"))
    assert "trajectory.csv" in read_manifest(out)["outputs"]


def test_simulate_rejects_gain_ambiguity(tmp_path, capsys):
    cfg = write_config(tmp_path, {
        "plant": M1D_PLANT, "lambda": [-25.0, -25.0, -25.0], "omega0": 25.0})
    assert run_cli("simulate", cfg, tmp_path / "out") == 2
    err = capsys.readouterr().err
    assert "lambda" in err and "omega0" in err


def test_seed_override_reproduces_and_separates(tmp_path):
    cfg = write_config(tmp_path, {"plant": M1D_PLANT, "sim": M1D_SIM, "omega0": 25.0})
    outs = {}
    for name, seed in (("a", "7"), ("b", "7"), ("c", "8")):
        out = tmp_path / name
        assert run_cli("simulate", cfg, out, "--no-plots", "--seed", seed) == 0
        outs[name] = artifact_digests(out)
    assert outs["a"] == outs["b"]
    assert outs["a"] != outs["c"]
    assert (read_manifest(tmp_path / "a")["config_digest"]
            == read_manifest(tmp_path / "b")["config_digest"])
    assert (read_manifest(tmp_path / "a")["config_digest"]
            != read_manifest(tmp_path / "c")["config_digest"])


def test_module_entry_point(tmp_path):
    cfg = write_config(tmp_path, {
        "plant": M1D_PLANT, "sim": M1D_SIM, "lambda": [-25.0, -25.0, -25.0]})
    out = tmp_path / "out"
    proc = subprocess.run(
        [sys.executable, "-m", "esotune", "simulate", "--config", str(cfg),
         "--out-dir", str(out), "--no-plots"],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (out / "manifest.json").exists()


# ---------------------------------------------------------------------------
# sweep / tune / landscape


def test_sweep_csv_matches_omegas(tmp_path):
    cfg = write_config(tmp_path, {
        "plant": M1D_PLANT, "sim": M1D_SIM,
        "omegas": [5.0, 10.0, 20.0], "seeds": 1})
    out = tmp_path / "out"
    assert run_cli("sweep", cfg, out) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "omega0,iae,iac,iacd,iadee"
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    assert rows.shape == (3, 5)
    assert list(rows[:, 0]) == [5.0, 10.0, 20.0]
    assert np.all(np.isfinite(rows))
    assert (out / "sweep.png").exists()


def test_tune_bandwidth_report(tmp_path):
    cfg = write_config(tmp_path, {
        "plant": M1D_PLANT, "sim": M1D_SIM,
        "weights": {"iae": 10.0, "iac": 1.0},
        "selector": "bandwidth",
        "grid": {"count": 5, "lo": -60.0, "hi": -5.0},
        "seeds": 1,
    })
    out = tmp_path / "out"
    assert run_cli("tune", cfg, out, "--no-plots") == 0
    report = json.loads((out / "tune_report.json").read_text())
    assert report["selector"] == "bandwidth"
    lam = report["lambda_star"]
    assert lam[0] == lam[1] == lam[2]
    assert report["grid"]["points"] == 5
    assert len(report["table"]) == 5
    assert report["j_star"] == min(row[3] for row in report["table"])
    lines = (out / "tune_table.csv").read_text().splitlines()
    assert lines[0] == "lam1,lam2,lam3,J"
    assert len(lines) == 6


def test_tune_jobs_byte_identical(tmp_path):
    # count=12 gives 364 canonical rows, two pooled chunks.
    doc = {
        "plant": M1D_PLANT, "sim": M1D_SIM,
        "weights": {"iae": 10.0, "iac": 1.0},
        "selector": "ideal",
        "grid": {"count": 12},
        "seeds": 2,
    }
    cfg = write_config(tmp_path, doc)
    digests = {}
    for jobs in ("1", "2"):
        out = tmp_path / f"jobs{jobs}"
        assert run_cli("tune", cfg, out, "--no-plots", "--jobs", jobs) == 0
        digests[jobs] = artifact_digests(out)
    assert digests["1"] == digests["2"]
    m1, m2 = read_manifest(tmp_path / "jobs1"), read_manifest(tmp_path / "jobs2")
    assert m1["config_digest"] == m2["config_digest"]
    assert m1["outputs"] == m2["outputs"]


def test_landscape_matches_library(tmp_path):
    doc = {
        "plant": M1D_PLANT, "sim": M1D_SIM,
        "weights": {"iae": 1.0},
        "grid": {"count": 3, "lo": -40.0, "hi": -5.0},
        "seeds": 1,
    }
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "out"
    assert run_cli("landscape", cfg, out, "--no-plots") == 0

    lines = (out / "landscape.csv").read_text().splitlines()
    assert lines[0] == "lam1,lam23,j_true,j_pred"
    got = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    assert got.shape == (9, 4)
    assert np.all(np.isnan(got[:, 3]))

    spec = plants.spec_from_dict(doc["plant"])
    simcfg = SimConfig(x0=(1.0, 0.0), zhat0=(1.0, 0.0, 0.0), k=4.0)
    expected = tuner.performance_landscape(
        spec, simcfg, CriterionWeights(1.0, 0.0, 0.0, 0.0),
        grid=tuner.GainGrid(count=3, lo=-40.0, hi=-5.0), seeds=1)
    np.testing.assert_array_equal(got[:, :3], expected[:, :3])

    summary = json.loads((out / "landscape.json").read_text())
    assert summary["points"] == 9
    assert 0.0 <= summary["valley_span_fraction"] <= 1.0


# ---------------------------------------------------------------------------
# check-bounds


def test_check_bounds_reports_and_margins(tmp_path):
    cfg = write_config(tmp_path, {
        "plant": M1D_PLANT, "sim": M1D_SIM,
        "checks": [
            {"type": "observer", "lambda": [-25.0, -25.0, -25.0]},
            {"type": "tracking", "lambda": [-25.0, -25.0, -25.0],
             "label": "tracking-25"},
        ],
    })
    out = tmp_path / "out"
    assert run_cli("check-bounds", cfg, out) == 0
    doc = json.loads((out / "bound_reports.json").read_text())
    assert len(doc["reports"]) == 2
    assert doc["reports"][1]["label"] == "tracking-25"
    assert all(not r["violated"] for r in doc["reports"])
    for i in range(2):
        header = (out / f"margins_{i:02d}.csv").read_text().splitlines()[0]
        assert header == "t,observed,envelope,margin"
    assert (out / "margins.png").exists()


def test_check_bounds_requires_known_type(tmp_path, capsys):
    cfg = write_config(tmp_path, {
        "plant": M1D_PLANT,
        "checks": [{"type": "stability", "lambda": [-25.0, -25.0, -25.0]}],
    })
    assert run_cli("check-bounds", cfg, tmp_path / "out") == 2
    assert "checks[0].type" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# dataset -> train -> montecarlo pipeline


def test_gen_dataset_jobs_byte_identical(tmp_path):
    # 260 train records spill over one 256-sample task, so --jobs 2
    # really fans out.
    doc = {"kind": "M1D", "counts": {"train": 260}, "seed": 11}
    cfg = write_config(tmp_path, doc)
    digests = {}
    for jobs in ("1", "2"):
        out = tmp_path / f"jobs{jobs}"
        assert run_cli("gen-dataset", cfg, out, "--no-plots", "--jobs", jobs) == 0
        digests[jobs] = artifact_digests(out)
    assert "m1d_train.jsonl" in digests["1"]
    assert digests["1"] == digests["2"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Tiny dataset and model shared by the train/montecarlo tests."""
    root = tmp_path_factory.mktemp("pipeline")
    ds_out = root / "data"
    cfg = write_config(root, {
        "kind": "M1D", "counts": {"train": 8, "val": 4}, "seed": 3,
    }, name="gen.json")
    assert run_cli("gen-dataset", cfg, ds_out, "--no-plots") == 0

    model_out = root / "model"
    cfg = write_config(root, {
        "kind": "M1D",
        "data": {"train": str(ds_out / "m1d_train.jsonl"),
                 "val": str(ds_out / "m1d_val.jsonl")},
        "model": {"base_filters": 1, "transient_fc": 8,
                  "head_sizes": [8, 4], "seed": 1},
        "train": {"epochs": 2, "batch_size": 4, "seed": 0},
    }, name="train.json")
    assert run_cli("train", cfg, model_out, "--no-plots") == 0
    return root, ds_out, model_out


def test_gen_dataset_artifacts(pipeline):
    _, ds_out, _ = pipeline
    meta = json.loads((ds_out / "m1d_meta.json").read_text())
    assert meta["counts"] == {"train": 8, "val": 4}
    assert len(dataset.load_split(ds_out / "m1d_train.jsonl")) == 8


def test_train_artifacts(pipeline):
    _, _, model_out = pipeline
    assert (model_out / "model.bin").exists()
    lines = (model_out / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert len(lines) == 3
    metrics = json.loads((model_out / "metrics.json").read_text())
    assert metrics["train_samples"] == 8
    assert np.isfinite(metrics["best_val_loss"])


def test_train_empty_dataset_fails_without_model(pipeline, tmp_path, capsys):
    _, ds_out, _ = pipeline
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    cfg = write_config(tmp_path, {
        "kind": "M1D",
        "data": {"train": str(empty), "val": str(ds_out / "m1d_val.jsonl")},
    })
    out = tmp_path / "out"
    assert run_cli("train", cfg, out) == 2
    assert "no records" in capsys.readouterr().err
    assert not (out / "model.bin").exists()


def test_tune_nn_selector(pipeline, tmp_path):
    _, _, model_out = pipeline
    cfg = write_config(tmp_path, {
        "plant": M1D_PLANT, "sim": M1D_SIM,
        "weights": {"iae": 10.0, "iac": 1.0},
        "selector": "nn",
        "model": str(model_out / "model.bin"),
        "x_test0": [0.2, 0.1],
        "grid": {"count": 3},
    })
    out = tmp_path / "out"
    assert run_cli("tune", cfg, out, "--no-plots") == 0
    report = json.loads((out / "tune_report.json").read_text())
    assert report["selector"] == "nn"
    assert report["eval_seeds"] == 0
    assert all(-80.0 <= v <= -1.0 for v in report["lambda_star"])


def test_montecarlo_paired_trials(pipeline, tmp_path):
    _, _, model_out = pipeline
    cfg = write_config(tmp_path, {
        "kind": "M1D",
        "model": str(model_out / "model.bin"),
        "trials": 2,
        "eval_seeds": 1,
        "grid": {"count": 3},
        "weights": {"iae": 1.0, "iac": 1.0},
    })
    out = tmp_path / "out"
    assert run_cli("montecarlo", cfg, out) == 0
    doc = json.loads((out / "montecarlo.json").read_text())
    assert doc["trials"] == 2
    assert len(doc["results"]) == 2
    assert 0.0 <= doc["win_rate"] <= 1.0
    for row in doc["results"]:
        assert row["win"] == (row["j_candidate"] < row["j_baseline"])
        assert 1.0 <= row["omega_baseline"] <= 80.0
    assert (out / "paired_costs.png").exists()


def test_montecarlo_model_kind_mismatch(pipeline, tmp_path, capsys):
    _, _, model_out = pipeline
    cfg = write_config(tmp_path, {
        "kind": "NS", "model": str(model_out / "model.bin"), "trials": 1})
    assert run_cli("montecarlo", cfg, tmp_path / "out") == 2
    assert "normalizes" in capsys.readouterr().err

"""Sample drawing, two-experiment labeling, normalization, JSONL round trips."""

import json
import math

import numpy as np
import pytest

from esotune import dataset, plants, sim
from esotune.control import EigenTriple
from esotune.dataset import (
    DatasetRecord,
    SampleSpec,
    decode_transient,
    denormalize_criteria,
    encode_transient,
    generate_dataset,
    load_split,
    make_record,
    normalize_criteria,
    record_from_json,
    record_to_json,
    run_basic_experiment,
    run_target_experiment,
    sample_spec,
)
from esotune.plants import KIND_M1D, KIND_NS, NoiseModel, NsParams, PlantSpec
from esotune.sim import CRITERIA_CAP, child_seed


# --- drawing -------------------------------------------------------------

def test_sample_spec_is_deterministic():
    a = sample_spec(KIND_NS, 1234)
    b = sample_spec(KIND_NS, 1234)
    assert a == b
    assert sample_spec(KIND_NS, 1235) != a


def test_ns_draws_stay_in_range():
    for i in range(300):
        s = sample_spec(KIND_NS, 1000 + i)
        p = s.plant.params
        assert 0.0 <= p.a1 <= 2.0 and 0.0 <= p.a2 <= 1.0 and 0.0 <= p.a3 <= 2.0
        assert 0.5 <= p.a4 <= 1.5 and 0.0 <= p.a5 <= 0.3 and 0.0 <= p.a6 <= 2.0
        assert p.g_hat == 1.0
        assert 0.0 <= s.plant.noise.sigma_n <= 0.01
        for v in (*s.x_test0, *s.x0):
            assert -1.0 <= v <= 1.0
        for lam in s.lam.as_array():
            assert -80.0 <= lam <= -1.0


def test_m1d_draws_stay_in_range():
    for i in range(300):
        s = sample_spec(KIND_M1D, 2000 + i)
        p = s.plant.params
        assert -20.0 <= p.b1 <= -4.0 and -30.0 <= p.b2 <= -10.0
        for v in (p.b3, p.b4, p.b6):
            assert 0.0 <= v <= 0.5
        for v in (p.b5, p.b7):
            assert 0.0 <= v <= 2.0
        assert p.g_hat == -20.0
        assert 0.0 <= s.plant.noise.sigma_n <= 0.02
        for v in (*s.x_test0, *s.x0):
            assert -math.pi <= v <= math.pi


def test_sample_spec_rejects_unknown_kind():
    with pytest.raises(ValueError):
        sample_spec("cartpole", 1)


def test_sample_spec_validation():
    base = sample_spec(KIND_NS, 7)
    with pytest.raises(ValueError):
        SampleSpec(base.plant, base.x_test0, base.x0, base.lam, "holdout", 7)
    with pytest.raises(ValueError):
        SampleSpec(base.plant, base.x_test0, base.x0,
                   EigenTriple(-90.0, -5.0, -5.0), "train", 7)


# --- normalization ---------------------------------------------------------

def test_normalize_ns_scales():
    got = normalize_criteria(np.array([3.7, 40.0, 4.0 + math.e ** 3, 25.0]), KIND_NS)
    np.testing.assert_allclose(got, [1.0, 0.5, 0.0, 0.5], atol=1e-12)


def test_normalize_ns_log_guard_below_four():
    got = normalize_criteria(np.array([0.0, 0.0, 2.0, 0.0]), KIND_NS)
    assert got[2] == 0.0


def test_normalize_m1d_scales_and_clipping():
    got = normalize_criteria(np.array([16.0, 5.0, 1000.0, 50.0]), KIND_M1D)
    np.testing.assert_allclose(got, [1.0, 0.5, 0.25, 0.5], atol=1e-12)


def test_normalize_round_trip_below_clip():
    for kind, raw in (
        (KIND_NS, np.array([1.5, 30.0, 300.0, 20.0])),
        (KIND_M1D, np.array([1.5, 5.0, 300.0, 20.0])),
    ):
        back = denormalize_criteria(normalize_criteria(raw, kind), kind)
        np.testing.assert_allclose(back, raw, rtol=1e-12)


def test_normalize_batched_rows():
    rows = np.array([[3.7, 80.0, 4.0 + math.e ** 3, 50.0],
                     [0.0, 0.0, 0.0, 0.0]])
    got = normalize_criteria(rows, KIND_NS)
    assert got.shape == (2, 4)
    np.testing.assert_allclose(got[0], [1.0, 1.0, 0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(got[1], [0.0, 0.0, 0.0, 0.0], atol=1e-12)


# --- experiments ------------------------------------------------------------

def quiet_ns_sample(x_test0=(0.0, 0.0), x0=(0.0, 0.0), lam=(-25.0, -25.0, -25.0)):
    params = NsParams(a1=1.0, a2=0.0, a3=1.0, a4=1.0, a5=0.1, a6=1.0, g_hat=1.0)
    plant = PlantSpec(KIND_NS, params, NoiseModel(sigma_n=0.0, seed=0))
    return SampleSpec(plant, tuple(x_test0), tuple(x0), EigenTriple(*lam), "train", 31)


def test_basic_transient_shape_and_determinism():
    sample = sample_spec(KIND_NS, 555)
    a = run_basic_experiment(sample)
    b = run_basic_experiment(sample)
    assert a.shape == (1000, 3)
    np.testing.assert_array_equal(a, b)


def test_quiet_system_gives_zero_transient():
    transient = run_basic_experiment(quiet_ns_sample())
    np.testing.assert_array_equal(transient, np.zeros((1000, 3)))


def test_equilibrium_target_criteria_vanish():
    crit = run_target_experiment(quiet_ns_sample())
    assert crit.iae < 1e-9 and crit.iac < 1e-9


def test_m1d_always_has_estimation_error():
    sample = sample_spec(KIND_M1D, 77)
    crit = run_target_experiment(sample)
    assert crit.iadee > 0.0


def test_target_with_basic_configuration_reproduces_basic_criteria():
    drawn = sample_spec(KIND_NS, 99)
    same = SampleSpec(drawn.plant, drawn.x_test0, drawn.x_test0,
                      EigenTriple(-25.0, -25.0, -25.0), "train", drawn.sample_seed)
    basic_seed = child_seed(drawn.sample_seed, 0)
    crit = run_target_experiment(same, noise_seed=basic_seed)
    spec = plants.with_noise(drawn.plant, seed=basic_seed)
    from esotune.control import gains_from_eigenvalues
    cfg = sim.SimConfig(x0=drawn.x_test0, zhat0="measured")
    traj = sim.run_closed_loop(spec, gains_from_eigenvalues(same.lam), cfg)
    want = sim.compute_criteria(traj)
    np.testing.assert_allclose(crit.as_array(), want.as_array(), rtol=1e-9)


def test_unstable_gain_sign_saturates_target():
    params = NsParams(a1=1.0, a2=0.5, a3=1.0, a4=1.0, a5=0.1, a6=1.0, g_hat=-1.0)
    plant = PlantSpec(KIND_NS, params, NoiseModel(sigma_n=0.0, seed=0))
    sample = SampleSpec(plant, (0.2, 0.1), (0.2, 0.1),
                        EigenTriple(-40.0, -40.0, -40.0), "train", 5)
    crit = run_target_experiment(sample)
    assert np.all(crit.as_array() == CRITERIA_CAP)


# --- records -----------------------------------------------------------------

def test_make_record_is_deterministic():
    a = make_record(KIND_NS, 4242)
    b = make_record(KIND_NS, 4242)
    assert record_to_json(a) == record_to_json(b)
    assert not a.target_diverged


def test_batched_generation_matches_per_record_path():
    seeds = [child_seed(9, 0, i) for i in range(5)]
    batched = dataset._generate_records(KIND_NS, seeds, "train")
    for seed, rec in zip(seeds, batched):
        single = make_record(KIND_NS, seed, "train")
        assert record_to_json(single) == record_to_json(rec)


def test_exhausted_redraws_raise(monkeypatch):
    bad = quiet_ns_sample()
    params = NsParams(a1=1.0, a2=0.5, a3=1.0, a4=1.0, a5=0.1, a6=1.0, g_hat=-1.0)
    plant = PlantSpec(KIND_NS, params, NoiseModel(sigma_n=0.0, seed=0))
    unstable = SampleSpec(plant, (0.2, 0.1), (0.2, 0.1), bad.lam, "train", 31)
    monkeypatch.setattr(dataset, "MAX_REDRAWS", 2)
    monkeypatch.setattr(dataset, "sample_spec", lambda kind, seed, split="train": unstable)
    with pytest.raises(RuntimeError, match="diverging"):
        make_record(KIND_NS, 1)


def test_record_validation():
    rec = make_record(KIND_NS, 11)
    with pytest.raises(ValueError):
        DatasetRecord(rec.sample, rec.basic_transient[:10], rec.criteria_raw,
                      rec.criteria_norm)
    with pytest.raises(ValueError):
        DatasetRecord(rec.sample, rec.basic_transient, rec.criteria_raw,
                      np.array([0.0, 0.5, 1.5, 0.0]))


def test_transient_encoding_is_exact():
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(1000, 3))
    again = decode_transient(encode_transient(arr))
    np.testing.assert_array_equal(arr, again)


def test_record_json_round_trip_is_exact():
    rec = make_record(KIND_M1D, 321)
    line = record_to_json(rec)
    again = record_from_json(line)
    assert record_to_json(again) == line
    np.testing.assert_array_equal(rec.basic_transient, again.basic_transient)
    assert again.sample == rec.sample


# --- files ---------------------------------------------------------------------

def test_generate_dataset_files(tmp_path):
    counts = {"train": 8, "val": 3, "test": 2}
    paths = generate_dataset(KIND_NS, counts, seed=777, out_dir=tmp_path)
    train = load_split(paths["train"])
    assert len(train) == 8
    assert len(load_split(paths["val"])) == 3
    assert len(load_split(paths["test"])) == 2

    seeds = set()
    for split in ("train", "val", "test"):
        for rec in load_split(paths[split]):
            assert rec.sample.split == split
            seeds.add(rec.sample.sample_seed)
    assert len(seeds) == 13  # disjoint splits, no collisions

    meta = json.loads(paths["meta"].read_text())
    assert meta["kind"] == KIND_NS
    assert meta["master_seed"] == 777
    assert meta["counts"] == counts
    assert set(meta["criteria_summary"]["train"]) == {"iae", "iac", "iacd", "iadee"}
    hist = meta["criteria_summary"]["train"]["iae"]["norm_hist"]
    assert len(hist) == 20 and sum(hist) == 8


def test_generate_dataset_is_byte_identical(tmp_path):
    counts = {"train": 4, "val": 2}
    first = generate_dataset(KIND_M1D, counts, seed=5, out_dir=tmp_path / "a")
    second = generate_dataset(KIND_M1D, counts, seed=5, out_dir=tmp_path / "b")
    for key in ("train", "val", "meta"):
        assert first[key].read_bytes() == second[key].read_bytes()


def test_generate_dataset_validates_counts(tmp_path):
    with pytest.raises(ValueError):
        generate_dataset(KIND_NS, {"train": 0}, seed=1, out_dir=tmp_path)
    with pytest.raises(ValueError):
        generate_dataset(KIND_NS, {"extra": 5}, seed=1, out_dir=tmp_path)

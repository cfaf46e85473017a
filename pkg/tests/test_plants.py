"""Benchmark plant definitions, disturbance profiles, noise, serialization."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esotune import plants
from esotune.plants import (
    KIND_M1D,
    KIND_NS,
    M1dParams,
    NoiseModel,
    NsParams,
    PlantSpec,
)


def ns_spec(**over):
    defaults = dict(a1=1.0, a2=0.5, a3=1.0, a4=1.0, a5=0.15, a6=1.0, g_hat=1.0)
    defaults.update(over)
    return PlantSpec(KIND_NS, NsParams(**defaults), NoiseModel(sigma_n=0.007))


def m1d_spec(**over):
    defaults = dict(b1=-8.8255, b2=-20.169, b3=0.25, b4=0.25, b5=2.0,
                    b6=1.0, b7=5.0, g_hat=-20.0)
    defaults.update(over)
    return PlantSpec(KIND_M1D, M1dParams(**defaults), NoiseModel(sigma_n=0.0059))


# --- drift / gain / external disturbance -------------------------------

def test_ns_drift_hand_value():
    spec = ns_spec()
    # sin(pi/2) * 0.5 + 2^2
    got = plants.drift(spec, np.array([0.5, 2.0]), t=math.pi / 2)
    assert got == pytest.approx(4.5, rel=1e-12)


def test_ns_gain_hand_value():
    spec = ns_spec()
    got = plants.input_gain(spec, np.array([0.0, math.pi / 2]))
    assert got == pytest.approx(1.15, rel=1e-12)


def test_ns_gain_stays_inside_stability_window():
    # worst-case table ranges: a4 in [0.5, 1.5], a5 in [0, 0.3], g_hat = 1
    rng = np.random.default_rng(3)
    for _ in range(200):
        a4 = rng.uniform(0.5, 1.5)
        a5 = rng.uniform(0.0, 0.3)
        spec = ns_spec(a4=a4, a5=a5)
        x2 = rng.uniform(-5.0, 5.0)
        ratio = plants.input_gain(spec, np.array([0.0, x2])) / spec.params.g_hat
        assert 0.0 < ratio < 3.0


def test_ns_external_is_cosine():
    spec = ns_spec()
    assert plants.external_disturbance(spec, 0.0) == pytest.approx(0.5)
    assert plants.external_disturbance(spec, math.pi) == pytest.approx(-0.5)


def test_m1d_disturbance_segments_hand_values():
    spec = m1d_spec()
    scale = -20.169  # equals b2 = -K_I/(J R)
    assert plants.external_disturbance(spec, 1.0) == 0.0
    assert plants.external_disturbance(spec, 3.0) == pytest.approx(scale * 0.25)
    # quarter period into the sawtooth segment: saw(pi/2) = 0.5
    got = plants.external_disturbance(spec, 5.0 + 0.125)
    assert got == pytest.approx(scale * (0.25 + 0.25 * 0.5), rel=1e-12)
    # quarter period into the sine segment: sin(pi/2) = 1
    got = plants.external_disturbance(spec, 7.5 + 0.05)
    assert got == pytest.approx(scale * (0.25 + 1.0), rel=1e-12)


def test_m1d_segment_boundaries_are_left_closed():
    spec = m1d_spec()
    assert plants.external_disturbance(spec, 2.5) == pytest.approx(-20.169 * 0.25)
    # sawtooth starts at zero phase on its boundary
    assert plants.external_disturbance(spec, 5.0) == pytest.approx(-20.169 * 0.25)
    assert plants.external_disturbance(spec, 7.5) == pytest.approx(-20.169 * 0.25)


def test_m1d_horizon_endpoint_still_defined():
    spec = m1d_spec()
    val = plants.external_disturbance(spec, 10.0)
    assert np.isfinite(val)


def test_disturbance_outside_horizon_rejected():
    spec = m1d_spec()
    with pytest.raises(ValueError):
        plants.external_disturbance(spec, 10.5)
    with pytest.raises(ValueError):
        plants.external_disturbance(spec, -0.1)


def test_sawtooth_shape():
    # rises linearly from 0, wraps at half period from +1 to -1
    assert plants.sawtooth(0.0) == 0.0
    assert plants.sawtooth(math.pi / 2) == pytest.approx(0.5)
    assert plants.sawtooth(math.pi - 1e-9) == pytest.approx(1.0, abs=1e-8)
    assert plants.sawtooth(math.pi) == pytest.approx(-1.0)


@settings(max_examples=200, derandomize=True)
@given(st.floats(-50.0, 50.0))
def test_sawtooth_periodic_and_bounded(theta):
    v = plants.sawtooth(theta)
    assert -1.0 <= v < 1.0 or v == pytest.approx(1.0, abs=1e-9)
    assert plants.sawtooth(theta + 2.0 * math.pi) == pytest.approx(v, abs=1e-9)


def test_total_disturbance_identity():
    spec = ns_spec()
    x = np.array([0.3, -0.4])
    t, u = 1.7, 2.5
    f = plants.drift(spec, x, t)
    g = plants.input_gain(spec, x)
    dext = plants.external_disturbance(spec, t)
    want = f + (g - spec.params.g_hat) * u + dext
    assert plants.total_disturbance(spec, x, u, t) == pytest.approx(want, rel=1e-12)


# --- parameter validation ----------------------------------------------

def test_ns_gain_sign_must_be_definite():
    with pytest.raises(ValueError):
        NsParams(a1=1.0, a2=0.5, a3=1.0, a4=0.2, a5=0.3, a6=1.0)


def test_g_hat_zero_rejected():
    with pytest.raises(ValueError):
        NsParams(a1=1.0, a2=0.5, a3=1.0, a4=1.0, a5=0.1, a6=1.0, g_hat=0.0)


def test_m1d_requires_negative_b1_b2():
    with pytest.raises(ValueError):
        M1dParams(b1=1.0, b2=-20.0, b3=0.0, b4=0.0, b5=0.0, b6=0.0, b7=0.0)
    with pytest.raises(ValueError):
        M1dParams(b1=-1.0, b2=20.0, b3=0.0, b4=0.0, b5=0.0, b6=0.0, b7=0.0)


def test_kind_and_params_must_agree():
    with pytest.raises(ValueError):
        PlantSpec(KIND_M1D, NsParams(a1=1, a2=0.5, a3=1, a4=1, a5=0.1, a6=1),
                  NoiseModel(sigma_n=0.0))


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel(sigma_n=-0.01)
    with pytest.raises(ValueError):
        NoiseModel(sigma_n=0.01, truncation_k=0.0)


# --- measurement noise --------------------------------------------------

def test_noise_is_deterministic_per_seed():
    model = NoiseModel(sigma_n=0.01, seed=42)
    a = plants.sample_noise(model, 500)
    b = plants.sample_noise(model, 500)
    np.testing.assert_array_equal(a, b)
    c = plants.sample_noise(NoiseModel(sigma_n=0.01, seed=43), 500)
    assert not np.array_equal(a, c)


def test_noise_respects_truncation():
    model = NoiseModel(sigma_n=0.02, truncation_k=3.0, seed=1)
    n = plants.sample_noise(model, 200_000)
    assert np.max(np.abs(n)) <= 3.0 * 0.02
    # std of a +/-3 sigma truncated normal is ~0.9733 sigma
    assert np.std(n) == pytest.approx(0.9733 * 0.02, rel=0.02)


def test_zero_sigma_noise_is_silent():
    n = plants.sample_noise(NoiseModel(sigma_n=0.0, seed=5), 100)
    np.testing.assert_array_equal(n, np.zeros(100))


# --- serialization ------------------------------------------------------

def test_spec_round_trip_ns():
    spec = ns_spec()
    again = plants.spec_from_json(plants.spec_to_json(spec))
    assert again == spec


def test_spec_round_trip_m1d():
    spec = m1d_spec()
    again = plants.spec_from_dict(plants.spec_to_dict(spec))
    assert again == spec


@settings(max_examples=100, derandomize=True)
@given(
    a1=st.floats(0.0, 2.0), a2=st.floats(0.0, 1.0), a3=st.floats(0.0, 2.0),
    a4=st.floats(0.5, 1.5), a5=st.floats(0.0, 0.3), a6=st.floats(0.0, 2.0),
    sigma=st.floats(0.0, 0.01),
)
def test_spec_round_trip_property(a1, a2, a3, a4, a5, a6, sigma):
    spec = PlantSpec(
        KIND_NS,
        NsParams(a1=a1, a2=a2, a3=a3, a4=a4, a5=a5, a6=a6, g_hat=1.0),
        NoiseModel(sigma_n=sigma, seed=9),
    )
    assert plants.spec_from_json(plants.spec_to_json(spec)) == spec


def test_spec_from_dict_reports_missing_fields():
    doc = json.loads(plants.spec_to_json(ns_spec()))
    del doc["a4"]
    with pytest.raises(ValueError, match="a4"):
        plants.spec_from_dict(doc)
    with pytest.raises(ValueError, match="kind"):
        plants.spec_from_dict({})


def test_spec_from_dict_rejects_unknown_kind():
    with pytest.raises(ValueError, match="kind"):
        plants.spec_from_dict({"kind": "pendulum"})


def test_with_noise_replaces_only_requested_fields():
    spec = ns_spec()
    bumped = plants.with_noise(spec, sigma_n=0.02)
    assert bumped.noise.sigma_n == 0.02
    assert bumped.noise.seed == spec.noise.seed
    assert bumped.params == spec.params
    reseeded = plants.with_noise(spec, seed=77)
    assert reseeded.noise.seed == 77
    assert reseeded.noise.sigma_n == spec.noise.sigma_n

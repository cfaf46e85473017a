"""Benchmark plants, external disturbances and measurement noise.

Two second-order benchmark systems are modeled, both of the form

    x1' = x2
    x2' = f(x, t) + g(x) * u + d_ext(t)
    y   = x1 + n

where ``f`` is the drift, ``g`` the input gain, ``d_ext`` an external
disturbance and ``n`` zero-mean truncated-normal measurement noise.  The
controller only knows a nominal input gain ``g_hat``; everything else is
lumped into the total disturbance

    d = f(x, t) + (g(x) - g_hat) * u + d_ext(t).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

KIND_NS = "NS"
KIND_M1D = "M1D"

# External disturbances are only defined on the simulation horizon.
HORIZON_MAX = 10.0


@dataclass(frozen=True)
class NsParams:
    """Nonlinear oscillator with state- and time-dependent drift.

    f(x, t) = sin(a1 t) x1 + x2^2,  g(x) = a4 + a5 sin(a6 x2),
    d_ext(t) = a2 cos(a3 t).
    """

    a1: float
    a2: float
    a3: float
    a4: float
    a5: float
    a6: float
    # The nominal gain must share g's sign: g/g_hat has to stay inside the
    # (0, 3) stability window, and a4 - |a5| > 0 keeps g positive.
    g_hat: float = 1.0

    def __post_init__(self) -> None:
        if self.a4 - abs(self.a5) <= 0.0:
            raise ValueError("input gain may cross zero: need a4 - |a5| > 0")
        if self.g_hat == 0.0:
            raise ValueError("g_hat must be nonzero")


@dataclass(frozen=True)
class M1dParams:
    """DC-motor-like linear plant with piecewise load disturbance.

    f(x) = b1 x2, g = b2, and a load profile that is zero, then constant,
    then constant plus a sawtooth, then constant plus a sinusoid on four
    consecutive quarters of the 10 s horizon.  The constant -K_I/(J R)
    scaling the load equals b2.
    """

    b1: float
    b2: float
    b3: float
    b4: float
    b5: float
    b6: float
    b7: float
    g_hat: float = -20.0

    def __post_init__(self) -> None:
        if not self.b1 < 0.0:
            raise ValueError("b1 must be strictly negative")
        if not self.b2 < 0.0:
            raise ValueError("b2 must be strictly negative")
        if self.b5 < 0.0 or self.b7 < 0.0:
            raise ValueError("disturbance frequencies b5, b7 must be >= 0")
        if self.g_hat == 0.0:
            raise ValueError("g_hat must be nonzero")


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean truncated normal measurement noise, sampled at 1 kHz.

    Draws are N(0, sigma_n^2) conditioned on |n| <= truncation_k * sigma_n.
    Sampling is stateless: every call with the same seed reproduces the
    same sequence, so independent streams need distinct seeds.
    """

    sigma_n: float
    truncation_k: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sigma_n < 0.0:
            raise ValueError("sigma_n must be >= 0")
        if self.truncation_k <= 0.0:
            raise ValueError("truncation_k must be > 0")


@dataclass(frozen=True)
class PlantSpec:
    """A concrete plant: kind discriminator, parameters and noise model."""

    kind: str
    params: NsParams | M1dParams
    noise: NoiseModel

    def __post_init__(self) -> None:
        if self.kind == KIND_NS and not isinstance(self.params, NsParams):
            raise ValueError("kind NS requires NsParams")
        if self.kind == KIND_M1D and not isinstance(self.params, M1dParams):
            raise ValueError("kind M1D requires M1dParams")
        if self.kind not in (KIND_NS, KIND_M1D):
            raise ValueError(f"unknown plant kind {self.kind!r}")


# ---------------------------------------------------------------------------
# vectorized primitives
#
# The public operations below delegate to these so that the batch simulator
# can evaluate the same physics on arrays of parameters and states.  ``t`` is
# always a scalar; states and parameters broadcast.


def ns_drift(a1, x1, x2, t):
    return np.sin(a1 * t) * x1 + x2 * x2


def ns_gain(a4, a5, a6, x2):
    return a4 + a5 * np.sin(a6 * x2)


def ns_external(a2, a3, t):
    return a2 * np.cos(a3 * t)


def m1d_drift(b1, x2):
    return b1 * x2


def sawtooth(theta):
    """Periodic sawtooth with period 2*pi in its argument and range [-1, 1).

    Rises linearly through 0 at theta = 0 and wraps at odd multiples of pi.
    """
    cycles = theta / (2.0 * math.pi)
    return 2.0 * (cycles - np.floor(cycles + 0.5))


def m1d_external(b2, b3, b4, b5, b6, b7, t):
    # Segments are left closed; the final formula also covers t = 10 so the
    # terminal sample of a full-horizon run is well defined.
    if t < 2.5:
        return b2 * np.zeros_like(b3)
    if t < 5.0:
        return b2 * b3
    if t < 7.5:
        return b2 * (b3 + b4 * sawtooth(2.0 * math.pi * b5 * (t - 5.0)))
    return b2 * (b3 + b6 * np.sin(2.0 * math.pi * b7 * (t - 7.5)))


# ---------------------------------------------------------------------------
# public operations


def _check_time(t: float) -> None:
    if not 0.0 <= t <= HORIZON_MAX:
        raise ValueError(f"t={t} outside the simulation horizon [0, {HORIZON_MAX}]")


def drift(spec: PlantSpec, x, t: float) -> float:
    """Drift term f(x, t) of the plant acceleration."""
    _check_time(t)
    x1, x2 = float(x[0]), float(x[1])
    p = spec.params
    if spec.kind == KIND_NS:
        return float(ns_drift(p.a1, x1, x2, t))
    return float(m1d_drift(p.b1, x2))


def input_gain(spec: PlantSpec, x) -> float:
    """True input gain g(x) multiplying the control in the acceleration."""
    p = spec.params
    if spec.kind == KIND_NS:
        return float(ns_gain(p.a4, p.a5, p.a6, float(x[1])))
    return float(p.b2)


def external_disturbance(spec: PlantSpec, t: float) -> float:
    """External disturbance d_ext(t); defined on t in [0, 10] only."""
    _check_time(t)
    p = spec.params
    if spec.kind == KIND_NS:
        return float(ns_external(p.a2, p.a3, t))
    return float(m1d_external(p.b2, p.b3, p.b4, p.b5, p.b6, p.b7, t))


def total_disturbance(spec: PlantSpec, x, u: float, t: float) -> float:
    """Total disturbance d = f + (g - g_hat) u + d_ext as seen by the observer."""
    g = input_gain(spec, x)
    return drift(spec, x, t) + (g - spec.params.g_hat) * u + external_disturbance(spec, t)


def sample_noise(noise: NoiseModel, count: int) -> np.ndarray:
    """Draw ``count`` truncated-normal noise samples.

    Deterministic in ``noise.seed``; out-of-band draws are redrawn from the
    same stream until they fall inside +-truncation_k * sigma_n.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.Generator(np.random.PCG64(noise.seed))
    if noise.sigma_n == 0.0:
        return np.zeros(count)
    values = rng.normal(0.0, noise.sigma_n, count)
    bound = noise.truncation_k * noise.sigma_n
    bad = np.abs(values) > bound
    while bad.any():
        values[bad] = rng.normal(0.0, noise.sigma_n, int(bad.sum()))
        bad = np.abs(values) > bound
    return values


# ---------------------------------------------------------------------------
# serialization

_NS_FIELDS = ("a1", "a2", "a3", "a4", "a5", "a6")
_M1D_FIELDS = ("b1", "b2", "b3", "b4", "b5", "b6", "b7")


def spec_to_dict(spec: PlantSpec) -> dict:
    """Flat JSON-ready document with explicit kind and named parameters."""
    p = spec.params
    doc: dict = {"kind": spec.kind}
    names = _NS_FIELDS if spec.kind == KIND_NS else _M1D_FIELDS
    for name in names:
        doc[name] = getattr(p, name)
    doc["g_hat"] = p.g_hat
    doc["sigma_n"] = spec.noise.sigma_n
    doc["truncation_k"] = spec.noise.truncation_k
    doc["noise_seed"] = spec.noise.seed
    return doc


def spec_from_dict(doc: dict) -> PlantSpec:
    """Inverse of :func:`spec_to_dict`; raises ValueError naming bad fields."""
    try:
        kind = doc["kind"]
    except KeyError:
        raise ValueError("plant spec missing field 'kind'") from None
    if kind not in (KIND_NS, KIND_M1D):
        raise ValueError(f"unknown plant kind {kind!r}")
    names = _NS_FIELDS if kind == KIND_NS else _M1D_FIELDS
    values = {}
    for name in names:
        if name not in doc:
            raise ValueError(f"plant spec missing field {name!r}")
        values[name] = float(doc[name])
    if "sigma_n" not in doc:
        raise ValueError("plant spec missing field 'sigma_n'")
    noise = NoiseModel(
        sigma_n=float(doc["sigma_n"]),
        truncation_k=float(doc.get("truncation_k", 3.0)),
        seed=int(doc.get("noise_seed", 0)),
    )
    if kind == KIND_NS:
        params: NsParams | M1dParams = NsParams(
            **values, g_hat=float(doc.get("g_hat", 1.0))
        )
    else:
        params = M1dParams(**values, g_hat=float(doc.get("g_hat", -20.0)))
    return PlantSpec(kind=kind, params=params, noise=noise)


def spec_to_json(spec: PlantSpec) -> str:
    return json.dumps(spec_to_dict(spec), sort_keys=True, separators=(",", ":"))


def spec_from_json(text: str) -> PlantSpec:
    return spec_from_dict(json.loads(text))


def with_noise(spec: PlantSpec, *, sigma_n: float | None = None, seed: int | None = None) -> PlantSpec:
    """Copy of ``spec`` with selected noise fields replaced."""
    noise = NoiseModel(
        sigma_n=spec.noise.sigma_n if sigma_n is None else sigma_n,
        truncation_k=spec.noise.truncation_k,
        seed=spec.noise.seed if seed is None else seed,
    )
    return PlantSpec(kind=spec.kind, params=spec.params, noise=noise)

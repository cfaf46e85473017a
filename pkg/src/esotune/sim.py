"""Closed-loop simulation and integral performance criteria.

The plant (2 states) and the extended state observer (3 states) are
integrated jointly with classical RK4 on a fixed 1 kHz grid.  At every
grid instant the measurement y = x1 + n is sampled, the control

    u = ( -k1 zhat1 - k2 zhat2 - zhat3 ) / g_hat

is computed from the current observer state, and both y and u are held
constant over the step (zero-order hold); the noise sample changes at
the same 1 kHz rate.

Four integral criteria are accumulated on the same grid with the
left-rectangle rule:

    IAE   = sum |x1_k| dt          tracking error
    IAC   = sum |u_k| dt           control effort
    IACD  = sum |u_{k+1} - u_k|    control smoothness (telescoped rate)
    IADEE = sum |d_k - dhat_k| dt  disturbance estimation error

Everything in this module runs over batches of simulations at once:
states are (N,) lanes and each lane may carry its own parameters, gains,
initial conditions and noise stream.  Lanes are numerically independent,
so results do not depend on how a workload is split into batches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import plants
from .control import ControllerGains, ObserverGains, controller_gains, gains_from_bandwidth
from .plants import KIND_M1D, KIND_NS, PlantSpec

# Any criterion beyond this cap (including diverged runs) is reported as the
# cap itself, keeping cost comparisons finite.
CRITERIA_CAP = 1.0e6

# A state beyond this magnitude is treated as numerically divergent.
DIVERGENCE_LIMIT = 1.0e12

# Lane count processed per batch; fixed so that results never depend on how
# callers distribute work across processes.
BATCH_CHUNK = 1024

MEASURED = "measured"


class DivergenceError(RuntimeError):
    """A simulated state left the finite range; carries the blow-up time."""

    def __init__(self, time: float, message: str | None = None):
        super().__init__(message or f"simulation diverged at t={time:.3f} s")
        self.time = time

    def __reduce__(self):
        # args holds only the message; rebuild with the time attached.
        return (DivergenceError, (self.time, self.args[0]))


@dataclass(frozen=True)
class SimConfig:
    """Integration grid, initial conditions and controller pole.

    ``seed`` selects the measurement-noise stream; ``None`` defers to the
    seed stored in the plant spec's noise model.  ``zhat0`` is either an
    explicit 3-vector or the string ``"measured"``, which initializes the
    observer position estimate to the first noisy measurement and the
    remaining components to zero.
    """

    dt: float = 1.0e-3
    horizon: float = 10.0
    record_hz: float = 100.0
    x0: tuple[float, float] = (0.0, 0.0)
    zhat0: tuple[float, float, float] | str = (0.0, 0.0, 0.0)
    k: float = 4.0
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.dt > 0.0:
            raise ValueError("dt must be > 0")
        if not 0.0 < self.horizon <= plants.HORIZON_MAX:
            raise ValueError(f"horizon must lie in (0, {plants.HORIZON_MAX}]")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1.0e-9 or round(steps) < 1:
            raise ValueError("horizon must be an integer number of dt steps")
        stride = 1.0 / (self.dt * self.record_hz)
        if stride < 1.0 or abs(stride - round(stride)) > 1.0e-9:
            raise ValueError("record_hz must divide the sampling rate 1/dt")
        if len(self.x0) != 2:
            raise ValueError("x0 must have two components")
        if isinstance(self.zhat0, str):
            if self.zhat0 != MEASURED:
                raise ValueError(f"zhat0 must be a 3-vector or {MEASURED!r}")
        elif len(self.zhat0) != 3:
            raise ValueError("zhat0 must have three components")
        if not self.k > 0.0:
            raise ValueError("controller pole k must be > 0")

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def record_stride(self) -> int:
        return int(round(1.0 / (self.dt * self.record_hz)))


@dataclass
class Trajectory:
    """Dense 1 kHz record of one closed-loop run (terminal sample included)."""

    t: np.ndarray
    x: np.ndarray       # (K+1, 2) true plant states
    zhat: np.ndarray    # (K+1, 3) observer states
    u: np.ndarray       # control at each grid point (last one never applied)
    d: np.ndarray       # true total disturbance at each grid point
    y: np.ndarray       # noisy measurements


@dataclass(frozen=True)
class CriteriaVector:
    iae: float
    iac: float
    iacd: float
    iadee: float

    def as_array(self) -> np.ndarray:
        return np.array([self.iae, self.iac, self.iacd, self.iadee])

    @staticmethod
    def from_array(values) -> "CriteriaVector":
        iae, iac, iacd, iadee = (float(v) for v in values)
        return CriteriaVector(iae, iac, iacd, iadee)


@dataclass(frozen=True)
class CriterionWeights:
    """Nonnegative weights for J = a1*IAE + a2*IAC + a3*IACD + a4*IADEE."""

    alpha1: float
    alpha2: float
    alpha3: float
    alpha4: float

    def __post_init__(self) -> None:
        weights = (self.alpha1, self.alpha2, self.alpha3, self.alpha4)
        if any(w < 0.0 for w in weights):
            raise ValueError("criterion weights must be >= 0")
        if not any(w > 0.0 for w in weights):
            raise ValueError("at least one criterion weight must be > 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha1, self.alpha2, self.alpha3, self.alpha4])


@dataclass
class BatchResult:
    """Per-lane outcome of a batched run."""

    criteria: np.ndarray          # (N, 4) saturated at CRITERIA_CAP
    diverged: np.ndarray          # (N,) bool
    blowup_time: np.ndarray       # (N,) float, NaN where finite
    zhat_rec: np.ndarray | None   # (N, R, 3) decimated observer history


def child_seed(*keys: int) -> int:
    """Stable 64-bit seed derived from a tuple of integer keys."""
    words = np.random.SeedSequence([int(k) for k in keys]).generate_state(2)
    return int(words[0]) | (int(words[1]) << 32)


def noise_for(spec: PlantSpec, cfg: SimConfig, count: int) -> np.ndarray:
    seed = spec.noise.seed if cfg.seed is None else cfg.seed
    model = plants.NoiseModel(spec.noise.sigma_n, spec.noise.truncation_k, seed)
    return plants.sample_noise(model, count)


def _m1d_external_lanes(b2, b3, b4, b5, b6, b7, t: float):
    if t < 2.5:
        return b2 * 0.0
    if t < 5.0:
        return b2 * b3
    if t < 7.5:
        return b2 * (b3 + b4 * plants.sawtooth(2.0 * math.pi * b5 * (t - 5.0)))
    return b2 * (b3 + b6 * np.sin(2.0 * math.pi * b7 * (t - 7.5)))


def simulate_batch(
    kind: str,
    params: dict,
    gains: np.ndarray,
    k: float | np.ndarray,
    x0: np.ndarray,
    zhat0,
    noise: np.ndarray,
    dt: float,
    steps: int,
    substeps: int = 1,
    record_count: int = 0,
    record_stride: int = 10,
    record_full: bool = False,
):
    """Integrate ``N`` independent closed loops sharing one plant kind.

    Parameters
    ----------
    params
        Mapping of parameter names (``a1..a6`` or ``b1..b7`` plus ``g_hat``)
        to scalars or (N,) arrays; scalars broadcast over lanes.
    gains
        (N, 3) observer gain rows.
    k
        Controller pole, scalar or (N,).
    x0
        (N, 2) initial plant states.
    zhat0
        (N, 3) initial observer states or the string ``"measured"``.
    noise
        Measurement noise, shape (steps + 1,) shared across lanes or
        (N, steps + 1) per lane.
    substeps
        RK4 substeps per 1 kHz sampling interval.  Sampling of y, u and n
        stays on the 1 kHz grid regardless, so refining ``substeps`` only
        sharpens the integration of the held-input dynamics.
    record_count, record_stride
        If ``record_count`` > 0, store the observer state every
        ``record_stride`` steps, ``record_count`` times, starting at t=0.
    record_full
        Additionally return dense per-step arrays (meant for small N).

    Returns
    -------
    BatchResult, or (BatchResult, dict of dense arrays) when
    ``record_full`` is set.
    """
    gains = np.atleast_2d(np.asarray(gains, dtype=float))
    n_lanes = gains.shape[0]
    l1 = gains[:, 0].copy()
    l2 = gains[:, 1].copy()
    l3 = gains[:, 2].copy()

    k = np.asarray(k, dtype=float)
    k1 = k * k
    k2 = 2.0 * k

    g_hat = np.asarray(params["g_hat"], dtype=float)
    if kind == KIND_NS:
        a1, a2, a3 = (np.asarray(params[n], dtype=float) for n in ("a1", "a2", "a3"))
        a4, a5, a6 = (np.asarray(params[n], dtype=float) for n in ("a4", "a5", "a6"))
    elif kind == KIND_M1D:
        b1, b2, b3, b4, b5, b6, b7 = (
            np.asarray(params[n], dtype=float)
            for n in ("b1", "b2", "b3", "b4", "b5", "b6", "b7")
        )
    else:
        raise ValueError(f"unknown plant kind {kind!r}")

    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    x1 = np.broadcast_to(x0[:, 0], (n_lanes,)).copy()
    x2 = np.broadcast_to(x0[:, 1], (n_lanes,)).copy()

    noise = np.asarray(noise, dtype=float)

    def noise_at(step: int):
        return noise[step] if noise.ndim == 1 else noise[:, step]

    if isinstance(zhat0, str):
        if zhat0 != MEASURED:
            raise ValueError(f"zhat0 must be an array or {MEASURED!r}")
        z1 = x1 + noise_at(0)
        z2 = np.zeros(n_lanes)
        z3 = np.zeros(n_lanes)
    else:
        zhat0 = np.atleast_2d(np.asarray(zhat0, dtype=float))
        z1 = np.broadcast_to(zhat0[:, 0], (n_lanes,)).copy()
        z2 = np.broadcast_to(zhat0[:, 1], (n_lanes,)).copy()
        z3 = np.broadcast_to(zhat0[:, 2], (n_lanes,)).copy()

    def rhs(x1_, x2_, z1_, z2_, z3_, u, y, tau):
        if kind == KIND_NS:
            f = np.sin(a1 * tau) * x1_ + x2_ * x2_
            g = a4 + a5 * np.sin(a6 * x2_)
            dext = a2 * np.cos(a3 * tau)
        else:
            f = b1 * x2_
            g = b2
            dext = _m1d_external_lanes(b2, b3, b4, b5, b6, b7, tau)
        e = y - z1_
        return (
            x2_,
            f + g * u + dext,
            z2_ + l1 * e,
            z3_ + g_hat * u + l2 * e,
            l3 * e,
        )

    def true_disturbance(x1_, x2_, u, t):
        if kind == KIND_NS:
            f = np.sin(a1 * t) * x1_ + x2_ * x2_
            g = a4 + a5 * np.sin(a6 * x2_)
            dext = a2 * np.cos(a3 * t)
        else:
            f = b1 * x2_
            g = b2
            dext = _m1d_external_lanes(b2, b3, b4, b5, b6, b7, t)
        return f + (g - g_hat) * u + dext

    iae = np.zeros(n_lanes)
    iac = np.zeros(n_lanes)
    iacd = np.zeros(n_lanes)
    iadee = np.zeros(n_lanes)
    diverged = np.zeros(n_lanes, dtype=bool)
    blowup = np.full(n_lanes, np.nan)
    u_prev = None

    zhat_rec = None
    if record_count > 0:
        zhat_rec = np.zeros((n_lanes, record_count, 3))
    dense = None
    if record_full:
        dense = {
            name: np.zeros((n_lanes, steps + 1)) for name in ("x1", "x2", "z1", "z2", "z3", "u", "d", "y")
        }

    h = dt / substeps
    rec_slot = 0

    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps + 1):
            t = step * dt
            y = x1 + noise_at(step)
            u = (-k1 * z1 - k2 * z2 - z3) / g_hat
            d = true_disturbance(x1, x2, u, t)

            if record_count > 0 and rec_slot < record_count and step == rec_slot * record_stride:
                zhat_rec[:, rec_slot, 0] = z1
                zhat_rec[:, rec_slot, 1] = z2
                zhat_rec[:, rec_slot, 2] = z3
                rec_slot += 1
            if record_full:
                for name, vals in (
                    ("x1", x1), ("x2", x2), ("z1", z1), ("z2", z2), ("z3", z3),
                    ("u", u), ("d", d), ("y", y),
                ):
                    dense[name][:, step] = vals

            if u_prev is not None:
                iacd += np.abs(u - u_prev)
            u_prev = u
            if step == steps:
                break

            iae += np.abs(x1)
            iac += np.abs(u)
            iadee += np.abs(d - z3)

            for sub in range(substeps):
                tau = t + sub * h
                k1x1, k1x2, k1z1, k1z2, k1z3 = rhs(x1, x2, z1, z2, z3, u, y, tau)
                hx1 = x1 + 0.5 * h * k1x1
                hx2 = x2 + 0.5 * h * k1x2
                hz1 = z1 + 0.5 * h * k1z1
                hz2 = z2 + 0.5 * h * k1z2
                hz3 = z3 + 0.5 * h * k1z3
                k2x1, k2x2, k2z1, k2z2, k2z3 = rhs(hx1, hx2, hz1, hz2, hz3, u, y, tau + 0.5 * h)
                hx1 = x1 + 0.5 * h * k2x1
                hx2 = x2 + 0.5 * h * k2x2
                hz1 = z1 + 0.5 * h * k2z1
                hz2 = z2 + 0.5 * h * k2z2
                hz3 = z3 + 0.5 * h * k2z3
                k3x1, k3x2, k3z1, k3z2, k3z3 = rhs(hx1, hx2, hz1, hz2, hz3, u, y, tau + 0.5 * h)
                hx1 = x1 + h * k3x1
                hx2 = x2 + h * k3x2
                hz1 = z1 + h * k3z1
                hz2 = z2 + h * k3z2
                hz3 = z3 + h * k3z3
                k4x1, k4x2, k4z1, k4z2, k4z3 = rhs(hx1, hx2, hz1, hz2, hz3, u, y, tau + h)
                x1 = x1 + (h / 6.0) * (k1x1 + 2.0 * k2x1 + 2.0 * k3x1 + k4x1)
                x2 = x2 + (h / 6.0) * (k1x2 + 2.0 * k2x2 + 2.0 * k3x2 + k4x2)
                z1 = z1 + (h / 6.0) * (k1z1 + 2.0 * k2z1 + 2.0 * k3z1 + k4z1)
                z2 = z2 + (h / 6.0) * (k1z2 + 2.0 * k2z2 + 2.0 * k3z2 + k4z2)
                z3 = z3 + (h / 6.0) * (k1z3 + 2.0 * k2z3 + 2.0 * k3z3 + k4z3)

            bad = ~(
                np.isfinite(x1) & np.isfinite(x2)
                & np.isfinite(z1) & np.isfinite(z2) & np.isfinite(z3)
            )
            bad |= (
                (np.abs(x1) > DIVERGENCE_LIMIT) | (np.abs(x2) > DIVERGENCE_LIMIT)
                | (np.abs(z1) > DIVERGENCE_LIMIT) | (np.abs(z2) > DIVERGENCE_LIMIT)
                | (np.abs(z3) > DIVERGENCE_LIMIT)
            )
            fresh = bad & ~diverged
            if fresh.any():
                blowup[fresh] = t + dt
                diverged |= fresh
                # Freeze dead lanes at zero so live lanes keep integrating
                # without NaN/Inf arithmetic slowing the batch down.
                for arr in (x1, x2, z1, z2, z3):
                    arr[diverged] = 0.0

    criteria = np.column_stack([iae * dt, iac * dt, iacd, iadee * dt])
    criteria = np.where(np.isfinite(criteria), criteria, CRITERIA_CAP)
    criteria = np.minimum(criteria, CRITERIA_CAP)
    criteria[diverged] = CRITERIA_CAP

    result = BatchResult(criteria=criteria, diverged=diverged, blowup_time=blowup, zhat_rec=zhat_rec)
    if record_full:
        return result, dense
    return result


def params_for(spec: PlantSpec) -> dict:
    """Scalar parameter mapping for :func:`simulate_batch`."""
    p = spec.params
    if spec.kind == KIND_NS:
        out = {n: getattr(p, n) for n in ("a1", "a2", "a3", "a4", "a5", "a6")}
    else:
        out = {n: getattr(p, n) for n in ("b1", "b2", "b3", "b4", "b5", "b6", "b7")}
    out["g_hat"] = p.g_hat
    return out


def stack_params(specs: Sequence[PlantSpec]) -> dict:
    """Lane-wise parameter arrays for a batch of same-kind specs."""
    kinds = {s.kind for s in specs}
    if len(kinds) != 1:
        raise ValueError("all specs in a batch must share one plant kind")
    names = ("a1", "a2", "a3", "a4", "a5", "a6") if specs[0].kind == KIND_NS else (
        "b1", "b2", "b3", "b4", "b5", "b6", "b7")
    out = {n: np.array([getattr(s.params, n) for s in specs]) for n in names}
    out["g_hat"] = np.array([s.params.g_hat for s in specs])
    return out


def run_closed_loop(spec: PlantSpec, gains: ObserverGains, cfg: SimConfig) -> Trajectory:
    """Simulate one closed loop and return the dense trajectory.

    Raises :class:`DivergenceError` if the state leaves the finite range.
    """
    steps = cfg.steps
    noise = noise_for(spec, cfg, steps + 1)
    zhat0 = cfg.zhat0 if isinstance(cfg.zhat0, str) else np.asarray(cfg.zhat0, dtype=float)[None, :]
    result, dense = simulate_batch(
        spec.kind,
        params_for(spec),
        np.array([[gains.l1, gains.l2, gains.l3]]),
        cfg.k,
        np.asarray(cfg.x0, dtype=float)[None, :],
        zhat0,
        noise,
        cfg.dt,
        steps,
        record_full=True,
    )
    if result.diverged[0]:
        raise DivergenceError(float(result.blowup_time[0]))
    t = np.arange(steps + 1) * cfg.dt
    x = np.column_stack([dense["x1"][0], dense["x2"][0]])
    zhat = np.column_stack([dense["z1"][0], dense["z2"][0], dense["z3"][0]])
    return Trajectory(t=t, x=x, zhat=zhat, u=dense["u"][0], d=dense["d"][0], y=dense["y"][0])


def compute_criteria(traj: Trajectory) -> CriteriaVector:
    """Left-rectangle criteria over the trajectory's own grid.

    The terminal sample only contributes to IACD (through the last control
    difference); the rectangle sums run over [0, horizon).
    """
    if len(traj.t) < 2:
        raise ValueError("trajectory must contain at least two samples")
    dt = float(traj.t[1] - traj.t[0])
    iae = float(np.sum(np.abs(traj.x[:-1, 0])) * dt)
    iac = float(np.sum(np.abs(traj.u[:-1])) * dt)
    iacd = float(np.sum(np.abs(np.diff(traj.u))))
    iadee = float(np.sum(np.abs(traj.d[:-1] - traj.zhat[:-1, 2])) * dt)
    capped = np.minimum([iae, iac, iacd, iadee], CRITERIA_CAP)
    return CriteriaVector.from_array(capped)


def cost(criteria: CriteriaVector, weights: CriterionWeights) -> float:
    """Weighted sum J of the raw (unnormalized) criteria."""
    return float(np.dot(weights.as_array(), criteria.as_array()))


def sweep_bandwidth(spec: PlantSpec, cfg: SimConfig, omegas: Sequence[float]) -> list[CriteriaVector]:
    """Criteria for bandwidth-parametrized gains at each omega0.

    All runs share the noise stream selected by ``cfg``/``spec`` (the same
    stream each single run would see).  Raises :class:`DivergenceError`
    naming the first offending omega0.
    """
    omegas = [float(w) for w in omegas]
    for w in omegas:
        if not 1.0 <= w <= 80.0:
            raise ValueError(f"omega0={w} outside the sampled range [1, 80]")
    steps = cfg.steps
    noise = noise_for(spec, cfg, steps + 1)
    rows = []
    for w in omegas:
        g = gains_from_bandwidth(w)
        rows.append([g.l1, g.l2, g.l3])
    zhat0 = cfg.zhat0 if isinstance(cfg.zhat0, str) else np.asarray(cfg.zhat0, dtype=float)[None, :]
    out: list[CriteriaVector] = []
    for start in range(0, len(rows), BATCH_CHUNK):
        chunk = rows[start:start + BATCH_CHUNK]
        result = simulate_batch(
            spec.kind,
            params_for(spec),
            np.asarray(chunk),
            cfg.k,
            np.asarray(cfg.x0, dtype=float)[None, :],
            zhat0,
            noise,
            cfg.dt,
            steps,
        )
        if result.diverged.any():
            lane = int(np.argmax(result.diverged))
            w = omegas[start + lane]
            raise DivergenceError(float(result.blowup_time[lane]),
                                  f"sweep diverged at omega0={w} (t={result.blowup_time[lane]:.3f} s)")
        for row in result.criteria:
            out.append(CriteriaVector.from_array(row))
    return out

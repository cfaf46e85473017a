"""Certified decay envelopes for the observer and tracking errors.

For a Hurwitz matrix A, the Lyapunov equation

    A'P + P A = -2 I

has a unique symmetric positive definite solution P, and the quadratic
form V = e'Pe certifies an explicit envelope on any trajectory of
e' = A e + w.  Three instances of that argument are checked here against
simulated closed loops:

* observer envelope (general eigenvalue placement).  With estimation
  error e = zhat - (x1, x2, d), gain vector l and P solved from the
  error matrix H(l),

      ||e(t)|| <= r ||e(t0)|| exp(-(t - t0)/em) + r^2 (D + ||l|| N),

  where em = lambda_max(P), r = lambda_max(P)/lambda_min(P), D bounds
  |d'(t)| and N bounds the measurement noise.

* bandwidth envelope.  For gains (3w, 3w^2, w^3) the scaled error
  matrix is the constant UNIT_BANDWIDTH_MATRIX, so one certificate
  covers every w:

      ||e(t)|| <= max(w^-2, w^2) r ||e(t0)|| exp(-w (t - t0)/em)
                  + max(w^-2, 1) (1/w) r^2 (D + 3 w^3 N).

* tracking envelope.  With both feedback poles at -k the scaled loop
  matrix is the constant UNIT_POLE_MATRIX and the plant state obeys

      ||x(t)|| <= max(1/k, k) r ||x(0)|| exp(-k t/em)
                  + (1/k) r^2 max(1/k, k) sup_t ||e(t)||.

The envelopes assume a continuously differentiable total disturbance.
The piecewise load of the motor-like plant breaks that at its three
segment boundaries, so checks restart there: the envelope's initial
term is re-anchored at each boundary sample and the slope bound D is
measured per segment, never across a boundary.  D and N default to
realized values (finite differences of the recorded disturbance, and
truncation_k * sigma_n, which the noise sampler enforces as a hard
limit).

All margins are evaluated at the 1 kHz sample instants of the recorded
trajectory.  A report with min margin >= 0 means the certified envelope
held at every sample.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .control import ObserverGains, gains_from_bandwidth, gains_from_eigenvalues
from .plants import KIND_M1D, PlantSpec
from .sim import SimConfig, Trajectory, run_closed_loop

# Instants where the motor-like load steps to a new segment; the envelope
# is restarted at the first sample whose branch uses the new segment.
M1D_STEP_TIMES = (2.5, 5.0, 7.5)

# Iterative refinement passes for the dense Lyapunov solve.
_REFINE_STEPS = 2


def observer_error_matrix(gains: ObserverGains) -> np.ndarray:
    """System matrix of the estimation error dynamics for gain vector l."""
    return np.array(
        [
            [-gains.l1, 1.0, 0.0],
            [-gains.l2, 0.0, 1.0],
            [-gains.l3, 0.0, 0.0],
        ]
    )


# Error matrix at unit bandwidth; diag(w^2, w, 1) scaling reduces every
# bandwidth parametrization to w times this constant matrix.
UNIT_BANDWIDTH_MATRIX = observer_error_matrix(gains_from_bandwidth(1.0))

# Closed-loop feedback matrix at unit pole; diag(1/k, 1) scaling reduces
# the double pole at -k to k times this constant matrix.
UNIT_POLE_MATRIX = np.array([[0.0, 1.0], [-1.0, -2.0]])


@dataclass(frozen=True)
class LyapunovCertificate:
    """Solution of A'P + PA = -2I together with its derived constants.

    ``residual`` is the max-abs entry of A'P + PA + 2I, evaluated in
    extended precision for the stored (double precision) P, so it
    reflects the shipped matrix rather than the solver's internals.
    """

    a: np.ndarray
    p: np.ndarray
    eig_min: float
    eig_max: float
    residual: float

    @property
    def condition_ratio(self) -> float:
        """lambda_max(P) / lambda_min(P); scales the initial-error term."""
        return self.eig_max / self.eig_min

    @property
    def decay_rate(self) -> float:
        """Certified exponential rate 1 / lambda_max(P)."""
        return 1.0 / self.eig_max

    @property
    def forcing_gain(self) -> float:
        """(lambda_max / lambda_min)^2; scales the persistent forcing term."""
        return self.condition_ratio**2


def _symmetric_system(a: np.ndarray):
    """Linear system over the upper-triangle unknowns of symmetric P."""
    n = a.shape[0]
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    index = {pair: row for row, pair in enumerate(pairs)}
    coeffs = np.zeros((len(pairs), len(pairs)))
    for row, (r, c) in enumerate(pairs):
        # (A'P + PA)[r, c] = sum_k A[k, r] P[k, c] + P[r, k] A[k, c]
        for k in range(n):
            coeffs[row, index[(min(k, c), max(k, c))]] += a[k, r]
            coeffs[row, index[(min(r, k), max(r, k))]] += a[k, c]
    return pairs, coeffs


def _assemble(pairs, values, n: int) -> np.ndarray:
    p = np.zeros((n, n))
    for (i, j), v in zip(pairs, values):
        p[i, j] = v
        p[j, i] = v
    return p


def _residual_matrix(a: np.ndarray, p: np.ndarray) -> np.ndarray:
    # Extended precision: the products in A'P + PA cancel almost exactly
    # against 2I, so double-precision evaluation would see its own
    # rounding noise instead of the solve error.
    al = a.astype(np.longdouble)
    pl = p.astype(np.longdouble)
    return al.T @ pl + pl @ al + 2.0 * np.eye(a.shape[0], dtype=np.longdouble)


def solve_lyapunov(a: np.ndarray) -> LyapunovCertificate:
    """Solve A'P + PA = -2I for symmetric positive definite P.

    ``a`` must be square and Hurwitz; a non-Hurwitz matrix is rejected
    with the offending eigenvalue in the message.  The solve is a direct
    dense one over the n(n+1)/2 distinct entries of P, followed by
    iterative refinement in extended precision.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    eigs = np.linalg.eigvals(a)
    worst = eigs[np.argmax(eigs.real)]
    if worst.real >= 0.0:
        raise ValueError(
            f"matrix is not Hurwitz: eigenvalue {worst} has nonnegative real part"
        )

    n = a.shape[0]
    pairs, coeffs = _symmetric_system(a)
    rhs = np.array([-2.0 if r == c else 0.0 for (r, c) in pairs])
    p = _assemble(pairs, np.linalg.solve(coeffs, rhs), n)
    best = p
    best_residual = float(np.abs(_residual_matrix(a, p)).max())
    for _ in range(_REFINE_STEPS):
        res = _residual_matrix(a, best)
        correction = np.linalg.solve(
            coeffs, np.array([-float(res[r, c]) for (r, c) in pairs])
        )
        candidate = best + _assemble(pairs, correction, n)
        cand_residual = float(np.abs(_residual_matrix(a, candidate)).max())
        if cand_residual >= best_residual:
            break
        best, best_residual = candidate, cand_residual

    eig_p = np.linalg.eigvalsh(best)
    if eig_p[0] <= 0.0:
        raise ValueError(
            f"Lyapunov solution is not positive definite (min eigenvalue {eig_p[0]})"
        )
    return LyapunovCertificate(
        a=a, p=best, eig_min=float(eig_p[0]), eig_max=float(eig_p[-1]),
        residual=best_residual,
    )


# ---------------------------------------------------------------------------
# envelope formulas
#
# Pure functions of the certificate constants; the checkers below apply
# them segment by segment.  ``elapsed`` is time since the envelope's
# anchor sample, so the formulas are valid from any restart point.


def observer_envelope(
    cert: LyapunovCertificate,
    gain_norm: float,
    start_norm: float,
    elapsed: np.ndarray,
    d_sup: float,
    noise_sup: float,
) -> np.ndarray:
    """Envelope on ||e(t)|| for a general gain certificate."""
    transient = cert.condition_ratio * start_norm * np.exp(-cert.decay_rate * elapsed)
    return transient + cert.forcing_gain * (d_sup + gain_norm * noise_sup)


def bandwidth_envelope(
    cert: LyapunovCertificate,
    omega0: float,
    start_norm: float,
    elapsed: np.ndarray,
    d_sup: float,
    noise_sup: float,
) -> np.ndarray:
    """Envelope on ||e(t)|| under the bandwidth parametrization."""
    if not omega0 > 0.0:
        raise ValueError(f"omega0 must be > 0, got {omega0}")
    stretch = max(omega0**-2, omega0**2)
    transient = (
        stretch
        * cert.condition_ratio
        * start_norm
        * np.exp(-cert.decay_rate * omega0 * elapsed)
    )
    steady = (
        max(omega0**-2, 1.0)
        * (1.0 / omega0)
        * cert.forcing_gain
        * (d_sup + 3.0 * omega0**3 * noise_sup)
    )
    return transient + steady


def tracking_envelope(
    cert: LyapunovCertificate,
    k: float,
    start_norm: float,
    elapsed: np.ndarray,
    error_sup: float,
) -> np.ndarray:
    """Envelope on ||x(t)|| given a bound on the estimation error."""
    if not k > 0.0:
        raise ValueError(f"controller pole k must be > 0, got {k}")
    stretch = max(1.0 / k, k)
    transient = (
        stretch * cert.condition_ratio * start_norm
        * np.exp(-cert.decay_rate * k * elapsed)
    )
    return transient + (1.0 / k) * cert.forcing_gain * stretch * error_sup


# ---------------------------------------------------------------------------
# margin reports


@dataclass(frozen=True)
class Segment:
    """One maximal interval on which the disturbance is slope-bounded."""

    start: int           # first sample index
    stop: int            # one past the last sample index
    d_sup: float         # slope bound used for the envelope on this segment
    start_norm: float    # ||error|| at the anchor sample


@dataclass(frozen=True)
class BoundReport:
    """Pointwise comparison of a certified envelope against a trajectory."""

    label: str
    times: np.ndarray
    observed: np.ndarray
    envelope: np.ndarray
    constants: dict
    segments: tuple[Segment, ...]
    notes: tuple[str, ...] = field(default=())

    @property
    def margins(self) -> np.ndarray:
        return self.envelope - self.observed

    @property
    def worst_margin(self) -> float:
        return float(self.margins.min())

    @property
    def violated(self) -> bool:
        return self.worst_margin < 0.0


def report_to_dict(report: BoundReport) -> dict:
    """JSON-ready summary; the dense series stay in the CSV exporter."""
    return {
        "label": report.label,
        "violated": report.violated,
        "worst_margin": report.worst_margin,
        "samples": int(report.times.size),
        "constants": {k: v for k, v in sorted(report.constants.items())},
        "segments": [
            {
                "start_time": float(report.times[s.start]),
                "stop_time": float(report.times[s.stop - 1]),
                "d_sup": s.d_sup,
                "start_norm": s.start_norm,
            }
            for s in report.segments
        ],
        "notes": list(report.notes),
    }


def write_reports_json(reports: Sequence[BoundReport], path) -> None:
    payload = {"reports": [report_to_dict(r) for r in reports]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_margin_csv(report: BoundReport, path) -> None:
    margins = report.margins
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("t,observed,envelope,margin\n")
        for i in range(report.times.size):
            fh.write(
                f"{float(report.times[i])!r},{float(report.observed[i])!r},"
                f"{float(report.envelope[i])!r},{float(margins[i])!r}\n"
            )


# ---------------------------------------------------------------------------
# trajectory checkers


def _segment_starts(kind: str, times: np.ndarray) -> list[int]:
    starts = [0]
    if kind == KIND_M1D:
        for step_time in M1D_STEP_TIMES:
            # The simulator evaluates branch conditions on the same
            # step*dt floats stored in ``times``, so searchsorted lands
            # exactly on the first sample of the new segment.
            i = int(np.searchsorted(times, step_time))
            if 0 < i < times.size:
                starts.append(i)
    return starts


def _segmented_envelope(
    times: np.ndarray,
    observed: np.ndarray,
    d_series: np.ndarray,
    dt: float,
    starts: list[int],
    d_bar: float | None,
    term,
):
    """Assemble the envelope segment by segment.

    ``term(start_norm, elapsed, d_sup)`` evaluates the formula on one
    segment.  Slopes are finite differences of the recorded disturbance
    strictly inside a segment, so the differences spanning a restart
    never enter any slope bound.
    """
    envelope = np.empty_like(observed)
    segments = []
    bounds = starts + [times.size]
    for s, e in zip(bounds[:-1], bounds[1:]):
        if d_bar is None:
            diffs = np.diff(d_series[s:e])
            d_sup = float(np.abs(diffs).max() / dt) if diffs.size else 0.0
        else:
            d_sup = float(d_bar)
        start_norm = float(observed[s])
        elapsed = times[s:e] - times[s]
        envelope[s:e] = term(start_norm, elapsed, d_sup)
        segments.append(Segment(start=s, stop=e, d_sup=d_sup, start_norm=start_norm))
    return envelope, tuple(segments)


def _error_norms(traj: Trajectory) -> np.ndarray:
    truth = np.column_stack([traj.x[:, 0], traj.x[:, 1], traj.d])
    return np.linalg.norm(traj.zhat - truth, axis=1)


def _noise_sup(spec: PlantSpec, n_bar: float | None) -> float:
    if n_bar is None:
        return spec.noise.truncation_k * spec.noise.sigma_n
    if n_bar < 0.0:
        raise ValueError("n_bar must be >= 0")
    return float(n_bar)


def check_observer_bound(
    spec: PlantSpec,
    triple,
    cfg: SimConfig,
    d_bar: float | None = None,
    n_bar: float | None = None,
    label: str | None = None,
    traj: Trajectory | None = None,
) -> BoundReport:
    """Check the general-placement observer envelope on one simulated run.

    ``d_bar`` and ``n_bar`` override the realized disturbance slope and
    noise bounds; by default both are measured from the run itself.
    ``traj`` may supply a trajectory previously produced by
    ``run_closed_loop(spec, gains_from_eigenvalues(triple), cfg)`` so
    that several checkers can share one simulation; the caller is
    responsible for the match.  Raises DivergenceError if the
    simulation blows up.
    """
    if d_bar is not None and d_bar < 0.0:
        raise ValueError("d_bar must be >= 0")
    gains = gains_from_eigenvalues(triple)
    cert = solve_lyapunov(observer_error_matrix(gains))
    gain_norm = float(np.linalg.norm(gains.as_array()))
    noise_sup = _noise_sup(spec, n_bar)

    if traj is None:
        traj = run_closed_loop(spec, gains, cfg)
    observed = _error_norms(traj)
    dt = float(traj.t[1] - traj.t[0])
    starts = _segment_starts(spec.kind, traj.t)
    envelope, segments = _segmented_envelope(
        traj.t, observed, traj.d, dt, starts, d_bar,
        lambda z0, elapsed, d_sup: observer_envelope(
            cert, gain_norm, z0, elapsed, d_sup, noise_sup
        ),
    )
    lam = tuple(sorted((triple.lam1, triple.lam2, triple.lam3)))
    return BoundReport(
        label=label or f"observer-envelope {spec.kind} lambda={lam}",
        times=traj.t,
        observed=observed,
        envelope=envelope,
        constants={
            "condition_ratio": cert.condition_ratio,
            "decay_rate": cert.decay_rate,
            "forcing_gain": cert.forcing_gain,
            "gain_norm": gain_norm,
            "noise_sup": noise_sup,
            "lyapunov_residual": cert.residual,
        },
        segments=segments,
        notes=(
            "decay_rate comes from the certificate of this gain set; "
            "envelopes for different gains decay at different certified rates",
        ),
    )


def check_bandwidth_bound(
    spec: PlantSpec,
    omega0: float,
    cfg: SimConfig,
    d_bar: float | None = None,
    n_bar: float | None = None,
    label: str | None = None,
) -> BoundReport:
    """Check the bandwidth-parametrized observer envelope on one run.

    The certificate is solved once for UNIT_BANDWIDTH_MATRIX and covers
    every omega0 through the scaling in :func:`bandwidth_envelope`.
    """
    if d_bar is not None and d_bar < 0.0:
        raise ValueError("d_bar must be >= 0")
    gains = gains_from_bandwidth(omega0)
    cert = solve_lyapunov(UNIT_BANDWIDTH_MATRIX)
    noise_sup = _noise_sup(spec, n_bar)

    traj = run_closed_loop(spec, gains, cfg)
    observed = _error_norms(traj)
    dt = float(traj.t[1] - traj.t[0])
    starts = _segment_starts(spec.kind, traj.t)
    envelope, segments = _segmented_envelope(
        traj.t, observed, traj.d, dt, starts, d_bar,
        lambda z0, elapsed, d_sup: bandwidth_envelope(
            cert, omega0, z0, elapsed, d_sup, noise_sup
        ),
    )
    return BoundReport(
        label=label or f"bandwidth-envelope {spec.kind} omega0={omega0:g}",
        times=traj.t,
        observed=observed,
        envelope=envelope,
        constants={
            "condition_ratio": cert.condition_ratio,
            "decay_rate": cert.decay_rate,
            "forcing_gain": cert.forcing_gain,
            "omega0": float(omega0),
            "noise_sup": noise_sup,
            "lyapunov_residual": cert.residual,
        },
        segments=segments,
    )


def check_tracking_bound(
    spec: PlantSpec,
    triple,
    cfg: SimConfig,
    label: str | None = None,
    traj: Trajectory | None = None,
) -> BoundReport:
    """Check the closed-loop state envelope on one simulated run.

    The estimation-error supremum entering the formula is measured from
    the same run.  The plant state is continuous across the load steps,
    so this envelope is anchored once at t = 0.  ``traj`` shares a
    simulation exactly as in :func:`check_observer_bound`.
    """
    gains = gains_from_eigenvalues(triple)
    cert = solve_lyapunov(UNIT_POLE_MATRIX)

    if traj is None:
        traj = run_closed_loop(spec, gains, cfg)
    observed = np.linalg.norm(traj.x, axis=1)
    error_sup = float(_error_norms(traj).max())
    k = float(cfg.k)
    envelope = tracking_envelope(cert, k, float(observed[0]), traj.t, error_sup)
    segments = (
        Segment(start=0, stop=traj.t.size, d_sup=0.0, start_norm=float(observed[0])),
    )
    lam = tuple(sorted((triple.lam1, triple.lam2, triple.lam3)))
    return BoundReport(
        label=label or f"tracking-envelope {spec.kind} k={k:g} lambda={lam}",
        times=traj.t,
        observed=observed,
        envelope=envelope,
        constants={
            "condition_ratio": cert.condition_ratio,
            "decay_rate": cert.decay_rate,
            "forcing_gain": cert.forcing_gain,
            "k": k,
            "error_sup": error_sup,
            "lyapunov_residual": cert.residual,
        },
        segments=segments,
        notes=("error_sup is the realized estimation-error supremum of this run",),
    )

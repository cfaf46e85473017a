"""Observer eigenvalue selection over a quantized grid.

Three selectors minimize the weighted cost J = sum(alpha_i * criterion_i)
over candidate eigenvalue triples: ``select_nn`` queries the trained
performance estimator, ``select_ideal`` simulates every candidate, and
``select_bandwidth`` restricts the search to repeated eigenvalues
(-omega, -omega, -omega). ``random_baseline`` draws bandwidths uniformly
for Monte-Carlo comparisons. Raw (denormalized) criteria feed J so the
weights act on physically meaningful magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import plants, sim
from .control import EigenTriple, gains_array
from .dataset import denormalize_criteria
from .estimator.model import EstimatorModel, embed_context, predict_grid
from .plants import PlantSpec
from .sim import CriterionWeights, DivergenceError, SimConfig

__all__ = [
    "GainGrid",
    "TuneResult",
    "axis_values",
    "build_grid",
    "omega_axis",
    "evaluate_triples",
    "select_from_criteria",
    "select_ideal",
    "select_bandwidth",
    "select_nn",
    "random_baseline",
    "performance_landscape",
    "valley_span_fraction",
]

# Equal-J tolerance for tie-breaking, relative to the smaller cost.
TIE_REL_TOL = 1e-12

DEFAULT_SEEDS = 3


@dataclass(frozen=True)
class GainGrid:
    """Per-axis quantization of the eigenvalue search range."""

    count: int = 21
    lo: float = -80.0
    hi: float = -1.0

    def __post_init__(self) -> None:
        if self.count < 2:
            raise ValueError("grid needs at least 2 points per axis")
        if not self.lo < self.hi < 0.0:
            raise ValueError("grid range must satisfy lo < hi < 0")


def axis_values(cfg: GainGrid) -> np.ndarray:
    """Axis quantization hi + (lo - hi) * s for s in {0, 1/(n-1), ..., 1}.

    Defaults give -1 - 79s: the axis runs from -1 down to -80.
    """
    s = np.arange(cfg.count, dtype=np.float64) / (cfg.count - 1)
    return cfg.hi + (cfg.lo - cfg.hi) * s


def omega_axis(cfg: GainGrid) -> np.ndarray:
    """Bandwidth quantization: the axis values mirrored positive."""
    return -axis_values(cfg)


def build_grid(cfg: GainGrid, canonical: bool = True) -> np.ndarray:
    """Candidate eigenvalue triples, one per row.

    Raw mode returns all count**3 ordered tuples. Canonical mode sorts
    each triple and drops duplicates; the closed loop depends only on the
    characteristic polynomial, so permuted triples are redundant
    (21 points per axis: 9261 raw, 1771 canonical).
    """
    vals = axis_values(cfg)
    rows = np.stack(
        np.meshgrid(vals, vals, vals, indexing="ij"), axis=-1
    ).reshape(-1, 3)
    if canonical:
        rows = np.unique(np.sort(rows, axis=1), axis=0)
    return rows


@dataclass(frozen=True)
class TuneResult:
    """Outcome of one selector run."""

    selector: str
    lambda_star: EigenTriple
    j_star: float
    table: np.ndarray  # (n, 4): lam1, lam2, lam3, J

    def __post_init__(self) -> None:
        if self.table.ndim != 2 or self.table.shape[1] != 4:
            raise ValueError("table must have rows (lam1, lam2, lam3, J)")


def _argmin_with_ties(rows: np.ndarray, j: np.ndarray) -> int:
    """Index of the minimum J; ties go to the largest eigenvalue sum.

    Costs within TIE_REL_TOL of the minimum count as equal; among those,
    the slowest observer (largest sum of eigenvalues) needs the smallest
    gains and amplifies measurement noise least.
    """
    j_min = float(np.min(j))
    tol = TIE_REL_TOL * max(abs(j_min), np.finfo(float).tiny)
    tied = np.flatnonzero(j <= j_min + tol)
    sums = rows[tied].sum(axis=1)
    return int(tied[np.argmax(sums)])


def _result(selector: str, rows: np.ndarray, j: np.ndarray) -> TuneResult:
    idx = _argmin_with_ties(rows, j)
    return TuneResult(
        selector=selector,
        lambda_star=EigenTriple(*rows[idx]),
        j_star=float(j[idx]),
        table=np.column_stack([rows, j]),
    )


def evaluate_triples(
    spec: PlantSpec,
    cfg: SimConfig,
    rows: np.ndarray,
    seeds: int = DEFAULT_SEEDS,
):
    """Simulate every eigenvalue triple under ``seeds`` noise draws.

    Returns (criteria, all_diverged): seed-averaged raw criteria (n, 4)
    and a flag per triple that is set only when every noise realization
    blew up. Each noise realization is shared across all triples, so
    comparisons between rows are paired.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[0] == 0:
        raise ValueError("no eigenvalue triples to evaluate")
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    gains = gains_array(rows)
    params = sim.params_for(spec)
    base = spec.noise.seed if cfg.seed is None else cfg.seed
    total = np.zeros((rows.shape[0], 4))
    all_diverged = np.ones(rows.shape[0], dtype=bool)
    for s in range(seeds):
        noise_model = plants.NoiseModel(
            spec.noise.sigma_n, spec.noise.truncation_k, sim.child_seed(base, s))
        noise = plants.sample_noise(noise_model, cfg.steps + 1)
        batch = sim.simulate_batch(
            spec.kind, params, gains, cfg.k,
            np.asarray(cfg.x0, dtype=float), cfg.zhat0,
            noise, cfg.dt, cfg.steps,
        )
        total += batch.criteria
        all_diverged &= batch.diverged
    return total / seeds, all_diverged


def select_from_criteria(
    rows: np.ndarray,
    criteria: np.ndarray,
    all_diverged: np.ndarray,
    weights: CriterionWeights,
    selector: str = "ideal",
) -> TuneResult:
    """Pick the best triple from already-computed criteria.

    Accepts the output of :func:`evaluate_triples` (possibly assembled
    from several partial evaluations) and applies the weighted cost and
    tie-break rules.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    criteria = np.asarray(criteria, dtype=np.float64)
    if np.all(all_diverged):
        raise DivergenceError(
            float("nan"),
            "every candidate diverged for all noise seeds; "
            "the plant configuration is not stabilizable on this grid")
    j = criteria @ weights.as_array()
    return _result(selector, rows, j)


def _select_by_simulation(selector, spec, cfg, rows, weights, seeds):
    criteria, all_diverged = evaluate_triples(spec, cfg, rows, seeds)
    return select_from_criteria(rows, criteria, all_diverged, weights, selector)


def select_ideal(
    spec: PlantSpec,
    cfg: SimConfig,
    rows: np.ndarray,
    weights: CriterionWeights,
    seeds: int = DEFAULT_SEEDS,
) -> TuneResult:
    """Exhaustive simulation of the candidate grid; the reference selector."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    return _select_by_simulation("ideal", spec, cfg, rows, weights, seeds)


def select_bandwidth(
    spec: PlantSpec,
    cfg: SimConfig,
    omegas,
    weights: CriterionWeights,
    seeds: int = DEFAULT_SEEDS,
) -> TuneResult:
    """Grid search restricted to repeated eigenvalues -omega."""
    omegas = np.atleast_1d(np.asarray(omegas, dtype=np.float64))
    if np.any(omegas <= 0.0):
        raise ValueError("bandwidths must be > 0")
    rows = np.column_stack([-omegas, -omegas, -omegas])
    return _select_by_simulation("bandwidth", spec, cfg, rows, weights, seeds)


def select_nn(
    model: EstimatorModel,
    kind: str,
    transient: np.ndarray,
    sigma_n: float,
    x_test0,
    x0,
    rows: np.ndarray,
    weights: CriterionWeights,
) -> TuneResult:
    """Estimator-driven selection: predicted raw criteria score the grid.

    The experiment context (basic-experiment transient, noise level,
    initial conditions) is embedded once; only the cheap eigenvalue
    block runs per grid point.
    """
    if kind != model.kind:
        raise ValueError(
            f"model normalizes {model.kind!r} plants, got {kind!r}")
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[0] == 0:
        raise ValueError("no eigenvalue triples to evaluate")
    context = embed_context(model, transient, sigma_n, tuple(x_test0), tuple(x0))
    norm = predict_grid(model, context, rows)
    raw = denormalize_criteria(norm, model.kind)
    j = raw @ weights.as_array()
    return _result("nn", rows, j)


def random_baseline(
    spec: PlantSpec,
    cfg: SimConfig,
    weights: CriterionWeights,
    trials: int,
    seed: int,
    omega_range: tuple[float, float] = (1.0, 80.0),
    snap_to: GainGrid | None = None,
    seeds: int = DEFAULT_SEEDS,
) -> list[tuple[float, float]]:
    """Uniformly drawn bandwidths omega_0 with their realized costs.

    ``snap_to`` rounds each draw to the nearest grid bandwidth, which
    makes the draws comparable point-for-point with the grid selectors.
    Returns [(omega_0, J), ...] in draw order.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    lo, hi = omega_range
    if not 0.0 < lo < hi:
        raise ValueError("omega_range must satisfy 0 < lo < hi")
    rng = np.random.Generator(np.random.PCG64(seed))
    omegas = rng.uniform(lo, hi, trials)
    if snap_to is not None:
        axis = omega_axis(snap_to)
        omegas = axis[np.argmin(np.abs(omegas[:, None] - axis[None, :]), axis=1)]
    rows = np.column_stack([-omegas, -omegas, -omegas])
    criteria, _ = evaluate_triples(spec, cfg, rows, seeds)
    j = criteria @ weights.as_array()
    return [(float(w), float(c)) for w, c in zip(omegas, j)]


def performance_landscape(
    spec: PlantSpec,
    cfg: SimConfig,
    weights: CriterionWeights,
    model: EstimatorModel | None = None,
    transient: np.ndarray | None = None,
    sigma_n: float | None = None,
    x_test0=None,
    x0=None,
    grid: GainGrid = GainGrid(),
    seeds: int = DEFAULT_SEEDS,
    pairs: np.ndarray | None = None,
) -> np.ndarray:
    """Cost over the constrained slice lambda3 = lambda2.

    Returns rows (lambda1, lambda23, J_true, J_predicted). By default the
    slice covers the full axis-by-axis square; explicit (lambda1,
    lambda23) ``pairs`` override it. The predicted column needs a model
    plus the experiment context; without a model it is NaN.
    """
    if pairs is not None:
        pairs = np.atleast_2d(np.asarray(pairs, dtype=np.float64))
        if pairs.shape[1] != 2:
            raise ValueError("pairs must have columns (lambda1, lambda23)")
        l1v = pairs[:, 0].copy()
        l23v = pairs[:, 1].copy()
    else:
        vals = axis_values(grid)
        l1g, l23g = np.meshgrid(vals, vals, indexing="ij")
        l1v = l1g.reshape(-1)
        l23v = l23g.reshape(-1)
    rows = np.column_stack([l1v, l23v, l23v])
    criteria, all_diverged = evaluate_triples(spec, cfg, rows, seeds)
    if np.all(all_diverged):
        raise DivergenceError(
            float("nan"), "every landscape point diverged for all noise seeds")
    j_true = criteria @ weights.as_array()
    if model is not None:
        if transient is None or sigma_n is None or x_test0 is None or x0 is None:
            raise ValueError(
                "predicted landscape needs transient, sigma_n, x_test0 and x0")
        context = embed_context(
            model, transient, sigma_n, tuple(x_test0), tuple(x0))
        raw = denormalize_criteria(
            predict_grid(model, context, rows), model.kind)
        j_pred = raw @ weights.as_array()
    else:
        j_pred = np.full(rows.shape[0], np.nan)
    return np.column_stack([l1v, l23v, j_true, j_pred])


def valley_span_fraction(table: np.ndarray, frac: float = 0.05) -> float:
    """How tightly the best costs cluster along the eigenvalue-sum axis.

    Takes landscape rows (lambda1, lambda23, J_true, ...), picks the best
    ``frac`` of points by true cost, and returns the ratio of their
    eigenvalue-sum span to the whole slice's sum range. Small values mean
    the near-optimal region hugs a lambda1 + 2*lambda23 = const band.
    """
    if table.ndim != 2 or table.shape[1] < 3:
        raise ValueError("expected landscape rows (lam1, lam23, J, ...)")
    sums = table[:, 0] + 2.0 * table[:, 1]
    full_span = float(np.max(sums) - np.min(sums))
    if full_span == 0.0:
        return 0.0
    order = np.argsort(table[:, 2], kind="stable")
    n_best = max(1, int(np.ceil(frac * table.shape[0])))
    best = sums[order[:n_best]]
    return float((np.max(best) - np.min(best)) / full_span)

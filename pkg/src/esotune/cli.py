"""Command-line workflows over the library.

Every command reads a JSON config file, writes its artifacts into
``--out-dir`` and finishes by writing ``manifest.json``, which lists the
digest of the effective config, the seeds that entered, the package
version and every output file.  The manifest is written last, so its
presence marks a run that completed; its wall-clock entry is the only
output that varies between identical runs.

Flags override config fields (``--seed`` replaces the command's master
or noise seed).  ``--jobs`` fans deterministic work chunks over a
process pool; artifacts are byte-identical for any job count.  Exit
codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, bounds, dataset, parallel, plants, sim, tuner
from .control import EigenTriple, gains_from_bandwidth, gains_from_eigenvalues
from .estimator import (
    EstimatorConfig,
    EstimatorModel,
    TrainConfig,
    build_model,
    embed_context,
    load_model,
    predict_grid,
    save_history,
    save_model,
    tensors_from_records,
    train,
)
from .sim import CriterionWeights, DivergenceError, SimConfig

__all__ = ["main", "ConfigError"]

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

WEIGHT_KEYS = ("iae", "iac", "iacd", "iadee")

# Above this many grid points the tune report keeps only the summary;
# the full table always lands in the CSV next to it.
TABLE_INLINE_LIMIT = 10_000

COMMANDS = (
    "simulate",
    "sweep",
    "gen-dataset",
    "train",
    "tune",
    "landscape",
    "check-bounds",
    "montecarlo",
)


class ConfigError(ValueError):
    """A config file is missing or misusing a field."""


# ---------------------------------------------------------------------------
# config plumbing


def _load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return doc


def _effective_config(raw: dict, args) -> dict:
    """Apply flag overrides; commands read only the result."""
    cfg = copy.deepcopy(raw)
    if args.seed is not None:
        if args.command in ("gen-dataset", "montecarlo"):
            cfg["seed"] = args.seed
        elif args.command == "train":
            cfg.setdefault("train", {})["seed"] = args.seed
        else:
            cfg.setdefault("sim", {})["seed"] = args.seed
    return cfg


def _require(doc: dict, path: str):
    node = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"missing required config field '{path}'")
        node = node[part]
    return node


def _reject_unknown(doc: dict, known, where: str) -> None:
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(
            f"unknown field(s) {unknown} in '{where}'; expected {sorted(known)}")


def _weights_from(doc) -> CriterionWeights:
    if not isinstance(doc, dict):
        raise ConfigError("'weights' must be an object with keys iae/iac/iacd/iadee")
    _reject_unknown(doc, WEIGHT_KEYS, "weights")
    return CriterionWeights(*(float(doc.get(k, 0.0)) for k in WEIGHT_KEYS))


def _sim_config(doc) -> SimConfig:
    doc = dict(doc or {})
    known = ("dt", "horizon", "record_hz", "x0", "zhat0", "k", "seed")
    _reject_unknown(doc, known, "sim")
    kwargs: dict = {}
    for key in ("dt", "horizon", "record_hz", "k"):
        if key in doc:
            kwargs[key] = float(doc[key])
    if "x0" in doc:
        kwargs["x0"] = tuple(float(v) for v in doc["x0"])
    if "zhat0" in doc:
        z = doc["zhat0"]
        kwargs["zhat0"] = z if isinstance(z, str) else tuple(float(v) for v in z)
    if doc.get("seed") is not None:
        kwargs["seed"] = int(doc["seed"])
    return SimConfig(**kwargs)


def _gain_grid(doc) -> tuner.GainGrid:
    doc = dict(doc or {})
    _reject_unknown(doc, ("count", "lo", "hi"), "grid")
    return tuner.GainGrid(
        count=int(doc.get("count", 21)),
        lo=float(doc.get("lo", -80.0)),
        hi=float(doc.get("hi", -1.0)),
    )


def _triple(values, where: str) -> EigenTriple:
    if not isinstance(values, (list, tuple)) or len(values) != 3:
        raise ConfigError(f"'{where}' must be a list of three eigenvalues")
    return EigenTriple(*(float(v) for v in values))


def _noise_base(spec: plants.PlantSpec, cfg: SimConfig) -> int:
    return spec.noise.seed if cfg.seed is None else cfg.seed


# ---------------------------------------------------------------------------
# artifact writers


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _config_digest(effective: dict) -> str:
    return hashlib.sha256(_canonical_json(effective).encode("utf-8")).hexdigest()


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: str, rows) -> None:
    # repr round-trips float64 exactly, so re-runs are byte-comparable.
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(f"{float(v)!r}" for v in row) + "\n")


def _criteria_dict(values) -> dict:
    arr = np.asarray(values, dtype=float)
    return {name: float(arr[i]) for i, name in enumerate(WEIGHT_KEYS)}


def _weights_dict(weights: CriterionWeights) -> dict:
    return dict(zip(WEIGHT_KEYS, (float(v) for v in weights.as_array())))


# ---------------------------------------------------------------------------
# pooled evaluation


def _eval_rows_task(task):
    spec, cfg, rows, seeds = task
    return tuner.evaluate_triples(spec, cfg, rows, seeds)


def _evaluate_rows(spec, cfg, rows, seeds: int, jobs: int):
    """Chunked, pool-friendly evaluate_triples with identical results."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    tasks = [
        (spec, cfg, rows[i:i + parallel.TASK_CHUNK], seeds)
        for i in range(0, rows.shape[0], parallel.TASK_CHUNK)
    ]
    criteria_parts = []
    diverged_parts = []
    for criteria, diverged in parallel.map_ordered(_eval_rows_task, tasks, jobs):
        criteria_parts.append(criteria)
        diverged_parts.append(diverged)
    return np.vstack(criteria_parts), np.concatenate(diverged_parts)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, args, out_dir: Path):
    spec = plants.spec_from_dict(_require(cfg, "plant"))
    simcfg = _sim_config(cfg.get("sim"))
    if "lambda" in cfg and "omega0" in cfg:
        raise ConfigError("give either 'lambda' or 'omega0', not both")
    if "lambda" in cfg:
        gains = gains_from_eigenvalues(_triple(cfg["lambda"], "lambda"))
    elif "omega0" in cfg:
        gains = gains_from_bandwidth(float(cfg["omega0"]))
    else:
        raise ConfigError("missing required config field 'lambda' (or 'omega0')")

    traj = sim.run_closed_loop(spec, gains, simcfg)
    criteria = sim.compute_criteria(traj)

    outputs = []
    csv_path = out_dir / "trajectory.csv"
    _write_csv(
        csv_path,
        "t,x1,x2,z1,z2,z3,u,d,y",
        zip(traj.t, traj.x[:, 0], traj.x[:, 1], traj.zhat[:, 0],
            traj.zhat[:, 1], traj.zhat[:, 2], traj.u, traj.d, traj.y),
    )
    outputs.append(csv_path)

    doc = _criteria_dict(criteria.as_array())
    if "weights" in cfg:
        weights = _weights_from(cfg["weights"])
        doc["cost"] = sim.cost(criteria, weights)
    json_path = out_dir / "criteria.json"
    _write_json(json_path, doc)
    outputs.append(json_path)

    if not args.no_plots:
        from . import plotting

        fig_path = out_dir / "trajectory.png"
        plotting.plot_trajectory(traj, fig_path)
        outputs.append(fig_path)
    return {"noise": _noise_base(spec, simcfg)}, outputs


def _sweep_omegas(cfg: dict) -> np.ndarray:
    if "omegas" in cfg and "omega_grid" in cfg:
        raise ConfigError("give either 'omegas' or 'omega_grid', not both")
    if "omegas" in cfg:
        omegas = np.asarray([float(v) for v in cfg["omegas"]], dtype=np.float64)
    elif "omega_grid" in cfg:
        block = cfg["omega_grid"]
        _reject_unknown(block, ("lo", "hi", "count"), "omega_grid")
        count = int(_require(block, "count"))
        if count < 2:
            raise ConfigError("'omega_grid.count' must be >= 2")
        omegas = np.linspace(
            float(_require(block, "lo")), float(_require(block, "hi")), count)
    else:
        raise ConfigError("missing required config field 'omegas' (or 'omega_grid')")
    if omegas.size == 0 or np.any(omegas <= 0.0):
        raise ConfigError("bandwidths must be positive and non-empty")
    return omegas


def cmd_sweep(cfg: dict, args, out_dir: Path):
    spec = plants.spec_from_dict(_require(cfg, "plant"))
    simcfg = _sim_config(cfg.get("sim"))
    omegas = _sweep_omegas(cfg)
    seeds = int(cfg.get("seeds", 1))

    rows = np.column_stack([-omegas, -omegas, -omegas])
    criteria, _ = _evaluate_rows(spec, simcfg, rows, seeds, args.jobs)

    outputs = []
    csv_path = out_dir / "sweep.csv"
    _write_csv(
        csv_path,
        "omega0,iae,iac,iacd,iadee",
        (np.concatenate([[w], c]) for w, c in zip(omegas, criteria)),
    )
    outputs.append(csv_path)

    if not args.no_plots:
        from . import plotting

        fig_path = out_dir / "sweep.png"
        plotting.plot_sweep(omegas, criteria, fig_path)
        outputs.append(fig_path)
    return {"noise_base": _noise_base(spec, simcfg), "eval_seeds": seeds}, outputs


def cmd_gen_dataset(cfg: dict, args, out_dir: Path):
    kind = _require(cfg, "kind")
    counts_doc = _require(cfg, "counts")
    if not isinstance(counts_doc, dict) or not counts_doc:
        raise ConfigError("'counts' must map split names to sizes")
    counts = {split: int(n) for split, n in counts_doc.items()}
    seed = int(cfg.get("seed", 0))

    paths = dataset.generate_dataset(kind, counts, seed, out_dir, jobs=args.jobs)
    outputs = [paths["meta"]] + [paths[s] for s in dataset.SPLITS if s in paths]

    if not args.no_plots and "train" in paths:
        from . import plotting

        records = dataset.load_split(paths["train"])
        raw = np.array([r.criteria_raw.as_array() for r in records])
        fig_path = out_dir / "criteria_hist.png"
        plotting.plot_criteria_hist(raw, fig_path)
        outputs.append(fig_path)
    return {"master": seed}, outputs


def _load_records(path: str, kind: str, which: str):
    records = dataset.load_split(path)
    if not records:
        raise ConfigError(f"dataset '{path}' contains no records")
    kinds = {r.sample.plant.kind for r in records}
    if kinds != {kind}:
        raise ConfigError(
            f"'data.{which}' holds {sorted(kinds)} records, config says {kind!r}")
    return records


def cmd_train(cfg: dict, args, out_dir: Path):
    kind = _require(cfg, "kind")
    train_records = _load_records(_require(cfg, "data.train"), kind, "train")
    val_records = _load_records(_require(cfg, "data.val"), kind, "val")

    model_doc = dict(cfg.get("model") or {})
    init_seed = int(model_doc.pop("seed", 0))
    for key, value in model_doc.items():
        if isinstance(value, list):
            model_doc[key] = tuple(value)
    arch = EstimatorConfig(**model_doc)

    train_doc = dict(cfg.get("train") or {})
    _reject_unknown(train_doc, ("lr", "epochs", "batch_size", "seed"), "train")
    tcfg = TrainConfig(
        lr=float(train_doc.get("lr", 1.0e-4)),
        epochs=int(train_doc.get("epochs", 100)),
        batch_size=int(train_doc.get("batch_size", 128)),
        seed=int(train_doc.get("seed", 0)),
    )

    train_data = tensors_from_records(train_records, kind)
    val_data = tensors_from_records(val_records, kind)
    model = build_model(arch, kind, init_seed)

    def progress(epoch, train_loss, val_loss):
        print(f"epoch {epoch}: train {train_loss:.6f} val {val_loss:.6f}",
              file=sys.stderr)

    best, history = train(model, train_data, val_data, tcfg, progress=progress)

    outputs = []
    model_path = out_dir / "model.bin"
    save_model(best, model_path)
    outputs.append(model_path)
    history_path = out_dir / "history.csv"
    save_history(history, history_path)
    outputs.append(history_path)

    metrics_path = out_dir / "metrics.json"
    _write_json(metrics_path, {
        "train_samples": len(train_records),
        "val_samples": len(val_records),
        "epochs": tcfg.epochs,
        "first_epoch_val_loss": float(history[0][2]),
        "best_val_loss": float(best.metadata["best_val_loss"]),
        "best_epoch": int(best.metadata["best_epoch"]),
        "final_train_loss": float(history[-1][1]),
    })
    outputs.append(metrics_path)

    if not args.no_plots:
        from . import plotting

        fig_path = out_dir / "history.png"
        plotting.plot_history(history, fig_path)
        outputs.append(fig_path)
    return {"model_init": init_seed, "shuffle": tcfg.seed}, outputs


def _basic_transient(spec, x_test0, x0, base_seed: int) -> np.ndarray:
    """Run the fixed-gain signature experiment for a user-supplied plant."""
    sample = dataset.SampleSpec(
        plant=spec,
        x_test0=tuple(float(v) for v in x_test0),
        x0=tuple(float(v) for v in x0),
        lam=EigenTriple(*([dataset.BASIC_EIGENVALUE] * 3)),
        split="train",
        sample_seed=base_seed,
    )
    return dataset.run_basic_experiment(sample)


def _load_estimator(path: str, kind: str) -> EstimatorModel:
    model = load_model(path)
    if model.kind != kind:
        raise ConfigError(
            f"model '{path}' normalizes {model.kind!r} plants, config says {kind!r}")
    return model


def cmd_tune(cfg: dict, args, out_dir: Path):
    spec = plants.spec_from_dict(_require(cfg, "plant"))
    simcfg = _sim_config(cfg.get("sim"))
    weights = _weights_from(_require(cfg, "weights"))
    selector = _require(cfg, "selector")
    grid = _gain_grid(cfg.get("grid"))
    seeds = int(cfg.get("seeds", tuner.DEFAULT_SEEDS))
    base_seed = _noise_base(spec, simcfg)

    if selector == "ideal":
        rows = tuner.build_grid(grid)
        criteria, diverged = _evaluate_rows(spec, simcfg, rows, seeds, args.jobs)
        result = tuner.select_from_criteria(rows, criteria, diverged, weights, selector)
    elif selector == "bandwidth":
        omegas = tuner.omega_axis(grid)
        rows = np.column_stack([-omegas, -omegas, -omegas])
        criteria, diverged = _evaluate_rows(spec, simcfg, rows, seeds, args.jobs)
        result = tuner.select_from_criteria(rows, criteria, diverged, weights, selector)
    elif selector == "nn":
        model = _load_estimator(_require(cfg, "model"), spec.kind)
        x_test0 = _require(cfg, "x_test0")
        transient = _basic_transient(spec, x_test0, simcfg.x0, base_seed)
        rows = tuner.build_grid(grid)
        result = tuner.select_nn(
            model, spec.kind, transient, spec.noise.sigma_n,
            x_test0, simcfg.x0, rows, weights)
    else:
        raise ConfigError(
            f"unknown selector {selector!r}; expected 'ideal', 'bandwidth' or 'nn'")

    outputs = []
    table_path = out_dir / "tune_table.csv"
    _write_csv(table_path, "lam1,lam2,lam3,J", result.table)
    outputs.append(table_path)

    report = {
        "selector": result.selector,
        "weights": _weights_dict(weights),
        "lambda_star": [float(v) for v in result.lambda_star.as_array()],
        "j_star": result.j_star,
        "grid": {"count": grid.count, "lo": grid.lo, "hi": grid.hi,
                 "points": int(result.table.shape[0])},
        "eval_seeds": seeds if selector != "nn" else 0,
        "noise_base": base_seed,
    }
    if result.table.shape[0] <= TABLE_INLINE_LIMIT:
        report["table"] = [[float(v) for v in row] for row in result.table]
    report_path = out_dir / "tune_report.json"
    _write_json(report_path, report)
    outputs.append(report_path)

    if not args.no_plots:
        from . import plotting

        fig_path = out_dir / "tune_table.png"
        plotting.plot_tune_table(result.table, fig_path)
        outputs.append(fig_path)
    return {"noise_base": base_seed, "eval_seeds": report["eval_seeds"]}, outputs


def cmd_landscape(cfg: dict, args, out_dir: Path):
    spec = plants.spec_from_dict(_require(cfg, "plant"))
    simcfg = _sim_config(cfg.get("sim"))
    weights = _weights_from(_require(cfg, "weights"))
    grid = _gain_grid(cfg.get("grid"))
    seeds = int(cfg.get("seeds", tuner.DEFAULT_SEEDS))
    base_seed = _noise_base(spec, simcfg)

    vals = tuner.axis_values(grid)
    l1g, l23g = np.meshgrid(vals, vals, indexing="ij")
    l1v = l1g.reshape(-1)
    l23v = l23g.reshape(-1)
    rows = np.column_stack([l1v, l23v, l23v])

    criteria, diverged = _evaluate_rows(spec, simcfg, rows, seeds, args.jobs)
    if np.all(diverged):
        raise DivergenceError(
            float("nan"), "every landscape point diverged for all noise seeds")
    j_true = criteria @ weights.as_array()

    if "model" in cfg:
        model = _load_estimator(cfg["model"], spec.kind)
        x_test0 = _require(cfg, "x_test0")
        transient = _basic_transient(spec, x_test0, simcfg.x0, base_seed)
        context = embed_context(
            model, transient, spec.noise.sigma_n,
            tuple(float(v) for v in x_test0), tuple(simcfg.x0))
        raw = dataset.denormalize_criteria(
            predict_grid(model, context, rows), model.kind)
        j_pred = raw @ weights.as_array()
    else:
        j_pred = np.full(rows.shape[0], np.nan)

    table = np.column_stack([l1v, l23v, j_true, j_pred])

    outputs = []
    csv_path = out_dir / "landscape.csv"
    _write_csv(csv_path, "lam1,lam23,j_true,j_pred", table)
    outputs.append(csv_path)

    summary_path = out_dir / "landscape.json"
    _write_json(summary_path, {
        "points": int(table.shape[0]),
        "diverged_points": int(np.count_nonzero(diverged)),
        "valley_span_fraction": tuner.valley_span_fraction(table),
        "weights": _weights_dict(weights),
        "eval_seeds": seeds,
        "noise_base": base_seed,
    })
    outputs.append(summary_path)

    if not args.no_plots:
        from . import plotting

        fig_path = out_dir / "landscape.png"
        plotting.plot_landscape(table, fig_path)
        outputs.append(fig_path)
    return {"noise_base": base_seed, "eval_seeds": seeds}, outputs


def cmd_check_bounds(cfg: dict, args, out_dir: Path):
    spec = plants.spec_from_dict(_require(cfg, "plant"))
    simcfg = _sim_config(cfg.get("sim"))
    checks = _require(cfg, "checks")
    if not isinstance(checks, list) or not checks:
        raise ConfigError("'checks' must be a non-empty list")

    reports = []
    for i, chk in enumerate(checks):
        if not isinstance(chk, dict):
            raise ConfigError(f"'checks[{i}]' must be an object")
        _reject_unknown(
            chk, ("type", "lambda", "omega0", "label", "d_bar", "n_bar"),
            f"checks[{i}]")
        kind = chk.get("type")
        label = chk.get("label", f"{kind}-{i}")
        d_bar = None if chk.get("d_bar") is None else float(chk["d_bar"])
        n_bar = None if chk.get("n_bar") is None else float(chk["n_bar"])
        if kind == "observer":
            triple = _triple(_require(chk, "lambda"), f"checks[{i}].lambda")
            reports.append(bounds.check_observer_bound(
                spec, triple, simcfg, d_bar=d_bar, n_bar=n_bar, label=label))
        elif kind == "bandwidth":
            omega0 = float(_require(chk, "omega0"))
            reports.append(bounds.check_bandwidth_bound(
                spec, omega0, simcfg, d_bar=d_bar, n_bar=n_bar, label=label))
        elif kind == "tracking":
            triple = _triple(_require(chk, "lambda"), f"checks[{i}].lambda")
            reports.append(bounds.check_tracking_bound(
                spec, triple, simcfg, label=label))
        else:
            raise ConfigError(
                f"'checks[{i}].type' must be 'observer', 'bandwidth' or 'tracking'")

    outputs = []
    json_path = out_dir / "bound_reports.json"
    bounds.write_reports_json(reports, json_path)
    outputs.append(json_path)
    for i, report in enumerate(reports):
        csv_path = out_dir / f"margins_{i:02d}.csv"
        bounds.write_margin_csv(report, csv_path)
        outputs.append(csv_path)

    for report in reports:
        if report.violated:
            print(f"warning: bound violated for '{report.label}' "
                  f"(worst margin {report.worst_margin:.3e})", file=sys.stderr)

    if not args.no_plots:
        from . import plotting

        worst = min(reports, key=lambda r: r.worst_margin)
        fig_path = out_dir / "margins.png"
        plotting.plot_margins(worst, fig_path)
        outputs.append(fig_path)
    return {"noise": _noise_base(spec, simcfg)}, outputs


_MODEL_CACHE: dict[str, EstimatorModel] = {}


def _cached_model(path: str) -> EstimatorModel:
    model = _MODEL_CACHE.get(path)
    if model is None:
        model = load_model(path)
        _MODEL_CACHE[path] = model
    return model


def _mc_trial(task):
    (kind, model_path, master, trial, weight_tuple, eval_seeds,
     omega_lo, omega_hi, grid_tuple) = task
    model = _cached_model(model_path)
    weights = CriterionWeights(*weight_tuple)

    # Mirror the dataset redraw protocol: a sample whose signature
    # experiment blows up is replaced, keeping the trial a pure function
    # of (master, trial).
    trial_seed = sim.child_seed(master, trial)
    draw = trial_seed
    sample = None
    transient = None
    for attempt in range(dataset.MAX_REDRAWS):
        sample = dataset.sample_spec(kind, draw)
        try:
            transient = dataset.run_basic_experiment(sample)
            break
        except DivergenceError:
            draw = sim.child_seed(trial_seed, 100 + attempt)
    else:
        raise RuntimeError(
            f"signature experiment kept diverging after {dataset.MAX_REDRAWS} "
            f"redraws (kind={kind}, trial={trial})")

    rows = tuner.build_grid(tuner.GainGrid(*grid_tuple))
    picked = tuner.select_nn(
        model, kind, transient, sample.plant.noise.sigma_n,
        sample.x_test0, sample.x0, rows, weights)

    rng = np.random.Generator(np.random.PCG64(sim.child_seed(trial_seed, 1)))
    omega = float(rng.uniform(omega_lo, omega_hi))

    eval_rows = np.array([
        list(picked.lambda_star.as_array()),
        [-omega, -omega, -omega],
    ])
    eval_cfg = SimConfig(
        x0=sample.x0, zhat0=sim.MEASURED, seed=sim.child_seed(trial_seed, 2))
    criteria, _ = tuner.evaluate_triples(
        sample.plant, eval_cfg, eval_rows, eval_seeds)
    j = criteria @ weights.as_array()
    return {
        "trial": trial,
        "sample_seed": draw,
        "lambda_star": [float(v) for v in picked.lambda_star.as_array()],
        "omega_baseline": omega,
        "j_candidate": float(j[0]),
        "j_baseline": float(j[1]),
        "win": bool(j[0] < j[1]),
    }


def cmd_montecarlo(cfg: dict, args, out_dir: Path):
    kind = _require(cfg, "kind")
    if kind not in (plants.KIND_NS, plants.KIND_M1D):
        raise ConfigError(f"unknown plant kind {kind!r}")
    model_path = _require(cfg, "model")
    trials = int(_require(cfg, "trials"))
    if trials < 1:
        raise ConfigError("'trials' must be >= 1")
    weights = _weights_from(cfg.get("weights") or {"iae": 1.0, "iac": 1.0})
    seed = int(cfg.get("seed", 0))
    eval_seeds = int(cfg.get("eval_seeds", tuner.DEFAULT_SEEDS))
    omega_range = cfg.get("omega_range", [1.0, 80.0])
    omega_lo, omega_hi = (float(v) for v in omega_range)
    if not 0.0 < omega_lo < omega_hi:
        raise ConfigError("'omega_range' must satisfy 0 < lo < hi")
    grid = _gain_grid(cfg.get("grid"))

    _load_estimator(model_path, kind)  # fail fast on kind mismatch
    weight_tuple = tuple(float(v) for v in weights.as_array())
    tasks = [
        (kind, model_path, seed, t, weight_tuple, eval_seeds,
         omega_lo, omega_hi, (grid.count, grid.lo, grid.hi))
        for t in range(trials)
    ]
    results = list(parallel.map_ordered(_mc_trial, tasks, args.jobs))

    j_candidate = np.array([r["j_candidate"] for r in results])
    j_baseline = np.array([r["j_baseline"] for r in results])
    win_rate = float(np.mean([r["win"] for r in results]))

    outputs = []
    json_path = out_dir / "montecarlo.json"
    _write_json(json_path, {
        "kind": kind,
        "trials": trials,
        "weights": _weights_dict(weights),
        "eval_seeds": eval_seeds,
        "omega_range": [omega_lo, omega_hi],
        "win_rate": win_rate,
        "results": results,
    })
    outputs.append(json_path)

    if not args.no_plots:
        from . import plotting

        fig_path = out_dir / "paired_costs.png"
        plotting.plot_paired_costs(
            j_baseline, j_candidate, ("random omega0 cost", "estimator cost"),
            fig_path)
        outputs.append(fig_path)
    return {"master": seed, "eval_seeds": eval_seeds}, outputs


# ---------------------------------------------------------------------------
# dispatch


_HANDLERS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "tune": cmd_tune,
    "landscape": cmd_landscape,
    "check-bounds": cmd_check_bounds,
    "montecarlo": cmd_montecarlo,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esotune",
        description="Simulate, tune and certify observer-based control loops.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=f"run the {name} workflow")
        cmd.add_argument("--config", required=True, help="JSON config file")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the command's master/noise seed")
        cmd.add_argument("--jobs", type=int, default=1,
                         help="worker processes (outputs are jobs-independent)")
        cmd.add_argument("--out-dir", default=".", help="artifact directory")
        cmd.add_argument("--no-plots", action="store_true",
                         help="skip figure rendering")
    return parser


def _run(args) -> int:
    started = time.perf_counter()
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    cfg = _effective_config(_load_config(args.config), args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    seeds, outputs = _HANDLERS[args.command](cfg, args, out_dir)

    manifest = {
        "command": args.command,
        "config_digest": _config_digest(cfg),
        "code_version": __version__,
        "seeds": seeds,
        "jobs": args.jobs,
        "wall_clock_s": round(time.perf_counter() - started, 3),
        "outputs": sorted(p.name for p in outputs),
    }
    # Written last: a manifest on disk marks a run that finished.
    _write_json(out_dir / "manifest.json", manifest)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())

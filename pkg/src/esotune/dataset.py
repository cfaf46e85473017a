"""Labeled-sample generation for the performance estimator.

Every sample is a pair of closed-loop experiments on one randomly drawn
plant:

* the basic experiment always runs the observer eigenvalues at
  (-25, -25, -25) from the state ``x_test0`` and keeps the observer
  transient, decimated to 100 Hz (1000 x 3 values) — it acts as a
  learned signature of the plant;
* the target experiment runs the sample's own eigenvalue triple from
  the state ``x0`` and keeps only the four integral criteria, which the
  estimator learns to predict.

Plant parameters, noise levels, eigenvalues and both initial states are
drawn uniformly from fixed per-kind ranges.  Criteria are additionally
stored in a normalized [0, 1] form used as regression targets.

Records serialize to JSON lines, one file per split; the transient is
embedded base64-encoded (little-endian float64, row-major) so a record
stays a single exact line.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, parallel, plants, sim
from .control import EigenTriple, gains_array, gains_from_eigenvalues
from .plants import KIND_M1D, KIND_NS, M1dParams, NoiseModel, NsParams, PlantSpec
from .sim import CRITERIA_CAP, CriteriaVector, child_seed

BASIC_EIGENVALUE = -25.0
TRANSIENT_SAMPLES = 1000
SPLITS = ("train", "val", "test")

# Uniform sampling ranges per plant kind.  g_hat is fixed, not drawn.
NS_RANGES = {
    "a1": (0.0, 2.0),
    "a2": (0.0, 1.0),
    "a3": (0.0, 2.0),
    "a4": (0.5, 1.5),
    "a5": (0.0, 0.3),
    "a6": (0.0, 2.0),
    "sigma_n": (0.0, 0.01),
    "x": (-1.0, 1.0),
}
M1D_RANGES = {
    "b1": (-20.0, -4.0),
    "b2": (-30.0, -10.0),
    "b3": (0.0, 0.5),
    "b4": (0.0, 0.5),
    "b5": (0.0, 2.0),
    "b6": (0.0, 0.5),
    "b7": (0.0, 2.0),
    "sigma_n": (0.0, 0.02),
    "x": (-math.pi, math.pi),
}
LAMBDA_RANGE = (-80.0, -1.0)
NS_G_HAT = 1.0
M1D_G_HAT = -20.0

# How many independent redraws a diverging basic experiment gets before
# generation gives up; stable draws are overwhelmingly likely, so hitting
# the limit indicates a systematic problem rather than bad luck.
MAX_REDRAWS = 20


@dataclass(frozen=True)
class SampleSpec:
    """One drawn experiment configuration."""

    plant: PlantSpec
    x_test0: tuple[float, float]
    x0: tuple[float, float]
    lam: EigenTriple
    split: str
    sample_seed: int

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        for lam in (self.lam.lam1, self.lam.lam2, self.lam.lam3):
            if not LAMBDA_RANGE[0] <= lam <= LAMBDA_RANGE[1]:
                raise ValueError(f"eigenvalue {lam} outside {LAMBDA_RANGE}")


@dataclass
class DatasetRecord:
    sample: SampleSpec
    basic_transient: np.ndarray      # (1000, 3) observer states at 100 Hz
    criteria_raw: CriteriaVector
    criteria_norm: np.ndarray        # (4,) in [0, 1]
    target_diverged: bool = False

    def __post_init__(self) -> None:
        if self.basic_transient.shape != (TRANSIENT_SAMPLES, 3):
            raise ValueError(
                f"basic transient must be ({TRANSIENT_SAMPLES}, 3), "
                f"got {self.basic_transient.shape}")
        if np.any(self.criteria_norm < 0.0) or np.any(self.criteria_norm > 1.0):
            raise ValueError("normalized criteria must lie in [0, 1]")


def _uniform(rng: np.random.Generator, rng_pair) -> float:
    lo, hi = rng_pair
    return float(rng.uniform(lo, hi))


def sample_spec(kind: str, seed: int, split: str = "train") -> SampleSpec:
    """Draw one experiment configuration uniformly from the kind's ranges."""
    rng = np.random.Generator(np.random.PCG64(seed))
    if kind == KIND_NS:
        r = NS_RANGES
        params = NsParams(
            a1=_uniform(rng, r["a1"]), a2=_uniform(rng, r["a2"]),
            a3=_uniform(rng, r["a3"]), a4=_uniform(rng, r["a4"]),
            a5=_uniform(rng, r["a5"]), a6=_uniform(rng, r["a6"]),
            g_hat=NS_G_HAT,
        )
    elif kind == KIND_M1D:
        r = M1D_RANGES
        params = M1dParams(
            b1=_uniform(rng, r["b1"]), b2=_uniform(rng, r["b2"]),
            b3=_uniform(rng, r["b3"]), b4=_uniform(rng, r["b4"]),
            b5=_uniform(rng, r["b5"]), b6=_uniform(rng, r["b6"]),
            b7=_uniform(rng, r["b7"]), g_hat=M1D_G_HAT,
        )
    else:
        raise ValueError(f"unknown plant kind {kind!r}")
    lam = EigenTriple(*(float(v) for v in rng.uniform(*LAMBDA_RANGE, size=3)))
    x_test0 = (_uniform(rng, r["x"]), _uniform(rng, r["x"]))
    x0 = (_uniform(rng, r["x"]), _uniform(rng, r["x"]))
    sigma = _uniform(rng, r["sigma_n"])
    noise = NoiseModel(sigma_n=sigma, seed=child_seed(seed, 0))
    return SampleSpec(
        plant=PlantSpec(kind=kind, params=params, noise=noise),
        x_test0=x_test0, x0=x0, lam=lam, split=split, sample_seed=seed,
    )


def _run_single(sample: SampleSpec, lam_rows: np.ndarray, x0, noise_seed: int,
                record: bool):
    spec = sample.plant
    noise = plants.sample_noise(
        NoiseModel(spec.noise.sigma_n, spec.noise.truncation_k, noise_seed),
        10001,
    )
    return sim.simulate_batch(
        spec.kind, sim.params_for(spec), lam_rows, 4.0,
        np.asarray(x0, dtype=float)[None, :], "measured", noise, 1.0e-3, 10000,
        record_count=TRANSIENT_SAMPLES if record else 0, record_stride=10,
    )


def run_basic_experiment(sample: SampleSpec, noise_seed: int | None = None) -> np.ndarray:
    """Observer transient (1000 x 3 at 100 Hz) under the fixed basic gains.

    Raises :class:`~esotune.sim.DivergenceError` if the loop blows up.
    """
    g = gains_from_eigenvalues(EigenTriple(*([BASIC_EIGENVALUE] * 3)))
    if noise_seed is None:
        noise_seed = child_seed(sample.sample_seed, 0)
    result = _run_single(sample, g.as_array()[None, :], sample.x_test0,
                         noise_seed, record=True)
    if result.diverged[0]:
        raise sim.DivergenceError(float(result.blowup_time[0]))
    return result.zhat_rec[0]


def run_target_experiment(sample: SampleSpec, noise_seed: int | None = None) -> CriteriaVector:
    """Criteria of the run with the sample's own eigenvalues from x0.

    A diverging run yields saturated criteria rather than an error: the
    estimator must see that such gains are bad, not crash on them.
    """
    rows = gains_array(sample.lam.as_array()[None, :])
    if noise_seed is None:
        noise_seed = child_seed(sample.sample_seed, 1)
    result = _run_single(sample, rows, sample.x0, noise_seed, record=False)
    return CriteriaVector.from_array(result.criteria[0])


def normalize_criteria(raw, kind: str) -> np.ndarray:
    """Map raw criteria onto [0, 1] regression targets (kind-specific scales)."""
    if isinstance(raw, CriteriaVector):
        raw = raw.as_array()
    raw = np.asarray(raw, dtype=float)
    iae, iac, iacd, iadee = (raw[..., i] for i in range(4))
    if kind == KIND_NS:
        out = np.stack([
            iae / 3.7,
            iac / 80.0,
            (np.log(np.maximum(iacd - 4.0, 1.0e-9)) - 3.0) / 8.0,
            iadee / 50.0,
        ], axis=-1)
    elif kind == KIND_M1D:
        out = np.stack([iae / 8.0, iac / 10.0, iacd / 4000.0, iadee / 100.0], axis=-1)
    else:
        raise ValueError(f"unknown plant kind {kind!r}")
    return np.clip(out, 0.0, 1.0)


def denormalize_criteria(norm, kind: str) -> np.ndarray:
    """Inverse of :func:`normalize_criteria` on the unclipped range."""
    norm = np.asarray(norm, dtype=float)
    n0, n1, n2, n3 = (norm[..., i] for i in range(4))
    if kind == KIND_NS:
        return np.stack([
            n0 * 3.7,
            n1 * 80.0,
            4.0 + np.exp(8.0 * n2 + 3.0),
            n3 * 50.0,
        ], axis=-1)
    if kind == KIND_M1D:
        return np.stack([n0 * 8.0, n1 * 10.0, n2 * 4000.0, n3 * 100.0], axis=-1)
    raise ValueError(f"unknown plant kind {kind!r}")


def make_record(kind: str, sample_seed: int, split: str = "train") -> DatasetRecord:
    """Draw, simulate and label one record.

    If the basic experiment diverges, the whole sample is redrawn from a
    seed derived off the original, so the record stays a pure function of
    (kind, sample_seed).
    """
    seed = sample_seed
    for attempt in range(MAX_REDRAWS):
        sample = sample_spec(kind, seed, split)
        try:
            transient = run_basic_experiment(sample)
        except sim.DivergenceError:
            seed = child_seed(sample_seed, 100 + attempt)
            continue
        criteria = run_target_experiment(sample)
        raw = criteria.as_array()
        return DatasetRecord(
            sample=sample,
            basic_transient=transient,
            criteria_raw=criteria,
            criteria_norm=normalize_criteria(raw, kind),
            target_diverged=bool(np.all(raw == CRITERIA_CAP)),
        )
    raise RuntimeError(
        f"basic experiment kept diverging after {MAX_REDRAWS} redraws "
        f"(kind={kind}, sample_seed={sample_seed})")


# ---------------------------------------------------------------------------
# batched generation

def _generate_records(kind: str, seeds: list[int], split: str) -> list[DatasetRecord]:
    """Vectorized equivalent of [make_record(kind, s, split) for s in seeds]."""
    pending = list(range(len(seeds)))
    samples: list[SampleSpec | None] = [None] * len(seeds)
    transients: list[np.ndarray | None] = [None] * len(seeds)
    draw_seed = {i: seeds[i] for i in pending}
    attempt = 0
    while pending:
        if attempt >= MAX_REDRAWS:
            raise RuntimeError(
                f"basic experiment kept diverging after {MAX_REDRAWS} redraws "
                f"(kind={kind}, sample_seed={seeds[pending[0]]})")
        batch_samples = [sample_spec(kind, draw_seed[i], split) for i in pending]
        basic = _batch_basic(batch_samples)
        still = []
        for lane, i in enumerate(pending):
            if basic.diverged[lane]:
                draw_seed[i] = child_seed(seeds[i], 100 + attempt)
                still.append(i)
            else:
                samples[i] = batch_samples[lane]
                transients[i] = basic.zhat_rec[lane]
        pending = still
        attempt += 1

    target = _batch_target(samples)
    records = []
    for i, sample in enumerate(samples):
        raw = target.criteria[i]
        records.append(DatasetRecord(
            sample=sample,
            basic_transient=transients[i],
            criteria_raw=CriteriaVector.from_array(raw),
            criteria_norm=normalize_criteria(raw, kind),
            target_diverged=bool(target.diverged[i]),
        ))
    return records


def _noise_rows(samples: list[SampleSpec], stream: int) -> np.ndarray:
    rows = np.empty((len(samples), 10001))
    for i, s in enumerate(samples):
        model = NoiseModel(s.plant.noise.sigma_n, s.plant.noise.truncation_k,
                           child_seed(s.sample_seed, stream))
        rows[i] = plants.sample_noise(model, 10001)
    return rows


def _batch_basic(samples: list[SampleSpec]):
    params = sim.stack_params([s.plant for s in samples])
    g = gains_from_eigenvalues(EigenTriple(*([BASIC_EIGENVALUE] * 3)))
    rows = np.tile(g.as_array(), (len(samples), 1))
    x0 = np.array([s.x_test0 for s in samples])
    return sim.simulate_batch(
        samples[0].plant.kind, params, rows, 4.0, x0, "measured",
        _noise_rows(samples, 0), 1.0e-3, 10000,
        record_count=TRANSIENT_SAMPLES, record_stride=10)


def _batch_target(samples: list[SampleSpec]):
    params = sim.stack_params([s.plant for s in samples])
    rows = gains_array(np.array([s.lam.as_array() for s in samples]))
    x0 = np.array([s.x0 for s in samples])
    return sim.simulate_batch(
        samples[0].plant.kind, params, rows, 4.0, x0, "measured",
        _noise_rows(samples, 1), 1.0e-3, 10000)


# ---------------------------------------------------------------------------
# serialization

def encode_transient(transient: np.ndarray) -> str:
    arr = np.ascontiguousarray(transient, dtype="<f8")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def decode_transient(text: str) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    return np.frombuffer(raw, dtype="<f8").reshape(TRANSIENT_SAMPLES, 3).copy()


def record_to_json(record: DatasetRecord) -> str:
    doc = {
        "plant": plants.spec_to_dict(record.sample.plant),
        "x_test0": list(record.sample.x_test0),
        "x0": list(record.sample.x0),
        "lambda": list(record.sample.lam.as_array()),
        "split": record.sample.split,
        "sample_seed": record.sample.sample_seed,
        "criteria_raw": list(record.criteria_raw.as_array()),
        "criteria_norm": [float(v) for v in record.criteria_norm],
        "target_diverged": record.target_diverged,
        "transient_b64": encode_transient(record.basic_transient),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def record_from_json(line: str) -> DatasetRecord:
    doc = json.loads(line)
    plant = plants.spec_from_dict(doc["plant"])
    sample = SampleSpec(
        plant=plant,
        x_test0=tuple(float(v) for v in doc["x_test0"]),
        x0=tuple(float(v) for v in doc["x0"]),
        lam=EigenTriple(*(float(v) for v in doc["lambda"])),
        split=doc["split"],
        sample_seed=int(doc["sample_seed"]),
    )
    return DatasetRecord(
        sample=sample,
        basic_transient=decode_transient(doc["transient_b64"]),
        criteria_raw=CriteriaVector.from_array(doc["criteria_raw"]),
        criteria_norm=np.asarray(doc["criteria_norm"], dtype=float),
        target_diverged=bool(doc["target_diverged"]),
    )


def _criteria_summary(records: list[DatasetRecord]) -> dict:
    names = ("iae", "iac", "iacd", "iadee")
    raw = np.array([r.criteria_raw.as_array() for r in records])
    norm = np.array([r.criteria_norm for r in records])
    out = {}
    for j, name in enumerate(names):
        hist, _ = np.histogram(norm[:, j], bins=20, range=(0.0, 1.0))
        out[name] = {
            "raw_mean": float(np.mean(raw[:, j])),
            "raw_median": float(np.median(raw[:, j])),
            "raw_max": float(np.max(raw[:, j])),
            "norm_hist": [int(c) for c in hist],
        }
    return out


def _records_worker(task) -> list[DatasetRecord]:
    kind, chunk, split = task
    return _generate_records(kind, chunk, split)


def generate_dataset(kind: str, counts: dict, seed: int, out_dir, jobs: int = 1) -> dict:
    """Generate all splits and write them under ``out_dir``.

    Returns a mapping with the written paths.  Records are produced and
    written in index order so regeneration is byte-identical, for any
    ``jobs``.
    """
    for split in counts:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        if counts[split] < 1:
            raise ValueError("split counts must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths: dict = {"meta": out_dir / f"{kind.lower()}_meta.json"}
    summary = {}
    for split_idx, split in enumerate(SPLITS):
        if split not in counts:
            continue
        n = counts[split]
        seeds = [child_seed(seed, split_idx, i) for i in range(n)]
        tasks = [
            (kind, seeds[offset:offset + parallel.TASK_CHUNK], split)
            for offset in range(0, n, parallel.TASK_CHUNK)
        ]
        path = out_dir / f"{kind.lower()}_{split}.jsonl"
        with open(path, "w") as fh:
            split_records: list[DatasetRecord] = []
            for records in parallel.map_ordered(_records_worker, tasks, jobs):
                for record in records:
                    fh.write(record_to_json(record))
                    fh.write("\n")
                split_records.extend(records)
        summary[split] = _criteria_summary(split_records)
        paths[split] = path

    ranges = NS_RANGES if kind == KIND_NS else M1D_RANGES
    meta = {
        "kind": kind,
        "master_seed": seed,
        "counts": {s: counts[s] for s in SPLITS if s in counts},
        "ranges": {k: list(v) if isinstance(v, tuple) else v for k, v in ranges.items()},
        "lambda_range": list(LAMBDA_RANGE),
        "g_hat": NS_G_HAT if kind == KIND_NS else M1D_G_HAT,
        "version": __version__,
        "criteria_summary": summary,
    }
    with open(paths["meta"], "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def load_split(path) -> list[DatasetRecord]:
    """Read one JSONL split file back into records."""
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(record_from_json(line))
    return records

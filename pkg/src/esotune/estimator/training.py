"""Training loop, gradient verification, and evaluation helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..dataset import DatasetRecord
from .model import (
    EstimatorInput,
    EstimatorModel,
    backward_batch,
    encode_aux,
    encode_input,
    encode_lambda,
    encode_transient,
    forward_batch,
)

__all__ = [
    "TrainConfig",
    "tensors_from_records",
    "loss",
    "train",
    "save_history",
    "gradient_check",
    "mape",
]

# Evaluation chunk size; fixed so looped forwards never depend on caller
# parallelism or dataset size.
_EVAL_BATCH = 256


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr < 0.0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.adam_eps <= 0.0:
            raise ValueError("adam_eps must be > 0")


def tensors_from_records(records: list[DatasetRecord], kind: str):
    """Encode dataset records into network-ready arrays.

    Returns (xt, xl, xa, y): transients (n, 3, 1000), sorted normalized
    eigenvalues (n, 3), auxiliary inputs (n, 5), and normalized criteria
    targets (n, 4). Records whose target run diverged keep their
    saturated criteria; they teach the network which regions are bad.
    """
    if not records:
        raise ValueError("no records to encode")
    n = len(records)
    xt = np.empty((n, 3, records[0].basic_transient.shape[0]), dtype=np.float64)
    xl = np.empty((n, 3), dtype=np.float64)
    xa = np.empty((n, 5), dtype=np.float64)
    y = np.empty((n, 4), dtype=np.float64)
    for i, rec in enumerate(records):
        s = rec.sample
        if s.plant.kind != kind:
            raise ValueError(
                f"record {i} is for plant kind {s.plant.kind!r}, expected {kind!r}")
        xt[i] = encode_transient(rec.basic_transient, kind)
        xl[i] = encode_lambda(s.lam.as_array()[None, :])[0]
        xa[i] = encode_aux(s.plant.noise.sigma_n, s.x_test0, s.x0, kind)
        y[i] = rec.criteria_norm
    return xt, xl, xa, y


def loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over every element of the batch."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def _eval_loss(model: EstimatorModel, data) -> float:
    xt, xl, xa, y = data
    n = xt.shape[0]
    total = 0.0
    for start in range(0, n, _EVAL_BATCH):
        stop = min(start + _EVAL_BATCH, n)
        out, _ = forward_batch(model, xt[start:stop], xl[start:stop], xa[start:stop])
        diff = out - y[start:stop]
        total += float(np.sum(diff * diff))
    return total / (n * y.shape[1])


def train(
    model: EstimatorModel,
    train_data,
    val_data,
    cfg: TrainConfig,
    progress=None,
):
    """Adam/MSE training with a best-validation snapshot.

    ``train_data`` and ``val_data`` are (xt, xl, xa, y) tuples from
    :func:`tensors_from_records`. The input model is left untouched; the
    returned model carries the parameters of the epoch with the lowest
    validation loss. ``progress``, when given, is called with
    (epoch, train_loss, val_loss) after every epoch.

    Shuffling, initialization, and updates are all driven by fixed seeds,
    so identical inputs give identical weights. A non-finite training
    loss aborts immediately rather than training on garbage.
    """
    work = model.copy()
    params = work.params
    xt, xl, xa, y = train_data
    n = xt.shape[0]
    if not (xl.shape[0] == xa.shape[0] == y.shape[0] == n):
        raise ValueError("training tensors disagree on sample count")

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(w) for k, w in params.items()}
    step = 0
    history: list[tuple[int, float, float]] = []
    best_val = math.inf
    best_params = {k: w.copy() for k, w in params.items()}
    best_epoch = -1

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sq_sum = 0.0
        for batch_idx, start in enumerate(range(0, n, cfg.batch_size)):
            sel = order[start:start + cfg.batch_size]
            out, caches = forward_batch(
                work, xt[sel], xl[sel], xa[sel], want_cache=True)
            diff = out - y[sel]
            batch_loss = float(np.mean(diff * diff))
            if not math.isfinite(batch_loss):
                raise RuntimeError(
                    f"training loss became non-finite at epoch {epoch}, "
                    f"batch {batch_idx}, lr={cfg.lr}")
            sq_sum += float(np.sum(diff * diff))
            dout = (2.0 / diff.size) * diff
            grads = backward_batch(work, caches, dout)
            step += 1
            bc1 = 1.0 - cfg.beta1 ** step
            bc2 = 1.0 - cfg.beta2 ** step
            for name, g in grads.items():
                m[name] = cfg.beta1 * m[name] + (1.0 - cfg.beta1) * g
                v[name] = cfg.beta2 * v[name] + (1.0 - cfg.beta2) * (g * g)
                params[name] -= cfg.lr * (m[name] / bc1) / (
                    np.sqrt(v[name] / bc2) + cfg.adam_eps)
        train_loss = sq_sum / (n * y.shape[1])
        val_loss = _eval_loss(work, val_data)
        history.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: w.copy() for k, w in params.items()}
        if progress is not None:
            progress(epoch, train_loss, val_loss)

    result = EstimatorModel(
        config=work.config,
        kind=work.kind,
        params=best_params,
        metadata=dict(work.metadata),
    )
    result.metadata.update({
        "epochs_trained": cfg.epochs,
        "best_epoch": best_epoch,
        "best_val_loss": best_val,
        "final_train_loss": history[-1][1],
        "loss": "mse",
        "shuffle": "per-epoch, seeded",
        "lr": cfg.lr,
        "batch_size": cfg.batch_size,
        "train_seed": cfg.seed,
        "train_samples": n,
    })
    return result, history


def save_history(history, path) -> None:
    """Write per-epoch losses as CSV."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for epoch, train_loss, val_loss in history:
            fh.write(f"{epoch},{train_loss!r},{val_loss!r}\n")


def gradient_check(
    model: EstimatorModel,
    inp: EstimatorInput,
    target: np.ndarray,
    n_checks: int = 200,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare analytic gradients against central finite differences.

    Checked coordinates are drawn per parameter tensor so every layer is
    covered. Returns the maximum relative error over at least
    ``n_checks`` coordinates; gradients below the finite-difference noise
    floor are compared against that floor instead of each other.
    """
    xt, xl, xa = encode_input(model, inp)
    y = np.asarray(target, dtype=np.float64).reshape(1, -1)
    out, caches = forward_batch(model, xt, xl, xa, want_cache=True)
    diff = out - y
    dout = (2.0 / diff.size) * diff
    analytic = backward_batch(model, caches, dout)

    params = model.params
    rng = np.random.Generator(np.random.PCG64(seed))
    names = sorted(params)
    per_tensor = max(1, -(-n_checks // len(names)))
    worst = 0.0
    for name in names:
        flat = params[name].reshape(-1)
        a_flat = analytic[name].reshape(-1)
        count = min(per_tensor, flat.size)
        for idx in rng.choice(flat.size, size=count, replace=False):
            old = flat[idx]
            flat[idx] = old + h
            hi = loss(forward_batch(model, xt, xl, xa)[0], y)
            flat[idx] = old - h
            lo = loss(forward_batch(model, xt, xl, xa)[0], y)
            flat[idx] = old
            numeric = (hi - lo) / (2.0 * h)
            denom = max(abs(a_flat[idx]), abs(numeric), 1e-6)
            worst = max(worst, abs(a_flat[idx] - numeric) / denom)
    return worst


def mape(pred_raw: np.ndarray, true_raw: np.ndarray) -> np.ndarray:
    """Mean absolute percentage error per criterion, in percent.

    Rows are samples, columns the four criteria. True values below 1e-12
    in magnitude are floored to avoid division blowups.
    """
    pred_raw = np.atleast_2d(np.asarray(pred_raw, dtype=np.float64))
    true_raw = np.atleast_2d(np.asarray(true_raw, dtype=np.float64))
    if pred_raw.shape != true_raw.shape:
        raise ValueError(f"shape mismatch: {pred_raw.shape} vs {true_raw.shape}")
    denom = np.maximum(np.abs(true_raw), 1e-12)
    return 100.0 * np.mean(np.abs(pred_raw - true_raw) / denom, axis=0)

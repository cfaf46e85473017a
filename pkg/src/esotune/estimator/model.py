"""Performance estimator network: configuration, forward pass, persistence.

The network maps one basic-experiment observation (observer transient,
noise level, initial conditions) plus a candidate eigenvalue triple to the
four normalized performance criteria. Three input blocks feed a shared
head:

* transient block: stacked conv/ReLU/maxpool pairs over the 1000x3
  observer recording, channel count doubling per block, flattened into a
  single ReLU dense layer;
* eigenvalue block: one weight-shared two-layer ReLU stream per
  eigenvalue, stream outputs summed so the block is symmetric in its
  inputs;
* auxiliary block: two ReLU dense layers over
  (sigma_n, x_test0, x0) concatenated.

The concatenated embeddings pass through ReLU dense layers and a final
sigmoid layer with one output per criterion.

Eigenvalues are sorted ascending before entering the streams, so
permutations of the same triple produce bitwise identical outputs even
though float summation is order sensitive.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..control import EigenTriple
from ..dataset import (
    LAMBDA_RANGE,
    M1D_RANGES,
    NS_RANGES,
    TRANSIENT_SAMPLES,
    denormalize_criteria,
)
from ..plants import KIND_M1D, KIND_NS
from ..sim import CriteriaVector
from . import layers

MODEL_MAGIC = b"ESOTMDL1"

# Disturbance-estimate channel half-range used to map the third observer
# state into [0, 1]; position/velocity channels reuse the state sampling
# range. Values beyond the range clip, matching the saturating criteria.
D_SCALE = {KIND_NS: 50.0, KIND_M1D: 100.0}

AUX_WIDTH = 5  # sigma_n + x_test0 (2) + x0 (2)
N_CRITERIA = 4


@dataclass(frozen=True)
class EstimatorConfig:
    """Architecture hyperparameters.

    Defaults reproduce the full-size network (conv channels 8..1024).
    Smaller ``base_filters`` keeps the same topology for quick runs.
    """

    conv_blocks: int = 8
    base_filters: int = 8
    conv_kernel: int = 3
    pool: int = 2
    transient_fc: int = 512
    lambda_fc_sizes: tuple[int, int] = (32, 64)
    aux_fc_sizes: tuple[int, int] = (32, 64)
    head_sizes: tuple[int, ...] = (512, 256, 4)

    def __post_init__(self) -> None:
        if self.conv_blocks < 1:
            raise ValueError("conv_blocks must be >= 1")
        if self.base_filters < 1:
            raise ValueError("base_filters must be >= 1")
        if self.conv_kernel < 1 or self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd and positive")
        if self.pool != 2:
            raise ValueError("only pool width 2 is supported")
        if self.transient_fc < 1:
            raise ValueError("transient_fc must be >= 1")
        for name in ("lambda_fc_sizes", "aux_fc_sizes"):
            sizes = getattr(self, name)
            if len(sizes) != 2 or any(s < 1 for s in sizes):
                raise ValueError(f"{name} must be two positive widths")
        if len(self.head_sizes) < 1 or self.head_sizes[-1] != N_CRITERIA:
            raise ValueError(f"head must end with {N_CRITERIA} outputs")
        if any(s < 1 for s in self.head_sizes):
            raise ValueError("head widths must be positive")
        if self.conv_lengths()[-1] < 1:
            raise ValueError(
                f"{self.conv_blocks} pooling stages exhaust the "
                f"{TRANSIENT_SAMPLES}-sample transient")

    def conv_channels(self) -> list[int]:
        return [self.base_filters * 2 ** i for i in range(self.conv_blocks)]

    def conv_lengths(self) -> list[int]:
        """Sequence length after each conv/pool block."""
        lengths = []
        n = TRANSIENT_SAMPLES
        for _ in range(self.conv_blocks):
            n = n // self.pool
            lengths.append(n)
        return lengths

    def flat_features(self) -> int:
        return self.conv_lengths()[-1] * self.conv_channels()[-1]


@dataclass(frozen=True)
class EstimatorInput:
    """Raw (unnormalized) inputs for one prediction."""

    transient: np.ndarray            # (1000, 3) observer states at 100 Hz
    lam: EigenTriple
    sigma_n: float
    x_test0: tuple[float, float]
    x0: tuple[float, float]

    def __post_init__(self) -> None:
        if self.transient.shape != (TRANSIENT_SAMPLES, 3):
            raise ValueError(
                f"transient must be ({TRANSIENT_SAMPLES}, 3), "
                f"got {self.transient.shape}")
        if not np.all(np.isfinite(self.transient)):
            raise ValueError("transient contains non-finite values")
        if self.sigma_n < 0.0:
            raise ValueError("sigma_n must be >= 0")


@dataclass
class EstimatorModel:
    config: EstimatorConfig
    kind: str
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in (KIND_NS, KIND_M1D):
            raise ValueError(f"unknown plant kind {self.kind!r}")
        expected = param_shapes(self.config)
        if set(self.params) != set(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"parameter mismatch: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(
                    f"parameter {name} has shape {self.params[name].shape}, "
                    f"expected {shape}")

    def copy(self) -> "EstimatorModel":
        return EstimatorModel(
            config=self.config,
            kind=self.kind,
            params={k: v.copy() for k, v in self.params.items()},
            metadata=dict(self.metadata),
        )


def param_shapes(config: EstimatorConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape table; the sorted names fix the serialization order."""
    shapes: dict[str, tuple[int, ...]] = {}
    in_ch = 3
    for i, out_ch in enumerate(config.conv_channels()):
        shapes[f"conv{i}.w"] = (out_ch, in_ch, config.conv_kernel)
        shapes[f"conv{i}.b"] = (out_ch,)
        in_ch = out_ch
    shapes["transient_fc.w"] = (config.flat_features(), config.transient_fc)
    shapes["transient_fc.b"] = (config.transient_fc,)
    l1, l2 = config.lambda_fc_sizes
    shapes["lam_fc1.w"] = (1, l1)
    shapes["lam_fc1.b"] = (l1,)
    shapes["lam_fc2.w"] = (l1, l2)
    shapes["lam_fc2.b"] = (l2,)
    a1, a2 = config.aux_fc_sizes
    shapes["aux_fc1.w"] = (AUX_WIDTH, a1)
    shapes["aux_fc1.b"] = (a1,)
    shapes["aux_fc2.w"] = (a1, a2)
    shapes["aux_fc2.b"] = (a2,)
    width = config.transient_fc + l2 + a2
    for i, out in enumerate(config.head_sizes, start=1):
        shapes[f"head{i}.w"] = (width, out)
        shapes[f"head{i}.b"] = (out,)
        width = out
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("conv"):
        return shape[1] * shape[2]
    return shape[0]


def build_model(
    config: EstimatorConfig, kind: str, seed: int = 0
) -> EstimatorModel:
    """Initialize a model with uniform fan-in scaled weights.

    ReLU layers get He-style bounds sqrt(6 / fan_in); the sigmoid output
    layer gets a Xavier-style bound sqrt(6 / (fan_in + fan_out)). Biases
    get small nonzero uniforms: with zero biases, channels whose inputs
    the previous ReLU silenced produce pre-activations exactly on the
    ReLU kink, which breaks finite-difference gradient verification.
    Draws happen in sorted name order, so a seed pins every weight
    regardless of dict construction order.
    """
    shapes = param_shapes(config)
    head_out = f"head{len(config.head_sizes)}.w"
    rng = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, np.ndarray] = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name.endswith(".b"):
            params[name] = rng.uniform(-0.01, 0.01, size=shape)
            continue
        if name == head_out:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
        else:
            bound = np.sqrt(6.0 / _fan_in(name, shape))
        params[name] = rng.uniform(-bound, bound, size=shape)
    # Init and padding are free choices; record them with the weights.
    metadata = {
        "init": "uniform-fan-in, xavier-bound output layer",
        "init_seed": seed,
        "padding": "same",
    }
    return EstimatorModel(config=config, kind=kind, params=params, metadata=metadata)


# ---------------------------------------------------------------------------
# Input encoding


def _state_range(kind: str) -> tuple[float, float]:
    ranges = NS_RANGES if kind == KIND_NS else M1D_RANGES
    return ranges["x"]


def encode_lambda(lam_rows: np.ndarray) -> np.ndarray:
    """Map eigenvalue rows (n, 3) from the sampling range onto [0, 1].

    Rows are sorted ascending first; the network sums the per-eigenvalue
    streams in this canonical order, making predictions exactly
    permutation invariant.
    """
    rows = np.sort(np.atleast_2d(np.asarray(lam_rows, dtype=np.float64)), axis=1)
    lo, hi = LAMBDA_RANGE
    if np.any(rows < lo) or np.any(rows > hi):
        raise ValueError(f"eigenvalues outside the sampling range [{lo}, {hi}]")
    return (rows - lo) / (hi - lo)


def encode_aux(
    sigma_n: float,
    x_test0: tuple[float, float],
    x0: tuple[float, float],
    kind: str,
) -> np.ndarray:
    """Normalize (sigma_n, x_test0, x0) into a flat [0, 1] vector."""
    ranges = NS_RANGES if kind == KIND_NS else M1D_RANGES
    s_lo, s_hi = ranges["sigma_n"]
    if not s_lo <= sigma_n <= s_hi:
        raise ValueError(f"sigma_n {sigma_n} outside [{s_lo}, {s_hi}]")
    x_lo, x_hi = ranges["x"]
    states = np.array([*x_test0, *x0], dtype=np.float64)
    if np.any(states < x_lo) or np.any(states > x_hi):
        raise ValueError(f"initial state outside [{x_lo}, {x_hi}]")
    return np.concatenate((
        [(sigma_n - s_lo) / (s_hi - s_lo)],
        (states - x_lo) / (x_hi - x_lo),
    ))


def encode_transient(transient: np.ndarray, kind: str) -> np.ndarray:
    """Scale a (1000, 3) observer recording to [0, 1] channels-first.

    Position and velocity estimates map through the state sampling range;
    the disturbance estimate maps through +-D_SCALE. Overshoots clip.
    """
    if transient.shape != (TRANSIENT_SAMPLES, 3):
        raise ValueError(
            f"transient must be ({TRANSIENT_SAMPLES}, 3), got {transient.shape}")
    x_lo, x_hi = _state_range(kind)
    d = D_SCALE[kind]
    out = np.empty((3, TRANSIENT_SAMPLES), dtype=np.float64)
    out[0] = (transient[:, 0] - x_lo) / (x_hi - x_lo)
    out[1] = (transient[:, 1] - x_lo) / (x_hi - x_lo)
    out[2] = transient[:, 2] / (2.0 * d) + 0.5
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Forward / backward


def _block_forward(params, name, x, want_cache):
    """Dense + ReLU block used by every non-conv layer stack."""
    z, dense_cache = layers.dense_forward(x, params[f"{name}.w"], params[f"{name}.b"])
    y, mask = layers.relu_forward(z)
    return y, (dense_cache, mask) if want_cache else None


def _transient_forward(params, config, xt, want_cache):
    """xt: (batch, 3, 1000) -> (batch, transient_fc) embedding."""
    caches = []
    h = xt
    for i in range(config.conv_blocks):
        z, conv_cache = layers.conv1d_forward(
            h, params[f"conv{i}.w"], params[f"conv{i}.b"])
        a, mask = layers.relu_forward(z)
        h, pool_cache = layers.maxpool2_forward(a)
        if want_cache:
            caches.append((conv_cache, mask, pool_cache))
    flat = h.reshape(h.shape[0], -1)
    z, dense_cache = layers.dense_forward(
        flat, params["transient_fc.w"], params["transient_fc.b"])
    emb, relu_mask = layers.relu_forward(z)
    if want_cache:
        caches.append((dense_cache, relu_mask, h.shape))
    return emb, caches


def _transient_backward(params, config, caches, demb):
    grads = {}
    dense_cache, relu_mask, conv_shape = caches[-1]
    dz = layers.relu_backward(demb, relu_mask)
    dflat, dw, db = layers.dense_backward(dz, dense_cache)
    grads["transient_fc.w"] = dw
    grads["transient_fc.b"] = db
    dh = dflat.reshape(conv_shape)
    for i in range(config.conv_blocks - 1, -1, -1):
        conv_cache, mask, pool_cache = caches[i]
        da = layers.maxpool2_backward(dh, pool_cache)
        dz = layers.relu_backward(da, mask)
        dh, dw, db = layers.conv1d_backward(dz, conv_cache)
        grads[f"conv{i}.w"] = dw
        grads[f"conv{i}.b"] = db
    return grads


def _lambda_forward(params, xl, want_cache):
    """xl: (batch, 3) normalized sorted eigenvalues -> (batch, l2)."""
    batch = xl.shape[0]
    flat = xl.reshape(batch * 3, 1)
    h1, c1 = _block_forward(params, "lam_fc1", flat, want_cache)
    h2, c2 = _block_forward(params, "lam_fc2", h1, want_cache)
    emb = h2.reshape(batch, 3, -1).sum(axis=1)
    return emb, (c1, c2, batch)


def _lambda_backward(params, caches, demb):
    c1, c2, batch = caches
    width = demb.shape[1]
    # The sum over streams broadcasts the embedding gradient to each one.
    dh2 = np.repeat(demb[:, None, :], 3, axis=1).reshape(batch * 3, width)
    grads = {}
    dense_cache, mask = c2
    dz = layers.relu_backward(dh2, mask)
    dh1, dw, db = layers.dense_backward(dz, dense_cache)
    grads["lam_fc2.w"] = dw
    grads["lam_fc2.b"] = db
    dense_cache, mask = c1
    dz = layers.relu_backward(dh1, mask)
    _, dw, db = layers.dense_backward(dz, dense_cache)
    grads["lam_fc1.w"] = dw
    grads["lam_fc1.b"] = db
    return grads


def _aux_forward(params, xa, want_cache):
    h1, c1 = _block_forward(params, "aux_fc1", xa, want_cache)
    h2, c2 = _block_forward(params, "aux_fc2", h1, want_cache)
    return h2, (c1, c2)


def _aux_backward(params, caches, demb):
    c1, c2 = caches
    grads = {}
    dense_cache, mask = c2
    dz = layers.relu_backward(demb, mask)
    dh1, dw, db = layers.dense_backward(dz, dense_cache)
    grads["aux_fc2.w"] = dw
    grads["aux_fc2.b"] = db
    dense_cache, mask = c1
    dz = layers.relu_backward(dh1, mask)
    _, dw, db = layers.dense_backward(dz, dense_cache)
    grads["aux_fc1.w"] = dw
    grads["aux_fc1.b"] = db
    return grads


def _head_forward(params, config, joint, want_cache):
    caches = []
    h = joint
    n_layers = len(config.head_sizes)
    for i in range(1, n_layers):
        h, c = _block_forward(params, f"head{i}", h, want_cache)
        caches.append(c)
    z, dense_cache = layers.dense_forward(
        h, params[f"head{n_layers}.w"], params[f"head{n_layers}.b"])
    out = layers.sigmoid_forward(z)
    if want_cache:
        caches.append((dense_cache, out))
    return out, caches


def _head_backward(params, config, caches, dout):
    grads = {}
    n_layers = len(config.head_sizes)
    dense_cache, out = caches[-1]
    dz = layers.sigmoid_backward(dout, out)
    dh, dw, db = layers.dense_backward(dz, dense_cache)
    grads[f"head{n_layers}.w"] = dw
    grads[f"head{n_layers}.b"] = db
    for i in range(n_layers - 1, 0, -1):
        dense_cache, mask = caches[i - 1]
        dz = layers.relu_backward(dh, mask)
        dh, dw, db = layers.dense_backward(dz, dense_cache)
        grads[f"head{i}.w"] = dw
        grads[f"head{i}.b"] = db
    return grads, dh


def forward_batch(
    model: EstimatorModel,
    xt: np.ndarray,
    xl: np.ndarray,
    xa: np.ndarray,
    want_cache: bool = False,
):
    """Batched forward over pre-encoded inputs.

    xt: (batch, 3, 1000), xl: (batch, 3) sorted normalized eigenvalues,
    xa: (batch, 5). Returns (batch, 4) and, when requested, the caches
    needed by :func:`backward_batch`.
    """
    p = model.params
    t_emb, t_cache = _transient_forward(p, model.config, xt, want_cache)
    l_emb, l_cache = _lambda_forward(p, xl, want_cache)
    a_emb, a_cache = _aux_forward(p, xa, want_cache)
    joint = np.concatenate((t_emb, l_emb, a_emb), axis=1)
    out, h_cache = _head_forward(p, model.config, joint, want_cache)
    if not want_cache:
        return out, None
    widths = (t_emb.shape[1], l_emb.shape[1])
    return out, (t_cache, l_cache, a_cache, h_cache, widths)


def backward_batch(model: EstimatorModel, caches, dout: np.ndarray):
    """Gradients of every parameter given d(loss)/d(output)."""
    p = model.params
    t_cache, l_cache, a_cache, h_cache, (t_w, l_w) = caches
    grads, djoint = _head_backward(p, model.config, h_cache, dout)
    grads.update(_transient_backward(p, model.config, t_cache, djoint[:, :t_w]))
    grads.update(_lambda_backward(p, l_cache, djoint[:, t_w:t_w + l_w]))
    grads.update(_aux_backward(p, a_cache, djoint[:, t_w + l_w:]))
    return grads


# ---------------------------------------------------------------------------
# Inference helpers


def encode_input(model: EstimatorModel, inp: EstimatorInput):
    xt = encode_transient(inp.transient, model.kind)[None, :, :]
    xl = encode_lambda(inp.lam.as_array()[None, :])
    xa = encode_aux(inp.sigma_n, inp.x_test0, inp.x0, model.kind)[None, :]
    return xt, xl, xa


def forward(model: EstimatorModel, inp: EstimatorInput) -> np.ndarray:
    """Normalized criteria prediction, shape (4,), values in (0, 1)."""
    xt, xl, xa = encode_input(model, inp)
    out, _ = forward_batch(model, xt, xl, xa)
    return out[0]


def predict_criteria(model: EstimatorModel, inp: EstimatorInput) -> CriteriaVector:
    """Raw-unit criteria prediction for the model's plant kind."""
    norm = forward(model, inp)
    return CriteriaVector.from_array(denormalize_criteria(norm, model.kind))


@dataclass(frozen=True)
class ContextEmbedding:
    """Transient and auxiliary embeddings frozen for eigenvalue search."""

    transient: np.ndarray  # (transient_fc,)
    aux: np.ndarray        # (aux_fc_sizes[1],)


def embed_context(
    model: EstimatorModel,
    transient: np.ndarray,
    sigma_n: float,
    x_test0: tuple[float, float],
    x0: tuple[float, float],
) -> ContextEmbedding:
    """Run the eigenvalue-independent blocks once for a given experiment."""
    p = model.params
    xt = encode_transient(transient, model.kind)[None, :, :]
    xa = encode_aux(sigma_n, x_test0, x0, model.kind)[None, :]
    t_emb, _ = _transient_forward(p, model.config, xt, False)
    a_emb, _ = _aux_forward(p, xa, False)
    return ContextEmbedding(transient=t_emb[0], aux=a_emb[0])


def predict_grid(
    model: EstimatorModel,
    context: ContextEmbedding,
    lam_rows: np.ndarray,
    batch_size: int = 4096,
) -> np.ndarray:
    """Normalized criteria for many eigenvalue triples under one context.

    lam_rows: (n, 3) raw eigenvalues. Returns (n, 4). The fixed internal
    batch size keeps results independent of caller chunking. BLAS may
    associate sums differently for different batch shapes, so a row here
    can differ from a lone :func:`forward` call in the last ulp; repeat
    calls with the same rows are bitwise stable.
    """
    lam_rows = np.atleast_2d(np.asarray(lam_rows, dtype=np.float64))
    n = lam_rows.shape[0]
    out = np.empty((n, N_CRITERIA), dtype=np.float64)
    p = model.params
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        xl = encode_lambda(lam_rows[start:stop])
        l_emb, _ = _lambda_forward(p, xl, False)
        m = stop - start
        joint = np.concatenate((
            np.broadcast_to(context.transient, (m, context.transient.shape[0])),
            l_emb,
            np.broadcast_to(context.aux, (m, context.aux.shape[0])),
        ), axis=1)
        out[start:stop], _ = _head_forward(p, model.config, joint, False)
    return out


# ---------------------------------------------------------------------------
# Persistence

_HEADER_LEN = struct.Struct("<Q")


def save_model(model: EstimatorModel, path) -> None:
    """Write magic, length-prefixed JSON header, then float64 weights.

    Weights are concatenated little-endian in sorted parameter-name
    order. The header carries the config, plant kind, metadata, and the
    shape table; nothing time dependent, so saves are reproducible.
    """
    names = sorted(model.params)
    entries = []
    offset = 0
    for n in names:
        arr = model.params[n]
        entries.append({"name": n, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "config": dataclasses.asdict(model.config),
        "kind": model.kind,
        "metadata": model.metadata,
        "params": entries,
    }
    header_bytes = json.dumps(
        header, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(_HEADER_LEN.pack(len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_model(path) -> EstimatorModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise ValueError(f"not an estimator model file: bad magic {magic!r}")
        (header_len,) = _HEADER_LEN.unpack(fh.read(_HEADER_LEN.size))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        cfg_doc = dict(header["config"])
        for key in ("lambda_fc_sizes", "aux_fc_sizes", "head_sizes"):
            cfg_doc[key] = tuple(cfg_doc[key])
        config = EstimatorConfig(**cfg_doc)
        params: dict[str, np.ndarray] = {}
        offset = 0
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            if entry.get("offset", offset) != offset:
                raise ValueError(
                    f"parameter {entry['name']} offset {entry['offset']} "
                    f"does not match blob position {offset}")
            blob = fh.read(count * 8)
            if len(blob) != count * 8:
                raise ValueError(f"model file truncated at parameter {entry['name']}")
            params[entry["name"]] = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
            offset += count * 8
        trailing = fh.read(1)
    if trailing:
        raise ValueError("model file has trailing bytes after the weight blob")
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name} contains non-finite values")
    return EstimatorModel(
        config=config,
        kind=header["kind"],
        params=params,
        metadata=header.get("metadata", {}),
    )

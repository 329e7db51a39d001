"""Kernel-level energy prediction.

A compact numpy MLP regresses log1p of kernel energy (expressed in units of
``target_scale`` mJ, i.e. microjoules by default) from log-scaled kernel
features plus a pattern one-hot. Model energy is the plain sum of kernel
predictions (operator fusion is ignored).
"""
from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .arch_space import DEFAULT_INPUT, EXPANDED_OUT_CHANNELS, Architecture, TensorShape, extract_kernels
from .kernels import KERNEL_SIZES, PATTERNS, STRIDES, KernelConfig, featurize, pattern_onehot

MIN_TRAIN_SAMPLES = 30
TARGET_SCALE = 1e-3  # regress log1p(energy in uJ)
LOG_CEILING = 60.0
DATASET_HEADER = ["pattern", "H", "W", "Cin", "Cout", "KS", "stride", "backend", "device_id", "energy_mJ"]


@dataclass(frozen=True)
class EnergySample:
    config: KernelConfig
    energy_mJ: float
    backend: str
    device_id: str

    def __post_init__(self):
        if not math.isfinite(self.energy_mJ) or self.energy_mJ < 0:
            raise ValueError(f"energy must be finite and >= 0, got {self.energy_mJ}")
        if self.backend not in ("CPU", "GPU"):
            raise ValueError(f"backend must be CPU or GPU, got {self.backend!r}")


def write_samples(path, samples: Sequence[EnergySample], with_energy: bool = True) -> None:
    header = DATASET_HEADER if with_energy else DATASET_HEADER[:-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in samples:
            c = s.config
            row = [c.pattern, c.H, c.W, c.Cin, c.Cout, c.KS, c.stride, s.backend, s.device_id]
            if with_energy:
                row.append(repr(s.energy_mJ))
            w.writerow(row)


def read_samples(path) -> list[EnergySample]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != DATASET_HEADER:
            raise ValueError(f"dataset header must be {','.join(DATASET_HEADER)}")
        out = []
        for row in r:
            if not row:
                continue
            cfg = KernelConfig(row[0], *map(int, row[1:7]))
            out.append(EnergySample(cfg, float(row[9]), row[7], row[8]))
    return out


# ---------------------------------------------------------------------------
# config generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfigRanges:
    patterns: tuple[str, ...] = PATTERNS
    hw: tuple[int, ...] = (4, 8, 16, 32, 64)
    channels: tuple[int, ...] = EXPANDED_OUT_CHANNELS
    kernel_sizes: tuple[int, ...] = KERNEL_SIZES
    strides: tuple[int, ...] = STRIDES

    def __post_init__(self):
        for name in ("patterns", "hw", "channels", "kernel_sizes", "strides"):
            if not getattr(self, name):
                raise ValueError(f"empty range for {name}")


def generate_configs(seed: int, n: int, ranges: ConfigRanges = ConfigRanges()) -> list[KernelConfig]:
    """Stratified kernel sampler: kernel sizes are dealt round-robin so each
    value gets an equal share, everything else is drawn uniformly."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    ks_order = np.resize(np.array(ranges.kernel_sizes), n)
    rng.shuffle(ks_order)
    out = []
    for ks in ks_order:
        pattern = ranges.patterns[rng.integers(len(ranges.patterns))]
        hw = int(ranges.hw[rng.integers(len(ranges.hw))])
        cin = int(ranges.channels[rng.integers(len(ranges.channels))])
        cout = int(ranges.channels[rng.integers(len(ranges.channels))])
        stride = int(ranges.strides[rng.integers(len(ranges.strides))])
        if pattern != "conv+bn+relu":
            cout = cin
        out.append(KernelConfig(pattern, hw, hw, cin, cout, int(ks), stride))
    return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def model_inputs(configs: Sequence[KernelConfig]) -> np.ndarray:
    """Raw model inputs: log1p of the cost features plus a pattern one-hot."""
    return np.array([np.concatenate([np.log1p(featurize(c)), pattern_onehot(c)]) for c in configs])


INPUT_DIM = 8 + len(PATTERNS)


@dataclass
class TrainHyper:
    seed: int = 0
    epochs: int = 1000
    lr: float = 1e-2
    batch: int = 32
    hidden_dims: tuple[int, ...] = (64, 64)
    patience: int = 100
    val_fraction: float = 0.1


@dataclass
class PredictorModel:
    backend: str
    device_id: str
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: float
    target_std: float
    target_transform: str = "log1p"
    target_scale: float = 1e-3  # mJ; log1p is taken of energy / target_scale
    training_meta: dict = field(default_factory=dict)

    def clone(self) -> "PredictorModel":
        return copy.deepcopy(self)

    # -- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "device_id": self.device_id,
            "layer_dims": list(self.layer_dims),
            "weights": [w.ravel(order="C").tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "target_transform": self.target_transform,
            "target_scale": self.target_scale,
            "training_meta": self.training_meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorModel":
        dims = d["layer_dims"]
        weights = [
            np.array(w, dtype=np.float64).reshape(dims[i], dims[i + 1]) for i, w in enumerate(d["weights"])
        ]
        return cls(
            backend=d["backend"],
            device_id=d["device_id"],
            layer_dims=list(dims),
            weights=weights,
            biases=[np.array(b, dtype=np.float64) for b in d["biases"]],
            feature_mean=np.array(d["feature_mean"], dtype=np.float64),
            feature_std=np.array(d["feature_std"], dtype=np.float64),
            target_mean=float(d["target_mean"]),
            target_std=float(d["target_std"]),
            target_transform=d.get("target_transform", "log1p"),
            target_scale=float(d.get("target_scale", 1e-3)),
            training_meta=dict(d.get("training_meta", {})),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "PredictorModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _forward(model: PredictorModel, z: np.ndarray, keep: bool = False):
    acts = [z]
    h = z
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return (h[:, 0], acts) if keep else h[:, 0]


def _standardize(model: PredictorModel, x: np.ndarray) -> np.ndarray:
    return (x - model.feature_mean) / model.feature_std


def predict_raw(model: PredictorModel, x: np.ndarray) -> np.ndarray:
    """Batch prediction (mJ) from raw model inputs."""
    y = _forward(model, _standardize(model, x)) * model.target_std + model.target_mean
    # cap wild extrapolations so predictions stay finite (e^60 uJ is far beyond any kernel)
    return np.maximum(np.expm1(np.minimum(y, LOG_CEILING)) * model.target_scale, 0.0)


def predict_kernel(model: PredictorModel, config: KernelConfig) -> float:
    return float(predict_raw(model, model_inputs([config]))[0])


def predict_kernels(model: PredictorModel, configs: Sequence[KernelConfig]) -> np.ndarray:
    """Vectorised predictions; each value is computed exactly as predict_kernel would."""
    cache: dict[KernelConfig, float] = {}
    return np.array([_cached(model, c, cache) for c in configs])


def _cached(model, cfg, cache):
    v = cache.get(cfg)
    if v is None:
        v = cache[cfg] = predict_kernel(model, cfg)
    return v


def predict_model_energy(
    model: PredictorModel,
    arch: Architecture,
    input: TensorShape = DEFAULT_INPUT,
    cache: dict | None = None,
) -> float:
    """Sum of kernel predictions over the architecture's extracted kernels.

    ``cache`` may be shared across calls with the same model to avoid
    re-predicting repeated kernels.
    """
    cache = {} if cache is None else cache
    return float(sum(_cached(model, k, cache) for k in extract_kernels(arch, input)))


def encode_target(model: PredictorModel, y_mJ: np.ndarray) -> np.ndarray:
    return np.log1p(np.asarray(y_mJ, dtype=float) / model.target_scale)


def _init_params(dims: list[int], rng: np.random.Generator):
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def _loss(model, z, t):
    return float(np.mean((_forward(model, z) - t) ** 2))


def fit(
    model: PredictorModel,
    x: np.ndarray,
    y_mJ: np.ndarray,
    hyper: TrainHyper,
    frozen_layers: int = 0,
    anchor_decay: float = 0.0,
) -> dict:
    """Mini-batch Adam on standardized log1p targets, in place.

    Holds out ``val_fraction`` of the rows for early stopping (patience in
    epochs) and restores the best validation weights at the end. The first
    ``frozen_layers`` layers are not updated. ``anchor_decay`` adds an L2
    pull toward the starting weights (used when fine-tuning).
    """
    rng = np.random.default_rng(hyper.seed)
    z = _standardize(model, x)
    t = (encode_target(model, y_mJ) - model.target_mean) / model.target_std
    n = len(t)
    order = rng.permutation(n)
    n_val = int(round(n * hyper.val_fraction)) if n >= 20 else 0
    val_idx, tr_idx = order[:n_val], order[n_val:]
    z_tr, t_tr = z[tr_idx], t[tr_idx]
    z_val, t_val = (z[val_idx], t[val_idx]) if n_val else (z_tr, t_tr)

    params = [p for pair in zip(model.weights, model.biases) for p in pair]
    anchors = [p.copy() for p in params] if anchor_decay else None
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    best = (_loss(model, z_val, t_val), 0, [p.copy() for p in params])
    history = []
    for epoch in range(1, hyper.epochs + 1):
        perm = rng.permutation(len(t_tr))
        epoch_loss = 0.0
        for start in range(0, len(perm), hyper.batch):
            idx = perm[start : start + hyper.batch]
            out, acts = _forward(model, z_tr[idx], keep=True)
            err = out - t_tr[idx]
            epoch_loss += float(np.sum(err**2))
            delta = (2.0 / len(idx)) * err[:, None]
            grads = []
            for layer in range(len(model.weights) - 1, -1, -1):
                gw = acts[layer].T @ delta
                gb = delta.sum(axis=0)
                grads.append((layer, gw, gb))
                if layer > 0:
                    delta = (delta @ model.weights[layer].T) * (acts[layer] > 0)
            step += 1
            for layer, gw, gb in grads:
                if layer < frozen_layers:
                    continue
                for k, g in ((2 * layer, gw), (2 * layer + 1, gb)):
                    if anchors is not None:
                        g = g + 2.0 * anchor_decay * (params[k] - anchors[k])
                    m[k] = b1 * m[k] + (1 - b1) * g
                    v[k] = b2 * v[k] + (1 - b2) * g * g
                    mhat = m[k] / (1 - b1**step)
                    vhat = v[k] / (1 - b2**step)
                    params[k] -= hyper.lr * mhat / (np.sqrt(vhat) + eps)
        history.append(epoch_loss / max(len(t_tr), 1))
        val = _loss(model, z_val, t_val)
        if val < best[0]:
            best = (val, epoch, [p.copy() for p in params])
        elif epoch - best[1] >= hyper.patience:
            break
    for p, saved in zip(params, best[2]):
        p[...] = saved
    return {"epochs_run": len(history), "best_epoch": best[1], "best_val_loss": best[0], "train_loss": history}


def _check_samples(samples: Sequence[EnergySample]):
    if len(samples) < MIN_TRAIN_SAMPLES:
        raise ValueError("insufficient training data")
    keys = {(s.backend, s.device_id) for s in samples}
    if len(keys) != 1:
        raise ValueError(f"samples mix backends/devices: {sorted(keys)}")
    return next(iter(keys))


def _stats(a: np.ndarray, axis=0):
    mean = a.mean(axis=axis)
    std = a.std(axis=axis)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def train_predictor(samples: Sequence[EnergySample], hyper: TrainHyper = TrainHyper()) -> PredictorModel:
    backend, device_id = _check_samples(samples)
    x = model_inputs([s.config for s in samples])
    y = np.array([s.energy_mJ for s in samples])
    f_mean, f_std = _stats(x)
    t_mean, t_std = _stats(np.log1p(y / TARGET_SCALE))
    dims = [INPUT_DIM, *hyper.hidden_dims, 1]
    weights, biases = _init_params(dims, np.random.default_rng(hyper.seed))
    model = PredictorModel(
        backend, device_id, dims, weights, biases, f_mean, f_std, float(t_mean), float(t_std),
        target_scale=TARGET_SCALE,
    )
    info = fit(model, x, y, hyper)
    model.training_meta = {
        "seed": hyper.seed,
        "epochs": info["epochs_run"],
        "sample_count": len(samples),
    }
    return model


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def acc_at_k(predicted: Sequence[tuple[str, float]], truth: Sequence[tuple[str, float]], k: int) -> float:
    """Share of the true k lowest-energy ids found in the predicted k lowest."""
    pred = dict(predicted)
    true = dict(truth)
    if set(pred) != set(true) or len(pred) != len(predicted) or len(true) != len(truth):
        raise ValueError("predicted and truth must cover the same ids")
    if not 1 <= k <= len(pred):
        raise ValueError(f"k must be in [1, {len(pred)}]")

    def top(d):
        return {i for i, _ in sorted(d.items(), key=lambda kv: (kv[1], kv[0]))[:k]}

    return len(top(pred) & top(true)) / k


def rmse(predicted: Sequence[float], truth: Sequence[float]) -> float:
    p = np.asarray(predicted, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("predicted and truth must be non-empty and equal length")
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass
class EvalMetrics:
    acc_at_20: float
    acc_at_10: float
    acc_at_5: float
    rmse_mJ: float


def evaluate(model: PredictorModel, samples: Sequence[EnergySample]) -> EvalMetrics:
    pred = predict_kernels(model, [s.config for s in samples])
    ids = [str(i) for i in range(len(samples))]
    truth = [s.energy_mJ for s in samples]
    p = list(zip(ids, pred))
    t = list(zip(ids, truth))
    ks = [min(k, len(samples)) for k in (20, 10, 5)]
    return EvalMetrics(*(acc_at_k(p, t, k) for k in ks), rmse(pred, truth))

"""Few-shot adaptation of kernel energy predictors to a new device."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .kernel_energy import (
    INPUT_DIM,
    EnergySample,
    TARGET_SCALE,
    PredictorModel,
    TrainHyper,
    encode_target,
    fit,
    model_inputs,
    predict_kernels,
    rmse,
    _check_samples,
)
from .kernels import CONV_FAMILY, KERNEL_SIZES, KernelConfig, macs

DEFAULT_PRIORITY = {"conv+bn+relu": 0.5, "dwconv+bn+relu": 0.3, "avgpool": 0.2}
CONV_FAMILY_FLOOR = 0.7
KL_BINS = 32
KL_EPS = 1e-9
FREEZE_BELOW = 50
MAX_FINE_TUNE_SAMPLES = 1000
ANCHOR_DECAY = 0.01
FINE_TUNE_HYPER = dict(epochs=200, lr=1e-3, patience=300, val_fraction=0.0)


@dataclass
class PredictorZoo:
    entries: dict[tuple[str, str], PredictorModel] = field(default_factory=dict)

    def add(self, model: PredictorModel) -> None:
        key = (model.device_id, model.backend)
        if key in self.entries:
            raise ValueError(f"duplicate zoo entry {key}")
        if self.entries:
            dims = next(iter(self.entries.values())).layer_dims[0]
            if model.layer_dims[0] != dims:
                raise ValueError("zoo entries must share one feature layout")
        self.entries[key] = model

    def __len__(self):
        return len(self.entries)

    @classmethod
    def from_models(cls, models: Sequence[PredictorModel]) -> "PredictorZoo":
        zoo = cls()
        for m in models:
            zoo.add(m)
        return zoo

    @classmethod
    def load_dir(cls, path) -> "PredictorZoo":
        files = sorted(Path(path).glob("*.json"))
        if not files:
            raise FileNotFoundError(f"no predictor files in {path}")
        return cls.from_models([PredictorModel.load(f) for f in files])

    def save_dir(self, path) -> list[Path]:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        out = []
        for (device_id, backend), m in sorted(self.entries.items()):
            f = path / f"{device_id}_{backend}.json"
            m.save(f)
            out.append(f)
        return out


@dataclass
class CalibrationPlan:
    configs: list[KernelConfig]
    budget: int
    priority_weights: dict[str, float]


def _split_even(n: int, parts: int) -> list[int]:
    return [n // parts + (1 if i < n % parts else 0) for i in range(parts)]


def select_calibration_set(
    pool: Sequence[KernelConfig],
    budget: int,
    seed: int,
    priority_weights: dict[str, float] | None = None,
) -> CalibrationPlan:
    """Pick ``budget`` kernels to profile on a new device.

    At least 70% (or the weighted share, if larger) go to the conv family,
    spread evenly over kernel sizes; the rest go to other patterns. Inside
    each group the draw is stratified by MAC count.
    """
    weights = dict(priority_weights or DEFAULT_PRIORITY)
    if budget < len(KERNEL_SIZES) * 2:
        raise ValueError(f"calibration budget must be >= {len(KERNEL_SIZES) * 2}")
    pool = list(dict.fromkeys(pool))
    if budget > len(pool):
        raise ValueError(f"budget {budget} exceeds pool size {len(pool)}")
    rng = np.random.default_rng(seed)

    total_w = sum(weights.values())
    conv_w = sum(weights.get(p, 0.0) for p in CONV_FAMILY)
    conv_share = max(math.ceil(CONV_FAMILY_FLOOR * budget), int(round(budget * conv_w / total_w)))
    conv_share = min(conv_share, budget)

    def pick(members: list[int], k: int) -> list[int]:
        # one draw per equal-count MAC stratum so the plan spans small to large kernels
        if k > len(members):
            raise ValueError("calibration pool does not cover every kernel size")
        if k == 0:
            return []
        members = sorted(members, key=lambda i: (macs(pool[i]), i))
        strata = np.array_split(np.array(members), k)
        out = []
        for j, stratum in enumerate(strata):
            if k > 1 and j in (0, k - 1):
                # range endpoints are always profiled
                out.append(int(stratum[0] if j == 0 else stratum[-1]))
                continue
            p = np.array([weights.get(pool[i].pattern, 0.0) for i in stratum], dtype=float) + 1e-12
            out.append(int(rng.choice(stratum, p=p / p.sum())))
        return out

    chosen: list[int] = []
    for ks, k in zip(KERNEL_SIZES, _split_even(conv_share, len(KERNEL_SIZES))):
        members = [i for i, c in enumerate(pool) if c.pattern in CONV_FAMILY and c.KS == ks]
        chosen.extend(pick(members, k))

    rest = budget - conv_share
    others = [i for i, c in enumerate(pool) if c.pattern not in CONV_FAMILY]
    take = min(rest, len(others))
    chosen.extend(pick(others, take))
    if take < rest:
        leftover = sorted(set(range(len(pool))) - set(chosen))
        chosen.extend(rng.choice(leftover, size=rest - take, replace=False).tolist())
    return CalibrationPlan([pool[i] for i in chosen], budget, weights)


def kl_divergence(p_values: Sequence[float], q_values: Sequence[float], bins: int = KL_BINS, eps: float = KL_EPS) -> float:
    """KL(P||Q) between equal-width histograms over the union's range (nats)."""
    p_values = np.asarray(p_values, dtype=float)
    q_values = np.asarray(q_values, dtype=float)
    if p_values.size < 2 or q_values.size < 2:
        raise ValueError("kl_divergence needs at least two values per list")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    lo = min(p_values.min(), q_values.min())
    hi = max(p_values.max(), q_values.max())
    if hi == lo:
        return 0.0
    p, _ = np.histogram(p_values, bins=bins, range=(lo, hi))
    q, _ = np.histogram(q_values, bins=bins, range=(lo, hi))
    p = p + eps
    q = q + eps
    p = p / p.sum()
    q = q / q.sum()
    return float(max(np.sum(p * np.log(p / q)), 0.0))


def kl_table(zoo: PredictorZoo, measured: Sequence[EnergySample], bins: int = KL_BINS) -> list[tuple[str, str, float]]:
    """(device_id, backend, KL) for every zoo entry matching the measured backend,
    sorted best first. Energies are compared as log1p(E / 1 uJ)."""
    backend, _ = _check_samples(measured)
    configs = [s.config for s in measured]
    # kernel energies span orders of magnitude; bin them on the predictor's log target scale
    energies = np.log1p(np.array([s.energy_mJ for s in measured]) / TARGET_SCALE)
    rows = []
    for (device_id, b), model in zoo.entries.items():
        if b != backend:
            continue
        pred = np.log1p(predict_kernels(model, configs) / TARGET_SCALE)
        rows.append((device_id, b, kl_divergence(energies, pred, bins)))
    if not rows:
        raise ValueError(f"no zoo entry for backend {backend}")
    return sorted(rows, key=lambda r: (r[2], r[0]))


def select_base_predictor(zoo: PredictorZoo, measured: Sequence[EnergySample]) -> PredictorModel:
    if not len(zoo):
        raise ValueError("empty predictor zoo")
    device_id, backend, _ = kl_table(zoo, measured)[0]
    return zoo.entries[(device_id, backend)]


def _pooled(mean0, std0, n0, mean1, std1, n1):
    n = n0 + n1
    mean = (n0 * mean0 + n1 * mean1) / n
    var = (n0 * (std0**2 + (mean0 - mean) ** 2) + n1 * (std1**2 + (mean1 - mean) ** 2)) / n
    std = np.sqrt(var)
    return mean, np.where(std > 0, std, 1.0)


def _restandardize(model: PredictorModel, f_mean, f_std, t_mean, t_std) -> None:
    """Swap in new input/target statistics while keeping the function intact."""
    scale = f_std / model.feature_std
    shift = (f_mean - model.feature_mean) / model.feature_std
    w0 = model.weights[0]
    model.biases[0] = model.biases[0] + shift @ w0
    model.weights[0] = w0 * scale[:, None]
    model.feature_mean, model.feature_std = f_mean, f_std

    ratio = model.target_std / t_std
    model.weights[-1] = model.weights[-1] * ratio
    model.biases[-1] = (model.biases[-1] * model.target_std + model.target_mean - t_mean) / t_std
    model.target_mean, model.target_std = float(t_mean), float(t_std)


def _adapt(base: PredictorModel, samples: Sequence[EnergySample], hyper: TrainHyper, anchor_decay: float):
    x = model_inputs([s.config for s in samples])
    y = np.array([s.energy_mJ for s in samples])
    model = base.clone()
    n0 = int(base.training_meta.get("sample_count", len(samples)))
    t = encode_target(model, y)
    f_mean, f_std = _pooled(base.feature_mean, base.feature_std, n0, x.mean(0), x.std(0), len(y))
    t_mean, t_std = _pooled(
        np.array(base.target_mean), np.array(base.target_std), n0, np.array(t.mean()), np.array(t.std()), len(y)
    )
    _restandardize(model, f_mean, f_std, float(t_mean), float(t_std))
    frozen = 1 if len(samples) < FREEZE_BELOW else 0
    info = fit(model, x, y, hyper, frozen_layers=frozen, anchor_decay=anchor_decay)
    return model, info


def fine_tune(
    base: PredictorModel,
    samples: Sequence[EnergySample],
    hyper: TrainHyper | None = None,
    anchor_decay: float = ANCHOR_DECAY,
) -> PredictorModel:
    """Continue training ``base`` on a few samples from the target device.

    Input and target statistics are pooled over the base's training set and
    the new samples (weights are re-parameterised so the starting function is
    unchanged). The first hidden layer is frozen below 50 samples. With so few
    samples there is no early-stopping hold-out; a small L2 pull toward the
    base weights regularises instead. If the result fits the adaptation samples
    worse than the base did, the base weights are kept.
    """
    hyper = hyper or TrainHyper(**FINE_TUNE_HYPER)
    if not 30 <= len(samples) <= MAX_FINE_TUNE_SAMPLES:
        raise ValueError(f"fine_tune needs 30..{MAX_FINE_TUNE_SAMPLES} samples, got {len(samples)}")
    if base.layer_dims[0] != INPUT_DIM or len(base.feature_mean) != INPUT_DIM:
        raise ValueError("feature-layout mismatch between base predictor and samples")
    backend, device_id = _check_samples(samples)

    n0 = int(base.training_meta.get("sample_count", len(samples)))
    model, info = _adapt(base, samples, hyper, anchor_decay)
    configs = [s.config for s in samples]
    y = np.array([s.energy_mJ for s in samples])
    kept_base = rmse(predict_kernels(model, configs), y) > rmse(predict_kernels(base, configs), y)
    if kept_base:
        model = base.clone()
    model.backend, model.device_id = backend, device_id
    model.training_meta = {
        "seed": hyper.seed,
        "epochs": info["epochs_run"],
        "sample_count": n0 + len(samples),
        "base_device": base.device_id,
        "fine_tune_samples": len(samples),
        "kept_base_weights": kept_base,
    }
    return model

"""Run configuration: a versioned JSON document.

Every source of randomness is an explicit seed; there are no wall-clock or
ambient-entropy defaults. Unknown keys are rejected so typos surface early.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .harness import VirtualDevice

SCHEMA_VERSION = 1
SEED_KEYS = ("space", "predictor", "calibration", "search", "harness", "proxy")
OBJECTIVES = ("energy", "accuracy")
# values under these keys are taken whole (validated separately)
OPAQUE_KEYS = ("wd_sets", "constraints", "ws", "target", "grid")


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "output_dir": "run",
    "space": {
        "kind": "base",  # base | expanded
        "grid": None,  # {"kernel_sizes": [...], "out_channels": [...], "strides": [...]}
        "pool_size": 500,
        "input": [32, 32, 16],
        "max_enumerate": 1_000_000,
    },
    "devices": {
        "target": {"device_id": "target", "backend": "CPU"},
        "zoo": [],
    },
    "predictor": {
        "source": "train",  # train | zoo
        "zoo_path": None,
        "train_samples": 1000,
    },
    "calibration": {"budget": 100, "pool_size": 2000, "holdout": 200},
    "search": {
        "n_init": 100,
        "n_batch": 10,
        "max_iterations": 7,
        "ws": {"energy": 3.0, "accuracy": 1.0},
        "wd_sets": {
            "balanced": {"energy": 1.0, "accuracy": 1.0},
            "accuracy-prioritized": {"energy": 1.0, "accuracy": 100.0},
            "energy-prioritized": {"energy": 100.0, "accuracy": 1.0},
        },
        "constraints": {},
        "score": "naswot",  # naswot | accuracy
        "reprofile_threshold": 0.2,
    },
    "measure": {"count": 5, "write_traces": True},
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in OPAQUE_KEYS:
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _weights(d: Any, where: str, strict_positive: bool) -> tuple[float, float]:
    if not isinstance(d, dict) or set(d) != set(OBJECTIVES):
        raise ConfigError(f"{where} must map exactly {OBJECTIVES} to numbers")
    vals = tuple(float(d[k]) for k in OBJECTIVES)
    if strict_positive and min(vals) <= 0:
        raise ConfigError(f"{where} weights must be > 0")
    if min(vals) < 0:
        raise ConfigError(f"{where} weights must be >= 0")
    return vals


@dataclass
class RunConfig:
    raw: dict
    source: Path | None = None

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seeds(self) -> dict[str, int]:
        return self.raw["seeds"]

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    @property
    def ws(self) -> tuple[float, float]:
        return _weights(self.raw["search"]["ws"], "search.ws", True)

    @property
    def wd_sets(self) -> dict[str, tuple[float, float]]:
        return {name: _weights(w, f"search.wd_sets.{name}", False) for name, w in self.raw["search"]["wd_sets"].items()}

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2)


def validate_config(cfg: dict, base_dir: Path | None = None) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {cfg.get('schema_version')!r}")
    seeds = cfg.get("seeds")
    if not isinstance(seeds, dict):
        raise ConfigError("config needs a 'seeds' object (seeds are mandatory)")
    missing = [k for k in SEED_KEYS if k not in seeds]
    if missing:
        raise ConfigError(f"missing seeds: {missing}")
    extra = set(seeds) - set(SEED_KEYS)
    if extra:
        raise ConfigError(f"unknown seeds: {sorted(extra)}")
    for k in SEED_KEYS:
        if not isinstance(seeds[k], int) or isinstance(seeds[k], bool) or seeds[k] < 0:
            raise ConfigError(f"seed {k!r} must be a non-negative integer")
    merged = _merge({**DEFAULTS, "seeds": {}}, {k: v for k, v in cfg.items() if k != "seeds"})
    merged["seeds"] = dict(seeds)

    sp = merged["space"]
    if sp["kind"] not in ("base", "expanded"):
        raise ConfigError("space.kind must be 'base' or 'expanded'")
    if not (isinstance(sp["input"], list) and len(sp["input"]) == 3 and all(isinstance(x, int) and x > 0 for x in sp["input"])):
        raise ConfigError("space.input must be [height, width, channels]")
    if int(sp["pool_size"]) < 1:
        raise ConfigError("space.pool_size must be >= 1")

    devices = [("devices.target", merged["devices"]["target"])]
    devices += [(f"devices.zoo[{k}]", d) for k, d in enumerate(merged["devices"]["zoo"])]
    for where, spec in devices:
        try:
            VirtualDevice(**spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from exc
    if sp["grid"] is not None:
        from .arch_space import ExpansionGrid

        try:
            ExpansionGrid(**{k: tuple(v) for k, v in sp["grid"].items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"space.grid: {exc}") from exc

    pr = merged["predictor"]
    if pr["source"] not in ("train", "zoo"):
        raise ConfigError("predictor.source must be 'train' or 'zoo'")
    if pr["zoo_path"] is not None:
        p = Path(pr["zoo_path"])
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        if not p.exists():
            raise ConfigError(f"predictor.zoo_path does not exist: {p}")
        pr["zoo_path"] = str(p)
    if pr["source"] == "zoo" and pr["zoo_path"] is None and not merged["devices"]["zoo"]:
        raise ConfigError("predictor.source 'zoo' needs predictor.zoo_path or devices.zoo")

    if int(merged["calibration"]["budget"]) < 30:
        raise ConfigError("calibration.budget must be >= 30 (predictor training minimum)")

    se = merged["search"]
    for k in ("n_init", "n_batch", "max_iterations"):
        if not isinstance(se[k], int) or se[k] < (0 if k == "max_iterations" else 1):
            raise ConfigError(f"search.{k} must be a positive integer")
    _weights(se["ws"], "search.ws", True)
    if not se["wd_sets"]:
        raise ConfigError("search.wd_sets must name at least one weight set")
    for name, w in se["wd_sets"].items():
        _weights(w, f"search.wd_sets.{name}", False)
    unknown = set(se["constraints"]) - {"max_energy_mJ", "min_accuracy"}
    if unknown:
        raise ConfigError(f"unknown constraints {sorted(unknown)}")
    if se["score"] not in ("naswot", "accuracy"):
        raise ConfigError("search.score must be 'naswot' or 'accuracy'")
    if not 0 < float(se["reprofile_threshold"]):
        raise ConfigError("search.reprofile_threshold must be > 0")
    return merged


def load_config(path, seed_override: int | None = None, out_dir: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(raw, seed_override, out_dir, base_dir=path.parent)


def config_from_dict(raw: dict, seed_override: int | None = None, out_dir: str | None = None, base_dir=None) -> RunConfig:
    raw = copy.deepcopy(raw)
    if seed_override is not None:
        raw["seeds"] = {k: int(seed_override) for k in SEED_KEYS}
    if out_dir is not None:
        raw["output_dir"] = str(out_dir)
    return RunConfig(validate_config(raw, Path(base_dir) if base_dir else None))

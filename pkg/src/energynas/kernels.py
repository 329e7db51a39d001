"""Kernel (single operator instance) configuration and its cost features."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

PATTERNS = ("conv+bn+relu", "dwconv+bn+relu", "avgpool")
CONV_FAMILY = ("conv+bn+relu", "dwconv+bn+relu")
KERNEL_SIZES = (1, 3, 5, 7)
STRIDES = (1, 2)
BYTES_PER_ELEMENT = 4  # float32 activations

FEATURE_NAMES = ("H", "W", "Cin", "Cout", "KS", "stride", "MACs", "output_bytes")


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True, order=True)
class KernelConfig:
    pattern: str
    H: int
    W: int
    Cin: int
    Cout: int
    KS: int
    stride: int

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown kernel pattern {self.pattern!r}")
        if min(self.H, self.W, self.Cin, self.Cout) < 1:
            raise ValueError(f"non-positive dimension in {self}")
        if self.KS not in KERNEL_SIZES:
            raise ValueError(f"kernel size {self.KS} not in {KERNEL_SIZES}")
        if self.stride not in STRIDES:
            raise ValueError(f"stride {self.stride} not in {STRIDES}")
        if self.pattern == "avgpool" and self.Cout != self.Cin:
            raise ValueError("avgpool kernels must have Cout == Cin")

    @property
    def H_out(self) -> int:
        return ceil_div(self.H, self.stride)

    @property
    def W_out(self) -> int:
        return ceil_div(self.W, self.stride)

    def to_dict(self) -> dict:
        return asdict(self)


def macs(cfg: KernelConfig) -> int:
    """Multiply-accumulate count.

    conv: H_out*W_out*Cout*Cin*KS^2; depthwise replaces Cin by 1; avgpool
    counts the KS^2 window per output element.
    """
    window = cfg.KS * cfg.KS
    out_elems = cfg.H_out * cfg.W_out * cfg.Cout
    if cfg.pattern == "conv+bn+relu":
        return out_elems * cfg.Cin * window
    return out_elems * window


def input_bytes(cfg: KernelConfig) -> int:
    return cfg.H * cfg.W * cfg.Cin * BYTES_PER_ELEMENT


def output_bytes(cfg: KernelConfig) -> int:
    return cfg.H_out * cfg.W_out * cfg.Cout * BYTES_PER_ELEMENT


def featurize(cfg: KernelConfig) -> np.ndarray:
    """Raw feature vector in FEATURE_NAMES order (no scaling applied)."""
    return np.array(
        [cfg.H, cfg.W, cfg.Cin, cfg.Cout, cfg.KS, cfg.stride, macs(cfg), output_bytes(cfg)],
        dtype=np.float64,
    )


def pattern_onehot(cfg: KernelConfig) -> np.ndarray:
    v = np.zeros(len(PATTERNS))
    v[PATTERNS.index(cfg.pattern)] = 1.0
    return v

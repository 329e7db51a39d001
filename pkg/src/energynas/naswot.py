"""Training-free accuracy proxy from ReLU activation patterns.

A random-weight copy of the architecture is run on a small probe batch; each
ReLU site contributes binary codes and the batch kernel matrix
K_ij = U - hamming(code_i, code_j) is scored by its log-determinant.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .arch_space import EDGES, Architecture, TensorShape, validate

PROBE_SHAPE = TensorShape(8, 8, 3)
PROBE_BATCH = 8
GRANULARITIES = ("channel", "full")
BN_EPS = 1e-5


def _seed_ints(*parts) -> list[int]:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


@dataclass
class ConvLayer:
    name: str
    weight: np.ndarray  # (KS, KS, Cin, Cout)
    stride: int
    relu: bool = True

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[0]


@dataclass
class TinyNet:
    arch_id: str
    arch: Architecture
    input: TensorShape
    seed: int
    stem: ConvLayer
    cells: list[list[ConvLayer | None]]  # per cell, one slot per edge (conv edges only)
    reductions: list[ConvLayer]
    relu_unit_count: int = 0
    granularity: str = "channel"
    unit_shapes: list[tuple[int, int, int]] = field(default_factory=list)

    def conv_layers(self) -> list[ConvLayer]:
        out = [self.stem]
        for cell in self.cells:
            out.extend(layer for layer in cell if layer is not None)
        out.extend(self.reductions)
        return out


def _init_conv(rng: np.random.Generator, name: str, ks: int, cin: int, cout: int, stride: int, relu=True) -> ConvLayer:
    bound = 1.0 / np.sqrt(cin * ks * ks)
    w = rng.uniform(-bound, bound, size=(ks, ks, cin, cout))
    return ConvLayer(name, w, stride, relu)


def instantiate(
    arch: Architecture,
    seed: int = 0,
    input: TensorShape = PROBE_SHAPE,
    granularity: str = "channel",
) -> TinyNet:
    """Build a random-weight network for ``arch``.

    A fixed 3x3 stem conv (no ReLU) maps the probe's channels to the
    architecture's input channels. Weights are uniform in +-1/sqrt(fan_in)
    and depend only on (arch id, seed).
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}")
    inner = TensorShape(input.height, input.width, arch.input_channels)
    report = validate(arch, inner)
    if not report.valid:
        raise ValueError("architecture failed shape validation: " + report.reasons[0]["message"])
    rng = np.random.default_rng(_seed_ints("naswot", arch.id, seed))
    stem = _init_conv(rng, "stem", 3, input.channels, arch.input_channels, 1, relu=False)

    cells: list[list[ConvLayer | None]] = []
    reductions: list[ConvLayer] = []
    channels = arch.input_channels
    for s, stack in enumerate(arch.stacks):
        if s > 0:
            reductions.append(_init_conv(rng, f"reduce{s}", 3, channels, stack.channels, 2))
            channels = stack.channels
        for c in range(stack.cells):
            # channel count at each node follows the same rules as shape validation
            node_ch = {0: channels}
            slots: list[ConvLayer | None] = []
            for e, ((i, j), op) in enumerate(zip(EDGES, arch.edges)):
                if op.kind == "zeroize" or i not in node_ch:
                    slots.append(None)
                    continue
                if op.is_conv:
                    cout = op.out_channels or stack.channels
                    slots.append(_init_conv(rng, f"s{s}c{c}e{e}", op.kernel_size, node_ch[i], cout, op.stride))
                    node_ch.setdefault(j, cout)
                else:
                    slots.append(None)
                    node_ch.setdefault(j, node_ch[i])
            cells.append(slots)
            channels = node_ch[3]

    net = TinyNet(arch.id, arch, input, seed, stem, cells, reductions, granularity=granularity)
    probe = np.zeros((1, input.height, input.width, input.channels))
    shapes = [pre.shape[1:] for pre in _forward(net, probe)]
    net.unit_shapes = shapes
    net.relu_unit_count = int(sum(c if granularity == "channel" else h * w * c for h, w, c in shapes))
    return net


def conv2d(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """NHWC convolution with 'same' padding (KS // 2); output is ceil(H / stride)."""
    ks = w.shape[0]
    pad = ks // 2
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (ks, ks), axis=(1, 2))[:, ::stride, ::stride]
    # win: (B, Ho, Wo, Cin, ks, ks)
    return np.einsum("bhwcij,ijco->bhwo", win, w, optimize=True)


def avgpool3(x: np.ndarray) -> np.ndarray:
    """3x3 stride-1 average pool, zero padding counted in the divisor."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    h, w = x.shape[1], x.shape[2]
    acc = np.zeros_like(x)
    for di in range(3):
        for dj in range(3):
            acc += xp[:, di : di + h, dj : dj + w]
    return acc / 9.0


def batchnorm(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=(0, 1, 2), keepdims=True)
    var = x.var(axis=(0, 1, 2), keepdims=True)
    return (x - mean) / np.sqrt(var + BN_EPS)


def _forward(net: TinyNet, x: np.ndarray) -> list[np.ndarray]:
    """Run the net, returning the pre-activation (post-BN) tensor of every ReLU site."""
    pre: list[np.ndarray] = []

    def conv_bn_relu(layer: ConvLayer, inp: np.ndarray) -> np.ndarray:
        z = batchnorm(conv2d(inp, layer.weight, layer.stride))
        if not layer.relu:
            return z
        pre.append(z)
        return np.maximum(z, 0.0)

    h = conv_bn_relu(net.stem, x)
    cell_idx = 0
    for s, stack in enumerate(net.arch.stacks):
        if s > 0:
            h = conv_bn_relu(net.reductions[s - 1], h)
        for _ in range(stack.cells):
            nodes: dict[int, np.ndarray] = {0: h}
            for ((i, j), op), layer in zip(zip(EDGES, net.arch.edges), net.cells[cell_idx]):
                if op.kind == "zeroize" or i not in nodes:
                    continue
                if op.kind == "skip":
                    out = nodes[i]
                elif op.kind == "avgpool":
                    out = avgpool3(nodes[i])
                else:
                    out = conv_bn_relu(layer, nodes[i])
                nodes[j] = nodes[j] + out if j in nodes else out
            h = nodes[3]
            cell_idx += 1
    return pre


def probe_batch(seed: int, batch: int = PROBE_BATCH, shape: TensorShape = PROBE_SHAPE) -> np.ndarray:
    """Standard-normal probe images, NHWC."""
    rng = np.random.default_rng(_seed_ints("probe", seed, batch, shape))
    return rng.standard_normal((batch, shape.height, shape.width, shape.channels))


@dataclass
class ActivationCodes:
    codes: np.ndarray  # (B, U) uint8


def activation_codes(net: TinyNet, batch: np.ndarray | None = None, seed: int = 0) -> ActivationCodes:
    """Binary ReLU codes per probe input (1 iff the pre-activation is > 0).

    At channel granularity a channel's bit uses the sign of its spatial-mean
    pre-activation.
    """
    if batch is None:
        batch = probe_batch(seed, PROBE_BATCH, net.input)
    batch = np.asarray(batch, dtype=float)
    if batch.ndim != 4 or batch.shape[0] < 2:
        raise ValueError("probe batch must be (B, H, W, C) with B >= 2")
    pre = _forward(net, batch)
    b = batch.shape[0]
    if net.granularity == "channel":
        parts = [z.mean(axis=(1, 2)) for z in pre]
    else:
        parts = [z.reshape(b, -1) for z in pre]
    if not parts:
        return ActivationCodes(np.zeros((b, 0), dtype=np.uint8))
    return ActivationCodes((np.concatenate(parts, axis=1) > 0).astype(np.uint8))


@dataclass(frozen=True)
class ProxyScore:
    n_s: float
    finite: bool


def kernel_matrix(codes: ActivationCodes | np.ndarray) -> np.ndarray:
    c = np.asarray(getattr(codes, "codes", codes), dtype=np.int64)
    # agreements on ones plus agreements on zeros = U - hamming distance
    return c @ c.T + (1 - c) @ (1 - c).T


def int_det(k: np.ndarray) -> int:
    """Exact determinant of an integer matrix (fraction-free Bareiss elimination)."""
    a = [[int(v) for v in row] for row in k]
    n = len(a)
    sign, prev = 1, 1
    for i in range(n - 1):
        if a[i][i] == 0:
            swap = next((r for r in range(i + 1, n) if a[r][i] != 0), None)
            if swap is None:
                return 0
            a[i], a[swap] = a[swap], a[i]
            sign = -sign
        for r in range(i + 1, n):
            for c in range(i + 1, n):
                a[r][c] = (a[r][c] * a[i][i] - a[r][i] * a[i][c]) // prev
        prev = a[i][i]
    return sign * a[-1][-1] if n else 1


def naswot_score(codes: ActivationCodes | np.ndarray) -> ProxyScore:
    # exact integer determinant, so the score is bit-identical under any row order
    k = kernel_matrix(codes)
    if k.shape[0] < 2:
        raise ValueError("naswot_score needs B >= 2")
    det = int_det(k)
    if det <= 0:
        return ProxyScore(float("-inf"), False)
    return ProxyScore(math.log(det), True)


def score_architecture(
    arch: Architecture,
    seed: int = 0,
    probe_seed: int = 0,
    batch: int = PROBE_BATCH,
    granularity: str = "channel",
) -> ProxyScore:
    net = instantiate(arch, seed, PROBE_SHAPE, granularity)
    return naswot_score(activation_codes(net, probe_batch(probe_seed, batch, PROBE_SHAPE)))

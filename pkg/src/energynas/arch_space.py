"""Cell-based architecture space: enumeration, expansion, shape validation,
embedding and lowering to per-operator kernel configurations.

A cell is the complete DAG on 4 ordered nodes (6 edges). Node 0 is the cell
input, node 3 the cell output; every node sums the outputs of its incoming
edges. Three stacks of cells are joined by fixed 3x3 stride-2 residual
convs that map to the next stack's channel count.
"""
from __future__ import annotations

import functools
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .kernels import KernelConfig, ceil_div

NODE_COUNT = 4
EDGES: tuple[tuple[int, int], ...] = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))

EXPANDED_KERNEL_SIZES = (1, 3, 5, 7)
EXPANDED_OUT_CHANNELS = tuple(range(1, 11)) + (16, 32, 64, 128, 256)
EXPANDED_STRIDES = (1, 2)

BASE_SPACE_SIZE = 5 ** len(EDGES)


@dataclass(frozen=True)
class OpKind:
    """One edge operation. ``out_channels=None`` means "use the stack default"."""

    kind: str  # zeroize | skip | conv | avgpool
    kernel_size: int = 0
    out_channels: int | None = None
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("zeroize", "skip", "conv", "avgpool"):
            raise ValueError(f"unknown op kind {self.kind!r}")
        if self.kind == "conv":
            if self.kernel_size not in EXPANDED_KERNEL_SIZES:
                raise ValueError(f"conv kernel size {self.kernel_size} unsupported")
            if self.stride not in EXPANDED_STRIDES:
                raise ValueError(f"conv stride {self.stride} unsupported")
            if self.out_channels is not None and self.out_channels not in EXPANDED_OUT_CHANNELS:
                raise ValueError(f"conv out_channels {self.out_channels} unsupported")

    @property
    def is_conv(self) -> bool:
        return self.kind == "conv"

    @property
    def token(self) -> str:
        if self.kind == "zeroize":
            return "zeroize"
        if self.kind == "skip":
            return "skip"
        if self.kind == "avgpool":
            return "avgpool3x3"
        tok = f"conv{self.kernel_size}x{self.kernel_size}"
        if self.out_channels is not None:
            tok += f"-c{self.out_channels}"
        if self.stride != 1:
            tok += f"-s{self.stride}"
        return tok

    @classmethod
    def from_token(cls, tok: str) -> "OpKind":
        if tok == "zeroize":
            return ZEROIZE
        if tok == "skip":
            return SKIP
        if tok == "avgpool3x3":
            return AVGPOOL
        if not tok.startswith("conv"):
            raise ValueError(f"bad op token {tok!r}")
        head, *mods = tok.split("-")
        ks = int(head[4:].split("x")[0])
        out, stride = None, 1
        for m in mods:
            if m.startswith("c"):
                out = int(m[1:])
            elif m.startswith("s"):
                stride = int(m[1:])
            else:
                raise ValueError(f"bad op token {tok!r}")
        return cls("conv", ks, out, stride)


ZEROIZE = OpKind("zeroize")
SKIP = OpKind("skip")
AVGPOOL = OpKind("avgpool", kernel_size=3)
CONV1X1 = OpKind("conv", 1)
CONV3X3 = OpKind("conv", 3)
BASE_OPS = (ZEROIZE, SKIP, CONV1X1, CONV3X3, AVGPOOL)


@dataclass(frozen=True)
class Stack:
    cells: int = 5
    channels: int = 16


DEFAULT_STACKS = (Stack(5, 16), Stack(5, 32), Stack(5, 64))


@dataclass(frozen=True)
class TensorShape:
    height: int
    width: int
    channels: int

    def __post_init__(self):
        if min(self.height, self.width, self.channels) < 1:
            raise ValueError(f"tensor dims must be >= 1, got {self}")

    def __str__(self):
        return f"{self.height}x{self.width}x{self.channels}"


DEFAULT_INPUT = TensorShape(32, 32, 16)


@dataclass(frozen=True)
class Architecture:
    edges: tuple[OpKind, ...]
    stacks: tuple[Stack, ...] = DEFAULT_STACKS
    input_channels: int = 16

    def __post_init__(self):
        if len(self.edges) != len(EDGES):
            raise ValueError(f"cell needs exactly {len(EDGES)} edges, got {len(self.edges)}")
        if len(self.stacks) != 3:
            raise ValueError("architecture needs exactly 3 stacks")

    @functools.cached_property
    def id(self) -> str:
        payload = json.dumps(self._body(), separators=(",", ":"))
        return hashlib.sha1(payload.encode()).hexdigest()[:16]

    @property
    def edge_ops(self) -> dict[tuple[int, int], OpKind]:
        return dict(zip(EDGES, self.edges))

    @property
    def conv_edges(self) -> list[int]:
        return [i for i, op in enumerate(self.edges) if op.is_conv]

    def replace_edge(self, index: int, op: OpKind) -> "Architecture":
        edges = list(self.edges)
        edges[index] = op
        return Architecture(tuple(edges), self.stacks, self.input_channels)

    def _body(self) -> dict:
        return {
            "edge_ops": [op.token for op in self.edges],
            "stacks": [[s.cells, s.channels] for s in self.stacks],
            "input_channels": self.input_channels,
        }

    def to_record(self) -> dict:
        return {"id": self.id, **self._body()}

    @classmethod
    def from_record(cls, rec: dict) -> "Architecture":
        arch = cls(
            tuple(OpKind.from_token(t) for t in rec["edge_ops"]),
            tuple(Stack(int(c), int(ch)) for c, ch in rec["stacks"]),
            int(rec["input_channels"]),
        )
        if "id" in rec and rec["id"] != arch.id:
            raise ValueError(f"record id {rec['id']} does not match content hash {arch.id}")
        return arch

    def __str__(self):
        return "|".join(f"{op.token}~{i}{j}" for (i, j), op in zip(EDGES, self.edges))


def write_architectures(path, archs: Iterable[Architecture]) -> int:
    n = 0
    with open(path, "w") as fh:
        for a in archs:
            fh.write(json.dumps(a.to_record(), separators=(",", ":")) + "\n")
            n += 1
    return n


def read_architectures(path) -> list[Architecture]:
    with open(path) as fh:
        return [Architecture.from_record(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# enumeration / expansion
# ---------------------------------------------------------------------------

def enumerate_base_space() -> Iterator[Architecture]:
    """All 5^6 assignments of the base ops to the 6 cell edges."""
    for ops in itertools.product(BASE_OPS, repeat=len(EDGES)):
        yield Architecture(ops)


@dataclass(frozen=True)
class ExpansionGrid:
    kernel_sizes: tuple[int, ...] = EXPANDED_KERNEL_SIZES
    out_channels: tuple[int, ...] = EXPANDED_OUT_CHANNELS
    strides: tuple[int, ...] = EXPANDED_STRIDES

    def __post_init__(self):
        for name, allowed in (
            ("kernel_sizes", EXPANDED_KERNEL_SIZES),
            ("out_channels", EXPANDED_OUT_CHANNELS),
            ("strides", EXPANDED_STRIDES),
        ):
            values = getattr(self, name)
            if not values:
                raise ValueError("empty expansion grid")
            bad = set(values) - set(allowed)
            if bad:
                raise ValueError(f"{name} values {sorted(bad)} outside the expanded space")
            object.__setattr__(self, name, tuple(sorted(set(values))))

    @property
    def conv_options(self) -> list[OpKind]:
        return [
            OpKind("conv", ks, ch, s)
            for ks in self.kernel_sizes
            for ch in self.out_channels
            for s in self.strides
        ]

    @property
    def size(self) -> int:
        return len(self.kernel_sizes) * len(self.out_channels) * len(self.strides)


def expand_architecture(arch: Architecture, grid: ExpansionGrid) -> Iterator[Architecture]:
    conv_idx = arch.conv_edges
    options = grid.conv_options
    seen: set[str] = set()
    for choice in itertools.product(options, repeat=len(conv_idx)):
        edges = list(arch.edges)
        for i, op in zip(conv_idx, choice):
            edges[i] = op
        a = Architecture(tuple(edges), arch.stacks, arch.input_channels)
        if a.id not in seen:
            seen.add(a.id)
            yield a


def expansion_count(arch: Architecture, grid: ExpansionGrid) -> int:
    return grid.size ** len(arch.conv_edges)


def expanded_space_size(grid: ExpansionGrid) -> int:
    """Distinct architectures obtained by expanding every base architecture.

    Both base convs expand into the same option set, so per edge there are
    3 non-conv ops plus ``grid.size`` conv variants.
    """
    return (3 + grid.size) ** len(EDGES)


def enumerate_expanded_space(grid: ExpansionGrid) -> Iterator[Architecture]:
    per_edge = [ZEROIZE, SKIP, AVGPOOL] + grid.conv_options
    for ops in itertools.product(per_edge, repeat=len(EDGES)):
        yield Architecture(ops)


# ---------------------------------------------------------------------------
# shape propagation
# ---------------------------------------------------------------------------

@dataclass
class ValidityReport:
    valid: bool
    reasons: list[dict] = field(default_factory=list)


def _edge_name(e: tuple[int, int]) -> str:
    return f"{e[0]}->{e[1]}"


def _propagate_cell(edges, shape: TensorShape, stack_channels: int, where: str):
    """Returns (output_shape or None, kernels, reasons)."""
    node_shape: dict[int, TensorShape] = {0: shape}
    kernels: list[KernelConfig] = []
    reasons: list[dict] = []
    incoming: dict[int, list[tuple[tuple[int, int], OpKind, TensorShape]]] = {}
    for (i, j), op in zip(EDGES, edges):
        if op.kind == "zeroize" or i not in node_shape:
            continue
        src = node_shape[i]
        if op.kind == "skip":
            out = src
        elif op.kind == "avgpool":
            out = src
            kernels.append(KernelConfig("avgpool", src.height, src.width, src.channels, src.channels, 3, 1))
        else:
            cout = op.out_channels or stack_channels
            out = TensorShape(ceil_div(src.height, op.stride), ceil_div(src.width, op.stride), cout)
            kernels.append(
                KernelConfig("conv+bn+relu", src.height, src.width, src.channels, cout, op.kernel_size, op.stride)
            )
        # EDGES is ordered by target node, so every source is final here
        incoming.setdefault(j, []).append(((i, j), op, out))
        first_e, first_op, first_shape = incoming[j][0]
        if out != first_shape:
            msg = f"edge {_edge_name((i, j))} yields {out} but edge {_edge_name(first_e)} yields {first_shape}"
            if (op.kind != "conv" or first_op.kind != "conv") and out.channels != first_shape.channels:
                msg += " (skip/pool edges cannot change channels)"
            reasons.append({"edge": f"{where} {_edge_name(first_e)} & {_edge_name((i, j))}", "message": msg})
            return None, kernels, reasons
        node_shape[j] = first_shape
    if 3 not in node_shape:
        reasons.append({"edge": f"{where} cell", "message": "no signal path from cell input to output"})
        return None, kernels, reasons
    return node_shape[3], kernels, reasons


def _propagate(arch: Architecture, input: TensorShape):
    if input.channels != arch.input_channels:
        raise ValueError(
            f"input has {input.channels} channels, architecture expects {arch.input_channels}"
        )
    shape = input
    kernels: list[KernelConfig] = []
    for s, stack in enumerate(arch.stacks):
        if s > 0:
            kernels.append(KernelConfig("conv+bn+relu", shape.height, shape.width, shape.channels, stack.channels, 3, 2))
            shape = TensorShape(ceil_div(shape.height, 2), ceil_div(shape.width, 2), stack.channels)
        for c in range(stack.cells):
            out, cell_kernels, reasons = _propagate_cell(arch.edges, shape, stack.channels, f"stack{s}/cell{c}")
            kernels.extend(cell_kernels)
            if out is None:
                return None, kernels, reasons
            shape = out
    return shape, kernels, []


def validate(arch: Architecture, input: TensorShape = DEFAULT_INPUT) -> ValidityReport:
    _, _, reasons = _propagate(arch, input)
    return ValidityReport(valid=not reasons, reasons=reasons)


def extract_kernels(arch: Architecture, input: TensorShape = DEFAULT_INPUT) -> list[KernelConfig]:
    """Per-operator kernel configs in execution order (Skip/Zeroize excluded)."""
    out, kernels, reasons = _propagate(arch, input)
    if reasons:
        raise ValueError("architecture failed shape validation: " + reasons[0]["message"])
    return kernels


def output_shape(arch: Architecture, input: TensorShape = DEFAULT_INPUT) -> TensorShape:
    out, _, reasons = _propagate(arch, input)
    if reasons:
        raise ValueError("architecture failed shape validation: " + reasons[0]["message"])
    return out


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=1)
def valid_base_space() -> tuple[Architecture, ...]:
    return tuple(a for a in enumerate_base_space() if validate(a).valid)


@dataclass(frozen=True)
class Strata:
    """Equal-quantile buckets over a scalar (typically predicted energy)."""

    energy: Callable[[Architecture], float]
    buckets: int = 4


def _allocate(n: int, buckets: int) -> list[int]:
    return [n // buckets + (1 if b < n % buckets else 0) for b in range(buckets)]


def quantile_buckets(values: np.ndarray, buckets: int) -> np.ndarray:
    """Bucket index per value, equal-count by rank (ties broken by position)."""
    order = np.argsort(values, kind="stable")
    idx = np.empty(len(values), dtype=int)
    idx[order] = (np.arange(len(values)) * buckets) // len(values)
    return idx


def sample_space(
    seed: int,
    n: int,
    strata: Strata | None = None,
    pool: Sequence[Architecture] | None = None,
) -> list[Architecture]:
    """Draw ``n`` distinct valid architectures, optionally stratified."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if pool is None:
        pool = valid_base_space()
    else:
        pool = [a for a in dict((a.id, a) for a in pool).values() if validate(a).valid]
    if n > len(pool):
        raise ValueError(f"requested {n} architectures but only {len(pool)} valid ones exist")
    rng = np.random.default_rng(seed)
    if strata is None:
        picks = rng.choice(len(pool), size=n, replace=False)
        return [pool[i] for i in picks]
    energies = np.array([strata.energy(a) for a in pool], dtype=float)
    bucket_of = quantile_buckets(energies, strata.buckets)
    members = [np.flatnonzero(bucket_of == b) for b in range(strata.buckets)]
    want = _allocate(n, strata.buckets)
    chosen: list[int] = []
    spill = 0
    for b in range(strata.buckets):
        take = min(want[b] + spill, len(members[b]))
        spill = want[b] + spill - take
        chosen.extend(rng.choice(members[b], size=take, replace=False).tolist())
    if spill:
        rest = np.setdiff1d(np.arange(len(pool)), chosen)
        chosen.extend(rng.choice(rest, size=spill, replace=False).tolist())
    return [pool[i] for i in chosen]


def sample_expanded(
    seed: int,
    n: int,
    grid: ExpansionGrid = ExpansionGrid(),
    input: TensorShape = DEFAULT_INPUT,
    max_draws: int | None = None,
) -> list[Architecture]:
    """Draw ``n`` distinct shape-valid architectures from the expanded space.

    Each edge is independently one of the three non-conv ops or one of the
    grid's conv variants, matching the distinct-architecture count of
    :func:`expanded_space_size`.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    non_conv = [ZEROIZE, SKIP, AVGPOOL]
    convs = grid.conv_options
    # bias toward conv edges so the pool is not dominated by conv-free cells
    p_conv = 0.5
    max_draws = max_draws or 200 * n
    out: dict[str, Architecture] = {}
    for _ in range(max_draws):
        edges = []
        for _e in EDGES:
            if rng.random() < p_conv:
                edges.append(convs[rng.integers(len(convs))])
            else:
                edges.append(non_conv[rng.integers(3)])
        a = Architecture(tuple(edges))
        if a.id in out or not validate(a, input).valid:
            continue
        out[a.id] = a
        if len(out) == n:
            return list(out.values())
    raise ValueError(f"found only {len(out)} valid architectures after {max_draws} draws")


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

OP_CLASSES = ("zeroize", "skip", "conv_pointwise", "conv_spatial", "avgpool")
EDGE_BLOCK = len(OP_CLASSES) + 3
EMBED_DIM = EDGE_BLOCK * len(EDGES) + 3


def _op_class(op: OpKind) -> int:
    if op.kind == "conv":
        return 2 if op.kernel_size == 1 else 3
    return {"zeroize": 0, "skip": 1, "avgpool": 4}[op.kind]


def embed(arch: Architecture) -> np.ndarray:
    """Fixed-length descriptor; per-edge blocks then per-stack channel terms.

    Edge block: one-hot op class (5), kernel_size/7, log2(out_channels)/8
    (0 when the stack default is inherited), stride-1.
    """
    v = np.zeros(EMBED_DIM)
    for e, op in enumerate(arch.edges):
        base = e * EDGE_BLOCK
        v[base + _op_class(op)] = 1.0
        v[base + 5] = op.kernel_size / 7.0
        if op.is_conv and op.out_channels is not None:
            v[base + 6] = math.log2(op.out_channels) / 8.0
        v[base + 7] = op.stride - 1
    for s, stack in enumerate(arch.stacks):
        v[EDGE_BLOCK * len(EDGES) + s] = math.log2(stack.channels) / 8.0
    return v

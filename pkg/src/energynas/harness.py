"""Virtual device standing in for a phone plus external power monitor.

The device hides a ground-truth energy model (per-kernel MAC and byte costs)
and an accuracy field over architecture embeddings. ``run_inference`` emits
start/stop events on the device clock and a power trace on the monitor
clock (offset and drifting relative to the device). ``measure`` recovers
energy the way a real rig would: map the events onto the monitor clock,
slice the trace, average current and voltage, multiply by duration.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .arch_space import DEFAULT_INPUT, Architecture, TensorShape, embed, extract_kernels
from .kernels import KernelConfig, input_bytes, macs, output_bytes

GUARD_US = 5_000
INFERENCE_OVERHEAD_US = 5_000
LATENCY_NS_PER_MAC = {"CPU": 2.0, "GPU": 0.5}
DEVICE_EPOCH_US = 1_000_000
ACCURACY_FREQ = 1.5  # std of the random Fourier frequencies


class HarnessError(RuntimeError):
    """Raised when a measurement cannot be recovered from a trace."""


def _stable_int(text: str) -> int:
    return int(hashlib.sha1(text.encode()).hexdigest()[:8], 16)


def _rng(*parts) -> np.random.Generator:
    ints = [p if isinstance(p, int) else _stable_int(str(p)) for p in parts]
    return np.random.default_rng([abs(i) for i in ints])


@dataclass(frozen=True)
class VirtualDevice:
    device_id: str = "virtual-cpu"
    backend: str = "CPU"
    mac_energy: float = 1e-6  # mJ per MAC
    byte_energy: float = 1e-5  # mJ per byte moved
    static_energy: float = 0.0  # mJ per kernel launch
    noise_sigma: float = 0.0
    offset_us: int = 0
    drift_ppm: float = 0.0
    sample_rate_hz: int = 5000
    seed: int = 0
    accuracy_noise: float = 0.0
    voltage_mV: float = 4000.0
    idle_power_mW: float = 300.0
    warmup_spike: float = 0.1  # relative power excess over the first 10% of a run

    def __post_init__(self):
        if self.backend not in LATENCY_NS_PER_MAC:
            raise ValueError(f"backend must be CPU or GPU, got {self.backend!r}")
        if self.mac_energy <= 0 or self.byte_energy <= 0:
            raise ValueError("energy coefficients must be positive")
        if self.sample_rate_hz < 100:
            raise ValueError("sample_rate_hz must be >= 100")

    def monitor_time(self, t_device_us: float) -> float:
        return t_device_us + self.offset_us + self.drift_ppm * 1e-6 * t_device_us

    @classmethod
    def from_dict(cls, d: dict) -> "VirtualDevice":
        return cls(**d)


@dataclass(frozen=True)
class PowerSample:
    t_us: int
    current_mA: float
    voltage_mV: float


@dataclass(frozen=True)
class InferenceEvent:
    kind: str
    t_us: int


@dataclass
class InferenceRun:
    events: list[InferenceEvent]
    trace: list[PowerSample]
    # monitor-clock timestamps at which the start/stop triggers arrived
    triggers: dict[str, float]


@dataclass
class MeasurementResult:
    arch_id: str
    T_s_us: int
    T_e_us: int
    avg_power_mW: float
    energy_mJ: float
    sample_count: int
    accuracy: float = float("nan")


# ---------------------------------------------------------------------------
# ground truth
# ---------------------------------------------------------------------------

def kernel_energy(device: VirtualDevice, cfg: KernelConfig) -> float:
    """Noise-free energy of one kernel in mJ."""
    return (
        device.mac_energy * macs(cfg)
        + device.byte_energy * (input_bytes(cfg) + output_bytes(cfg))
        + device.static_energy
    )


def measure_kernel(device: VirtualDevice, cfg: KernelConfig, run_seed: int = 0):
    """Micro-benchmark a single kernel; returns an EnergySample."""
    from .kernel_energy import EnergySample

    eta = _rng(device.seed, run_seed, device.device_id, repr(cfg)).normal(0.0, device.noise_sigma) if device.noise_sigma else 0.0
    energy = max(kernel_energy(device, cfg) * (1.0 + eta), 0.0)
    return EnergySample(cfg, energy, device.backend, device.device_id)


def profile_kernels(device: VirtualDevice, configs, run_seed: int = 0):
    return [measure_kernel(device, c, run_seed) for c in configs]


def ground_truth_energy(
    device: VirtualDevice,
    arch: Architecture,
    input: TensorShape = DEFAULT_INPUT,
    run_seed: int = 0,
) -> float:
    kernels = extract_kernels(arch, input)
    total = sum(kernel_energy(device, k) for k in kernels)
    if device.noise_sigma:
        total *= 1.0 + _rng(device.seed, run_seed, device.device_id, arch.id).normal(0.0, device.noise_sigma)
    return max(total, 0.0)


def inference_duration_us(device: VirtualDevice, arch: Architecture, input: TensorShape = DEFAULT_INPUT) -> int:
    total_macs = sum(macs(k) for k in extract_kernels(arch, input))
    return INFERENCE_OVERHEAD_US + int(round(total_macs * LATENCY_NS_PER_MAC[device.backend] / 1000.0))


def accuracy_field(device: VirtualDevice, emb: np.ndarray) -> float:
    """Hidden smooth accuracy surrogate in [0.5, 0.95].

    A saturating capacity term (convs, wide channels and large kernels help)
    blended with seeded random Fourier features.
    """
    from .arch_space import EDGE_BLOCK, EDGES

    blocks = emb[: EDGE_BLOCK * len(EDGES)].reshape(len(EDGES), EDGE_BLOCK)
    capacity = (
        0.15 * blocks[:, 1]  # skip
        + 0.6 * blocks[:, 2]  # pointwise conv
        + 1.0 * blocks[:, 3]  # spatial conv
        + 0.1 * blocks[:, 4]  # avgpool
        + 0.5 * blocks[:, 5] * (blocks[:, 2] + blocks[:, 3])
        + 0.8 * blocks[:, 6]
        - 0.3 * blocks[:, 7]
    ).sum()
    saturating = 1.0 - math.exp(-max(capacity, 0.0) / 2.5)
    rng = _rng(device.seed, "accuracy-field")
    w = rng.normal(0.0, ACCURACY_FREQ, size=(16, emb.size))
    b = rng.uniform(0.0, 2 * math.pi, size=16)
    ripple = 0.5 * (1.0 + float(np.mean(np.cos(w @ emb + b))))
    s = 0.9 * saturating + 0.1 * ripple
    return 0.5 + 0.45 * s


# ---------------------------------------------------------------------------
# trace synthesis and recovery
# ---------------------------------------------------------------------------

def run_inference(
    device: VirtualDevice,
    arch: Architecture,
    run_seed: int = 0,
    input: TensorShape = DEFAULT_INPUT,
) -> InferenceRun:
    energy = ground_truth_energy(device, arch, input, run_seed)
    duration = inference_duration_us(device, arch, input)
    rng = _rng(device.seed, run_seed, device.device_id, arch.id, "timing")
    t_s = DEVICE_EPOCH_US + int(rng.integers(0, 1000))
    t_e = t_s + duration
    m_s, m_e = device.monitor_time(t_s), device.monitor_time(t_e)

    period = 1e6 / device.sample_rate_hz
    phase = rng.uniform(0.0, period)
    lo, hi = m_s - GUARD_US, m_e + GUARD_US
    k0 = math.ceil((lo - phase) / period)
    k1 = math.floor((hi - phase) / period)
    t = np.floor(phase + np.arange(k0, k1 + 1) * period).astype(np.int64)
    t = np.unique(t)

    spike = device.warmup_spike
    base_power = energy / (duration / 1e6) / (1.0 + 0.1 * spike)  # mW
    inside = (t > m_s) & (t <= m_e)
    warm = inside & (t - m_s <= 0.1 * (m_e - m_s))
    power = np.full(t.shape, device.idle_power_mW)
    power[inside] = base_power
    power[warm] = base_power * (1.0 + spike)
    current = power * 1e3 / device.voltage_mV
    trace = [PowerSample(int(ti), float(ci), device.voltage_mV) for ti, ci in zip(t, current)]
    events = [InferenceEvent("start", t_s), InferenceEvent("stop", t_e)]
    return InferenceRun(events, trace, {"start": m_s, "stop": m_e})


@dataclass(frozen=True)
class ClockMap:
    """Device-to-monitor time map anchored at the start event."""

    device_anchor: float
    monitor_anchor: float
    rate: float = 1.0

    def __call__(self, t_device_us: float) -> float:
        return self.monitor_anchor + (t_device_us - self.device_anchor) * self.rate

    @classmethod
    def identity(cls) -> "ClockMap":
        return cls(0.0, 0.0, 1.0)

    @classmethod
    def from_triggers(cls, events: list[InferenceEvent], triggers: dict[str, float]) -> "ClockMap":
        t_s = _event(events, "start")
        t_e = _event(events, "stop")
        rate = (triggers["stop"] - triggers["start"]) / (t_e - t_s)
        return cls(float(t_s), float(triggers["start"]), rate)


def _event(events: list[InferenceEvent], kind: str) -> int:
    found = [e.t_us for e in events if e.kind == kind]
    if len(found) != 1:
        raise HarnessError(f"expected exactly one {kind} event, got {len(found)}")
    return found[0]


def capture_window(
    trace: list[PowerSample],
    T_s: int,
    T_e: int,
    clock_map: ClockMap | None = None,
) -> list[PowerSample]:
    """First sample strictly after T_s through the last sample at or before T_e."""
    if T_s >= T_e:
        raise ValueError("T_s must precede T_e")
    clock_map = clock_map or ClockMap.identity()
    m_s, m_e = clock_map(T_s), clock_map(T_e)
    t = np.fromiter((s.t_us for s in trace), dtype=np.float64, count=len(trace))
    first = int(np.searchsorted(t, m_s, side="right"))
    last = int(np.searchsorted(t, m_e, side="right"))
    if last <= first:
        raise HarnessError("no samples in inference window")
    return trace[first:last]


def compute_energy(window: list[PowerSample], T_s: int, T_e: int) -> dict:
    if not window:
        raise HarnessError("no samples in inference window")
    i_avg = float(np.mean([s.current_mA for s in window]))
    v_avg = float(np.mean([s.voltage_mV for s in window]))
    power = i_avg * v_avg * 1e-3
    return {
        "avg_current_mA": i_avg,
        "avg_voltage_mV": v_avg,
        "avg_power_mW": power,
        "energy_mJ": power * (T_e - T_s) / 1e6,
        "sample_count": len(window),
    }


def integrate_energy(window: list[PowerSample], sample_rate_hz: int) -> float:
    """Sample-wise sum of I*V*dt in mJ (diagnostic only)."""
    dt = 1.0 / sample_rate_hz
    return float(sum(s.current_mA * s.voltage_mV * 1e-3 for s in window) * dt)


def measure(
    device: VirtualDevice,
    arch: Architecture,
    run_seed: int = 0,
    input: TensorShape = DEFAULT_INPUT,
) -> MeasurementResult:
    run = run_inference(device, arch, run_seed, input)
    t_s, t_e = _event(run.events, "start"), _event(run.events, "stop")
    window = capture_window(run.trace, t_s, t_e, ClockMap.from_triggers(run.events, run.triggers))
    frag = compute_energy(window, t_s, t_e)
    acc = accuracy_field(device, embed(arch))
    if device.accuracy_noise:
        acc += _rng(device.seed, run_seed, arch.id, "accuracy").normal(0.0, device.accuracy_noise)
    return MeasurementResult(
        arch_id=arch.id,
        T_s_us=t_s,
        T_e_us=t_e,
        avg_power_mW=frag["avg_power_mW"],
        energy_mJ=frag["energy_mJ"],
        sample_count=frag["sample_count"],
        accuracy=float(min(max(acc, 0.0), 1.0)),
    )


# ---------------------------------------------------------------------------
# trace / event files
# ---------------------------------------------------------------------------

def write_trace(path, trace: list[PowerSample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_us", "current_mA", "voltage_mV"])
        for s in trace:
            w.writerow([s.t_us, repr(s.current_mA), repr(s.voltage_mV)])


def read_trace(path) -> list[PowerSample]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if r.fieldnames != ["t_us", "current_mA", "voltage_mV"]:
            raise ValueError(f"bad trace header {r.fieldnames}")
        trace = [PowerSample(int(row["t_us"]), float(row["current_mA"]), float(row["voltage_mV"])) for row in r]
    if any(b.t_us <= a.t_us for a, b in zip(trace, trace[1:])):
        raise ValueError("trace timestamps must be strictly increasing")
    return trace


def write_events(path, events: list[InferenceEvent]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "t_us"])
        for e in events:
            w.writerow([e.kind, e.t_us])


def read_events(path) -> list[InferenceEvent]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        events = [InferenceEvent(row["kind"], int(row["t_us"])) for row in r]
    if [e.kind for e in events] != ["start", "stop"] or events[0].t_us >= events[1].t_us:
        raise ValueError("event file must hold one start followed by one later stop")
    return events

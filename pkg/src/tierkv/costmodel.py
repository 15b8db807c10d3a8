"""Analytical PCIe transfer, overhead and KV-memory projections.

Latency model for one transfer of ``n`` tokens in a direction::

    latency(n) = fixed + n * token_bytes / bw_eff(n),  bw_eff(n) = bw * min(1, n / saturation)

so latency is flat below the saturation size and exactly linear above it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

GPU_TO_CPU = "gpu_to_cpu"
CPU_TO_GPU = "cpu_to_gpu"
DIRECTIONS = (GPU_TO_CPU, CPU_TO_GPU)
GIB = 1024 ** 3


@dataclass(frozen=True)
class ModelShape:
    n_layers: int
    n_kv_heads: int
    head_dim: int
    bytes_per_element: int = 2
    name: str = ""

    def __post_init__(self):
        if min(self.n_layers, self.n_kv_heads, self.head_dim, self.bytes_per_element) < 1:
            raise ValueError(f"invalid model shape {self}")


# 28 layers x 28 heads x 128, fp16 KV: the prototype the latency points were measured on
PROTOTYPE_SHAPE = ModelShape(28, 28, 128, 2, "7B")


def per_token_kv_bytes(shape: ModelShape) -> int:
    """Keys and values for one token across all layers: 2 * L * heads * d * bytes."""
    return 2 * shape.n_layers * shape.n_kv_heads * shape.head_dim * shape.bytes_per_element


@dataclass(frozen=True)
class TransferModelParams:
    bandwidth: Mapping[str, float]       # bytes / second at saturation
    fixed_latency: Mapping[str, float]   # seconds per transfer
    saturation_tokens: int = 64
    source: str = "manual"

    def __post_init__(self):
        for d in DIRECTIONS:
            if self.bandwidth[d] <= 0:
                raise ValueError(f"bandwidth for {d} must be positive")
            if self.fixed_latency[d] < 0:
                raise ValueError(f"fixed latency for {d} must be non-negative")
        if self.saturation_tokens < 1:
            raise ValueError("saturation_tokens must be >= 1")


# quoted prototype latencies: (tokens, seconds)
PUBLISHED_CALIBRATION: dict[str, list[tuple[int, float]]] = {
    GPU_TO_CPU: [(64, 1.1e-3), (600, 8.6e-3)],
    CPU_TO_GPU: [(64, 1.5e-3), (600, 13.1e-3)],
}
NOMINAL_BANDWIDTH = {GPU_TO_CPU: 22e9, CPU_TO_GPU: 15e9}


def nominal_params() -> TransferModelParams:
    """The quoted saturation bandwidths with zero fixed cost."""
    return TransferModelParams(dict(NOMINAL_BANDWIDTH), {d: 0.0 for d in DIRECTIONS}, source="nominal")


def calibrate(
    points: Mapping[str, Sequence[tuple[float, float]]] = PUBLISHED_CALIBRATION,
    shape: ModelShape = PROTOTYPE_SHAPE,
    saturation_tokens: int = 64,
) -> TransferModelParams:
    """Least-squares line through (tokens, seconds) per direction.

    All points must be at or above ``saturation_tokens`` (the linear regime).
    """
    tb = per_token_kv_bytes(shape)
    bw, fixed = {}, {}
    for d in DIRECTIONS:
        pts = list(points.get(d, ()))
        if len(pts) < 2:
            raise ValueError(f"missing calibration: need >= 2 points for {d}")
        if any(n < saturation_tokens for n, _ in pts):
            raise ValueError(f"calibration points for {d} must be >= {saturation_tokens} tokens")
        xs = [float(n) for n, _ in pts]
        ys = [float(s) for _, s in pts]
        mx, my = sum(xs) / len(xs), sum(ys) / len(ys)
        sxx = sum((x - mx) ** 2 for x in xs)
        if sxx == 0:
            raise ValueError(f"calibration points for {d} need distinct token counts")
        slope = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sxx
        if slope <= 0:
            raise ValueError(f"calibration for {d} implies non-positive bandwidth")
        bw[d] = tb / slope
        fixed[d] = max(0.0, my - slope * mx)
    return TransferModelParams(bw, fixed, saturation_tokens, source="calibrated")


def transfer_latency(tokens: int, shape: ModelShape, direction: str, params: TransferModelParams) -> float:
    """Seconds to move ``tokens`` tokens of KV in one transfer."""
    if tokens < 0:
        raise ValueError("tokens must be non-negative")
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    fixed = params.fixed_latency[direction]
    if tokens == 0:
        return fixed
    # below saturation the effective bandwidth scales with size, so the cost is flat
    billed = max(tokens, params.saturation_tokens)
    return fixed + billed * per_token_kv_bytes(shape) / params.bandwidth[direction]


def effective_bandwidth(tokens: int, shape: ModelShape, direction: str, params: TransferModelParams) -> float:
    """Achieved bytes/second including the fixed cost."""
    if tokens <= 0:
        return 0.0
    return tokens * per_token_kv_bytes(shape) / transfer_latency(tokens, shape, direction, params)


@dataclass(frozen=True)
class TransferTotals:
    offload_seconds: float
    prefetch_seconds: float
    compute_seconds: float
    offload_transfers: int
    prefetch_transfers: int

    @property
    def transfer_seconds(self) -> float:
        return self.offload_seconds + self.prefetch_seconds

    @property
    def overhead(self) -> float:
        den = self.transfer_seconds + self.compute_seconds
        if den <= 0:
            raise ValueError("zero denominator: no compute and no transfers")
        return self.transfer_seconds / den


def transfer_totals(
    schedule: Iterable,
    per_step_compute: float,
    shape: ModelShape = PROTOTYPE_SHAPE,
    params: TransferModelParams | None = None,
    prefetch: str = "full",
) -> TransferTotals:
    """Sum transfer time over a per-step schedule.

    Each schedule entry needs ``offload``, ``prefetch`` and ``differential``
    token counts. ``prefetch="full"`` reads the whole host-resident set back
    every step; ``"differential"`` only moves what the staging buffer lacks.
    Steps with nothing to move issue no transfer.
    """
    if prefetch not in ("full", "differential"):
        raise ValueError("prefetch must be 'full' or 'differential'")
    params = params or calibrate()
    off = pre = 0.0
    n_off = n_pre = n_steps = 0
    for s in schedule:
        n_steps += 1
        if s.offload:
            off += transfer_latency(s.offload, shape, GPU_TO_CPU, params)
            n_off += 1
        n = s.prefetch if prefetch == "full" else s.differential
        if n:
            pre += transfer_latency(n, shape, CPU_TO_GPU, params)
            n_pre += 1
    return TransferTotals(off, pre, per_step_compute * n_steps, n_off, n_pre)


def overhead_fraction(
    schedule: Iterable,
    per_step_compute: float,
    shape: ModelShape = PROTOTYPE_SHAPE,
    params: TransferModelParams | None = None,
    prefetch: str = "full",
) -> float:
    """Transfer time / (transfer time + compute time)."""
    return transfer_totals(schedule, per_step_compute, shape, params, prefetch).overhead


@dataclass(frozen=True)
class DeploymentScenario:
    name: str
    shape: ModelShape
    batch: int
    seq_len: int
    weight_bytes: float
    offload_fraction: float = 0.6
    reference: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.batch < 0 or self.seq_len < 0 or self.weight_bytes < 0:
            raise ValueError("batch, seq_len and weight_bytes must be non-negative")
        if not 0.0 <= self.offload_fraction <= 1.0:
            raise ValueError("offload_fraction must be in [0, 1]")


@dataclass(frozen=True)
class Projection:
    kv_bytes: float
    kv_fraction: float
    savings_bytes: float


def scaling_projection(sc: DeploymentScenario) -> Projection:
    kv = float(per_token_kv_bytes(sc.shape) * sc.seq_len * sc.batch)
    total = kv + sc.weight_bytes
    frac = kv / total if total > 0 else 0.0
    return Projection(kv, frac, sc.offload_fraction * kv)


def _shape(layers, heads, name):
    return ModelShape(layers, heads, 128, 2, name)


def published_scenarios(head_reading: str = "n_heads") -> list[DeploymentScenario]:
    """The published projection rows, with their reported values attached.

    ``head_reading`` picks the head count plugged into the per-token formula:
    ``"n_heads"`` (attention heads, 28 / 64) or ``"n_kv_heads"`` (4 / 8 under GQA).
    The 70B shape (80 layers, 64 heads, 8 KV heads) is an assumption.
    """
    if head_reading not in ("n_heads", "n_kv_heads"):
        raise ValueError("head_reading must be 'n_heads' or 'n_kv_heads'")
    kv7 = 28 if head_reading == "n_heads" else 4
    kv70 = 64 if head_reading == "n_heads" else 8
    m7, m70 = _shape(28, kv7, "7B"), _shape(80, kv70, "70B")
    rows = [
        ("7B fp16 bs=1 2K", m7, 1, 2048, 14, 0.5, 0.03, 0.3),
        ("7B fp16 bs=8 2K", m7, 8, 2048, 14, 3.8, 0.21, 2.3),
        ("7B fp16 bs=1 16K", m7, 1, 16384, 14, 3.8, 0.21, 2.3),
        ("7B int4 bs=8 2K", m7, 8, 2048, 3.5, 3.8, 0.52, 2.3),
        ("70B fp16 bs=8 4K", m70, 8, 4096, 140, 80, 0.36, 48),
        ("70B int4 bs=8 4K", m70, 8, 4096, 35, 80, 0.70, 48),
    ]
    return [
        DeploymentScenario(name, shape, b, s, w * GIB, 0.6,
                           {"kv_gib": kv, "kv_fraction": frac, "savings_gib": sav})
        for name, shape, b, s, w, kv, frac, sav in rows
    ]

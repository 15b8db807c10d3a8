"""Synthetic attention workloads.

An :class:`AttentionTrace` holds, for every decode step ``t = 1..T``, the
full-cache attention weights of every (layer, head) over positions
``0 .. P + t - 1``, plus the key and value tensors of all ``P + T`` positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import attention_weights
from .scoring import ScoreVector, StepAttention, update_cumulative


@dataclass(frozen=True)
class TraceShape:
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 8
    prompt_len: int = 32
    chain_len: int = 512

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.head_dim, self.chain_len) < 1 or self.prompt_len < 0:
            raise ValueError(f"invalid trace shape {self}")

    @property
    def n_positions(self) -> int:
        return self.prompt_len + self.chain_len

    def step_len(self, t: int) -> int:
        return self.prompt_len + t


@dataclass
class AttentionTrace:
    shape: TraceShape
    weights: list[np.ndarray]  # weights[t-1] has shape (L, H, P + t)
    keys: np.ndarray           # (L, H, P + T, d)
    values: np.ndarray         # (L, H, P + T, d)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = self.shape
        if len(self.weights) != s.chain_len:
            raise ValueError(f"expected {s.chain_len} steps, got {len(self.weights)}")
        for t, w in enumerate(self.weights, start=1):
            if w.shape != (s.n_layers, s.n_heads, s.step_len(t)):
                raise ValueError(f"step {t}: weights shape {w.shape} does not match {s}")
        kv_shape = (s.n_layers, s.n_heads, s.n_positions, s.head_dim)
        for name in ("keys", "values"):
            if getattr(self, name).shape != kv_shape:
                raise ValueError(f"{name} shape {getattr(self, name).shape} != {kv_shape}")

    def step_weights(self, t: int) -> np.ndarray:
        return self.weights[t - 1]

    def nan_layers(self, t: int) -> frozenset:
        w = self.weights[t - 1]
        return frozenset(int(l) for l in np.flatnonzero(np.isnan(w).any(axis=(1, 2))))

    def step_attention(self, t: int, positions: np.ndarray | None = None) -> StepAttention:
        """Step ``t`` restricted to ``positions`` and renormalized per (layer, head)."""
        w = self.weights[t - 1]
        if positions is None:
            positions = np.arange(w.shape[2])
        return StepAttention(positions, renormalize(w[:, :, positions]), self.nan_layers(t), step=t)

    def cumulative_scores(self) -> ScoreVector:
        """Cumulative importance with the full cache visible at every step."""
        s = ScoreVector(np.zeros(self.shape.n_positions))
        for t in range(1, self.shape.chain_len + 1):
            s = update_cumulative(s, self.step_attention(t))
        return s


def renormalize(w: np.ndarray) -> np.ndarray:
    """Rescale each (layer, head) row to sum to 1, summing in position order."""
    z = np.cumsum(w, axis=-1)[..., -1:]
    return w / z


def measure_concentration(scores, quantile: float = 0.2) -> float:
    """Share of total importance held by the top ceil(quantile * n) positions."""
    s = scores.s if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty score vector")
    if not 0.0 < quantile <= 1.0:
        raise ValueError("quantile must be in (0, 1]")
    total = float(s.sum())
    if total <= 0.0:
        raise ValueError("zero total mass")
    k = max(1, math.ceil(quantile * s.size - 1e-9))
    return float(np.sort(s)[::-1][:k].sum() / total)


# --- long-tail generator -------------------------------------------------

NOISE_SIGMA = 0.5
MAX_EXPONENT = 6.0


class _LongTail:
    """Per-step attention proportional to rank_i^-a times log-normal noise.

    Each position gets a random preference rank; the noise is drawn once, so
    the realized concentration is a deterministic, continuous function of the
    exponent ``a``.
    """

    def __init__(self, shape: TraceShape, rng: np.random.Generator, nan_layers=(), nan_from_step=1):
        self.shape = shape
        n = shape.n_positions
        self.log_rank = np.log(rng.permutation(n) + 1.0)
        self.noise = [
            np.exp(NOISE_SIGMA * rng.standard_normal((shape.n_layers, shape.n_heads, shape.step_len(t))))
            for t in range(1, shape.chain_len + 1)
        ]
        self.nan_layers = tuple(nan_layers)
        self.nan_from_step = nan_from_step

    def step(self, t: int, a: float) -> np.ndarray:
        n = self.shape.step_len(t)
        lw = -a * self.log_rank[:n]
        w = self.noise[t - 1] * np.exp(lw - lw.max())
        w = renormalize(w)
        if self.nan_layers and t >= self.nan_from_step:
            w = w.copy()
            w[list(self.nan_layers)] = np.nan
        return w

    def share(self, a: float, quantile: float = 0.2) -> float:
        s = np.zeros(self.shape.n_positions)
        valid = [l for l in range(self.shape.n_layers)]
        for t in range(1, self.shape.chain_len + 1):
            w = self.step(t, a)
            bad = self.nan_layers if t >= self.nan_from_step else ()
            use = [l for l in valid if l not in bad]
            s[: w.shape[2]] += w[use].mean(axis=1).mean(axis=0)
        return measure_concentration(s, quantile)


def solve_exponent(gen: _LongTail, target: float, tol: float = 1e-3, max_iter: int = 60) -> float:
    """Bisection for the exponent whose realized top-20% share equals ``target``."""
    lo, hi = 0.0, MAX_EXPONENT
    s_lo, s_hi = gen.share(lo), gen.share(hi)
    if target < s_lo - 0.01 or target > s_hi + 0.01:
        raise ValueError(
            f"top-20% target {target:.3f} unreachable for T={gen.shape.chain_len}: "
            f"achievable range is [{s_lo:.3f}, {s_hi:.3f}]"
        )
    if target <= s_lo:
        return lo
    if target >= s_hi:
        return hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        s = gen.share(mid)
        if abs(s - target) <= tol:
            return mid
        if s < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gen_longtail_trace(
    shape: TraceShape = TraceShape(),
    top20_target: float = 0.565,
    seed: int = 0,
    nan_layers=(),
    nan_from_step: int = 1,
) -> AttentionTrace:
    """Long-tail attention trace calibrated to a top-20% cumulative-mass share.

    Keys and values are i.i.d. standard normal. ``nan_layers`` emulate layers
    whose attention overflowed from ``nan_from_step`` on.
    """
    if not 0.2 < top20_target < 1.0:
        raise ValueError("top20_target must lie in (0.2, 1)")
    if len(nan_layers) >= shape.n_layers:
        raise ValueError("at least one layer must stay finite")
    rng = np.random.default_rng(seed)
    gen = _LongTail(shape, rng, nan_layers, nan_from_step)
    a = solve_exponent(gen, top20_target)
    kv = (shape.n_layers, shape.n_heads, shape.n_positions, shape.head_dim)
    keys = rng.standard_normal(kv)
    values = rng.standard_normal(kv)
    weights = [gen.step(t, a) for t in range(1, shape.chain_len + 1)]
    meta = {"kind": "longtail", "seed": seed, "exponent": a, "top20_target": top20_target,
            "top20_share": gen.share(a)}
    return AttentionTrace(shape, weights, keys, values, meta)


# --- needle-recall task --------------------------------------------------

FILLER_FRACTION = 0.35
HEAVY_FRACTION = 0.10
FILLER_WEIGHT = 0.05
HEAVY_WEIGHT = 3.0
SINK_WEIGHT = 20.0
QUERY_LOGIT = 14.0
DISTRACTOR_KEY_SCALE = 0.1
RECALL_TOLERANCE = 0.1


@dataclass
class RecallTask:
    """Needles to retrieve and the steps at which each one is queried."""

    needles: list[int]
    query_steps: list[int]  # query_steps[j] retrieves needles[j]
    payloads: np.ndarray    # (n_needles, L, H, d)
    params: dict = field(default_factory=dict)

    def schedule(self) -> dict[int, int]:
        return dict(zip(self.query_steps, self.needles))


def recall_error(output: np.ndarray, payload: np.ndarray) -> float:
    """Relative error of a stacked (L, H, d) output against the needle payload."""
    return float(np.linalg.norm(output - payload) / np.linalg.norm(payload))


def gen_recall_task(
    shape: TraceShape = TraceShape(),
    n_needles: int = 4,
    seed: int = 0,
    sink_size: int = 4,
    window_size: int = 128,
) -> tuple[RecallTask, AttentionTrace]:
    """Needle-recall workload.

    Reasoning positions are filler (barely attended), regular, or heavy
    distractors. Needles are regular positions early in the chain; late in the
    chain a query step aims almost all of its attention at one needle, whose
    value vectors are the payload to recover. Keys and values are returned
    inside the trace.
    """
    P, T, d = shape.prompt_len, shape.chain_len, shape.head_dim
    L, H, N = shape.n_layers, shape.n_heads, shape.n_positions
    if n_needles < 1 or n_needles > d:
        raise ValueError(f"need 1 <= n_needles <= head_dim ({d})")
    rng = np.random.default_rng(seed)

    first = P + sink_size
    span = min(T - window_size, T // 4)
    q_lo = T - 64
    if span < n_needles or q_lo <= 0:
        raise ValueError("infeasible geometry: chain too short for needles outside the window")
    needles = sorted(int(p) for p in first + rng.choice(span - sink_size, n_needles, replace=False))
    q_steps = [int(q_lo + 1 + j * (63 // n_needles)) for j in range(n_needles)]
    for pos, tq in zip(needles, q_steps):
        if pos >= P + tq - window_size or pos < first:
            raise ValueError("infeasible geometry: a needle would sit inside a protected region")

    # position classes for the background profile
    cls_weight = np.ones(N)
    reasoning = np.arange(first, N)
    free = np.setdiff1d(reasoning, needles)
    pick = rng.permutation(free)
    n_fill = int(FILLER_FRACTION * len(free))
    n_heavy = int(HEAVY_FRACTION * len(free))
    cls_weight[pick[:n_fill]] = FILLER_WEIGHT
    cls_weight[pick[n_fill:n_fill + n_heavy]] = HEAVY_WEIGHT
    cls_weight[0] = SINK_WEIGHT

    # keys: small random background, needles on orthonormal directions
    basis = np.linalg.qr(rng.standard_normal((d, d)))[0]
    keys = DISTRACTOR_KEY_SCALE * rng.standard_normal((L, H, N, d))
    values = rng.standard_normal((L, H, N, d))
    for j, pos in enumerate(needles):
        keys[:, :, pos, :] = basis[:, j]
    queries = {tq: QUERY_LOGIT * math.sqrt(d) * basis[:, j] for j, tq in enumerate(q_steps)}

    weights = []
    for t in range(1, T + 1):
        n = P + t
        if t in queries:
            w = np.empty((L, H, n))
            for l in range(L):
                for h in range(H):
                    w[l, h] = attention_weights(queries[t], keys[l, h, :n])
        else:
            w = cls_weight[:n] * np.exp(0.5 * rng.standard_normal((L, H, n)))
            w = renormalize(w)
        weights.append(w)

    payloads = np.stack([values[:, :, p, :] for p in needles])
    task = RecallTask(needles, q_steps, payloads,
                      {"seed": seed, "n_needles": n_needles, "sink_size": sink_size,
                       "window_size": window_size})
    trace = AttentionTrace(shape, weights, keys, values, {"kind": "recall", "seed": seed})
    return task, trace

"""Four-tier placement state machine.

Tiers: T0 (HBM), T1 (host memory, full precision), T2 (host memory, int8),
T3 (evicted, gone for good). Decode step ``t`` (1-based) sees cache positions
``0 .. prompt_len + t - 1``; tier management runs after the attention of every
step with ``t % manage_interval == 0``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable

import numpy as np

from .scoring import ScoreVector, StepAttention, eviction_order, update_cumulative

T0, T1, T2, T3 = 0, 1, 2, 3
TIER_NAMES = ("T0", "T1", "T2", "T3")
CENSUS_FIELDS = ["step", "t0", "t1", "t2", "t3", "visible_bytes", "cpu_bytes"]


def floor_frac(ratio: float, n: int) -> int:
    # guard against 0.29 * 100 == 28.999999999999996
    return int(math.floor(ratio * n + 1e-9))


@dataclass(frozen=True)
class HierarchyConfig:
    beta: float = 0.5
    evict_ratio: float = 0.05
    manage_interval: int = 64
    sink_size: int = 4
    window_size: int = 128
    prompt_len: int = 0
    t2_enabled: bool = False
    t2_fraction: float = 0.5
    t_max: int = 2048

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must be in (0, 1]")
        if not 0.0 <= self.evict_ratio < 1.0:
            raise ValueError("evict_ratio must be in [0, 1)")
        if self.manage_interval < 1 or self.t_max < 1:
            raise ValueError("manage_interval and t_max must be positive")
        if min(self.sink_size, self.window_size, self.prompt_len) < 0:
            raise ValueError("sink_size, window_size and prompt_len must be non-negative")
        if not 0.0 <= self.t2_fraction <= 1.0:
            raise ValueError("t2_fraction must be in [0, 1]")


@dataclass
class TierState:
    tier: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))
    cpu_store: frozenset = frozenset()
    staging: frozenset = frozenset()
    step: int = 0

    @property
    def n_positions(self) -> int:
        return len(self.tier)

    def grown(self, n: int) -> "TierState":
        """State covering ``n`` positions; new ones start in HBM."""
        if n <= len(self.tier):
            return self
        tier = np.zeros(n, dtype=np.int8)
        tier[: len(self.tier)] = self.tier
        return replace(self, tier=tier)

    def positions_in(self, *tiers: int) -> np.ndarray:
        return np.flatnonzero(np.isin(self.tier, tiers))

    def visible(self) -> np.ndarray:
        """Everything not evicted takes part in attention."""
        return np.flatnonzero(self.tier != T3)

    def counts(self) -> tuple[int, int, int, int]:
        c = np.bincount(self.tier, minlength=4)
        return int(c[0]), int(c[1]), int(c[2]), int(c[3])


@dataclass(frozen=True)
class TierCensus:
    step: int
    t0: int
    t1: int
    t2: int
    t3: int
    visible_bytes: int
    cpu_bytes: int

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CENSUS_FIELDS}


def census(state: TierState, token_bytes: int = 0, quantized_token_bytes: int | None = None) -> TierCensus:
    """Tier counts plus byte totals; T2 entries cost ``quantized_token_bytes`` off-GPU."""
    t0, t1, t2, t3 = state.counts()
    qb = token_bytes if quantized_token_bytes is None else quantized_token_bytes
    return TierCensus(
        step=state.step, t0=t0, t1=t1, t2=t2, t3=t3,
        visible_bytes=(t0 + t1 + t2) * token_bytes,
        cpu_bytes=t1 * token_bytes + t2 * qb,
    )


def write_census_csv(rows: Iterable[TierCensus], fh: IO[str]) -> None:
    w = csv.DictWriter(fh, fieldnames=CENSUS_FIELDS, lineterminator="\n")
    w.writeheader()
    for c in rows:
        w.writerow(c.row())


def protected_set(t: int, cfg: HierarchyConfig) -> np.ndarray:
    """Prompt, the first ``sink_size`` generated positions, and the last ``window_size``."""
    if t < 0:
        raise ValueError("step must be non-negative")
    n = cfg.prompt_len + t
    prompt = np.arange(min(cfg.prompt_len, n))
    sinks = np.arange(cfg.prompt_len, min(cfg.prompt_len + cfg.sink_size, n))
    window = np.arange(max(0, n - cfg.window_size), n)
    return np.union1d(np.union1d(prompt, sinks), window).astype(np.int64)


def assign_tiers(scores: ScoreVector, protected: np.ndarray, cfg: HierarchyConfig, state: TierState) -> TierState:
    """Re-partition the live, unprotected positions into T3 / T1(T2) / T0.

    Eviction takes the bottom ``floor(r*|U|)`` by score, then the top
    ``floor(beta * survivors)`` stay in HBM. Evicted positions never come back.
    """
    live = state.visible()
    if len(scores) < state.n_positions:
        raise ValueError(f"scores cover {len(scores)} positions, state has {state.n_positions}")
    if np.any(~np.isfinite(scores.s[live])):
        raise ValueError("scores must be finite for every live position")
    prot = np.intersect1d(np.asarray(protected, dtype=np.int64), live)
    cand = np.setdiff1d(live, prot)
    order = eviction_order(scores.s, cand)
    n_evict = floor_frac(cfg.evict_ratio, len(order))
    survivors = order[n_evict:]
    n_hbm = floor_frac(cfg.beta, len(survivors))
    offloaded = survivors[: len(survivors) - n_hbm]
    hbm = survivors[len(survivors) - n_hbm:]

    tier = state.tier.copy()
    tier[order[:n_evict]] = T3
    tier[prot] = T0
    tier[hbm] = T0
    if cfg.t2_enabled:
        n_t2 = floor_frac(cfg.t2_fraction, len(offloaded))
        tier[offloaded[:n_t2]] = T2
        tier[offloaded[n_t2:]] = T1
    else:
        tier[offloaded] = T1
    store = frozenset(int(p) for p in offloaded)
    return replace(state, tier=tier, cpu_store=store, staging=state.staging & store)


def differential_prefetch(state: TierState, current_t1: Iterable[int]) -> tuple[frozenset, TierState]:
    """Positions that must cross to the GPU staging buffer; the buffer then mirrors ``current_t1``."""
    cur = frozenset(int(p) for p in current_t1)
    return cur - state.staging, replace(state, staging=cur)


@dataclass
class StepOutcome:
    state: TierState
    scores: ScoreVector
    prefetch: frozenset
    offload: frozenset
    transfer: frozenset
    census: TierCensus
    managed: bool


def step(
    state: TierState,
    scores: ScoreVector,
    step_attn: StepAttention,
    cfg: HierarchyConfig,
    token_bytes: int = 0,
    quantized_token_bytes: int | None = None,
    scorer=update_cumulative,
    ranker=None,
) -> StepOutcome:
    """One decode step: prefetch, score update, tier management on interval boundaries.

    ``state`` must already cover this step's positions (see :meth:`TierState.grown`)
    and ``step_attn`` must be computed over exactly ``state.visible()``.
    ``ranker(scores, state)`` may replace the cumulative scores used for
    placement (ablation scorers); it does not alter the running scores.
    """
    t = state.step + 1
    if t > cfg.t_max:
        raise ValueError(f"step {t} exceeds t_max={cfg.t_max}")
    if not np.array_equal(step_attn.positions, state.visible()):
        raise ValueError("step attention must cover exactly the non-evicted positions")
    prefetch = state.cpu_store
    transfer, st = differential_prefetch(state, prefetch)
    new_scores = scorer(scores, step_attn)
    st = replace(st, step=t)
    offload: frozenset = frozenset()
    managed = t % cfg.manage_interval == 0
    if managed:
        before = st.cpu_store
        ranking = new_scores if ranker is None else ranker(new_scores, st)
        st = assign_tiers(ranking, protected_set(t, cfg), cfg, st)
        offload = st.cpu_store - before
    return StepOutcome(
        state=st, scores=new_scores, prefetch=prefetch, offload=offload, transfer=transfer,
        census=census(st, token_bytes, quantized_token_bytes), managed=managed,
    )

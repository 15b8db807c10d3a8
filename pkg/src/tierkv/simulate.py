"""Replay an attention trace under the hierarchy or an eviction baseline."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .attention import quantize_rows
from .baselines import BudgetPolicy, h2o_evict, random_evict, streaming_evict
from .scoring import (
    RkvParams,
    ScoreVector,
    neighbor_redundancy,
    representative_keys,
    score_rkv,
    update_cumulative,
    value_norms,
)
from .tiers import T2, HierarchyConfig, TierCensus, TierState, protected_set, step
from .workload import RECALL_TOLERANCE, AttentionTrace, RecallTask, recall_error

SCORERS = ("cumulative", "vatp", "redundancy", "combined", "rkv")


@dataclass(frozen=True)
class StepTransfer:
    step: int
    offload: int       # GPU -> CPU tokens written at a manage event
    prefetch: int      # host-resident tokens read back for this step (full prefetch)
    differential: int  # tokens not already in the GPU staging buffer


@dataclass(frozen=True)
class Retrieval:
    step: int
    needle: int
    error: float

    @property
    def ok(self) -> bool:
        return bool(self.error <= RECALL_TOLERANCE)


@dataclass
class RunResult:
    label: str
    outputs: list[np.ndarray] | None = None
    census: list[TierCensus] = field(default_factory=list)
    schedule: list[StepTransfer] = field(default_factory=list)
    retrievals: list[Retrieval] = field(default_factory=list)
    evicted: list[int] = field(default_factory=list)   # cumulative evicted count per step
    visible: list[int] = field(default_factory=list)   # attention set size per step
    hbm: list[int] = field(default_factory=list)       # HBM-resident tokens per step
    visible_sets: list[np.ndarray] | None = None       # attention positions per step
    scores: ScoreVector | None = None
    final_evicted: frozenset = frozenset()

    @property
    def recall(self) -> float:
        if not self.retrievals:
            return float("nan")
        return sum(r.ok for r in self.retrievals) / len(self.retrievals)

    @property
    def successes(self) -> int:
        return sum(r.ok for r in self.retrievals)

    @property
    def peak_hbm(self) -> int:
        return max(self.hbm) if self.hbm else 0


def head_outputs(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Per (layer, head) weighted value sums, accumulated in position order."""
    return np.cumsum(weights[..., None] * values, axis=2)[:, :, -1, :]


def _ranker(kind: str, trace: AttentionTrace, recent: deque, rkv: RkvParams) -> Callable:
    if kind not in SCORERS:
        raise ValueError(f"unknown scorer {kind!r}; choose from {SCORERS}")
    if kind == "cumulative":
        return lambda scores, state: scores
    norms = value_norms(trace.values)
    rkeys = representative_keys(trace.keys)

    def rank(scores: ScoreVector, state: TierState) -> ScoreVector:
        live = state.visible()
        s = scores.extended(state.n_positions).s.copy()
        if kind == "vatp":
            s[live] = s[live] * norms[live]
        elif kind == "redundancy":
            s[live] = s[live] - neighbor_redundancy(rkeys[live])
        elif kind == "combined":
            s[live] = s[live] * norms[live] - neighbor_redundancy(rkeys[live])
        elif kind == "rkv":
            z = score_rkv(list(recent), rkeys[live], rkv, positions=live)
            s[live] = z.s[live]
        return ScoreVector(s, scores.last_updated_step)

    return rank


def run_hierarchy(
    trace: AttentionTrace,
    cfg: HierarchyConfig,
    task: RecallTask | None = None,
    keep_outputs: bool = False,
    token_bytes: int = 0,
    scorer: str = "cumulative",
    rkv: RkvParams = RkvParams(),
    label: str = "hierarchy",
) -> RunResult:
    shape = trace.shape
    if cfg.prompt_len != shape.prompt_len:
        raise ValueError(f"config prompt_len {cfg.prompt_len} != trace prompt_len {shape.prompt_len}")
    steps = min(shape.chain_len, cfg.t_max)
    res = RunResult(label=label, outputs=[] if keep_outputs else None,
                    visible_sets=[] if keep_outputs else None)
    recent: deque = deque(maxlen=rkv.alpha_window)
    rank = _ranker(scorer, trace, recent, rkv)
    schedule = task.schedule() if task else {}
    qbytes = token_bytes // 2 if token_bytes else 0  # fp16 -> int8 payload
    values = trace.values
    quantized = False
    state, scores = TierState(), ScoreVector()
    for t in range(1, steps + 1):
        state = state.grown(shape.step_len(t))
        vis = state.visible()
        sa = trace.step_attention(t, vis)
        recent.append(sa)
        out = head_outputs(sa.weights, values[:, :, vis, :])
        if keep_outputs:
            res.outputs.append(out)
            res.visible_sets.append(vis)
        if t in schedule:
            j = task.needles.index(schedule[t])
            res.retrievals.append(Retrieval(t, schedule[t], recall_error(out, task.payloads[j])))
        before_t2 = state.tier == T2
        oc = step(state, scores, sa, cfg, token_bytes, qbytes, ranker=rank)
        state, scores = oc.state, oc.scores
        if cfg.t2_enabled and oc.managed:
            fresh = np.flatnonzero((state.tier[: len(before_t2)] == T2) & ~before_t2)
            if fresh.size:
                if not quantized:
                    values, quantized = values.copy(), True
                values[:, :, fresh, :] = quantize_rows(values[:, :, fresh, :])
        res.census.append(oc.census)
        res.schedule.append(StepTransfer(t, len(oc.offload), len(oc.prefetch), len(oc.transfer)))
        res.evicted.append(oc.census.t3)
        res.visible.append(len(vis))
        res.hbm.append(oc.census.t0)
    res.scores = scores
    res.final_evicted = frozenset(int(p) for p in np.flatnonzero(state.tier == 3))
    return res


def run_baseline(
    trace: AttentionTrace,
    policy: BudgetPolicy,
    sink_size: int = 4,
    window_size: int = 128,
    task: RecallTask | None = None,
    keep_outputs: bool = False,
    label: str | None = None,
) -> RunResult:
    """Evict down to the budget before every step's attention; evictions are permanent."""
    shape = trace.shape
    budget = policy.tokens(shape.n_positions)
    res = RunResult(label=label or policy.kind, outputs=[] if keep_outputs else None)
    schedule = task.schedule() if task else {}
    alive = np.arange(0, dtype=np.int64)
    scores = ScoreVector()
    prev_n = 0
    for t in range(1, shape.chain_len + 1):
        n = shape.step_len(t)
        alive = np.concatenate([alive, np.arange(prev_n, n)])
        prev_n = n
        if len(alive) > budget:
            if policy.kind == "streaming":
                alive = streaming_evict(n, budget, sink_size, alive)
            elif policy.kind == "h2o":
                alive = h2o_evict(scores, n, budget, window_size, alive)
            else:
                alive = random_evict(n, budget, (policy.rng_seed, t), sink_size, window_size, alive)
        sa = trace.step_attention(t, alive)
        out = head_outputs(sa.weights, trace.values[:, :, alive, :])
        if keep_outputs:
            res.outputs.append(out)
        if t in schedule:
            j = task.needles.index(schedule[t])
            res.retrievals.append(Retrieval(t, schedule[t], recall_error(out, task.payloads[j])))
        scores = update_cumulative(scores, sa)
        res.evicted.append(n - len(alive))
        res.visible.append(len(alive))
        res.hbm.append(len(alive))
    res.scores = scores
    res.final_evicted = frozenset(set(range(shape.n_positions)) - set(int(p) for p in alive))
    return res


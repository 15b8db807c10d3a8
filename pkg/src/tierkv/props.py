"""Invariant suite run by ``tierkv validate-props``."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import eviction_error_bound
from .simulate import RunResult, run_hierarchy
from .tiers import HierarchyConfig, floor_frac, protected_set
from .workload import AttentionTrace, TraceShape, gen_longtail_trace, measure_concentration

FAULTS = ("bound-renormalized",)
PROPERTY_NAMES = (
    "partition_equality", "bound_soundness", "eviction_permanence", "protection",
    "census_conservation", "placement_budget", "concentration_calibration",
)


@dataclass(frozen=True)
class PropsConfig:
    shape: TraceShape = TraceShape()
    seed: int = 0
    betas: tuple[float, ...] = (0.3, 0.5, 0.7)
    evict_ratio: float = 0.1
    bound_instances: int = 1000
    top20_target: float = 0.565
    hierarchy: HierarchyConfig = field(default_factory=HierarchyConfig)

    def __post_init__(self):
        if len(self.betas) < 2:
            raise ValueError("need at least two beta values to compare")
        if self.bound_instances < 1:
            raise ValueError("bound_instances must be positive")


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    checked: int
    detail: str = ""

    def row(self) -> dict:
        return {"property": self.name, "status": "pass" if self.passed else "fail",
                "checked": self.checked, "detail": self.detail}


def _result(name: str, failures: list[str], checked: int) -> PropertyResult:
    detail = failures[0] if failures else ""
    if len(failures) > 1:
        detail += f" (+{len(failures) - 1} more)"
    return PropertyResult(name, not failures, checked, detail)


# --- bound instances -------------------------------------------------------

@dataclass(frozen=True)
class BoundInstance:
    step: int
    layer: int
    head: int
    evicted: np.ndarray


def measure_bound(weights: np.ndarray, values: np.ndarray, evicted, renormalized: bool = False):
    """(measured error, bound) for one head with ``evicted`` positions dropped.

    ``renormalized=True`` feeds the survivor-renormalized weights to the bound,
    which is the misuse the negative control injects.
    """
    mask = np.ones(len(weights), dtype=bool)
    mask[np.asarray(evicted, dtype=np.int64)] = False
    exact = weights @ values
    kept = np.where(mask, weights, 0.0)
    kept = kept / kept.sum()
    approx = kept @ values
    err = float(np.linalg.norm(approx - exact))
    bound = eviction_error_bound(kept if renormalized else weights, values, evicted)
    return err, bound


def sample_bound_instances(trace: AttentionTrace, n: int, rng: np.random.Generator,
                           evicted_by_step: dict[int, np.ndarray] | None = None) -> list[BoundInstance]:
    """Half from recorded eviction sets (when given), the rest random nonempty proper subsets."""
    s = trace.shape
    out: list[BoundInstance] = []
    recorded = sorted(t for t, e in (evicted_by_step or {}).items() if len(e))
    while len(out) < n:
        use_recorded = recorded and len(out) % 2 == 0
        t = int(rng.choice(recorded)) if use_recorded else int(rng.integers(1, s.chain_len + 1))
        nan = trace.nan_layers(t)
        layers = [l for l in range(s.n_layers) if l not in nan]
        l, h = int(rng.choice(layers)), int(rng.integers(s.n_heads))
        n_pos = s.step_len(t)
        if use_recorded:
            ev = evicted_by_step[t]
        else:
            if n_pos < 2:
                continue
            ev = np.sort(rng.choice(n_pos, int(rng.integers(1, n_pos)), replace=False))
        out.append(BoundInstance(t, l, h, ev))
    return out


def bound_violations(trace: AttentionTrace, instances: list[BoundInstance], renormalized: bool = False):
    bad = []
    for inst in instances:
        w = trace.step_weights(inst.step)[inst.layer, inst.head]
        v = trace.values[inst.layer, inst.head, : len(w)]
        err, bound = measure_bound(w, v, inst.evicted, renormalized)
        if err > bound:
            bad.append((inst, err, bound))
    return bad


# --- individual properties -------------------------------------------------

def evicted_by_step(run: RunResult, shape: TraceShape) -> dict[int, np.ndarray]:
    return {t: np.setdiff1d(np.arange(shape.step_len(t)), vis)
            for t, vis in enumerate(run.visible_sets, start=1)}


def check_partition_equality(runs: dict[float, RunResult]) -> PropertyResult:
    betas = sorted(runs)
    ref = runs[betas[0]]
    fails, checked = [], 0
    for b in betas[1:]:
        for t, (x, y) in enumerate(zip(ref.outputs, runs[b].outputs), start=1):
            checked += 1
            if x.tobytes() != y.tobytes():
                fails.append(f"beta={betas[0]} vs beta={b} differ at step {t}")
                break
    return _result("partition_equality", fails, checked)


def check_bound_soundness(trace: AttentionTrace, run: RunResult, n: int, seed: int,
                          fault: str | None = None) -> PropertyResult:
    rng = np.random.default_rng([seed, 4])
    inst = sample_bound_instances(trace, n, rng, evicted_by_step(run, trace.shape))
    bad = bound_violations(trace, inst, renormalized=fault == "bound-renormalized")
    fails = [f"step {i.step} layer {i.layer} head {i.head}: error {e:.6g} > bound {b:.6g}"
             for i, e, b in bad]
    return _result("bound_soundness", fails, len(inst))


def check_permanence(run: RunResult, shape: TraceShape) -> PropertyResult:
    fails, prev = [], np.zeros(0, dtype=np.int64)
    ev = evicted_by_step(run, shape)
    for t in sorted(ev):
        if not np.isin(prev, ev[t]).all():
            fails.append(f"step {t}: an evicted position became visible again")
        prev = ev[t]
    return _result("eviction_permanence", fails, len(ev))


def check_protection(run: RunResult, cfg: HierarchyConfig) -> PropertyResult:
    # visible_sets[t] is what step t+1 attends to, i.e. the state after step t
    fails = []
    for t in range(1, len(run.visible_sets)):
        missing = np.setdiff1d(protected_set(t, cfg), run.visible_sets[t])
        if missing.size:
            fails.append(f"step {t}: protected positions {missing[:5].tolist()} evicted")
    return _result("protection", fails, max(0, len(run.visible_sets) - 1))


def check_census(run: RunResult, shape: TraceShape) -> PropertyResult:
    fails = []
    for c in run.census:
        if c.t0 + c.t1 + c.t2 + c.t3 != shape.step_len(c.step):
            fails.append(f"step {c.step}: tiers sum to {c.t0 + c.t1 + c.t2 + c.t3}")
    for c, nxt in zip(run.census, run.schedule[1:]):
        if c.t1 + c.t2 != nxt.prefetch:
            fails.append(f"step {nxt.step}: prefetch {nxt.prefetch} != host-resident {c.t1 + c.t2}")
    return _result("census_conservation", fails, len(run.census))


def check_budget(run: RunResult, cfg: HierarchyConfig, shape: TraceShape) -> PropertyResult:
    fails, checked, t3_prev = [], 0, 0
    for c in run.census:
        if c.step % cfg.manage_interval == 0:
            checked += 1
            live = shape.step_len(c.step) - t3_prev
            cand = live - len(protected_set(c.step, cfg))
            n_ev = floor_frac(cfg.evict_ratio, cand)
            surv = cand - n_ev
            host = surv - floor_frac(cfg.beta, surv)
            if c.t3 - t3_prev != n_ev or c.t1 + c.t2 != host:
                fails.append(f"step {c.step}: evicted {c.t3 - t3_prev} (want {n_ev}), "
                             f"host {c.t1 + c.t2} (want {host})")
        t3_prev = c.t3
    return _result("placement_budget", fails, checked)


def check_concentration(trace: AttentionTrace, target: float, tol: float = 0.01) -> PropertyResult:
    share = measure_concentration(trace.cumulative_scores(), 0.2)
    fails = [] if abs(share - target) <= tol else [f"top-20% share {share:.4f}, target {target}"]
    return PropertyResult("concentration_calibration", not fails, 1,
                          fails[0] if fails else f"top-20% share {share:.4f}")


def run_suite(cfg: PropsConfig = PropsConfig(), fault: str | None = None) -> list[PropertyResult]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    trace = gen_longtail_trace(cfg.shape, cfg.top20_target, seed=cfg.seed)
    base = replace(cfg.hierarchy, evict_ratio=cfg.evict_ratio, prompt_len=cfg.shape.prompt_len)
    runs = {b: run_hierarchy(trace, replace(base, beta=b), keep_outputs=True) for b in cfg.betas}
    main_beta = sorted(cfg.betas)[len(cfg.betas) // 2]
    main, main_cfg = runs[main_beta], replace(base, beta=main_beta)
    return [
        check_partition_equality(runs),
        check_bound_soundness(trace, main, cfg.bound_instances, cfg.seed, fault),
        check_permanence(main, cfg.shape),
        check_protection(main, main_cfg),
        check_census(main, cfg.shape),
        check_budget(main, main_cfg, cfg.shape),
        check_concentration(trace, cfg.top20_target),
    ]

"""Grid sweeps and cost reports behind the CLI."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import costmodel as cm
from .baselines import BudgetPolicy
from .config import ExperimentConfig
from .simulate import RunResult, head_outputs, run_baseline, run_hierarchy
from .stats import clopper_pearson, summarize
from .tiers import HierarchyConfig
from .traceio import load_trace
from .workload import AttentionTrace, RecallTask, TraceShape, gen_longtail_trace, gen_recall_task

TOKENS_PER_SECOND = 18.7
GRID_FIELDS = [
    "cell", "policy", "seed", "beta", "evict_ratio", "budget_tokens", "status",
    "recall", "retrievals", "successes", "recall_ci_low", "recall_ci_high",
    "mean_output_rel_error", "max_output_rel_error", "peak_hbm_tokens",
    "final_t0_tokens", "final_t1_tokens", "final_t2_tokens", "final_evicted_tokens",
    "realized_evicted_fraction", "overhead_fraction",
]


def build_workload(cfg: ExperimentConfig, seed: int) -> tuple[AttentionTrace, RecallTask | None]:
    wl = cfg.workload
    if wl.kind == "recall":
        task, trace = gen_recall_task(wl.shape, wl.n_needles, seed,
                                      cfg.hierarchy.sink_size, cfg.hierarchy.window_size)
        return trace, task
    if wl.kind == "longtail":
        return gen_longtail_trace(wl.shape, wl.top20_target, seed), None
    return load_trace(wl.path), None


def full_outputs(trace: AttentionTrace) -> list[np.ndarray]:
    out = []
    for t in range(1, trace.shape.chain_len + 1):
        sa = trace.step_attention(t)
        out.append(head_outputs(sa.weights, trace.values[:, :, sa.positions, :]))
    return out


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


@dataclass(frozen=True)
class Unit:
    """Independent piece of a grid: one seed and one (beta, r) group or fixed budget."""
    seed: int
    beta: float | None
    evict_ratio: float | None
    budget: object | None


def plan_units(cfg: ExperimentConfig) -> list[Unit]:
    units = []
    baselines = [p for p in cfg.policies if p not in ("hierarchy", "full")]
    needs_group = "hierarchy" in cfg.policies or (baselines and "matched" in cfg.budgets)
    for seed in cfg.seeds:
        if needs_group:
            for b in cfg.betas:
                for r in cfg.evict_ratios:
                    units.append(Unit(seed, b, r, None))
        if baselines:
            for budget in cfg.budgets:
                if budget != "matched":
                    units.append(Unit(seed, None, None, budget))
        if "full" in cfg.policies:
            units.append(Unit(seed, None, None, "full"))
    return units


def _row(cell: str, policy: str, seed: int, beta, r, budget, res: RunResult | None,
         ref: list[np.ndarray] | None, overhead: float | None, status: str = "ok") -> dict:
    row = dict.fromkeys(GRID_FIELDS, "")
    row.update(cell=cell, policy=policy, seed=seed, beta=_fmt(beta), evict_ratio=_fmt(r),
               budget_tokens=_fmt(budget), status=status)
    if res is None:
        return row
    if res.retrievals:
        k, n = res.successes, len(res.retrievals)
        lo, hi = clopper_pearson(k, n)
        row.update(recall=_fmt(k / n), retrievals=n, successes=k,
                   recall_ci_low=_fmt(lo), recall_ci_high=_fmt(hi))
    if ref is not None and res.outputs is not None:
        errs = [float(np.linalg.norm(o - f) / np.linalg.norm(f)) for o, f in zip(res.outputs, ref)]
        row.update(mean_output_rel_error=_fmt(float(np.mean(errs))), max_output_rel_error=_fmt(max(errs)))
    if res.census:
        c = res.census[-1]
        row.update(final_t0_tokens=c.t0, final_t1_tokens=c.t1, final_t2_tokens=c.t2)
    else:
        row.update(final_t0_tokens=res.visible[-1], final_t1_tokens=0, final_t2_tokens=0)
    n_total = len(res.visible) and res.evicted[-1] + res.visible[-1]
    row.update(peak_hbm_tokens=res.peak_hbm, final_evicted_tokens=len(res.final_evicted),
               realized_evicted_fraction=_fmt(len(res.final_evicted) / n_total),
               overhead_fraction=_fmt(overhead))
    return row


def default_overhead(res: RunResult) -> float:
    return cm.overhead_fraction(res.schedule, 1.0 / TOKENS_PER_SECOND)


def run_unit(cfg: ExperimentConfig, unit: Unit) -> list[tuple[dict, list[bool]]]:
    """Rows for one unit, each paired with its per-retrieval outcomes."""
    trace, task = build_workload(cfg, unit.seed)
    ref = full_outputs(trace)
    h = cfg.hierarchy
    out: list[tuple[dict, list[bool]]] = []

    def baseline(kind: str, budget, cell: str):
        try:
            pol = BudgetPolicy(kind, budget, rng_seed=unit.seed)
            res = run_baseline(trace, pol, h.sink_size, h.window_size, task, keep_outputs=True)
            out.append((_row(cell, kind, unit.seed, None, None, pol.tokens(trace.shape.n_positions),
                             res, ref, 0.0), [r.ok for r in res.retrievals]))
        except ValueError as e:
            out.append((_row(cell, kind, unit.seed, None, None, budget, None, None, None,
                             f"error: {e}"), []))

    if unit.budget == "full":
        res = run_baseline(trace, BudgetPolicy("h2o", trace.shape.n_positions), h.sink_size,
                           h.window_size, task, keep_outputs=True)
        out.append((_row("full", "full", unit.seed, None, None, trace.shape.n_positions, res, ref, 0.0),
                    [r.ok for r in res.retrievals]))
    elif unit.budget is not None:
        for kind in cfg.policies:
            if kind not in ("hierarchy", "full"):
                baseline(kind, unit.budget, f"{kind}/budget={unit.budget}")
    else:
        hc = replace(h, beta=unit.beta, evict_ratio=unit.evict_ratio)
        group = f"beta={unit.beta}/r={unit.evict_ratio}"
        try:
            res = run_hierarchy(trace, hc, task, keep_outputs=True, scorer=cfg.scorer)
        except ValueError as e:
            out.append((_row(f"hierarchy/{group}", "hierarchy", unit.seed, unit.beta, unit.evict_ratio,
                             None, None, None, None, f"error: {e}"), []))
            return out
        if "hierarchy" in cfg.policies:
            out.append((_row(f"hierarchy/{group}", "hierarchy", unit.seed, unit.beta, unit.evict_ratio,
                             None, res, ref, default_overhead(res)), [r.ok for r in res.retrievals]))
        if "matched" in cfg.budgets:
            for kind in cfg.policies:
                if kind not in ("hierarchy", "full"):
                    baseline(kind, res.peak_hbm, f"{kind}/matched/{group}")
    return out


def _run_unit_star(args):
    return run_unit(*args)


def run_grid(cfg: ExperimentConfig, jobs: int = 1) -> tuple[list[dict], list[dict]]:
    """Per-(cell, seed) rows and per-cell pooled recall summaries, both sorted by cell key."""
    units = plan_units(cfg)
    if jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(_run_unit_star, [(cfg, u) for u in units]))
    else:
        parts = [run_unit(cfg, u) for u in units]
    pairs = [p for part in parts for p in part]
    pairs.sort(key=lambda p: (p[0]["cell"], p[0]["seed"]))
    rows = [p[0] for p in pairs]
    groups: dict[str, list[bool]] = {}
    for row, oks in pairs:
        groups.setdefault(row["cell"], []).extend(oks)
    summary = summarize(groups)
    return rows, summary


# --- cost report ---------------------------------------------------------

SCALING_FIELDS = [
    "scenario", "head_reading", "n_layers", "n_kv_heads", "head_dim", "batch", "seq_len",
    "per_token_kv_bytes", "kv_bytes", "kv_gib", "weight_gib", "kv_fraction", "savings_gib",
    "reported_kv_gib", "reported_kv_fraction", "reported_savings_gib", "kv_rel_deviation",
    "matches_reported",
]
OVERHEAD_FIELDS = [
    "prefetch_mode", "chain_len", "prompt_len", "manage_interval", "beta", "evict_ratio",
    "offload_transfers", "prefetch_transfers", "offload_ms", "prefetch_ms", "compute_ms",
    "overhead_fraction", "is_default", "calibration_source",
]
CALIBRATION_FIELDS = ["direction", "tokens", "reported_ms", "model_ms", "rel_error",
                      "bandwidth_gb_per_s", "fixed_latency_ms", "calibration_source"]
MATCH_TOL = 0.05


def scaling_rows(scenarios, head_reading: str) -> list[dict]:
    rows = []
    for sc in scenarios:
        p = cm.scaling_projection(sc)
        ref = sc.reference
        row = {
            "scenario": sc.name, "head_reading": head_reading, "n_layers": sc.shape.n_layers,
            "n_kv_heads": sc.shape.n_kv_heads, "head_dim": sc.shape.head_dim, "batch": sc.batch,
            "seq_len": sc.seq_len, "per_token_kv_bytes": cm.per_token_kv_bytes(sc.shape),
            "kv_bytes": int(p.kv_bytes), "kv_gib": _fmt(p.kv_bytes / cm.GIB),
            "weight_gib": _fmt(sc.weight_bytes / cm.GIB), "kv_fraction": _fmt(p.kv_fraction),
            "savings_gib": _fmt(p.savings_bytes / cm.GIB),
        }
        if ref:
            dev = p.kv_bytes / cm.GIB / ref["kv_gib"] - 1.0
            ok = abs(dev) <= MATCH_TOL and abs(p.kv_fraction - ref["kv_fraction"]) <= 0.01 + MATCH_TOL * ref["kv_fraction"]
            row.update(reported_kv_gib=_fmt(float(ref["kv_gib"])),
                       reported_kv_fraction=_fmt(float(ref["kv_fraction"])),
                       reported_savings_gib=_fmt(float(ref["savings_gib"])),
                       kv_rel_deviation=_fmt(dev), matches_reported=str(ok).lower())
        else:
            row.update(reported_kv_gib="", reported_kv_fraction="", reported_savings_gib="",
                       kv_rel_deviation="", matches_reported="")
        rows.append(row)
    return rows


@dataclass(frozen=True)
class OverheadSpec:
    beta: float = 0.5
    evict_ratio: float = 0.1
    manage_interval: int = 64
    prompt_len: int = 32
    chain_len: int = 1422
    prefetch: str = "full"
    tokens_per_second: float = TOKENS_PER_SECOND


def overhead_schedule(spec: OverheadSpec, seed: int = 0):
    """Transfer schedule of a hierarchy run; tier sizes depend only on counts, not on scores."""
    shape = TraceShape(1, 1, 4, spec.prompt_len, spec.chain_len)
    trace = gen_longtail_trace(shape, 0.565, seed)
    cfg = HierarchyConfig(beta=spec.beta, evict_ratio=spec.evict_ratio, manage_interval=spec.manage_interval,
                          prompt_len=spec.prompt_len, t_max=max(spec.chain_len, 1))
    return run_hierarchy(trace, cfg).schedule


def overhead_rows(default: OverheadSpec, chain_lens, intervals, params: cm.TransferModelParams) -> list[dict]:
    rows = []
    for T in chain_lens:
        for dm in intervals:
            spec = replace(default, chain_len=T, manage_interval=dm)
            sched = overhead_schedule(spec)
            for mode in ("full", "differential"):
                tot = cm.transfer_totals(sched, 1.0 / spec.tokens_per_second, cm.PROTOTYPE_SHAPE, params, mode)
                rows.append({
                    "prefetch_mode": mode, "chain_len": T, "prompt_len": spec.prompt_len,
                    "manage_interval": dm, "beta": _fmt(spec.beta), "evict_ratio": _fmt(spec.evict_ratio),
                    "offload_transfers": tot.offload_transfers, "prefetch_transfers": tot.prefetch_transfers,
                    "offload_ms": _fmt(1e3 * tot.offload_seconds), "prefetch_ms": _fmt(1e3 * tot.prefetch_seconds),
                    "compute_ms": _fmt(1e3 * tot.compute_seconds), "overhead_fraction": _fmt(tot.overhead),
                    "is_default": str(T == default.chain_len and dm == default.manage_interval
                                      and mode == default.prefetch).lower(),
                    "calibration_source": params.source,
                })
    return rows


def calibration_rows(points, params: cm.TransferModelParams) -> list[dict]:
    rows = []
    for d in cm.DIRECTIONS:
        for n, sec in points.get(d, ()):
            model = cm.transfer_latency(int(n), cm.PROTOTYPE_SHAPE, d, params)
            rows.append({
                "direction": d, "tokens": int(n), "reported_ms": _fmt(round(1e3 * sec, 9)), "model_ms": _fmt(1e3 * model),
                "rel_error": _fmt(model / sec - 1.0), "bandwidth_gb_per_s": _fmt(params.bandwidth[d] / 1e9),
                "fixed_latency_ms": _fmt(1e3 * params.fixed_latency[d]), "calibration_source": params.source,
            })
    return rows

"""Acceptance criteria, one test each, printing a PASS/FAIL line per criterion."""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from tierkv import costmodel as cm
from tierkv.attention import attention_output
from tierkv.config import parse_config
from tierkv.experiments import OverheadSpec, overhead_schedule, run_grid
from tierkv.props import PropsConfig, bound_violations, evicted_by_step, run_suite, sample_bound_instances
from tierkv.simulate import run_hierarchy
from tierkv.stats import clopper_pearson, fisher_exact, round_half_away
from tierkv.tiers import HierarchyConfig
from tierkv.workload import TraceShape, gen_longtail_trace, measure_concentration

from test_stats import fisher_oracle

SEEDS = list(range(10))
COMPUTE = 1 / 18.7


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


def test_partition_independence(report):
    start = time.perf_counter()
    trace = gen_longtail_trace(TraceShape(), 0.565, seed=0)
    runs = [run_hierarchy(trace, HierarchyConfig(beta=b, evict_ratio=0.1, prompt_len=32), keep_outputs=True)
            for b in (0.3, 0.5, 0.7)]
    same = all(x.tobytes() == y.tobytes()
               for r in runs[1:] for x, y in zip(runs[0].outputs, r.outputs))
    evicted = len(runs[0].final_evicted)
    elapsed = time.perf_counter() - start
    report(1, same and evicted > 0 and elapsed < 10,
           f"bitwise identical outputs over {len(runs[0].outputs)} steps, {evicted} evicted, {elapsed:.1f}s")


def test_bound_soundness(report):
    start = time.perf_counter()
    total, bad = 0, 0
    for seed in range(2):
        trace = gen_longtail_trace(TraceShape(), 0.565, seed=seed)
        run = run_hierarchy(trace, HierarchyConfig(beta=0.5, evict_ratio=0.1, prompt_len=32), keep_outputs=True)
        inst = sample_bound_instances(trace, 600, np.random.default_rng([seed, 4]),
                                      evicted_by_step(run, trace.shape))
        total += len(inst)
        bad += len(bound_violations(trace, inst))
    elapsed = time.perf_counter() - start
    report(2, total >= 1000 and bad == 0 and elapsed < 30,
           f"{total - bad}/{total} instances within the bound, {elapsed:.1f}s")


def _recall_config(policies, evict_ratios, budgets):
    return parse_config({
        "name": "acceptance", "seeds": SEEDS,
        "workload": {"kind": "recall", "prompt_len": 32, "chain_len": 512},
        "policy": {"manage_interval": 64, "sink_size": 4, "window_size": 128},
        "grid": {"policies": policies, "beta": [0.5], "evict_ratio": evict_ratios, "budget": budgets},
    })


def _pooled(summary):
    return {r["group"]: (r["successes"], r["trials"], r["estimate"]) for r in summary}


def test_cliff_effect(report):
    start = time.perf_counter()
    _, summary = run_grid(_recall_config(["hierarchy", "streaming"], [0.03, 0.05, 0.1], [0.5]), jobs=4)
    pooled = _pooled(summary)
    stream = pooled["streaming/budget=0.5"][2]
    hier = {g: v[2] for g, v in pooled.items() if g.startswith("hierarchy/")}
    elapsed = time.perf_counter() - start
    ok = stream <= 0.05 and len(hier) == 3 and min(hier.values()) >= 0.95 and elapsed < 60
    report(3, ok, f"streaming@50% recall {stream:.3f}, hierarchy recall min {min(hier.values()):.3f} "
                  f"over {len(hier)} ratios, {elapsed:.1f}s")


def _ordering(ratios):
    _, summary = run_grid(_recall_config(["hierarchy", "h2o", "random"], ratios, ["matched"]), jobs=4)
    pooled = _pooled(summary)
    lines, ok = [], True
    for r in ratios:
        g = f"beta=0.5/r={r}"
        h, h2o, rnd = (pooled[f"{p}/{g}"][2] for p in ("hierarchy", "h2o/matched", "random/matched"))
        ok &= h >= h2o >= rnd
        lines.append(f"r={r}: {h:.2f}>={h2o:.2f}>={rnd:.2f}")
    return ok, "; ".join(lines)


def test_baseline_ordering(report):
    report(4, *_ordering([0.03, 0.05, 0.1]))


@pytest.mark.xfail(strict=True, reason="at r=0.3 repeated eviction removes needles that a matched "
                   "heavy-hitter budget still holds")
def test_baseline_ordering_heavy_eviction():
    ok, detail = _ordering([0.3])
    assert ok, detail


def test_concentration(report):
    shares = [measure_concentration(gen_longtail_trace(TraceShape(), 0.565, seed=s).cumulative_scores(), 0.2)
              for s in range(5)]
    report(5, all(abs(s - 0.565) <= 0.01 for s in shares),
           "top-20% shares " + ", ".join(f"{s:.4f}" for s in shares))


def test_statistics(report):
    lo0, hi0 = clopper_pearson(0, 50)
    lo, hi = clopper_pearson(33, 50)
    pct = (round_half_away(100 * lo), round_half_away(100 * hi))
    p = fisher_exact(142, 58, 5, 195)
    worst, n = 0.0, 0
    for r1 in range(1, 13):
        for r2 in range(1, 13):
            for c1 in range(max(1, r1 + r2 - 12), min(12, r1 + r2 - 1) + 1):
                for a in range(max(0, c1 - r2), min(r1, c1) + 1):
                    b, c = r1 - a, c1 - a
                    worst = max(worst, abs(fisher_exact(a, b, c, r2 - c) - fisher_oracle(a, b, c, r2 - c)))
                    n += 1
    ok = lo0 == 0 and abs(hi0 - 0.071) <= 0.001 and pct == (51.0, 79.0) and p < 0.001 and worst <= 1e-9
    report(6, ok, f"CP(0,50)=[0,{hi0:.4f}] CP(33,50)=[{pct[0]:.0f},{pct[1]:.0f}]% fisher p={p:.2e} "
                  f"brute force max diff {worst:.1e} over {n} tables")


def test_transfer_calibration(report):
    params = cm.calibrate()
    errs = []
    for d, pts in cm.PUBLISHED_CALIBRATION.items():
        for n, sec in pts:
            errs.append(abs(cm.transfer_latency(n, cm.PROTOTYPE_SHAPE, d, params) / sec - 1))
    linear = True
    for d in cm.DIRECTIONS:
        f = lambda k: cm.transfer_latency(k, cm.PROTOTYPE_SHAPE, d, params)
        slope = cm.per_token_kv_bytes(cm.PROTOTYPE_SHAPE) / params.bandwidth[d]
        for n in range(64, 4096, 37):
            linear &= math.isclose(f(n), params.fixed_latency[d] + n * slope, rel_tol=1e-12)
    report(7, max(errs) <= 0.05 and linear, f"max relative error {max(errs):.2e}, linear above saturation: {linear}")


def test_overhead_fraction(report):
    spec = OverheadSpec()
    value = cm.overhead_fraction(overhead_schedule(spec), COMPUTE, prefetch=spec.prefetch)
    short = overhead_schedule(replace(spec, chain_len=512))
    alt = {m: cm.overhead_fraction(short, COMPUTE, prefetch=m) for m in ("full", "differential")}
    report(8, 0.04 <= value <= 0.08,
           f"overhead {value:.4f} ({spec.prefetch} prefetch, {spec.chain_len} steps); "
           f"at 512 steps: full {alt['full']:.4f}, differential {alt['differential']:.4f}")


def test_property_suite_and_oracles(report):
    results = run_suite(PropsConfig())
    failed = [r.name for r in results if not r.passed]
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(200):
        n, d = int(rng.integers(1, 20)), int(rng.integers(1, 6))
        q, k, v = rng.normal(size=d), rng.normal(size=(n, d)), rng.normal(size=(n, d))
        s = [math.exp(sum(qi * ki for qi, ki in zip(q, row)) / math.sqrt(d)) for row in k]
        naive = [sum(s[i] * v[i][j] for i in range(n)) / sum(s) for j in range(d)]
        worst = max(worst, float(np.max(np.abs(attention_output(q, k, v) - naive))))
    report(9, not failed and worst <= 1e-9,
           f"{len(results) - len(failed)}/{len(results)} properties pass {failed or ''}; "
           f"naive attention max diff {worst:.1e}")

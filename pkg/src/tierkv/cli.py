"""Command-line harness: ``tierkv <subcommand> --config FILE --out DIR``.

Exit codes: 0 success, 1 usage or configuration error, 2 property failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import costmodel as cm
from .config import ConfigError, ExperimentConfig, load_config, load_toml, parse_config
from .experiments import (
    CALIBRATION_FIELDS, GRID_FIELDS, OVERHEAD_FIELDS, SCALING_FIELDS, OverheadSpec,
    build_workload, calibration_rows, overhead_rows, run_grid, scaling_rows,
)
from .props import FAULTS, PropsConfig, run_suite
from .simulate import run_hierarchy
from .stats import SUMMARY_FIELDS
from .tiers import write_census_csv
from .traceio import save_trace, save_trace_text
from .workload import TraceShape

EXIT_OK, EXIT_USAGE, EXIT_PROPERTY = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def write_csv(path: Path, fields: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else parse_config({})
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def _out(args, cfg_out: str = "results") -> Path:
    return Path(args.out or cfg_out)


# --- subcommands ---------------------------------------------------------

def cmd_gen_trace(args) -> int:
    cfg = _experiment(args)
    if cfg.workload.kind == "trace":
        raise UsageError("gen-trace needs a generated workload (recall or longtail)")
    out = _out(args, cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        trace, task = build_workload(cfg, seed)
        stem = f"{cfg.workload.kind}_seed{seed}"
        if args.format == "text":
            save_trace_text(trace, out / f"{stem}.txt")
        else:
            save_trace(trace, out / f"{stem}.trace")
        if task is not None:
            info = {"needles": task.needles, "query_steps": task.query_steps, **task.params}
            (out / f"{stem}_task.json").write_text(json.dumps(info, sort_keys=True, indent=1) + "\n")
        print(f"wrote {stem}")
    return EXIT_OK


def cmd_run_grid(args) -> int:
    cfg = _experiment(args)
    out = _out(args, cfg.out)
    rows, summary = run_grid(cfg, jobs=args.jobs)
    write_csv(out / f"{cfg.name}_grid.csv", GRID_FIELDS, rows)
    write_csv(out / f"{cfg.name}_summary.csv", SUMMARY_FIELDS, summary)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} rows ({failed} failed) -> {out / (cfg.name + '_grid.csv')}")
    return EXIT_OK


def _calibration(d: dict):
    cal = d.get("calibration")
    if not isinstance(cal, dict):
        raise ConfigError("missing calibration: add a [calibration] table")
    sat = int(cal.get("saturation_tokens", 64))
    if cal.get("preset") == "published":
        points = cm.PUBLISHED_CALIBRATION
    else:
        points = {k: [tuple(p) for p in cal.get(k, [])] for k in cm.DIRECTIONS}
    try:
        return points, cm.calibrate(points, cm.PROTOTYPE_SHAPE, sat)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _scenarios(d: dict):
    sc = d.get("scaling", {})
    reading = sc.get("head_reading", "n_heads")
    out = []
    if sc.get("include_published", False):
        out.extend(cm.published_scenarios(reading))
    for s in sc.get("scenario", []):
        try:
            shape = cm.ModelShape(s["n_layers"], s["n_kv_heads"], s["head_dim"], s.get("bytes_per_element", 2))
            out.append(cm.DeploymentScenario(s["name"], shape, s["batch"], s["seq_len"],
                                             s["weight_gib"] * cm.GIB, s.get("offload_fraction", 0.6)))
        except (KeyError, ValueError) as e:
            raise ConfigError(f"[[scaling.scenario]] {e}") from None
    return out, reading


def cmd_report_costs(args) -> int:
    if not args.config:
        raise UsageError("report-costs needs --config")
    d = load_toml(args.config)
    points, params = _calibration(d)
    scenarios, reading = _scenarios(d)
    ov = dict(d.get("overhead", {}))
    chain_lens = ov.pop("chain_lens", None)
    intervals = ov.pop("intervals", None)
    try:
        spec = OverheadSpec(**ov)
    except TypeError as e:
        raise ConfigError(f"[overhead] {e}") from None
    out = _out(args, d.get("out", "results"))
    name = d.get("name", "costs")
    write_csv(out / f"{name}_scaling.csv", SCALING_FIELDS, scaling_rows(scenarios, reading))
    if "overhead" in d:
        rows = overhead_rows(spec, chain_lens or [spec.chain_len], intervals or [spec.manage_interval], params)
        write_csv(out / f"{name}_overhead.csv", OVERHEAD_FIELDS, rows)
        for r in rows:
            if r["is_default"] == "true":
                print(f"default overhead: {float(r['overhead_fraction']):.4f}")
    write_csv(out / f"{name}_calibration.csv", CALIBRATION_FIELDS, calibration_rows(points, params))
    print(f"cost report -> {out}")
    return EXIT_OK


def _props_config(args) -> PropsConfig:
    if not args.config:
        cfg = PropsConfig()
    else:
        d = load_toml(args.config).get("props", {})
        shape_keys = ("n_layers", "n_heads", "head_dim", "prompt_len", "chain_len")
        try:
            shape = TraceShape(**{k: d.pop(k) for k in shape_keys if k in d})
            if "betas" in d:
                d["betas"] = tuple(d["betas"])
            cfg = PropsConfig(shape=shape, **d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[props] {e}") from None
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_validate_props(args) -> int:
    results = run_suite(_props_config(args), fault=args.inject_fault)
    rows = [r.row() for r in results]
    if args.out:
        write_csv(Path(args.out) / "properties.csv", ["property", "status", "checked", "detail"], rows)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK if all(r.passed for r in results) else EXIT_PROPERTY


def cmd_census(args) -> int:
    cfg = _experiment(args)
    out = _out(args, cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tb = cm.per_token_kv_bytes(cm.PROTOTYPE_SHAPE)
    for seed in cfg.seeds:
        trace, task = build_workload(cfg, seed)
        hc = replace(cfg.hierarchy, beta=cfg.betas[0], evict_ratio=cfg.evict_ratios[0])
        res = run_hierarchy(trace, hc, task, token_bytes=tb, scorer=cfg.scorer)
        path = out / f"{cfg.name}_census_seed{seed}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            write_census_csv(res.census, fh)
        print(f"census -> {path}")
    return EXIT_OK


COMMANDS = {
    "gen-trace": cmd_gen_trace,
    "run-grid": cmd_run_grid,
    "report-costs": cmd_report_costs,
    "validate-props": cmd_validate_props,
    "census": cmd_census,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tierkv", description="Four-tier KV-cache placement simulator")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML experiment config")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the configured ones")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for grid cells")
        if name == "gen-trace":
            sp.add_argument("--format", choices=("binary", "text"), default="binary")
        if name == "validate-props":
            sp.add_argument("--inject-fault", choices=FAULTS, help="negative control")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.jobs < 1:
        print("tierkv: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as e:
        print(f"tierkv: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        # infeasible workload geometry or an unreadable trace file
        print(f"tierkv: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""TOML experiment configs."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .tiers import HierarchyConfig
from .workload import TraceShape

POLICIES = ("hierarchy", "h2o", "streaming", "random", "full")
WORKLOADS = ("recall", "longtail", "trace")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = "recall"
    shape: TraceShape = TraceShape()
    top20_target: float = 0.565
    n_needles: int = 4
    path: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    workload: WorkloadSpec = WorkloadSpec()
    hierarchy: HierarchyConfig = HierarchyConfig()
    scorer: str = "cumulative"
    policies: tuple[str, ...] = ("hierarchy",)
    betas: tuple[float, ...] = (0.5,)
    evict_ratios: tuple[float, ...] = (0.05,)
    budgets: tuple = ("matched",)   # token counts, ratios < 1, or "matched"
    seeds: tuple[int, ...] = (0,)
    out: str = "results"
    raw: dict = field(default_factory=dict, compare=False)


def _section(d: dict, key: str) -> dict:
    v = d.get(key, {})
    if not isinstance(v, dict):
        raise ConfigError(f"[{key}] must be a table")
    return v


def _tuple(v, name: str) -> tuple:
    t = tuple(v) if isinstance(v, (list, tuple)) else (v,)
    if not t:
        raise ConfigError(f"grid axis {name!r} must be nonempty")
    return t


def _build(cls, values: dict, where: str):
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"[{where}] {e}") from None
    except ValueError as e:
        raise ConfigError(f"[{where}] {e}") from None


def parse_config(d: dict[str, Any]) -> ExperimentConfig:
    wl = dict(_section(d, "workload"))
    kind = wl.pop("kind", "recall")
    if kind not in WORKLOADS:
        raise ConfigError(f"unknown workload kind {kind!r}; choose from {WORKLOADS}")
    shape_keys = ("n_layers", "n_heads", "head_dim", "prompt_len", "chain_len")
    shape = _build(TraceShape, {k: wl.pop(k) for k in shape_keys if k in wl}, "workload")
    workload = _build(WorkloadSpec, {"kind": kind, "shape": shape, **wl}, "workload")
    if kind == "trace" and not workload.path:
        raise ConfigError("[workload] kind = 'trace' needs a path")

    pol = dict(_section(d, "policy"))
    scorer = pol.pop("scorer", "cumulative")
    hier = _build(HierarchyConfig, {**pol, "prompt_len": shape.prompt_len}, "policy")

    grid = _section(d, "grid")
    policies = _tuple(grid.get("policies", ["hierarchy"]), "policies")
    for p in policies:
        if p not in POLICIES:
            raise ConfigError(f"unknown policy {p!r}; choose from {POLICIES}")
    budgets = _tuple(grid.get("budget", ["matched"]), "budget")
    for b in budgets:
        if b != "matched" and not (isinstance(b, (int, float)) and b > 0):
            raise ConfigError(f"budget {b!r} must be positive or 'matched'")
    seeds = _tuple(d.get("seeds", [0]), "seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    return ExperimentConfig(
        name=str(d.get("name", "experiment")),
        workload=workload, hierarchy=hier, scorer=scorer, policies=policies,
        betas=tuple(float(x) for x in _tuple(grid.get("beta", [hier.beta]), "beta")),
        evict_ratios=tuple(float(x) for x in _tuple(grid.get("evict_ratio", [hier.evict_ratio]), "evict_ratio")),
        budgets=budgets, seeds=tuple(int(s) for s in seeds), out=str(d.get("out", "results")), raw=d,
    )


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from None


def load_config(path) -> ExperimentConfig:
    cfg = parse_config(load_toml(path))
    if cfg.workload.kind == "trace" and not Path(cfg.workload.path).is_absolute():
        cfg = _rebase(cfg, Path(path).parent)
    return cfg


def _rebase(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    return replace(cfg, workload=replace(cfg.workload, path=str(base / cfg.workload.path)))

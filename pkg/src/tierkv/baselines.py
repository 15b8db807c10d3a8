"""Pure-eviction baselines: sinks + sliding window, heavy hitters, random.

Each function returns the sorted array of kept positions out of ``alive``
(default: all of ``0 .. t-1``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scoring import ScoreVector, eviction_order


@dataclass(frozen=True)
class BudgetPolicy:
    kind: str            # "streaming" | "h2o" | "random"
    budget: float        # token count (>= 1) or ratio of the full sequence (< 1)
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("streaming", "h2o", "random"):
            raise ValueError(f"unknown baseline {self.kind!r}")
        if self.budget <= 0:
            raise ValueError("budget must be positive")

    def tokens(self, n_total: int) -> int:
        """Resolve a ratio budget against the full sequence length."""
        if self.budget >= 1:
            return int(self.budget)
        return max(1, int(round(self.budget * n_total)))


def _alive(t: int, alive) -> np.ndarray:
    return np.arange(t) if alive is None else np.asarray(sorted(alive), dtype=np.int64)


def streaming_evict(t: int, budget: int, k_s: int, alive=None) -> np.ndarray:
    """First ``k_s`` positions plus the most recent ``budget - k_s``."""
    if budget < k_s + 1:
        raise ValueError(f"budget {budget} too small for {k_s} sinks")
    a = _alive(t, alive)
    if len(a) <= budget:
        return a
    return np.concatenate([a[:k_s], a[len(a) - (budget - k_s):]])


def h2o_evict(scores: ScoreVector, t: int, budget: int, k_w: int, alive=None) -> np.ndarray:
    """Recent ``k_w`` window plus the top ``budget - k_w`` others by cumulative score."""
    if budget < k_w:
        raise ValueError(f"budget {budget} smaller than window {k_w}")
    a = _alive(t, alive)
    if len(a) <= budget:
        return a
    window = a[len(a) - k_w:] if k_w else a[:0]
    rest = a[: len(a) - k_w]
    n_keep = budget - k_w
    order = eviction_order(scores.extended(t).s, rest)
    heavy = order[len(order) - n_keep:] if n_keep else order[:0]
    return np.sort(np.concatenate([heavy, window]))


def random_evict(t: int, budget: int, seed, k_s: int = 0, k_w: int = 0, alive=None) -> np.ndarray:
    """Sinks and window first, then a uniformly random subset of the rest."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    a = _alive(t, alive)
    if len(a) <= budget:
        return a
    rng = np.random.default_rng(seed)
    prot_idx = np.union1d(np.arange(min(k_s, len(a))), np.arange(max(0, len(a) - k_w), len(a)))
    prot_idx = prot_idx[:budget]
    rest_idx = np.setdiff1d(np.arange(len(a)), prot_idx)
    pick = rng.choice(rest_idx, budget - len(prot_idx), replace=False) if budget > len(prot_idx) else []
    return np.sort(a[np.concatenate([prot_idx, np.asarray(pick, dtype=np.int64)])])

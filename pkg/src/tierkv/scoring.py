"""Importance scorers for cached positions.

Positions are 0-based absolute cache indices. A :class:`ScoreVector` is indexed
by absolute position and grows as new positions appear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attention import attention_output

FD_STEP = 1e-5


@dataclass
class ScoreVector:
    s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    last_updated_step: int = 0

    def __len__(self) -> int:
        return len(self.s)

    def extended(self, n: int) -> "ScoreVector":
        """Copy padded with zeros up to ``n`` positions."""
        if n <= len(self.s):
            return ScoreVector(self.s.copy(), self.last_updated_step)
        s = np.zeros(n)
        s[: len(self.s)] = self.s
        return ScoreVector(s, self.last_updated_step)


@dataclass
class StepAttention:
    """Attention weights of one decode step over ``positions``.

    ``weights`` has shape (layers, heads, len(positions)). Layers listed in
    ``nan_layers`` carry unusable (typically NaN) rows.
    """

    positions: np.ndarray
    weights: np.ndarray
    nan_layers: frozenset = frozenset()
    step: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3 or self.weights.shape[2] != self.positions.shape[0]:
            raise ValueError(
                f"weights shape {self.weights.shape} does not match {self.positions.shape[0]} positions"
            )
        self.nan_layers = frozenset(int(i) for i in self.nan_layers)

    @property
    def valid_layers(self) -> list[int]:
        return [l for l in range(self.weights.shape[0]) if l not in self.nan_layers]

    def mean_weights(self) -> np.ndarray:
        """Per-position mean over valid layers of the mean over heads."""
        valid = self.valid_layers
        if not valid:
            raise ValueError("no valid layers")
        return self.weights[valid].mean(axis=1).mean(axis=0)


@dataclass(frozen=True)
class RkvParams:
    lam: float = 0.07
    alpha_window: int = 8
    pool_kernel: int = 7

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must be in [0, 1]")
        if self.alpha_window < 1:
            raise ValueError("alpha_window must be >= 1")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ValueError("pool_kernel must be a positive odd integer")


def update_cumulative(scores: ScoreVector, step_attn: StepAttention) -> ScoreVector:
    """Add this step's layer/head-averaged attention to each position's running score."""
    inc = step_attn.mean_weights()
    n = int(step_attn.positions.max()) + 1 if step_attn.positions.size else len(scores)
    out = scores.extended(n)
    out.s[step_attn.positions] += inc
    out.last_updated_step = step_attn.step
    return out


def value_norms(values: np.ndarray) -> np.ndarray:
    """Per-position ||v|| averaged over layers and heads; values is (L, H, N, d)."""
    return np.linalg.norm(np.asarray(values, dtype=np.float64), axis=-1).mean(axis=(0, 1))


def representative_keys(keys: np.ndarray) -> np.ndarray:
    """Mean key over layers and heads, shape (N, d)."""
    return np.asarray(keys, dtype=np.float64).mean(axis=(0, 1))


def score_vatp(cumulative: ScoreVector, norms: Sequence[float]) -> ScoreVector:
    norms = np.asarray(norms, dtype=np.float64)
    if norms.shape != cumulative.s.shape:
        raise ValueError(f"length mismatch: {norms.shape[0]} norms for {len(cumulative)} scores")
    if np.any(norms < 0):
        raise ValueError("value norms must be non-negative")
    return ScoreVector(cumulative.s * norms, cumulative.last_updated_step)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def neighbor_redundancy(keys: np.ndarray) -> np.ndarray:
    """Max cosine similarity of each key to its immediate neighbours (0 with none)."""
    u = _unit_rows(np.asarray(keys, dtype=np.float64))
    n = u.shape[0]
    r = np.full(n, -np.inf)
    if n < 2:
        return np.zeros(n)
    adj = np.sum(u[1:] * u[:-1], axis=1)
    r[1:] = np.maximum(r[1:], adj)
    r[:-1] = np.maximum(r[:-1], adj)
    return r


def score_redundancy(keys: np.ndarray, base: ScoreVector) -> ScoreVector:
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[0] != len(base):
        raise ValueError("one key per scored position required")
    return ScoreVector(base.s - neighbor_redundancy(keys), base.last_updated_step)


def score_combined(keys: np.ndarray, base: ScoreVector, norms: Sequence[float]) -> ScoreVector:
    """attention x value norm - neighbour redundancy."""
    vatp = score_vatp(base, norms)
    return ScoreVector(vatp.s - neighbor_redundancy(keys), base.last_updated_step)


def max_pool_1d(x: np.ndarray, kernel: int) -> np.ndarray:
    """Centered max-pool; the window is truncated at both sequence ends."""
    half = kernel // 2
    n = len(x)
    return np.array([x[max(0, i - half): min(n, i + half + 1)].max() for i in range(n)]) if n else x


def windowed_attention(recent: Sequence[StepAttention], positions: np.ndarray, window: int) -> np.ndarray:
    """Mean attention paid to each of ``positions`` by the last ``window`` steps.

    A step that does not cover a position contributes 0 for it.
    """
    steps = list(recent)[-window:] if window else list(recent)
    if not steps:
        raise ValueError("no observation steps")
    positions = np.asarray(positions, dtype=np.int64)
    acc = np.zeros(len(positions))
    for sa in steps:
        lookup = {int(p): i for i, p in enumerate(sa.positions)}
        w = sa.mean_weights()
        acc += np.array([w[lookup[int(p)]] if int(p) in lookup else 0.0 for p in positions])
    return acc / len(steps)


def max_cosine_to_others(keys: np.ndarray, candidates: np.ndarray | None = None) -> np.ndarray:
    """R_i = max cosine similarity of key i to any other candidate key (0 if none)."""
    u = _unit_rows(np.asarray(keys, dtype=np.float64))
    n = u.shape[0]
    cand = np.ones(n, dtype=bool) if candidates is None else np.asarray(candidates, dtype=bool)
    sim = u @ u[cand].T
    cidx = np.flatnonzero(cand)
    sim[cidx, np.arange(len(cidx))] = -np.inf
    r = sim.max(axis=1) if len(cidx) else np.full(n, -np.inf)
    return np.where(np.isfinite(r), r, 0.0)


def score_rkv(
    recent: Sequence[StepAttention],
    keys: np.ndarray,
    params: RkvParams = RkvParams(),
    positions: np.ndarray | None = None,
    candidates: np.ndarray | None = None,
) -> ScoreVector:
    """Joint importance/redundancy score Z = lam*I - (1-lam)*R.

    ``keys`` are representative keys aligned with ``positions`` (defaults to
    the positions of the most recent step). Uses every available step when
    fewer than ``params.alpha_window`` have been observed.
    """
    if not recent:
        raise ValueError("no observation steps")
    if positions is None:
        positions = recent[-1].positions
    positions = np.asarray(positions, dtype=np.int64)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[0] != len(positions):
        raise ValueError("one key per scored position required")
    imp = max_pool_1d(windowed_attention(recent, positions, params.alpha_window), params.pool_kernel)
    red = max_cosine_to_others(keys, candidates)
    z = params.lam * imp - (1.0 - params.lam) * red
    n = int(positions.max()) + 1
    s = np.zeros(n)
    s[positions] = z
    return ScoreVector(s, recent[-1].step)


@dataclass
class ToyDecodeInstance:
    """One query attending over a handful of cached (key, value) pairs."""

    query: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    target: np.ndarray

    def output(self, keys=None, values=None) -> np.ndarray:
        return attention_output(self.query, self.keys if keys is None else keys,
                                self.values if values is None else values)


def quadratic_loss(inst: ToyDecodeInstance, keys: np.ndarray, values: np.ndarray) -> float:
    diff = inst.output(keys, values) - inst.target
    return 0.5 * float(diff @ diff)


LOSSES: dict[str, Callable[[ToyDecodeInstance, np.ndarray, np.ndarray], float]] = {
    "quadratic": quadratic_loss,
}


def fd_gradients(inst: ToyDecodeInstance, loss: str = "quadratic", h: float = FD_STEP):
    """Central finite-difference gradients of the loss w.r.t. every key and value entry."""
    fn = LOSSES[loss]
    keys = np.array(inst.keys, dtype=np.float64)
    values = np.array(inst.values, dtype=np.float64)
    if keys.shape[0] > 64 or keys.shape[1] > 8:
        raise ValueError("finite-difference scoring is limited to t <= 64, d <= 8")
    grads = []
    for arr in (keys, values):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = fn(inst, keys, values)
            arr[idx] = orig - h
            down = fn(inst, keys, values)
            arr[idx] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise ValueError("non-finite loss")
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads[0], grads[1]


def score_gradient_fd(inst: ToyDecodeInstance, loss: str = "quadratic", h: float = FD_STEP) -> ScoreVector:
    """||dL/dk_i|| + ||dL/dv_i|| per position, by central differences."""
    base = LOSSES[loss](inst, inst.keys, inst.values)
    if not math.isfinite(base):
        raise ValueError("non-finite loss")
    gk, gv = fd_gradients(inst, loss, h)
    return ScoreVector(np.linalg.norm(gk, axis=1) + np.linalg.norm(gv, axis=1))


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing the average of their rank span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i: j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(a, b) -> float:
    a = a.s if isinstance(a, ScoreVector) else np.asarray(a, dtype=np.float64)
    b = b.s if isinstance(b, ScoreVector) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.shape[0] < 2:
        raise ValueError("spearman_rho needs two equal-length vectors of length >= 2")
    ra = average_ranks(a) - (a.shape[0] + 1) / 2.0
    rb = average_ranks(b) - (b.shape[0] + 1) / 2.0
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        raise ValueError("undefined correlation: constant input")
    return float(np.clip((ra @ rb) / den, -1.0, 1.0))


def eviction_order(scores: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Positions sorted by ascending score; ties put the older position first."""
    positions = np.asarray(positions, dtype=np.int64)
    return positions[np.lexsort((positions, np.asarray(scores)[positions]))]

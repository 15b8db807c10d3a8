"""Small-scale exact attention, attention under eviction, and int8 value storage.

Everything here works in float64 and sums over positions strictly in ascending
position order (via ``cumsum``), so two calls that see the same surviving
positions produce bit-identical results regardless of how the rest of the
cache is laid out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


def ordered_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Left-to-right sum along ``axis`` (no pairwise reassociation)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        return np.sum(x, axis=axis)
    return np.take(np.cumsum(x, axis=axis), -1, axis=axis)


def _as_query_keys(query, keys) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(query, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] < 1:
        raise ValueError(f"query must be a non-empty vector, got shape {q.shape}")
    if k.ndim != 2 or k.shape[0] == 0:
        raise ValueError("keys must be a non-empty list of vectors")
    if k.shape[1] != q.shape[0]:
        raise ValueError(f"dimension mismatch: query has d={q.shape[0]}, keys have d={k.shape[1]}")
    return q, k


def _survivor_mask(n: int, evicted: Iterable[int] | None) -> np.ndarray:
    mask = np.ones(n, dtype=bool)
    if evicted is None:
        return mask
    idx = np.fromiter((int(i) for i in evicted), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"evicted positions must lie in [0, {n})")
    mask[idx] = False
    return mask


def _restricted_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # softmax over survivors only; evicted entries get exactly 0
    if not mask.any():
        raise ValueError("empty survivor set")
    logits = (k[mask] @ q) / math.sqrt(q.shape[0])
    e = np.exp(logits - logits.max())
    w = np.zeros(k.shape[0])
    w[mask] = e / ordered_sum(e)
    return w


def attention_weights(query, keys) -> np.ndarray:
    """Softmax of q.k_i / sqrt(d) over all positions."""
    q, k = _as_query_keys(query, keys)
    return _restricted_weights(q, k, np.ones(k.shape[0], dtype=bool))


def weighted_value_sum(weights: np.ndarray, values: np.ndarray) -> np.ndarray:
    """sum_i w[i] * v_i, accumulated in ascending position order."""
    return ordered_sum(np.asarray(weights)[:, None] * np.asarray(values), axis=0)


def evicted_attention_output(query, keys, values, evicted: Iterable[int] | None = ()) -> np.ndarray:
    """Attention output with ``evicted`` positions removed and the rest renormalized."""
    q, k = _as_query_keys(query, keys)
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] != k.shape[0]:
        raise ValueError(f"need one value per key: {k.shape[0]} keys, values shape {v.shape}")
    mask = _survivor_mask(k.shape[0], evicted)
    w = _restricted_weights(q, k, mask)
    return weighted_value_sum(w[mask], v[mask])


def attention_output(query, keys, values) -> np.ndarray:
    return evicted_attention_output(query, keys, values, ())


def eviction_error_bound(weights, values, evicted: Iterable[int]) -> float:
    """The per-head bound 2 * sum_{i evicted} alpha_i * ||v_i||.

    ``weights`` must be the full-cache softmax weights, not the renormalized
    survivor weights.

    Note: this bound omits the renormalization term ``m * ||o_hat||`` (``m``
    being the evicted mass) and can be exceeded when the surviving values are
    longer than the evicted ones. See :func:`renormalization_error_bound` for
    a bound that always holds.
    """
    w = np.asarray(weights, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if w.ndim != 1 or v.ndim != 2 or v.shape[0] != w.shape[0]:
        raise ValueError(f"shape mismatch: weights {w.shape}, values {v.shape}")
    idx = np.array(sorted({int(i) for i in evicted}), dtype=np.int64)
    if idx.size == 0:
        return 0.0
    norms = np.linalg.norm(v[idx], axis=1)
    return float(2.0 * ordered_sum(w[idx] * norms))


def renormalization_error_bound(weights, values, evicted: Iterable[int]) -> float:
    """Sound bound: sum_{i in E} alpha_i ||v_i|| + m * max_{j not in E} ||v_j||.

    Follows from o_hat - o = m * o_hat - sum_{i in E} alpha_i v_i and
    ||o_hat|| <= max survivor norm.
    """
    w = np.asarray(weights, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    mask = _survivor_mask(w.shape[0], evicted)
    if mask.all():
        return 0.0
    if not mask.any():
        raise ValueError("empty survivor set")
    norms = np.linalg.norm(v, axis=1)
    m = ordered_sum(w[~mask])
    return float(ordered_sum(w[~mask] * norms[~mask]) + m * norms[mask].max())


@dataclass(frozen=True)
class QuantizedVector:
    codes: np.ndarray  # int8
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")


def quantize_int8(v: Sequence[float] | np.ndarray) -> QuantizedVector:
    """Symmetric per-vector absmax quantization; the zero vector gets scale 1."""
    x = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    scale = amax / 127.0 if amax > 0 else 1.0
    codes = np.clip(np.rint(x / scale), -127, 127).astype(np.int8)
    return QuantizedVector(codes=codes, scale=scale)


def dequantize_int8(qv: QuantizedVector) -> np.ndarray:
    return qv.codes.astype(np.float64) * qv.scale


def quantize_rows(x: np.ndarray) -> np.ndarray:
    """Round-trip every vector along the last axis through int8 storage."""
    x = np.asarray(x, dtype=np.float64)
    amax = np.max(np.abs(x), axis=-1, keepdims=True)
    scale = np.where(amax > 0, amax / 127.0, 1.0)
    return np.clip(np.rint(x / scale), -127, 127) * scale

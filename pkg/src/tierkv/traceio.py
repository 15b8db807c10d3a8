"""Attention-trace files.

Binary layout (all little-endian)::

    b"TKVTRACE"                      8 bytes magic
    version, L, H, d, P, T           int64 each
    weights                          float64; step-major, then layer, then head;
                                     step t contributes L*H rows of P+t values
    keys, values                     float64 arrays of shape (L, H, P+T, d)
    meta_len                         int64, then meta_len bytes of UTF-8 JSON

The text variant is line oriented and meant for small hand-written fixtures::

    TKVTRACE-TEXT 1
    shape L H d P T
    w <t> <layer> <head> <P+t floats>
    k <layer> <head> <position> <d floats>
    v <layer> <head> <position> <d floats>

Rows may appear in any order but every row must be given exactly once.
Floats are written with ``repr`` so text files also round-trip exactly.
The text variant carries no metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .workload import AttentionTrace, TraceShape

MAGIC = b"TKVTRACE"
TEXT_MAGIC = "TKVTRACE-TEXT"
VERSION = 1
SIMPLEX_TOL = 1e-6
_HEADER = struct.Struct("<6q")


class TraceFormatError(ValueError):
    pass


def _check_simplex(trace: AttentionTrace) -> None:
    for t, w in enumerate(trace.weights, start=1):
        nan = np.isnan(w)
        partial = nan.any(axis=-1) & ~nan.all(axis=-1)
        if partial.any():
            l, h = np.argwhere(partial)[0]
            raise TraceFormatError(f"step {t} layer {l} head {h}: row is partly NaN")
        ok = ~nan.all(axis=-1)
        if np.any(w[ok] < 0):
            raise TraceFormatError(f"step {t}: negative attention weight")
        sums = w.sum(axis=-1)
        bad = ok & (np.abs(sums - 1.0) > SIMPLEX_TOL)
        if bad.any():
            l, h = np.argwhere(bad)[0]
            raise TraceFormatError(
                f"step {t} layer {l} head {h}: weights sum to {sums[l, h]!r}, not 1 within {SIMPLEX_TOL}")


def _build(shape: TraceShape, weights, keys, values, meta) -> AttentionTrace:
    try:
        trace = AttentionTrace(shape, weights, keys, values, meta)
    except ValueError as e:
        raise TraceFormatError(f"shape mismatch: {e}") from None
    _check_simplex(trace)
    return trace


# --- binary --------------------------------------------------------------

def save_trace(trace: AttentionTrace, path) -> None:
    s = trace.shape
    meta = json.dumps(trace.meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(VERSION, s.n_layers, s.n_heads, s.head_dim, s.prompt_len, s.chain_len))
        for w in trace.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(trace.keys, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(trace.values, dtype="<f8").tobytes())
        fh.write(struct.pack("<q", len(meta)))
        fh.write(meta)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TraceFormatError(
                f"truncated file at byte offset {len(self.data)}: reading {what} needs "
                f"bytes {self.pos}..{self.pos + n}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def floats(self, shape: tuple, what: str) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n, what), dtype="<f8").astype(np.float64).reshape(shape)


def _load_binary(data: bytes) -> AttentionTrace:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise TraceFormatError("malformed header: bad magic bytes")
    version, L, H, d, P, T = _HEADER.unpack(r.take(_HEADER.size, "shape header"))
    if version != VERSION:
        raise TraceFormatError(f"malformed header: unsupported version {version}")
    try:
        shape = TraceShape(L, H, d, P, T)
    except ValueError as e:
        raise TraceFormatError(f"malformed header: {e}") from None
    weights = [r.floats((L, H, P + t), f"weights of step {t}") for t in range(1, T + 1)]
    kv = (L, H, P + T, d)
    keys = r.floats(kv, "keys")
    values = r.floats(kv, "values")
    (n_meta,) = struct.unpack("<q", r.take(8, "metadata length"))
    if n_meta < 0:
        raise TraceFormatError(f"malformed metadata length {n_meta} at byte offset {r.pos - 8}")
    meta = json.loads(r.take(n_meta, "metadata").decode("utf-8"))
    if r.pos != len(data):
        raise TraceFormatError(f"{len(data) - r.pos} trailing bytes after byte offset {r.pos}")
    return _build(shape, weights, keys, values, meta)


# --- text ----------------------------------------------------------------

def save_trace_text(trace: AttentionTrace, path) -> None:
    s = trace.shape
    lines = [f"{TEXT_MAGIC} {VERSION}",
             f"shape {s.n_layers} {s.n_heads} {s.head_dim} {s.prompt_len} {s.chain_len}"]
    for t, w in enumerate(trace.weights, start=1):
        for l in range(s.n_layers):
            for h in range(s.n_heads):
                lines.append(f"w {t} {l} {h} " + " ".join(repr(float(x)) for x in w[l, h]))
    for tag, arr in (("k", trace.keys), ("v", trace.values)):
        for l in range(s.n_layers):
            for h in range(s.n_heads):
                for i in range(s.n_positions):
                    lines.append(f"{tag} {l} {h} {i} " + " ".join(repr(float(x)) for x in arr[l, h, i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_text(text: str) -> AttentionTrace:
    lines = [ln.split() for ln in text.splitlines()]
    rows = [(n, ln) for n, ln in enumerate(lines, start=1) if ln and not ln[0].startswith("#")]
    if not rows or rows[0][1] != [TEXT_MAGIC, str(VERSION)]:
        raise TraceFormatError(f"malformed header: expected '{TEXT_MAGIC} {VERSION}' on the first line")
    if len(rows) < 2 or rows[1][1][0] != "shape" or len(rows[1][1]) != 6:
        raise TraceFormatError("malformed header: expected 'shape L H d P T'")
    try:
        L, H, d, P, T = (int(x) for x in rows[1][1][1:])
        shape = TraceShape(L, H, d, P, T)
    except ValueError as e:
        raise TraceFormatError(f"malformed header: {e}") from None
    weights = [np.full((L, H, P + t), np.nan) for t in range(1, T + 1)]
    kv = {"k": np.full((L, H, P + T, d), np.nan), "v": np.full((L, H, P + T, d), np.nan)}
    seen = set()
    for n, ln in rows[2:]:
        tag = ln[0]
        if tag not in ("w", "k", "v"):
            raise TraceFormatError(f"line {n}: unknown record type {tag!r}")
        try:
            a, b, c = (int(x) for x in ln[1:4])
            vals = np.array([float(x) for x in ln[4:]])
        except ValueError:
            raise TraceFormatError(f"line {n}: malformed {tag!r} record") from None
        if tag == "w":
            in_range, width = 1 <= a <= T and 0 <= b < L and 0 <= c < H, P + a
        else:
            in_range, width = 0 <= a < L and 0 <= b < H and 0 <= c < P + T, d
        if not in_range:
            raise TraceFormatError(f"line {n}: index out of range for shape {shape}")
        if (tag, a, b, c) in seen:
            raise TraceFormatError(f"line {n}: duplicate {tag!r} record {a} {b} {c}")
        if len(vals) != width:
            raise TraceFormatError(f"line {n}: shape mismatch, expected {width} values, got {len(vals)}")
        seen.add((tag, a, b, c))
        if tag == "w":
            weights[a - 1][b, c] = vals
        else:
            kv[tag][a, b, c] = vals
    expected = T * L * H + 2 * L * H * (P + T)
    if len(seen) != expected:
        raise TraceFormatError(f"shape mismatch: expected {expected} records, found {len(seen)}")
    return _build(shape, weights, kv["k"], kv["v"], {})


def load_trace(path) -> AttentionTrace:
    """Read a binary or text trace; the format is detected from the leading bytes."""
    data = Path(path).read_bytes()
    if data.startswith(MAGIC + b"-TEXT"):
        return _load_text(data.decode("utf-8"))
    if data.startswith(MAGIC) or MAGIC.startswith(data):
        return _load_binary(data)
    raise TraceFormatError("malformed header: not a trace file")

"""Exact binomial intervals, Fisher's exact test and result summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

from scipy.special import betainc

BISECT_TOL = 1e-9


def _bisect(f, lo: float, hi: float, tol: float = BISECT_TOL) -> float:
    """Root of an increasing function on [lo, hi]."""
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def beta_quantile(q: float, a: float, b: float) -> float:
    """Inverse of the regularized incomplete beta function I_x(a, b) = q."""
    return _bisect(lambda x: betainc(a, b, x) - q, 0.0, 1.0)


def clopper_pearson(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Exact two-sided binomial confidence interval for ``k`` successes in ``n`` trials."""
    if n <= 0 or not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n and n > 0, got k={k}, n={n}")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must be in (0, 1)")
    alpha = 1.0 - confidence
    lower = 0.0 if k == 0 else beta_quantile(alpha / 2, k, n - k + 1)
    upper = 1.0 if k == n else beta_quantile(1 - alpha / 2, k + 1, n - k)
    return lower, upper


def _log_hypergeom(a: int, r1: int, c1: int, n: int) -> float:
    lf = lambda x: math.lgamma(x + 1)
    r2, c2 = n - r1, n - c1
    b, c = r1 - a, c1 - a
    d = r2 - c
    return lf(r1) + lf(r2) + lf(c1) + lf(c2) - lf(n) - lf(a) - lf(b) - lf(c) - lf(d)


def fisher_exact(a: int, b: int, c: int, d: int) -> float:
    """Two-sided p-value for the table [[a, b], [c, d]].

    Sums the probability of every table with the same margins that is no more
    likely than the observed one.
    """
    if min(a, b, c, d) < 0:
        raise ValueError("table entries must be non-negative")
    if any(int(x) != x for x in (a, b, c, d)):
        raise ValueError("table entries must be integers")
    a, b, c, d = int(a), int(b), int(c), int(d)
    r1, c1, n = a + b, a + c, a + b + c + d
    if 0 in (r1, n - r1, c1, n - c1):
        raise ValueError("degenerate margins: every row and column needs a positive total")
    lo, hi = max(0, c1 - (n - r1)), min(r1, c1)
    logs = {x: _log_hypergeom(x, r1, c1, n) for x in range(lo, hi + 1)}
    obs = logs[a]
    m = max(logs.values())
    thresh = obs + 1e-7 * max(1.0, abs(obs))
    num = sum(math.exp(v - m) for v in logs.values() if v <= thresh)
    den = sum(math.exp(v - m) for v in logs.values())
    return min(1.0, num / den)


def round_half_away(x: float, ndigits: int = 0) -> float:
    q = Decimal(1).scaleb(-ndigits)
    d = Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP)
    return float(d)


@dataclass(frozen=True)
class Summary:
    successes: int
    trials: int
    estimate: float
    ci_low: float
    ci_high: float

    def percent(self) -> tuple[float, float, float]:
        """Estimate and interval in percent, rounded half away from zero."""
        return (round_half_away(100 * self.estimate, 1),
                round_half_away(100 * self.ci_low), round_half_away(100 * self.ci_high))


def summarize_outcomes(outcomes, confidence: float = 0.95) -> Summary:
    """Success rate with its exact interval from a sequence of booleans."""
    flags = [bool(x) for x in outcomes]
    if not flags:
        raise ValueError("no outcomes to summarize")
    k, n = sum(flags), len(flags)
    lo, hi = clopper_pearson(k, n, confidence)
    return Summary(k, n, k / n, lo, hi)


SUMMARY_FIELDS = ["group", "successes", "trials", "estimate", "ci_low", "ci_high",
                  "estimate_pct", "ci_low_pct", "ci_high_pct", "note"]


def summarize(groups: Mapping[str, Sequence], confidence: float = 0.95) -> list[dict]:
    """One row per group, sorted by group key; empty groups yield a warning row."""
    rows = []
    for key in sorted(groups):
        outcomes = list(groups[key])
        if not outcomes:
            rows.append({f: "" for f in SUMMARY_FIELDS} | {"group": key, "trials": 0,
                                                           "note": "skipped: empty group"})
            continue
        s = summarize_outcomes(outcomes, confidence)
        pct = s.percent()
        rows.append({"group": key, "successes": s.successes, "trials": s.trials,
                     "estimate": s.estimate, "ci_low": s.ci_low, "ci_high": s.ci_high,
                     "estimate_pct": pct[0], "ci_low_pct": pct[1], "ci_high_pct": pct[2],
                     "note": ""})
    return rows

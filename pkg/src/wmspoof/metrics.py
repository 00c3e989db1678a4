"""Detection metrics: empirical-quantile calibration, TPR at fixed FPR, medians."""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .errors import EmptyRequest

FPR_LEVELS = (0.10, 0.01, 0.001)


def lower_median(values: Iterable[float]) -> float:
    vals = sorted(values)
    if not vals:
        raise EmptyRequest("median of nothing")
    return vals[(len(vals) - 1) // 2]


def calibrate_threshold(null_scores: Sequence[float], fpr: float) -> float:
    """Smallest null score s with (#null scores strictly above s) <= fpr * n.

    A detector then flags scores strictly above the threshold.  ``fpr == 0``
    returns +inf (nothing passes).
    """
    if len(null_scores) == 0:
        raise EmptyRequest("no null scores to calibrate on")
    if not 0.0 <= fpr <= 1.0:
        raise ValueError(f"fpr must lie in [0, 1], got {fpr}")
    if fpr == 0.0:
        return math.inf
    s = np.sort(np.asarray(null_scores, dtype=np.float64))
    n = len(s)
    allowed = fpr * n * (1.0 + 1e-12)
    # number strictly above s[i] is n - (index of last occurrence of s[i]) - 1
    above = n - np.searchsorted(s, s, side="right")
    ok = np.flatnonzero(above <= allowed)
    return float(s[ok[0]])


def tpr_at_fpr(
    positive_scores: Sequence[float],
    null_scores: Sequence[float],
    fpr_levels: Sequence[float] = FPR_LEVELS,
) -> dict[float, float]:
    if len(positive_scores) == 0:
        raise EmptyRequest("no positive scores")
    pos = np.asarray(positive_scores, dtype=np.float64)
    return {
        fpr: float(np.mean(pos > calibrate_threshold(null_scores, fpr)))
        for fpr in fpr_levels
    }


def median_p(reports) -> float:
    return lower_median(r.p for r in reports)


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    phat = successes / n
    denom = 1.0 + z * z / n
    centre = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


def lattice_ks_pvalue(z: Sequence[float], spacing, rng: np.random.Generator) -> float:
    """KS p-value of lattice-valued z-scores against N(0, 1).

    Detector z-scores are standardized counts, so they sit on a grid with
    step ``spacing`` (per score or shared).  A plain KS test reads that grid
    as a departure from the continuous normal and rejects a perfectly
    calibrated detector far more often than its level.  Each score is spread
    uniformly over its grid cell first, which restores the nominal level.
    """
    z = np.asarray(z, dtype=np.float64)
    if len(z) == 0:
        raise EmptyRequest("no scores to test")
    h = np.broadcast_to(np.asarray(spacing, dtype=np.float64), z.shape)
    return float(stats.kstest(z + h * (rng.random(len(z)) - 0.5), "norm").pvalue)

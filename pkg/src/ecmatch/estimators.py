"""Treatment-effect estimates for the augmented-control design.

The augmented control mean blends the concurrent-control mean with the mean
of all matched EC subjects using a weight ``w`` that is fixed before any
matched outcome is examined::

    delta_a = mean(Y | arm a) - [w * mean(Y | CC) + (1 - w) * mean(Y | matched EC)]

With ``w = n_0 / n_a`` this mimics a balanced allocation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Literal, Sequence

import numpy as np

from .data import TrialDataset, fmt
from .matching import MatchResult, NcMatchResult

Z_CRIT = 1.96

Method = Literal["new_simple", "new_bootstrap", "nc", "raw"]


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class ArmSummary:
    n: int
    mean: float
    variance: float

    @classmethod
    def of(cls, y: np.ndarray) -> "ArmSummary":
        y = np.asarray(y, dtype=float)
        if y.size < 2:
            raise EstimationError(f"need at least 2 outcomes for a sample variance, got {y.size}")
        return cls(int(y.size), float(y.mean()), float(y.var(ddof=1)))


@dataclass(frozen=True)
class EffectEstimate:
    arm: int
    point: float
    se: float
    method: Method
    w: float
    bootstrap_reps: int | None = None

    @property
    def ci_low(self) -> float:
        return self.point - Z_CRIT * self.se

    @property
    def ci_high(self) -> float:
        return self.point + Z_CRIT * self.se


def confidence_interval(point: float, se: float) -> tuple[float, float]:
    """Normal 95% interval ``point -/+ 1.96 se``."""
    if se < 0:
        raise ValueError("se must be nonnegative")
    return point - Z_CRIT * se, point + Z_CRIT * se


def balanced_weight(dataset: TrialDataset, arm: int) -> float:
    """``w = n_0 / n_a``."""
    return dataset.n_a(0) / dataset.n_a(arm)


def _check_w(w: float) -> None:
    if not 0.0 < w < 1.0:
        raise EstimationError(f"w must lie in (0, 1), got {w}")


def _arm_outcomes(dataset: TrialDataset, arm: int) -> np.ndarray:
    if not 0 <= arm <= dataset.k:
        raise EstimationError(f"arm {arm} not present (k = {dataset.k})")
    y = dataset.outcome[dataset.is_rct & (dataset.arm == arm)]
    if y.size == 0:
        raise EstimationError(f"arm {arm} is empty")
    return y


def _matched_outcomes(dataset: TrialDataset, match: MatchResult) -> np.ndarray:
    if match.n_e == 0:
        raise EstimationError("empty match")
    return dataset.outcome[match.ec_index]


def weighted_estimate(dataset: TrialDataset, match: MatchResult, arm: int, w: float) -> float:
    _check_w(w)
    if arm < 1:
        raise EstimationError("arm must be an active arm (>= 1)")
    ya = _arm_outcomes(dataset, arm)
    y0 = _arm_outcomes(dataset, 0)
    ye = _matched_outcomes(dataset, match)
    return float(ya.mean() - (w * y0.mean() + (1.0 - w) * ye.mean()))


def simple_se_from_stats(var_a: float, n_a: int, var_0: float, n_0: int, n_e: int, w: float) -> float:
    return math.sqrt(var_a / n_a + (w * w / n_0 + (1.0 - w) ** 2 / n_e) * var_0)


def simple_se(dataset: TrialDataset, match: MatchResult, arm: int, w: float) -> float:
    """Closed-form SE treating the matched EC outcomes as independent.

    ``S_0^2`` is the sample variance of the combined control group (CC plus
    matched EC).
    """
    _check_w(w)
    a = ArmSummary.of(_arm_outcomes(dataset, arm))
    y0 = _arm_outcomes(dataset, 0)
    ye = _matched_outcomes(dataset, match)
    pooled = ArmSummary.of(np.concatenate([y0, ye]))
    return simple_se_from_stats(a.variance, a.n, pooled.variance, y0.size, ye.size, w)


def _pair_arrays(dataset: TrialDataset, match: MatchResult):
    # sorted by RCT id so the resample mapping does not depend on pair order
    order = sorted(range(match.n_e), key=lambda i: match.pairs[i].rct_id)
    rct = match.rct_index[order]
    ec = match.ec_index[order]
    return dataset.arm[rct], dataset.outcome[rct], dataset.outcome[ec]


def bootstrap_estimates(
    dataset: TrialDataset,
    match: MatchResult,
    arms: Sequence[int],
    w: float | Sequence[float],
    B: int = 500,
    rng: np.random.Generator | None = None,
    batch: int = 1000,
) -> np.ndarray:
    """Weighted estimates over ``B`` resamples of matched pairs, shape ``(B, len(arms))``.

    Each resample draws ``n_r`` (RCT subject, EC match) pairs with replacement.
    Resamples missing the control arm or any requested arm are redrawn, at
    most ``10 * B`` times in total.
    """
    if rng is None:
        rng = np.random.default_rng()
    ws = np.broadcast_to(np.asarray(w, dtype=float), (len(arms),))
    for x in ws:
        _check_w(float(x))
    if match.n_e != dataset.n_r:
        raise EstimationError("bootstrap requires a match covering the entire RCT")
    arm, y_rct, y_ec = _pair_arrays(dataset, match)
    n = arm.size
    labels = [0, *arms]
    # (n, L) indicator and outcome-weighted indicator of each arm
    ind = np.stack([(arm == a) for a in labels], axis=1).astype(float)
    yind = ind * y_rct[:, None]
    out = np.empty((0, len(arms)))
    redraws = 0
    while out.shape[0] < B:
        size = min(batch, B - out.shape[0])
        idx = rng.integers(0, n, size=(size, n))
        # multiplicity of each pair within each resample
        flat = (idx + (np.arange(size) * n)[:, None]).ravel()
        mult = np.bincount(flat, minlength=size * n).reshape(size, n).astype(float)
        counts = mult @ ind
        sums = mult @ yind
        ok = np.all(counts > 0, axis=1)
        redraws += int(np.sum(~ok))
        if redraws > 10 * B:
            raise EstimationError("too many degenerate bootstrap resamples")
        means = sums[ok] / counts[ok]
        ye = (mult[ok] @ y_ec) / n
        est = means[:, 1:] - (ws * means[:, :1] + (1.0 - ws) * ye[:, None])
        out = np.vstack([out, est])
    return out


def bootstrap_se(
    dataset: TrialDataset,
    match: MatchResult,
    arm: int,
    w: float,
    B: int = 500,
    rng: np.random.Generator | None = None,
) -> float:
    """Standard deviation of the weighted estimate across matched-pair resamples."""
    est = bootstrap_estimates(dataset, match, [arm], w, B, rng)[:, 0]
    return float(est.std(ddof=1))


def new_design_estimates(
    dataset: TrialDataset,
    match: MatchResult,
    w: dict[int, float] | None = None,
    se: Literal["simple", "bootstrap", "both"] = "both",
    B: int = 500,
    rng: np.random.Generator | None = None,
) -> list[EffectEstimate]:
    """Estimates for every active arm against the one augmented control group."""
    arms = list(range(1, dataset.k + 1))
    if not arms:
        raise EstimationError("no active arms")
    w = w or {a: balanced_weight(dataset, a) for a in arms}
    out = []
    points = {a: weighted_estimate(dataset, match, a, w[a]) for a in arms}
    if se in ("simple", "both"):
        out += [
            EffectEstimate(a, points[a], simple_se(dataset, match, a, w[a]), "new_simple", w[a])
            for a in arms
        ]
    if se in ("bootstrap", "both"):
        boot = bootstrap_estimates(dataset, match, arms, [w[a] for a in arms], B, rng)
        sds = boot.std(axis=0, ddof=1)
        out += [
            EffectEstimate(a, points[a], float(sds[i]), "new_bootstrap", w[a], bootstrap_reps=B)
            for i, a in enumerate(arms)
        ]
    return out


def nc_estimate(dataset: TrialDataset, nc: NcMatchResult) -> EffectEstimate:
    """NC point estimate from the across-repetition mean of matched EC means.

    The variance is the average of the per-repetition closed-form variances
    (``w = n_0 / n_1``, ``n_e = n_1 - n_0``).
    """
    if dataset.k != 1:
        raise EstimationError("NC estimation requires exactly one active arm")
    y1 = _arm_outcomes(dataset, 1)
    y0 = _arm_outcomes(dataset, 0)
    n1, n0 = y1.size, y0.size
    ne = n1 - n0
    w = n0 / n1
    ye_hat = float(np.mean(nc.ec_means))
    point = float(y1.mean() - (n0 * y0.mean() + ne * ye_hat) / n1)
    s1 = ArmSummary.of(y1)
    variances = []
    for ec in nc.ec_index:
        pooled = ArmSummary.of(np.concatenate([y0, dataset.outcome[ec]]))
        variances.append(simple_se_from_stats(s1.variance, n1, pooled.variance, n0, len(ec), w) ** 2)
    return EffectEstimate(1, point, math.sqrt(float(np.mean(variances))), "nc", w)


def raw_estimate(dataset: TrialDataset, arm: int) -> EffectEstimate:
    """RCT-only contrast with the two-independent-samples SE."""
    if arm < 1:
        raise EstimationError("arm must be an active arm (>= 1)")
    a = ArmSummary.of(_arm_outcomes(dataset, arm))
    c = ArmSummary.of(_arm_outcomes(dataset, 0))
    return EffectEstimate(arm, a.mean - c.mean, math.sqrt(a.variance / a.n + c.variance / c.n), "raw", 1.0)


ESTIMATE_COLUMNS = ("arm", "method", "point", "se", "ci_low", "ci_high", "w", "seed", "B")


def write_estimates(estimates: Iterable[EffectEstimate], handle, seed: int | None = None) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(ESTIMATE_COLUMNS)
    for e in estimates:
        writer.writerow([
            e.arm, e.method, fmt(e.point), fmt(e.se), fmt(e.ci_low), fmt(e.ci_high), fmt(e.w),
            "" if seed is None else seed,
            "" if e.bootstrap_reps is None else e.bootstrap_reps,
        ])


__all__ = [
    "ArmSummary", "EffectEstimate", "EstimationError", "Z_CRIT", "balanced_weight",
    "bootstrap_estimates", "bootstrap_se", "confidence_interval", "nc_estimate",
    "new_design_estimates", "raw_estimate", "simple_se", "simple_se_from_stats",
    "weighted_estimate", "write_estimates",
]

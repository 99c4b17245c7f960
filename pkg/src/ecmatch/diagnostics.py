"""Covariate balance and overlap checks that run before unblinding.

Nothing here reads treatment-arm labels.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .data import TrialDataset, fmt
from .matching import MatchResult
from .propensity import PropensityModel, probability

DEFAULT_ETA = 0.01


@dataclass(frozen=True)
class CovariateBalance:
    name: str
    smd_before: float
    smd_after: float | None
    computable: bool = True


@dataclass(frozen=True)
class ScoreSummary:
    source: str
    n: int
    min: float
    q1: float
    median: float
    q3: float
    max: float


@dataclass(frozen=True)
class BalanceReport:
    covariates: tuple[CovariateBalance, ...]
    scores: tuple[ScoreSummary, ...]
    eta: float
    overlap_violations: int

    @property
    def overlap_ok(self) -> bool:
        return self.overlap_violations == 0

    @property
    def max_abs_smd_before(self) -> float:
        return max((abs(c.smd_before) for c in self.covariates if c.computable), default=0.0)

    @property
    def max_abs_smd_after(self) -> float | None:
        if any(c.smd_after is None for c in self.covariates):
            return None
        return max((abs(c.smd_after) for c in self.covariates if c.computable), default=0.0)


def smd(x_ref: np.ndarray, x_cmp: np.ndarray) -> float:
    """Standardized mean difference with an equally pooled variance.

    ``(mean(x_ref) - mean(x_cmp)) / sqrt((var_ref + var_cmp) / 2)``. A zero
    pooled variance gives 0 when the means agree and ``nan`` otherwise.
    """
    x_ref = np.asarray(x_ref, dtype=float)
    x_cmp = np.asarray(x_cmp, dtype=float)
    diff = x_ref.mean() - x_cmp.mean()
    v_ref = x_ref.var(ddof=1) if x_ref.size > 1 else 0.0
    v_cmp = x_cmp.var(ddof=1) if x_cmp.size > 1 else 0.0
    pooled = math.sqrt((v_ref + v_cmp) / 2.0)
    if pooled == 0.0:
        return 0.0 if diff == 0.0 else math.nan
    return float(diff / pooled)


def _summary(name: str, p: np.ndarray) -> ScoreSummary:
    if p.size == 0:
        nan = math.nan
        return ScoreSummary(name, 0, nan, nan, nan, nan, nan)
    q = np.quantile(p, [0.0, 0.25, 0.5, 0.75, 1.0])
    return ScoreSummary(name, int(p.size), *(float(v) for v in q))


def balance_report(
    dataset: TrialDataset,
    model: PropensityModel,
    match: MatchResult | None = None,
    eta: float = DEFAULT_ETA,
) -> BalanceReport:
    """SMDs of RCT vs. the EC pool (and vs. the matched EC set), score
    quartiles per source, and the count of RCT subjects with estimated
    Pr(RCT | X) above ``1 - eta``."""
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    x = dataset.covariates
    rct, ec = dataset.is_rct, dataset.is_ec
    matched = match.ec_index if match is not None else None
    rows = []
    for j, name in enumerate(dataset.covariate_names):
        before = smd(x[rct, j], x[ec, j])
        after = smd(x[rct, j], x[matched, j]) if matched is not None else None
        ok = not math.isnan(before) and (after is None or not math.isnan(after))
        rows.append(CovariateBalance(name, before, after, ok))
    p = np.asarray(probability(model, x), dtype=float).reshape(-1)
    summaries = [_summary("rct", p[rct]), _summary("ec", p[ec])]
    if matched is not None:
        summaries.append(_summary("matched_ec", p[matched]))
    return BalanceReport(
        covariates=tuple(rows),
        scores=tuple(summaries),
        eta=eta,
        overlap_violations=int(np.sum(p[rct] > 1.0 - eta)),
    )


def write_report(report: BalanceReport, handle) -> None:
    """Delimited table: one block of SMD rows, one of score summaries."""
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(["covariate", "smd_before", "smd_after", "computable"])
    for c in report.covariates:
        writer.writerow([
            c.name, fmt(c.smd_before), "" if c.smd_after is None else fmt(c.smd_after),
            str(c.computable).lower(),
        ])
    writer.writerow([])
    writer.writerow(["source", "n", "min", "q1", "median", "q3", "max"])
    for s in report.scores:
        writer.writerow([s.source, s.n, fmt(s.min), fmt(s.q1), fmt(s.median), fmt(s.q3), fmt(s.max)])
    writer.writerow([])
    writer.writerow(["eta", "overlap_violations", "overlap_ok"])
    writer.writerow([fmt(report.eta), report.overlap_violations, str(report.overlap_ok).lower()])

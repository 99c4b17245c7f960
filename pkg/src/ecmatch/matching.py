"""1:1 matching of RCT subjects to external controls without replacement.

``optimal_match`` pairs the entire RCT with distinct EC subjects so that the
total score distance is minimal. ``greedy_match`` is a diagnostic
nearest-available-neighbour alternative, and ``nc_match`` implements the
repeated "no concurrent" baseline that only matches a random subset of the
treated arm.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .data import TrialDataset, fmt
from .propensity import PropensityModel, scores


class MatchingError(RuntimeError):
    pass


class InfeasibleMatchError(MatchingError):
    def __init__(self, message: str, unmatchable: int):
        super().__init__(message)
        self.unmatchable = unmatchable


@dataclass(frozen=True)
class MatchPair:
    rct_id: str
    ec_id: str
    distance: float
    rct_index: int
    ec_index: int
    rct_score: float
    ec_score: float


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[MatchPair, ...]
    total_distance: float
    algorithm: Literal["optimal", "greedy"]

    @property
    def n_e(self) -> int:
        return len(self.pairs)

    @property
    def rct_index(self) -> np.ndarray:
        return np.array([p.rct_index for p in self.pairs], dtype=np.int64)

    @property
    def ec_index(self) -> np.ndarray:
        return np.array([p.ec_index for p in self.pairs], dtype=np.int64)


@dataclass(frozen=True)
class NcMatchResult:
    """Per-repetition matched EC sets of the NC baseline.

    ``treated_index[j]`` holds the dataset rows of the treated subjects that
    were matched externally in repetition ``j``; ``ec_index[j]`` their matches.
    """

    ec_index: tuple[np.ndarray, ...]
    treated_index: tuple[np.ndarray, ...]
    ec_means: np.ndarray

    @property
    def J(self) -> int:
        return len(self.ec_index)

    @property
    def distinct_matches(self) -> int:
        return int(np.unique(np.concatenate(self.ec_index)).size)

    def head(self, J: int) -> "NcMatchResult":
        """The first ``J`` repetitions as a result of their own."""
        if not 1 <= J <= self.J:
            raise ValueError(f"J must be in [1, {self.J}]")
        return NcMatchResult(self.ec_index[:J], self.treated_index[:J], self.ec_means[:J])


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------

def distance_matrix(scores_rct, scores_ec, caliper: float | None = None) -> np.ndarray:
    """``|scores_rct[i] - scores_ec[j]|``, with ``inf`` where the caliper is exceeded."""
    a = np.asarray(scores_rct, dtype=float).reshape(-1)
    b = np.asarray(scores_ec, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("score vectors must be nonempty")
    dist = np.abs(a[:, None] - b[None, :])
    if caliper is not None:
        if caliper < 0:
            raise ValueError("caliper must be nonnegative")
        dist[dist > caliper] = np.inf
    return dist


def _unmatchable(cost: np.ndarray) -> int:
    adj = csr_matrix(np.isfinite(cost).astype(np.int8))
    match = maximum_bipartite_matching(adj, perm_type="column")
    return int(np.sum(match < 0))


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column.

    Successive shortest augmenting paths with Dijkstra on reduced costs
    (Hungarian potentials); rows are inserted in input order and ties go to
    the lowest column index. ``inf`` marks inadmissible edges. Returns the
    column chosen for each row.
    """
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n > m:
        raise MatchingError(f"{n} rows cannot be assigned to {m} distinct columns")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # 1-based row owning column j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    C = np.empty((n + 1, m + 1))
    C[1:, 1:] = cost
    C[0, :] = 0.0
    C[:, 0] = np.inf
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = C[i0] - u[i0] - v
            better = (~used) & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(used, np.inf, minv)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            if not np.isfinite(delta):
                raise InfeasibleMatchError("no admissible augmenting path", _unmatchable(cost))
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    assign = np.empty(n, dtype=np.int64)
    cols = np.flatnonzero(owner[1:])
    assign[owner[1:][cols] - 1] = cols
    return assign


def candidate_columns(cost: np.ndarray) -> np.ndarray:
    """Columns that can appear in some optimal assignment, as a sorted subset.

    Any row assigned outside its ``n`` cheapest columns can move to one of
    them that is free (only ``n - 1`` other rows exist) without raising the
    cost, so the union of each row's ``n`` cheapest columns always contains an
    optimum.
    """
    n, m = cost.shape
    if m <= 2 * n:
        return np.arange(m)
    part = np.argpartition(cost, n - 1, axis=1)[:, :n]
    return np.unique(part)


def _assign_pruned(cost: np.ndarray) -> np.ndarray:
    if cost.shape[0] > cost.shape[1]:
        raise MatchingError(f"{cost.shape[0]} rows cannot be assigned to {cost.shape[1]} distinct columns")
    cols = candidate_columns(cost)
    return cols[solve_assignment(cost[:, cols])]


def _as_result(dataset, rct_rows, ec_rows, assign, s, algorithm) -> MatchResult:
    pairs = []
    for r, c in zip(rct_rows, ec_rows[assign]):
        pairs.append(MatchPair(
            rct_id=str(dataset.ids[r]), ec_id=str(dataset.ids[c]),
            distance=float(abs(s[r] - s[c])),
            rct_index=int(r), ec_index=int(c),
            rct_score=float(s[r]), ec_score=float(s[c]),
        ))
    return MatchResult(tuple(pairs), float(sum(p.distance for p in pairs)), algorithm)


def _check_pool(n: int, m: int) -> None:
    if m < n:
        raise InfeasibleMatchError(f"EC pool ({m}) smaller than the RCT ({n})", n - m)


def optimal_match(
    dataset: TrialDataset,
    model: PropensityModel,
    caliper: float | None = None,
    scale: str = "logit",
) -> MatchResult:
    """Optimal 1:1 matching of every RCT subject to a distinct EC subject.

    Arm labels are never read, so the result is available before unblinding.
    """
    s = scores(model, dataset, scale)
    rct, ec = dataset.rct_index, dataset.ec_index
    _check_pool(len(rct), len(ec))
    cost = distance_matrix(s[rct], s[ec], caliper)
    if caliper is not None:
        short = _unmatchable(cost)
        if short:
            raise InfeasibleMatchError(
                f"caliper {caliper:g} leaves {short} RCT subject(s) unmatchable", short
            )
    return _as_result(dataset, rct, ec, _assign_pruned(cost), s, "optimal")


def greedy_match(
    dataset: TrialDataset,
    model: PropensityModel,
    order: Literal["input-order", "by-score-extremity"] = "input-order",
    caliper: float | None = None,
    scale: str = "logit",
) -> MatchResult:
    """Nearest-available-neighbour matching without replacement.

    ``by-score-extremity`` processes RCT subjects from the highest score down
    (the hardest to match first); ties keep input order.
    """
    s = scores(model, dataset, scale)
    rct, ec = dataset.rct_index, dataset.ec_index
    _check_pool(len(rct), len(ec))
    cost = distance_matrix(s[rct], s[ec], caliper)
    if order == "input-order":
        seq = np.arange(len(rct))
    elif order == "by-score-extremity":
        seq = np.argsort(-s[rct], kind="stable")
    else:
        raise ValueError(f"unknown order {order!r}")
    taken = np.zeros(len(ec), dtype=bool)
    assign = np.empty(len(rct), dtype=np.int64)
    for i in seq:
        row = np.where(taken, np.inf, cost[i])
        j = int(np.argmin(row))
        if not np.isfinite(row[j]):
            raise InfeasibleMatchError("greedy matching ran out of admissible controls", _unmatchable(cost))
        taken[j] = True
        assign[i] = j
    return _as_result(dataset, rct, ec, assign, s, "greedy")


def nc_match(
    dataset: TrialDataset,
    model: PropensityModel,
    J: int,
    rng: np.random.Generator,
    scale: str = "logit",
) -> NcMatchResult:
    """Repeated NC matching for a two-arm trial.

    Each repetition reserves a uniformly random ``n_0`` treated subjects as
    implicit matches for the concurrent controls and optimally matches the
    remaining ``n_1 - n_0`` treated subjects to distinct EC subjects.
    """
    if dataset.k != 1:
        raise MatchingError("NC matching requires exactly one active arm")
    if J < 1:
        raise ValueError("J must be a positive integer")
    n0, n1 = dataset.n_a(0), dataset.n_a(1)
    if n1 <= n0:
        raise MatchingError("NC matching requires n_1 > n_0")
    s = scores(model, dataset, scale)
    treated = np.flatnonzero(dataset.is_rct & (dataset.arm == 1))
    ec = dataset.ec_index
    _check_pool(n1 - n0, len(ec))
    full_cost = distance_matrix(s[treated], s[ec])
    ec_sets, tr_sets, means = [], [], []
    for _ in range(J):
        keep = np.sort(rng.permutation(n1)[n0:])
        assign = _assign_pruned(full_cost[keep])
        matched = ec[assign]
        ec_sets.append(matched)
        tr_sets.append(treated[keep])
        means.append(dataset.outcome[matched].mean())
    return NcMatchResult(tuple(ec_sets), tuple(tr_sets), np.array(means))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

PAIR_COLUMNS = ("rct_id", "ec_id", "rct_score_logit", "ec_score_logit", "distance")


def pairs_to_csv(match: MatchResult) -> str:
    """Matched pairs as comma-separated text, ordered as in the RCT input."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PAIR_COLUMNS)
    for p in match.pairs:
        writer.writerow([p.rct_id, p.ec_id, fmt(p.rct_score), fmt(p.ec_score), fmt(p.distance)])
    return buf.getvalue()


def content_hash(match: MatchResult) -> str:
    """SHA-256 of the matched-pair table; locks the matched set before unblinding."""
    return hashlib.sha256(pairs_to_csv(match).encode()).hexdigest()

"""Subjects, trial datasets and delimited-text ingestion.

A :class:`TrialDataset` stores one row per subject in column arrays. RCT
subjects carry ``source == 1`` and an arm label in ``0..k`` (0 is the
concurrent control); external-control (EC) subjects carry ``source == 0`` and
arm 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class DataError(ValueError):
    """Raised when input data violates the dataset contract."""


class Source(IntEnum):
    EC = 0
    RCT = 1


@dataclass(frozen=True)
class Subject:
    id: str
    source: Source
    arm: int
    outcome: float
    covariates: tuple[float, ...]


@dataclass(frozen=True)
class Schema:
    """Column mapping for delimited input.

    ``covariates=None`` takes every column after the four named ones, in file
    order.
    """

    id: str = "id"
    source: str = "source"
    arm: str = "arm"
    outcome: str = "outcome"
    covariates: tuple[str, ...] | None = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Immutable column-oriented trial + external-control dataset.

    When ``blinded`` is true the arm column was never read: every RCT subject
    carries arm 0, ``k`` is 0 and the per-arm invariants are not checked.
    """

    ids: np.ndarray
    source: np.ndarray
    arm: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...] = ()
    blinded: bool = False
    k: int = field(init=False)

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids, dtype=object).astype(str)
        source = np.asarray(self.source, dtype=np.int64)
        arm = np.asarray(self.arm, dtype=np.int64)
        outcome = np.asarray(self.outcome, dtype=np.float64)
        x = np.asarray(self.covariates, dtype=np.float64)
        n = len(ids)
        if x.ndim == 1:
            x = x.reshape(n, -1) if n else x.reshape(0, 0)
        if not (len(source) == len(arm) == len(outcome) == x.shape[0] == n):
            raise DataError("column lengths differ")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError("covariate_names length does not match covariate dimension")
        if len(set(ids.tolist())) != n:
            raise DataError("duplicate subject id")
        if not np.isin(source, (0, 1)).all():
            raise DataError("source must be 1 (RCT) or 0 (EC)")
        if not np.isfinite(outcome).all():
            raise DataError("outcomes must be finite")
        if not np.isfinite(x).all():
            raise DataError("covariates must be finite")
        if np.any(arm[source == 0] != 0):
            raise DataError("EC arm must be control")
        if self.blinded:
            arm = np.zeros_like(arm)
            k = 0
        else:
            rct_arms = arm[source == 1]
            if rct_arms.size == 0:
                raise DataError("dataset has no RCT subjects")
            if rct_arms.min() < 0:
                raise DataError("arm labels must be nonnegative")
            k = int(rct_arms.max())
            counts = np.bincount(rct_arms, minlength=k + 1)
            if counts[0] < 1:
                raise DataError("empty arm: control arm has no subjects")
            empty = [a for a in range(1, k + 1) if counts[a] == 0]
            if empty:
                raise DataError(f"empty arm: {empty}")
        for name, value in (
            ("ids", ids), ("source", source), ("arm", arm),
            ("outcome", outcome), ("covariates", x),
        ):
            object.__setattr__(self, name, _readonly(value))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "k", k)

    # counts ------------------------------------------------------------
    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def is_rct(self) -> np.ndarray:
        return self.source == 1

    @property
    def is_ec(self) -> np.ndarray:
        return self.source == 0

    @property
    def n_r(self) -> int:
        return int(self.is_rct.sum())

    @property
    def m_e(self) -> int:
        return int(self.is_ec.sum())

    @property
    def arm_counts(self) -> np.ndarray:
        """``n_a`` for ``a = 0..k``."""
        return np.bincount(self.arm[self.is_rct], minlength=self.k + 1)

    def n_a(self, a: int) -> int:
        return int(np.sum(self.is_rct & (self.arm == a)))

    @property
    def rct_index(self) -> np.ndarray:
        return np.flatnonzero(self.is_rct)

    @property
    def ec_index(self) -> np.ndarray:
        return np.flatnonzero(self.is_ec)

    def __len__(self) -> int:
        return len(self.ids)

    def subjects(self) -> Iterator[Subject]:
        for i in range(len(self)):
            yield Subject(
                id=str(self.ids[i]),
                source=Source(int(self.source[i])),
                arm=int(self.arm[i]),
                outcome=float(self.outcome[i]),
                covariates=tuple(float(v) for v in self.covariates[i]),
            )

    @classmethod
    def from_subjects(cls, subjects: Sequence[Subject], covariate_names: Sequence[str] = ()) -> "TrialDataset":
        if not subjects:
            raise DataError("no subjects")
        dims = {len(s.covariates) for s in subjects}
        if len(dims) != 1:
            raise DataError("covariate dimension differs across subjects")
        p = dims.pop()
        return cls(
            ids=np.array([s.id for s in subjects], dtype=object),
            source=np.array([int(s.source) for s in subjects]),
            arm=np.array([s.arm for s in subjects]),
            outcome=np.array([s.outcome for s in subjects], dtype=float),
            covariates=np.array([s.covariates for s in subjects], dtype=float).reshape(len(subjects), p),
            covariate_names=tuple(covariate_names),
        )

    def with_outcome(self, outcome: np.ndarray) -> "TrialDataset":
        return TrialDataset(
            ids=self.ids, source=self.source, arm=self.arm, outcome=outcome,
            covariates=self.covariates, covariate_names=self.covariate_names,
            blinded=self.blinded,
        )


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def _parse_float(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {line}: non-numeric value {text!r} in column {column!r}") from None
    if not math.isfinite(value):
        raise DataError(f"line {line}: non-finite value {text!r} in column {column!r}")
    return value


def _parse_int(text: str, column: str, line: int) -> int:
    value = _parse_float(text, column, line)
    if value != int(value):
        raise DataError(f"line {line}: non-integer value {text!r} in column {column!r}")
    return int(value)


def _data_lines(handle) -> Iterator[str]:
    for raw in handle:
        if raw.startswith("#") or not raw.strip():
            continue
        yield raw


def load_dataset(path: str | Path, schema: Schema = Schema(), blinded: bool = False) -> TrialDataset:
    """Read a comma-separated file into a validated :class:`TrialDataset`.

    Lines starting with ``#`` are skipped. ``source`` is 1 for RCT and 0 for
    EC; a blank ``arm`` is accepted for EC rows. With ``blinded=True`` the arm
    column is neither required nor read.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(_data_lines(fh))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("empty file") from None
        required = [schema.id, schema.source, schema.outcome]
        if not blinded:
            required.append(schema.arm)
        missing = [c for c in required if c not in header]
        if schema.covariates is not None:
            missing += [c for c in schema.covariates if c not in header]
        if missing:
            raise DataError(f"missing column(s): {', '.join(missing)}")
        if schema.covariates is None:
            named = {schema.id, schema.source, schema.arm, schema.outcome}
            cov_names = tuple(h for h in header if h not in named)
        else:
            cov_names = tuple(schema.covariates)
        col = {h: j for j, h in enumerate(header)}
        ids, source, arm, outcome, x = [], [], [], [], []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}")
            row = [v.strip() for v in row]
            ids.append(row[col[schema.id]])
            src = _parse_int(row[col[schema.source]], schema.source, line)
            if src not in (0, 1):
                raise DataError(f"line {line}: source must be 1 (RCT) or 0 (EC)")
            source.append(src)
            if blinded:
                arm.append(0)
            else:
                text = row[col[schema.arm]]
                if text == "":
                    if src == 1:
                        raise DataError(f"line {line}: RCT row has blank arm")
                    a = 0
                else:
                    a = _parse_int(text, schema.arm, line)
                if src == 0 and a != 0:
                    raise DataError(f"line {line}: EC arm must be control")
                arm.append(a)
            if row[col[schema.outcome]] == "":
                raise DataError(f"line {line}: missing outcome")
            outcome.append(_parse_float(row[col[schema.outcome]], schema.outcome, line))
            x.append([_parse_float(row[col[c]], c, line) for c in cov_names])
    if not ids:
        raise DataError("file has no data rows")
    return TrialDataset(
        ids=np.array(ids, dtype=object),
        source=np.array(source),
        arm=np.array(arm),
        outcome=np.array(outcome, dtype=float),
        covariates=np.array(x, dtype=float).reshape(len(ids), len(cov_names)),
        covariate_names=cov_names,
        blinded=blinded,
    )


def fmt(value: float) -> str:
    """Shortest round-tripping text form of a float."""
    return repr(float(value))


def save_dataset(dataset: TrialDataset, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "source", "arm", "outcome", *dataset.covariate_names])
        for i in range(len(dataset)):
            writer.writerow([
                dataset.ids[i],
                int(dataset.source[i]),
                int(dataset.arm[i]),
                fmt(dataset.outcome[i]),
                *(fmt(v) for v in dataset.covariates[i]),
            ])


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupSummary:
    group: str
    n: int
    outcome_mean: float
    covariate_means: tuple[float, ...]


def summarize(dataset: TrialDataset) -> list[GroupSummary]:
    """Counts, outcome means and covariate means per RCT arm, per source."""
    groups: list[tuple[str, np.ndarray]] = []
    if not dataset.blinded:
        for a in range(dataset.k + 1):
            groups.append((f"rct_arm_{a}", dataset.is_rct & (dataset.arm == a)))
    groups.append(("rct", dataset.is_rct))
    groups.append(("ec", dataset.is_ec))
    rows = []
    for name, mask in groups:
        n = int(mask.sum())
        if n == 0:
            rows.append(GroupSummary(name, 0, math.nan, tuple([math.nan] * dataset.p)))
            continue
        rows.append(GroupSummary(
            name, n,
            float(dataset.outcome[mask].mean()),
            tuple(float(v) for v in dataset.covariates[mask].mean(axis=0)),
        ))
    return rows


def write_summary(rows: list[GroupSummary], covariate_names: Sequence[str], handle) -> None:
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(["group", "n", "outcome_mean", *(f"mean_{c}" for c in covariate_names)])
    for r in rows:
        writer.writerow([r.group, r.n, fmt(r.outcome_mean), *(fmt(v) for v in r.covariate_means)])

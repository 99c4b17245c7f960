"""Monte Carlo evaluation of the augmented-control designs.

Trials are generated from a synthetic super-population of
``(Y0, HbA1c, BMI, waist, gender, age)`` records. Each drawn record joins the
RCT with probability given by a logistic selection model whose intercept is
calibrated so that RCT:EC is about 1:10; drawing stops once the RCT is full.

Every replication derives its own random streams from
``SeedSequence(master_seed, spawn_key=(replication, attempt))``, so results do
not depend on the number of workers or the order in which they finish.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .data import TrialDataset, fmt
from .estimators import (
    EstimationError, Z_CRIT, bootstrap_estimates, nc_estimate, raw_estimate,
    simple_se, weighted_estimate,
)
from .matching import MatchingError, nc_match, optimal_match
from .propensity import FitError, fit_propensity

COVARIATE_NAMES = ("hba1c", "bmi", "waist", "gender", "age")
SELECTION_COEFFICIENTS = (1.0, 0.05, 0.01, 0.4, -0.02)
TARGET_RCT_SHARE = 1.0 / 11.0
DEFAULT_SUPERPOP_SEED = 20230101
DEFAULT_SUPERPOP_SIZE = 100_000
METHODS = ("raw", "nc", "new_simple", "new_bootstrap")


class GenerationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# super-population and selection
# ---------------------------------------------------------------------------

# (mean, sd, lower, upper) of the truncated-normal covariates
_TRUNCNORM = {
    "hba1c": (8.0, 1.0, 5.5, 12.0),
    "bmi": (32.0, 6.0, 18.0, 55.0),
    "waist": (105.0, 14.0, 60.0, 160.0),
    "age": (55.0, 10.0, 18.0, 80.0),
}


@dataclass(frozen=True, eq=False)
class SuperPopulation:
    y0: np.ndarray
    x: np.ndarray
    seed: int | None = None

    def __post_init__(self) -> None:
        for name in ("y0", "x"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def N(self) -> int:
        return len(self.y0)


def _truncnorm(rng, mean, sd, lo, hi, size):
    return stats.truncnorm.rvs((lo - mean) / sd, (hi - mean) / sd, loc=mean, scale=sd,
                               size=size, random_state=rng)


def make_superpopulation(seed: int = DEFAULT_SUPERPOP_SEED, N: int = DEFAULT_SUPERPOP_SIZE) -> SuperPopulation:
    """Synthetic stand-in for a diabetes-trial population.

    Outcome is the placebo change in HbA1c, mildly dependent on baseline
    HbA1c and BMI.
    """
    if N < 10_000:
        raise ValueError("super-population needs N >= 10,000")
    rng = np.random.default_rng(seed)
    x1 = _truncnorm(rng, *_TRUNCNORM["hba1c"], N)
    x2 = _truncnorm(rng, *_TRUNCNORM["bmi"], N)
    x3 = _truncnorm(rng, *_TRUNCNORM["waist"], N)
    x4 = rng.binomial(1, 0.5, N).astype(float)
    x5 = _truncnorm(rng, *_TRUNCNORM["age"], N)
    y0 = 0.3 - 0.35 * (x1 - 8.0) + 0.02 * (x2 - 32.0) + rng.normal(0.0, 0.9, N)
    return SuperPopulation(y0=y0, x=np.column_stack([x1, x2, x3, x4, x5]), seed=seed)


@lru_cache(maxsize=4)
def default_superpopulation(seed: int = DEFAULT_SUPERPOP_SEED, N: int = DEFAULT_SUPERPOP_SIZE) -> SuperPopulation:
    return make_superpopulation(seed, N)


def calibrate_alpha(
    x: np.ndarray | SuperPopulation,
    coefficients: Sequence[float] = SELECTION_COEFFICIENTS,
    target: float = TARGET_RCT_SHARE,
    lo: float = -60.0,
    hi: float = 10.0,
    tol: float = 1e-4,
    max_iter: int = 200,
) -> float:
    """Bisection for the intercept giving mean selection probability ``target``."""
    if isinstance(x, SuperPopulation):
        x = x.x
    lin = np.asarray(x, dtype=float) @ np.asarray(coefficients, dtype=float)

    def gap(alpha):
        return float(np.mean(expit(alpha + lin))) - target

    g_lo, g_hi = gap(lo), gap(hi)
    if not g_lo < 0.0 < g_hi:
        raise ValueError(f"bracket [{lo}, {hi}] does not contain the calibrated intercept")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        g = gap(mid)
        if abs(g) < tol:
            return mid
        if g < 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class SelectionModel:
    alpha: float
    coefficients: tuple[float, ...] = SELECTION_COEFFICIENTS
    target_ratio: float = 10.0  # EC subjects per RCT subject

    def probability(self, x: np.ndarray) -> np.ndarray:
        return expit(self.alpha + np.asarray(x, dtype=float) @ np.asarray(self.coefficients))

    @classmethod
    def calibrated(
        cls,
        superpop: SuperPopulation,
        coefficients: Sequence[float] = SELECTION_COEFFICIENTS,
        target_ratio: float = 10.0,
        tol: float = 1e-4,
    ) -> "SelectionModel":
        alpha = calibrate_alpha(superpop, coefficients, 1.0 / (1.0 + target_ratio), tol=tol)
        return cls(alpha, tuple(coefficients), target_ratio)


# ---------------------------------------------------------------------------
# scenarios and trial generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """A simulation setting.

    ``allocation`` lists the randomization ratio by arm index, control first:
    ``(1, 2)`` is 2:1 active:placebo, ``(1, 2, 2)`` is 2:2:1.
    ``epsilon_var`` is the variance of the Setting-1 noise.
    """

    setting: int
    n_r: int
    allocation: tuple[int, ...] | None = None
    epsilon_var: float = 0.5

    def __post_init__(self) -> None:
        if self.setting not in (1, 2, 3):
            raise ValueError("setting must be 1, 2 or 3")
        alloc = self.allocation or ((1, 2, 2) if self.setting == 3 else (1, 2))
        if self.setting == 3 and len(alloc) != 3:
            raise ValueError("setting 3 has two active arms")
        if self.setting in (1, 2) and len(alloc) != 2:
            raise ValueError("settings 1 and 2 have one active arm")
        if self.n_r % sum(alloc):
            raise ValueError(f"n_r={self.n_r} is not divisible by the allocation ratio {alloc}")
        if self.epsilon_var < 0:
            raise ValueError("epsilon_var must be nonnegative")
        object.__setattr__(self, "allocation", tuple(alloc))

    @property
    def k(self) -> int:
        return len(self.allocation) - 1

    @property
    def arm_counts(self) -> tuple[int, ...]:
        unit = self.n_r // sum(self.allocation)
        return tuple(unit * r for r in self.allocation)

    def potential_outcomes(self, y0: np.ndarray, x: np.ndarray, eps: np.ndarray) -> np.ndarray:
        """Columns ``Y(0), ..., Y(k)`` for the given records."""
        if self.setting == 1:
            return np.column_stack([y0, y0 + eps])
        if self.setting == 2:
            return np.column_stack([y0, y0 - 1.0])
        return np.column_stack([y0, y0 - 1.0, y0 - 0.2 * x[:, 0]])

    def arm_effects(self, y0: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Per-record expected ``Y(a) - Y(0)`` for ``a = 1..k`` (noise averaged out)."""
        po = self.potential_outcomes(y0, x, np.zeros_like(y0))
        return po[:, 1:] - po[:, :1]


@dataclass(frozen=True, eq=False)
class SimulatedTrial:
    dataset: TrialDataset
    potential_outcomes: np.ndarray  # (n, k+1)
    draws: int


def generate_trial(
    superpop: SuperPopulation,
    selection: SelectionModel,
    scenario: Scenario,
    rng: np.random.Generator,
) -> SimulatedTrial:
    """Draw records with replacement until the RCT holds ``n_r`` subjects.

    Independent child streams drive the record draws, the treatment
    randomization and the Setting-1 noise, so scenarios that share a seed share
    subjects and allocation.
    """
    draw_rng, alloc_rng, eps_rng = rng.spawn(3)
    n_r = scenario.n_r
    p_all = selection.probability(superpop.x)
    block = max(64, int(1.5 * n_r * (1.0 + selection.target_ratio)))
    picks, ds = [], []
    n_rct = 0
    while n_rct < n_r:
        idx = draw_rng.integers(0, superpop.N, block)
        d = draw_rng.random(block) < p_all[idx]
        cum = n_rct + np.cumsum(d)
        if cum[-1] >= n_r:
            stop = int(np.argmax(cum >= n_r)) + 1
            idx, d = idx[:stop], d[:stop]
        picks.append(idx)
        ds.append(d)
        n_rct += int(d.sum())
    idx = np.concatenate(picks)
    d = np.concatenate(ds).astype(np.int64)
    n = idx.size
    if n - n_r < n_r:
        raise GenerationError(f"EC pool ({n - n_r}) smaller than the RCT ({n_r})")

    labels = np.repeat(np.arange(scenario.k + 1), scenario.arm_counts)
    arm = np.zeros(n, dtype=np.int64)
    arm[d == 1] = alloc_rng.permutation(labels)

    y0 = superpop.y0[idx]
    x = superpop.x[idx]
    eps = eps_rng.normal(0.0, math.sqrt(scenario.epsilon_var), n)
    po = scenario.potential_outcomes(y0, x, eps)
    y = np.where(d == 1, po[np.arange(n), arm], y0)
    dataset = TrialDataset(
        ids=np.array([f"s{i:05d}" for i in range(n)], dtype=object),
        source=d, arm=arm, outcome=y, covariates=x, covariate_names=COVARIATE_NAMES,
    )
    return SimulatedTrial(dataset, po, n)


def true_theta(superpop: SuperPopulation, selection: SelectionModel, scenario: Scenario, arm: int) -> float:
    """``E(Y(a) - Y(0) | D = 1)`` over the super-population.

    Records are drawn uniformly, so the expectation is the selection-weighted
    mean of the per-record effect, computed exactly.
    """
    if not 1 <= arm <= scenario.k:
        raise ValueError(f"arm must lie in 1..{scenario.k}")
    p = selection.probability(superpop.x)
    effect = scenario.arm_effects(superpop.y0, superpop.x)[:, arm - 1]
    return float(np.sum(p * effect) / np.sum(p))


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MethodRow:
    """Operating characteristics of one method on one arm."""

    method: str
    arm: int
    J: int | None
    bias: float
    sd: float
    se: float
    rate: float  # type-I error (setting 1) or CI coverage
    distinct_matches: float | None = None


@dataclass(frozen=True, eq=False)
class SimulationReport:
    scenario: Scenario
    reps: int
    master_seed: int
    B: int
    theta: tuple[float, ...]
    rows: tuple[MethodRow, ...]
    points: dict = field(repr=False, default_factory=dict)
    ses: dict = field(repr=False, default_factory=dict)
    failures: int = 0
    alpha: float = math.nan

    @property
    def rate_name(self) -> str:
        return "type_I_error" if self.scenario.setting == 1 else "CP"

    def row(self, method: str, arm: int = 1, J: int | None = None) -> MethodRow:
        for r in self.rows:
            if r.method == method and r.arm == arm and r.J == J:
                return r
        raise KeyError((method, arm, J))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# setting={self.scenario.setting} n_r={self.scenario.n_r} "
                  f"allocation={':'.join(map(str, self.scenario.allocation))} "
                  f"epsilon_var={self.scenario.epsilon_var!r}\n")
        buf.write(f"# reps={self.reps} master_seed={self.master_seed} B={self.B} "
                  f"failures={self.failures} alpha={self.alpha!r}\n")
        buf.write("# theta=" + ",".join(repr(t) for t in self.theta) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "n_r", "method", "arm", "J", "distinct_matches",
                    "bias", "sd", "se", self.rate_name, "reps"])
        for r in self.rows:
            w.writerow([
                self.scenario.setting, self.scenario.n_r, r.method, r.arm,
                "" if r.J is None else r.J,
                "" if r.distinct_matches is None else fmt(r.distinct_matches),
                fmt(r.bias), fmt(r.sd), fmt(r.se), fmt(r.rate), self.reps,
            ])
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text table, one row per method, arm and J."""
        title = {1: "Setting 1 (theta_1 = {:.3f})", 2: "Setting 2 (theta_1 = {:.3f})"}
        head = title.get(self.scenario.setting, "Setting 3 ({})")
        if self.scenario.setting == 3:
            head = head.format(", ".join(f"theta_{a + 1} = {t:.3f}" for a, t in enumerate(self.theta)))
        else:
            head = head.format(self.theta[0])
        label = {"raw": "Raw", "nc": "NC matching", "new_simple": "New design, simple SE",
                 "new_bootstrap": "New design, bootstrap SE"}
        lines = [f"{head}, n_r = {self.scenario.n_r}, reps = {self.reps}, seed = {self.master_seed}"]
        cols = f"{'Method':<26}{'Arm':>4}{'J':>4}{'Distinct Matches':>18}{'Bias':>9}{'SD':>8}{'SE':>8}{self.rate_name:>14}"
        lines += [cols, "-" * len(cols)]
        for r in self.rows:
            dm = "" if r.distinct_matches is None else f"{r.distinct_matches:.1f}"
            lines.append(
                f"{label[r.method]:<26}{r.arm:>4}{'' if r.J is None else r.J:>4}{dm:>18}"
                f"{r.bias:>9.3f}{r.sd:>8.3f}{r.se:>8.3f}{r.rate:>14.3f}"
            )
        return "\n".join(lines) + "\n"


def default_methods(scenario: Scenario) -> tuple[str, ...]:
    return METHODS if scenario.k == 1 else ("raw", "new_simple", "new_bootstrap")


def replication_rng(master_seed: int, rep: int, attempt: int = 0) -> np.random.Generator:
    """Counter-derived stream for replication ``rep`` (``attempt`` > 0 after a failure)."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(rep, attempt)))


_RECOVERABLE = (FitError, MatchingError, GenerationError, EstimationError)


def _one_replication(superpop, selection, scenario, methods, Js, B, master_seed, rep):
    attempt = 0
    while True:
        rng = replication_rng(master_seed, rep, attempt)
        gen_rng, nc_rng, boot_rng = rng.spawn(3)
        try:
            return _analyse(superpop, selection, scenario, methods, Js, B,
                            gen_rng, nc_rng, boot_rng), attempt
        except _RECOVERABLE:
            attempt += 1
            if attempt > 100:
                raise


def _analyse(superpop, selection, scenario, methods, Js, B, gen_rng, nc_rng, boot_rng):
    """One replication -> {(method, arm, J): (point, se[, distinct])}."""
    ds = generate_trial(superpop, selection, scenario, gen_rng).dataset
    out = {}
    arms = range(1, scenario.k + 1)
    if "raw" in methods:
        for a in arms:
            e = raw_estimate(ds, a)
            out[("raw", a, None)] = (e.point, e.se)
    needs_model = {"nc", "new_simple", "new_bootstrap"} & set(methods)
    if not needs_model:
        return out
    model = fit_propensity(ds)
    if "nc" in methods:
        nc = nc_match(ds, model, max(Js), nc_rng)
        for J in Js:
            sub = nc.head(J)
            e = nc_estimate(ds, sub)
            out[("nc", 1, J)] = (e.point, e.se, sub.distinct_matches)
    if "new_simple" in methods or "new_bootstrap" in methods:
        match = optimal_match(ds, model)
        w = {a: ds.n_a(0) / ds.n_a(a) for a in arms}
        points = {a: weighted_estimate(ds, match, a, w[a]) for a in arms}
        if "new_simple" in methods:
            for a in arms:
                out[("new_simple", a, None)] = (points[a], simple_se(ds, match, a, w[a]))
        if "new_bootstrap" in methods:
            boot = bootstrap_estimates(ds, match, list(arms), [w[a] for a in arms], B, boot_rng)
            sds = boot.std(axis=0, ddof=1)
            for i, a in enumerate(arms):
                out[("new_bootstrap", a, None)] = (points[a], float(sds[i]))
    return out


_WORKER: dict = {}


def _init_worker(superpop, selection):
    _WORKER["superpop"] = superpop
    _WORKER["selection"] = selection


def _run_chunk(args):
    scenario, methods, Js, B, master_seed, reps = args
    sp, sel = _WORKER["superpop"], _WORKER["selection"]
    return [_one_replication(sp, sel, scenario, methods, Js, B, master_seed, r) for r in reps]


def default_threads() -> int:
    return max(1, int(os.environ.get("ECMATCH_THREADS", "1")))


def run_monte_carlo(
    scenario: Scenario,
    methods: Iterable[str] | None = None,
    reps: int = 2000,
    master_seed: int = 0,
    B: int = 500,
    J: Sequence[int] = (1, 2, 3),
    superpop: SuperPopulation | None = None,
    selection: SelectionModel | None = None,
    threads: int | None = None,
    progress=None,
) -> SimulationReport:
    """Replicate generate -> fit -> match -> estimate and summarise each method.

    ``nc`` is evaluated for every repetition count in ``J``; the repetitions
    for smaller ``J`` are the leading repetitions of the largest one.
    ``progress``, if given, is called with the number of finished replications.
    """
    methods = tuple(default_methods(scenario) if methods is None else methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown method(s): {sorted(unknown)}")
    if "nc" in methods and scenario.k != 1:
        raise ValueError("NC matching requires a two-arm scenario")
    if reps < 2:
        raise ValueError("reps must be at least 2")
    Js = tuple(sorted(set(int(j) for j in J)))
    if "nc" in methods and (not Js or Js[0] < 1):
        raise ValueError("J values must be positive")
    superpop = superpop or default_superpopulation()
    selection = selection or SelectionModel.calibrated(superpop)
    threads = threads or default_threads()

    chunk = max(1, min(50, reps // (4 * threads) or 1))
    tasks = [(scenario, methods, Js, B, master_seed, range(s, min(reps, s + chunk)))
             for s in range(0, reps, chunk)]
    results = []
    if threads == 1:
        _init_worker(superpop, selection)
        for t in tasks:
            results.extend(_run_chunk(t))
            if progress:
                progress(len(results))
    else:
        with ProcessPoolExecutor(threads, initializer=_init_worker,
                                 initargs=(superpop, selection)) as pool:
            for part in pool.map(_run_chunk, tasks):
                results.extend(part)
                if progress:
                    progress(len(results))

    theta = tuple(true_theta(superpop, selection, scenario, a) for a in range(1, scenario.k + 1))
    failures = sum(att for _, att in results)
    keys = list(results[0][0].keys())
    points, ses, rows = {}, {}, []
    for key in keys:
        method, arm, j = key
        vals = np.array([res[key] for res, _ in results], dtype=float)
        pt, se = vals[:, 0], vals[:, 1]
        points[key], ses[key] = pt, se
        th = theta[arm - 1]
        if scenario.setting == 1:
            rate = float(np.mean(np.abs(pt) > Z_CRIT * se))
        else:
            rate = float(np.mean((pt - Z_CRIT * se <= th) & (th <= pt + Z_CRIT * se)))
        rows.append(MethodRow(
            method=method, arm=arm, J=j,
            bias=float(pt.mean() - th), sd=float(pt.std(ddof=1)), se=float(se.mean()), rate=rate,
            distinct_matches=float(vals[:, 2].mean()) if vals.shape[1] > 2 else None,
        ))
    order = {m: i for i, m in enumerate(METHODS)}
    rows.sort(key=lambda r: (order[r.method], r.arm, r.J or 0))
    return SimulationReport(
        scenario=scenario, reps=reps, master_seed=master_seed, B=B, theta=theta,
        rows=tuple(rows), points=points, ses=ses, failures=failures, alpha=selection.alpha,
    )

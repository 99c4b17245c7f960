"""Logistic selection model Pr(RCT | X), fitted by IRLS."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import TrialDataset

PROB_CLAMP = 1e-12
SEPARATION_BOUND = 30.0


class FitError(RuntimeError):
    """Numerical failure while fitting the selection model."""


class RankDeficientError(FitError):
    pass


class ConvergenceError(FitError):
    pass


class SeparationError(FitError):
    pass


@dataclass(frozen=True)
class PropensityModel:
    intercept: float
    coefficients: np.ndarray
    converged: bool = True
    iterations: int = 0
    final_log_likelihood: float = float("nan")

    def __post_init__(self) -> None:
        coef = np.array(self.coefficients, dtype=float).reshape(-1)
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)

    @property
    def params(self) -> np.ndarray:
        """``(intercept, coefficients...)``."""
        return np.concatenate([[self.intercept], self.coefficients])

    def to_text(self) -> str:
        lines = [f"intercept={self.intercept!r}"]
        lines += [f"coef_{j + 1}={float(c)!r}" for j, c in enumerate(self.coefficients)]
        lines += [
            f"converged={str(self.converged).lower()}",
            f"iterations={self.iterations}",
            f"final_log_likelihood={self.final_log_likelihood!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PropensityModel":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        p = sum(1 for key in kv if key.startswith("coef_"))
        return cls(
            intercept=float(kv["intercept"]),
            coefficients=np.array([float(kv[f"coef_{j + 1}"]) for j in range(p)]),
            converged=kv.get("converged", "true") == "true",
            iterations=int(kv.get("iterations", 0)),
            final_log_likelihood=float(kv.get("final_log_likelihood", "nan")),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def design_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([np.ones(len(x)), x])


def log_likelihood(beta: np.ndarray, X: np.ndarray, d: np.ndarray) -> float:
    """Bernoulli log-likelihood of ``d`` under logit-linear predictor ``X @ beta``."""
    eta = X @ beta
    # d*eta - log(1+e^eta), stable
    return float(np.sum(d * eta - np.logaddexp(0.0, eta)))


def score(beta: np.ndarray, X: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Gradient of :func:`log_likelihood` with respect to ``beta``."""
    return X.T @ (d - expit(X @ beta))


def fit_logistic(
    X: np.ndarray,
    d: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 100,
    history: list[float] | None = None,
) -> tuple[np.ndarray, int, float]:
    """Newton/IRLS maximisation of the logistic log-likelihood.

    Starts at zero and halves the step whenever the likelihood would decrease.
    Returns ``(beta, iterations, log_likelihood)``; if ``history`` is given the
    log-likelihood after every iteration is appended to it.
    """
    X = np.asarray(X, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientError("design matrix (intercept + covariates) is rank deficient")
    beta = np.zeros(X.shape[1])
    ll = log_likelihood(beta, X, d)
    if history is not None:
        history.append(ll)
    for it in range(1, max_iter + 1):
        mu = expit(X @ beta)
        grad = X.T @ (d - mu)
        if np.max(np.abs(grad)) < tol:
            return beta, it - 1, ll
        wts = mu * (1.0 - mu)
        info = X.T @ (X * wts[:, None])
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = log_likelihood(cand, X, d)
            if ll_new >= ll or t < 1e-10:
                break
            t *= 0.5
        if ll_new < ll:
            # no ascent possible along the Newton direction
            return beta, it, ll
        increased = ll_new > ll
        beta, ll_old, ll = cand, ll, ll_new
        if history is not None:
            history.append(ll)
        if increased and np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise SeparationError(
                "likelihood still increasing with |coefficient| > "
                f"{SEPARATION_BOUND:g}: the covariates separate the data sources"
            )
        if abs(ll - ll_old) < tol:
            return beta, it, ll
    raise ConvergenceError(f"IRLS did not converge within {max_iter} iterations")


def fit_propensity(dataset: TrialDataset, tol: float = 1e-8, max_iter: int = 100) -> PropensityModel:
    """Regress the data-source indicator (RCT = 1) on the covariates."""
    d = dataset.source.astype(float)
    if d.min() == d.max():
        raise FitError("both RCT and EC subjects are required to fit the selection model")
    X = design_matrix(dataset.covariates)
    beta, iterations, ll = fit_logistic(X, d, tol=tol, max_iter=max_iter)
    return PropensityModel(
        intercept=float(beta[0]),
        coefficients=beta[1:],
        converged=True,
        iterations=iterations,
        final_log_likelihood=ll,
    )


def _check_dim(model: PropensityModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != model.coefficients.shape and not (x.ndim == 0 and model.coefficients.size == 0):
        raise ValueError(
            f"covariate dimension {x.shape[-1] if x.ndim else 0} does not match model ({model.coefficients.size})"
        )
    return x


def linear_predictor(model: PropensityModel, x: np.ndarray) -> np.ndarray | float:
    """Logit-scale score ``intercept + x @ coefficients``; accepts one row or a matrix."""
    x = _check_dim(model, x)
    out = model.intercept + x @ model.coefficients
    return float(out) if np.ndim(out) == 0 else out


def probability(model: PropensityModel, x: np.ndarray) -> np.ndarray | float:
    """Estimated Pr(RCT | x), clamped to ``[1e-12, 1 - 1e-12]``."""
    out = np.clip(expit(linear_predictor(model, x)), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(out) if np.ndim(out) == 0 else out


def scores(model: PropensityModel, dataset: TrialDataset, scale: str = "logit") -> np.ndarray:
    """Per-subject matching score on the ``"logit"`` or ``"probability"`` scale."""
    if scale == "logit":
        return np.asarray(linear_predictor(model, dataset.covariates), dtype=float).reshape(-1)
    if scale == "probability":
        return np.asarray(probability(model, dataset.covariates), dtype=float).reshape(-1)
    raise ValueError(f"unknown score scale {scale!r}")

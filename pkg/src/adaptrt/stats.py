"""Test statistics and the moments of the residual-based statistic.

Statistics are evaluated in batch: ``z`` and ``y`` may be ``(k,)`` for one
assignment or ``(M, k)`` for M re-drawn assignments of the same k units, in
which case an ``(M,)`` array comes back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .model import Dataset

BE_CONSTANT = 0.56


def _check_theta(theta: float) -> None:
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")


def hajek_diff_in_means(z, y, e) -> np.ndarray | float:
    """Hajek-normalised IPW difference in means.

    ``sum(Z Y) / sum(e) - sum((1 - Z) Y) / sum(1 - e)``. The propensities
    normalise each arm, so an arm with no units contributes zero.
    """
    z = np.asarray(z)
    y = np.asarray(y, dtype=float)
    e = np.asarray(e, dtype=float)
    if e.size == 0:
        raise ValueError("empty input")
    if np.any((e <= 0) | (e >= 1)):
        raise ValueError("propensities must lie in (0, 1)")
    treated = (z * y).sum(axis=-1) / e.sum()
    control = ((1 - z) * y).sum(axis=-1) / (1.0 - e).sum()
    out = treated - control
    return float(out) if np.ndim(out) == 0 else out


def ipw_contributions(z, y, e) -> np.ndarray:
    """Per-unit terms whose mean is :func:`hajek_diff_in_means`."""
    z = np.asarray(z)
    y = np.asarray(y, dtype=float)
    e = np.asarray(e, dtype=float)
    k = e.size
    return k * (z * y / e.sum() - (1 - z) * y / (1.0 - e).sum())


# ---------------------------------------------------------------------------
# Nuisance regression
# ---------------------------------------------------------------------------


def design_matrix(dataset: Dataset) -> np.ndarray:
    cols = [np.ones(len(dataset)), dataset.biomarker]
    if dataset.covariates is not None:
        cols.extend(dataset.covariates.T)
    return np.column_stack(cols)


@dataclass(frozen=True, eq=False)
class MeanModel:
    """Least-squares fit of Y on (1, biomarker, covariates); never sees Z."""

    coefficients: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    rank_deficient: bool = False

    def predict(self, dataset: Dataset) -> np.ndarray:
        return design_matrix(dataset) @ self.coefficients


def fit_mean_model(dataset: Dataset) -> MeanModel:
    x = design_matrix(dataset)
    if x.shape[0] < x.shape[1]:
        raise ValueError(f"need at least {x.shape[1]} units to fit {x.shape[1]} coefficients")
    # lstsq returns the minimum-norm solution when x is rank deficient
    beta, _, rank, _ = np.linalg.lstsq(x, dataset.outcome, rcond=None)
    fitted = x @ beta
    resid = dataset.outcome - fitted
    return MeanModel(beta, fitted, resid, rank_deficient=bool(rank < x.shape[1]))


# ---------------------------------------------------------------------------
# Residual statistic
# ---------------------------------------------------------------------------


def signed_residual(z_star, residual, theta: float):
    """Signed IPW residual: ``r / theta`` if treated, ``-r / (1 - theta)`` if not."""
    _check_theta(theta)
    z_star = np.asarray(z_star)
    r = np.asarray(residual, dtype=float)
    out = z_star * r / theta - (1 - z_star) * r / (1.0 - theta)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class ResidualMoments:
    variance: float
    abs_third_moment: float


def residual_moments(residual: float, theta: float) -> ResidualMoments:
    """Variance and absolute third moment of signed_residual over a Bernoulli(theta) draw."""
    _check_theta(theta)
    r = float(residual)
    q = theta * (1.0 - theta)
    return ResidualMoments(
        variance=r * r / q,
        abs_third_moment=(2 * theta**2 - 2 * theta + 1) / q**2 * abs(r) ** 3,
    )


def residual_sum_statistic(z, residuals, theta: float, standardized: bool = False):
    """Sum of signed residuals over ``sqrt(|S|)``, or over the root of their summed variances if standardized."""
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise ValueError("empty subgroup")
    total = np.asarray(signed_residual(z, r, theta)).sum(axis=-1)
    if standardized:
        denom = math.sqrt(float((r * r).sum()) / (theta * (1 - theta)))
        if denom == 0:
            raise ValueError("all residuals are zero; standardized statistic undefined")
    else:
        denom = math.sqrt(r.size)
    out = total / denom
    return float(out) if np.ndim(out) == 0 else out


def berry_esseen_bound(residuals, theta: float, C: float = BE_CONSTANT) -> float:
    """``C * sum(third abs moments) / (sum(variances))^(3/2)`` of the signed residuals."""
    _check_theta(theta)
    if not 0 < C <= BE_CONSTANT:
        raise ValueError(f"C must lie in (0, {BE_CONSTANT}]")
    r = np.abs(np.asarray(residuals, dtype=float))
    q = theta * (1 - theta)
    s2 = float((r**2).sum()) / q
    if s2 == 0:
        raise ValueError("all residuals are zero; bound undefined")
    third = (2 * theta**2 - 2 * theta + 1) / q**2 * float((r**3).sum())
    return C * third / s2**1.5


# ---------------------------------------------------------------------------
# Statistic objects used by the randomization tests
# ---------------------------------------------------------------------------


class TestStatistic(Protocol):
    """``stat(z, y, idx, dataset)`` on the subgroup ``idx``.

    ``z`` and ``y`` hold assignments and (imputed) outcomes of the subgroup
    units only, shape ``(k,)`` or ``(M, k)``.
    """

    __test__ = False
    name: str

    def __call__(self, z: np.ndarray, y: np.ndarray, idx: np.ndarray, dataset: Dataset) -> np.ndarray: ...


@dataclass(frozen=True)
class HajekStatistic:
    name: str = "hajek"

    def __call__(self, z, y, idx, dataset):
        return hajek_diff_in_means(z, y, dataset.propensity[idx])


@dataclass(eq=False)
class ResidualSumStatistic:
    """Residual statistic with a mean model fitted once on the observed data.

    ``theta`` defaults to the dataset's propensity, which must then be
    constant. Per-unit propensities are not supported.
    """

    theta: float | None = None
    standardized: bool = False
    model: MeanModel | None = None
    name: str = "residual_sum"
    _last: tuple | None = field(default=None, repr=False)

    def _fitted(self, dataset: Dataset) -> np.ndarray:
        if self.model is not None:
            return self.model.predict(dataset)
        # the fit is reused across all replicates of one test
        if self._last is None or self._last[0] is not dataset:
            self._last = (dataset, fit_mean_model(dataset).fitted)
        return self._last[1]

    def _theta(self, dataset: Dataset, idx: np.ndarray) -> float:
        if self.theta is not None:
            return self.theta
        e = dataset.propensity[idx]
        if not np.allclose(e, e[0], rtol=0, atol=1e-12):
            raise ValueError("residual statistic needs a constant propensity; pass theta explicitly")
        return float(e[0])

    def __call__(self, z, y, idx, dataset):
        resid = np.asarray(y, dtype=float) - self._fitted(dataset)[idx]
        theta = self._theta(dataset, idx)
        if not self.standardized:
            return residual_sum_statistic(z, resid, theta)
        # sigma_i^2 depends on the imputed outcome, so normalise row by row
        total = np.asarray(signed_residual(z, resid, theta)).sum(axis=-1)
        s2 = (resid * resid).sum(axis=-1) / (theta * (1 - theta))
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(s2 > 0, total / np.sqrt(s2), 0.0)
        return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class UserStatistic:
    """Wrap a plain function ``f(z, y, idx, dataset)``."""

    func: Callable[..., np.ndarray]
    name: str = "user"

    def __call__(self, z, y, idx, dataset):
        return self.func(z, y, idx, dataset)


def statistic_from_config(spec: dict | str | None) -> TestStatistic:
    if spec is None:
        return HajekStatistic()
    if isinstance(spec, str):
        spec = {"statistic": spec}
    extra = set(spec) - {"statistic", "standardized", "theta"}
    if extra:
        raise ValueError(f"unknown statistic key(s): {sorted(extra)}")
    kind = spec.get("statistic", "hajek")
    if kind == "hajek":
        return HajekStatistic()
    if kind == "residual_sum":
        return ResidualSumStatistic(theta=spec.get("theta"), standardized=bool(spec.get("standardized", False)))
    raise ValueError(f"unknown statistic {kind!r}")

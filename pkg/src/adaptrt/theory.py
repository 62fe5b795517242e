"""Signal-to-noise curves over the selection threshold and exact Berry-Esseen checks."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, stats

from .stats import BE_CONSTANT, berry_esseen_bound, signed_residual

QUAD_TOL = 1e-9
# upper integration limit: where the remaining tail mass drops below this
TAIL_MASS = 1e-13
MAX_ENUMERATION = 14


class SnrUndefined(ValueError):
    """Raised when the first tail moment is not positive, so log() fails."""


@dataclass(frozen=True, eq=False)
class DensitySpec:
    """Density of the individual treatment effect.

    Kinds: ``normal`` (mean, sd), ``uniform`` (a, b), ``laplace`` (loc,
    scale), ``tabulated`` (piecewise-linear through ``grid``/``values``,
    renormalised to integrate to one).
    """

    kind: str
    params: tuple[float, ...] = ()
    grid: np.ndarray | None = None
    values: np.ndarray | None = None
    _dist: object = field(default=None, repr=False)

    def __post_init__(self) -> None:
        p = tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", p)
        if self.kind == "normal":
            dist = stats.norm(*(p or (0.0, 1.0)))
        elif self.kind == "uniform":
            a, b = p or (-1.0, 1.0)
            if b <= a:
                raise ValueError("uniform needs a < b")
            dist = stats.uniform(a, b - a)
        elif self.kind == "laplace":
            dist = stats.laplace(*(p or (0.0, 1.0)))
        elif self.kind == "tabulated":
            g = np.asarray(self.grid, dtype=float)
            v = np.asarray(self.values, dtype=float)
            if g.ndim != 1 or g.shape != v.shape or g.size < 2 or np.any(np.diff(g) <= 0):
                raise ValueError("tabulated density needs matching, strictly increasing grid and values")
            if np.any(v < 0) or not np.isfinite(v).all():
                raise ValueError("tabulated density values must be finite and non-negative")
            mass = np.trapezoid(v, g) if hasattr(np, "trapezoid") else np.trapz(v, g)
            if mass <= 0:
                raise ValueError("tabulated density has zero mass")
            object.__setattr__(self, "grid", g)
            object.__setattr__(self, "values", v / mass)
            dist = None
        else:
            raise ValueError(f"unknown density kind {self.kind!r}")
        if dist is not None and any(s <= 0 for s in p[1:2]) and self.kind != "uniform":
            raise ValueError("scale must be positive")
        object.__setattr__(self, "_dist", dist)

    @classmethod
    def normal(cls, mean: float = 0.0, sd: float = 1.0) -> "DensitySpec":
        return cls("normal", (mean, sd))

    @classmethod
    def uniform(cls, a: float = -1.0, b: float = 1.0) -> "DensitySpec":
        return cls("uniform", (a, b))

    @classmethod
    def laplace(cls, loc: float = 0.0, scale: float = 1.0) -> "DensitySpec":
        return cls("laplace", (loc, scale))

    @classmethod
    def tabulated(cls, grid: Sequence[float], values: Sequence[float]) -> "DensitySpec":
        return cls("tabulated", (), np.asarray(grid, float), np.asarray(values, float))

    def pdf(self, t):
        if self._dist is not None:
            return self._dist.pdf(t)
        return np.interp(t, self.grid, self.values, left=0.0, right=0.0)

    @property
    def support(self) -> tuple[float, float]:
        """Integration range, truncated where the tail mass is negligible."""
        if self._dist is None:
            return float(self.grid[0]), float(self.grid[-1])
        return float(self._dist.ppf(TAIL_MASS)), float(self._dist.isf(TAIL_MASS))

    @property
    def breakpoints(self) -> tuple[float, ...]:
        """Points where the density is not smooth, passed on to the quadrature."""
        if self.kind == "laplace":
            return (self.params[0] if self.params else 0.0,)
        if self.kind == "tabulated":
            return tuple(self.grid[1:-1])
        return ()

    def to_dict(self) -> dict:
        if self.kind == "tabulated":
            return {"kind": "tabulated", "grid": self.grid.tolist(), "values": self.values.tolist()}
        return {"kind": self.kind, "params": list(self.params)}


def density_from_config(spec: dict) -> DensitySpec:
    extra = set(spec) - {"kind", "params", "grid", "values"}
    if extra:
        raise ValueError(f"unknown density key(s): {sorted(extra)}")
    kind = spec.get("kind", "normal")
    if kind == "tabulated":
        return DensitySpec.tabulated(spec["grid"], spec["values"])
    return DensitySpec(kind, tuple(spec.get("params", ())))


def tail_moment(density: DensitySpec, t: float, power: int, tol: float = QUAD_TOL) -> float:
    """``integral_t^inf s^power f(s) ds`` by adaptive Gauss-Kronrod quadrature."""
    lo, hi = density.support
    a = max(float(t), lo)
    if a >= hi:
        return 0.0
    pts = [p for p in density.breakpoints if a < p < hi]
    val, _ = integrate.quad(
        lambda s: s**power * density.pdf(s), a, hi, epsabs=tol, epsrel=tol, limit=500, points=pts or None
    )
    return float(val)


def _noise_ratio(sigma: float, theta: float) -> float:
    if not 0 < theta < 1:
        raise ValueError("theta must lie in (0, 1)")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return sigma * sigma / (theta * (1 - theta))


def snr(t: float, density: DensitySpec, n: int, sigma: float, theta: float, tol: float = QUAD_TOL) -> float:
    """Log signal-to-noise core of the asymptotic power at threshold ``t``.

    ``log n + 2 log A1 - log(A2 + ratio A0)`` with ``Ak`` the k-th tail moment
    above ``t`` and ``ratio = sigma^2 / (theta (1 - theta))``.
    """
    ratio = _noise_ratio(sigma, theta)
    if n < 1:
        raise ValueError("n must be positive")
    first = tail_moment(density, t, 1, tol)
    if first <= 0:
        raise SnrUndefined(f"first tail moment at t={t} is {first:.3g}, not positive")
    denom = tail_moment(density, t, 2, tol) + (ratio * tail_moment(density, t, 0, tol) if ratio else 0.0)
    return math.log(n) + 2 * math.log(first) - math.log(denom)


def snr_derivative(t: float, density: DensitySpec, n: int, sigma: float, theta: float, tol: float = QUAD_TOL) -> float:
    """``-2 t f(t) / A1 + (t^2 + ratio) f(t) / (A2 + ratio A0)``."""
    ratio = _noise_ratio(sigma, theta)
    first = tail_moment(density, t, 1, tol)
    if first <= 0:
        raise SnrUndefined(f"first tail moment at t={t} is {first:.3g}, not positive")
    f = float(density.pdf(t))
    denom = tail_moment(density, t, 2, tol) + (ratio * tail_moment(density, t, 0, tol) if ratio else 0.0)
    return -2 * t * f / first + (t * t + ratio) * f / denom


@dataclass(frozen=True, eq=False)
class SnrCurve:
    grid: np.ndarray
    snr: np.ndarray  # NaN where undefined
    n: int
    sigma: float
    theta: float

    @property
    def argmax(self) -> float:
        """Grid argmax, ties to the smallest t."""
        if not np.isfinite(self.snr).any():
            raise SnrUndefined("SNR undefined on the whole grid")
        vals = np.where(np.isfinite(self.snr), self.snr, -np.inf)
        return float(self.grid[int(np.argmax(vals))])


def snr_curve(grid: Sequence[float], density: DensitySpec, n: int, sigma: float, theta: float) -> SnrCurve:
    grid = np.asarray(grid, dtype=float)
    out = np.full(grid.size, np.nan)
    for i, t in enumerate(grid):
        try:
            out[i] = snr(t, density, n, sigma, theta)
        except SnrUndefined:
            pass
    return SnrCurve(grid, out, n, sigma, theta)


def optimal_threshold(density: DensitySpec, n: int, sigma: float, theta: float, grid: Sequence[float]) -> float:
    return snr_curve(grid, density, n, sigma, theta).argmax


# ---------------------------------------------------------------------------
# Exhaustive Berry-Esseen verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BECheck:
    sup_distance: float
    bound: float
    passed: bool

    def to_dict(self) -> dict:
        return {"sup_distance": self.sup_distance, "bound": self.bound, "pass": self.passed}


def exact_studentized_law(residuals: Sequence[float], theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Atoms and probabilities of the studentized signed-residual sum over all assignments."""
    r = np.asarray(residuals, dtype=float)
    n = r.size
    if n == 0:
        raise ValueError("need at least one residual")
    if n > MAX_ENUMERATION:
        raise ValueError(f"exhaustive enumeration limited to {MAX_ENUMERATION} units, got {n}")
    s2 = float((r * r).sum()) / (theta * (1 - theta))
    if s2 == 0:
        raise ValueError("all residuals are zero; studentized statistic undefined")
    z = np.array(list(itertools.product((0, 1), repeat=n)), dtype=np.int8)
    k = z.sum(axis=1)
    prob = theta**k * (1 - theta) ** (n - k)
    values = np.asarray(signed_residual(z, r, theta)).sum(axis=1) / math.sqrt(s2)
    return values, prob


def sup_cdf_distance(values: np.ndarray, prob: np.ndarray) -> float:
    """``sup_x |F(x) - Phi(x)|`` for a discrete law, checking both one-sided limits at every atom."""
    order = np.argsort(values, kind="stable")
    v, p = values[order], prob[order]
    # merge atoms that coincide up to rounding
    keep = np.concatenate([[True], np.diff(v) > 1e-12 * np.maximum(1.0, np.abs(v[1:]))])
    group = np.cumsum(keep) - 1
    atoms = v[keep]
    mass = np.bincount(group, weights=p)
    right = np.cumsum(mass)
    left = right - mass
    phi = stats.norm.cdf(atoms)
    return float(max(np.abs(right - phi).max(), np.abs(left - phi).max()))


def be_enumeration_check(residuals: Sequence[float], theta: float, C: float = BE_CONSTANT) -> BECheck:
    values, prob = exact_studentized_law(residuals, theta)
    dist = sup_cdf_distance(values, prob)
    bound = berry_esseen_bound(residuals, theta, C)
    return BECheck(dist, bound, bool(dist <= bound))

"""Super-population data generation and the four-method power study."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .design import Bernoulli, make_rng
from .infer import run_pipeline, subgroup_rt
from .model import BenefitingSubgroup, Dataset, PotentialTable
from .select import SelectionConfig


@dataclass(frozen=True)
class BiomarkerLaw:
    """``normal`` with (mean, sd) or ``uniform`` on [a, b]."""

    kind: str = "normal"
    a: float = 0.0
    b: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in ("normal", "uniform"):
            raise ValueError(f"unknown biomarker law {self.kind!r}")
        if self.kind == "normal" and self.b <= 0:
            raise ValueError("normal sd must be positive")
        if self.kind == "uniform" and self.b <= self.a:
            raise ValueError("uniform needs a < b")

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "normal":
            return rng.normal(self.a, self.b, n)
        return rng.uniform(self.a, self.b, n)


@dataclass(frozen=True)
class EffectCurve:
    """Treatment effect as a function of the biomarker.

    ``linear``: delta * s. ``sigmoid``: 2 delta e^{delta s} / (1 + e^{delta s}) - delta,
    which runs from -delta to delta. ``piecewise``: ``levels[k]`` between
    consecutive ``breakpoints``. ``arc``: delta * (1 - s^2).
    """

    kind: str = "linear"
    delta: float = 6.0
    levels: tuple[float, ...] = ()
    breakpoints: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "sigmoid", "piecewise", "arc"):
            raise ValueError(f"unknown effect curve {self.kind!r}")
        if self.kind == "piecewise":
            levels = self.levels or (-self.delta, self.delta)
            breaks = self.breakpoints or ((0.0,) if len(levels) == 2 else ())
            if len(levels) != len(breaks) + 1 or list(breaks) != sorted(breaks):
                raise ValueError("piecewise needs len(levels) == len(breakpoints) + 1, sorted breakpoints")
            object.__setattr__(self, "levels", tuple(map(float, levels)))
            object.__setattr__(self, "breakpoints", tuple(map(float, breaks)))

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        d = self.delta
        if self.kind == "linear":
            return d * s
        if self.kind == "sigmoid":
            # 2d * expit(d s) - d == d * tanh(d s / 2), stable for large |d s|
            return d * np.tanh(d * s / 2.0)
        if self.kind == "arc":
            return d * (1.0 - s * s)
        return np.asarray(self.levels)[np.searchsorted(self.breakpoints, s, side="right")]

    @property
    def zero_crossing(self) -> float:
        """Population cutoff ``sup{s : tau(s) <= 0}`` for the monotone kinds."""
        if self.kind in ("linear", "sigmoid"):
            return 0.0 if self.delta > 0 else math.inf
        if self.kind == "arc":
            return math.nan
        lv = np.asarray(self.levels)
        nonpos = np.flatnonzero(lv <= 0)
        if nonpos.size == 0:
            return -math.inf
        k = nonpos[-1]
        return self.breakpoints[k] if k < len(self.breakpoints) else math.inf


MEAN_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "quadratic": lambda s: s + s * s,
    "linear": lambda s: s,
    "zero": lambda s: np.zeros_like(s),
}


@dataclass(frozen=True)
class PopulationConfig:
    n: int = 400
    biomarker: BiomarkerLaw = BiomarkerLaw()
    propensity: float = 0.2
    mu0: str = "quadratic"
    tau: EffectCurve = EffectCurve()
    noise_sd: float = 4.0
    shared_noise: bool = True
    covariate_is_biomarker: bool = False

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be positive")
        if not 0 < self.propensity < 1:
            raise ValueError("propensity must lie in (0, 1)")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.mu0 not in MEAN_FUNCTIONS:
            raise ValueError(f"unknown baseline {self.mu0!r}")


def generate(config: PopulationConfig, seed) -> tuple[Dataset, PotentialTable, BenefitingSubgroup]:
    """Draw one dataset from the super-population model.

    With ``shared_noise`` the two potential outcomes share one error, so the
    individual effect is exactly ``tau(S_i)``; otherwise each arm gets its own.
    """
    rng = make_rng(seed)
    n = config.n
    s = config.biomarker.draw(rng, n)
    z = (rng.random(n) < config.propensity).astype(np.int8)
    eps0 = rng.normal(0.0, config.noise_sd, n)
    eps1 = eps0 if config.shared_noise else rng.normal(0.0, config.noise_sd, n)
    base = MEAN_FUNCTIONS[config.mu0](s)
    tau = config.tau(s)
    pt = PotentialTable(base + eps0, base + tau + eps1)
    ds = Dataset(
        ids=np.arange(n),
        biomarker=s,
        treatment=z,
        outcome=pt.observed(z),
        propensity=np.full(n, config.propensity),
        covariates=s[:, None] if config.covariate_is_biomarker else None,
    )
    return ds, pt, BenefitingSubgroup.from_effects(s, pt.effect)


# ---------------------------------------------------------------------------
# Methods compared in the power study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MethodParams:
    alpha: float = 0.05
    M: int = 200
    batch_size: int = 20
    bonferroni_candidates: int = 20
    # replicates per Bonferroni candidate; None means M * candidates so that
    # the smallest adjusted p-value is not stuck above alpha
    bonferroni_M: int | None = None
    # explicit candidate quantile levels; None means k / candidates, k = 1..candidates
    bonferroni_levels: tuple[float, ...] | None = None
    split_degree: int = 1

    def candidate_levels(self) -> np.ndarray:
        if self.bonferroni_levels is not None:
            return np.asarray(self.bonferroni_levels, dtype=float)
        m = self.bonferroni_candidates
        return np.arange(1, m + 1) / m


@dataclass(frozen=True, eq=False)
class MethodResult:
    method: str
    subgroup: np.ndarray
    reject: bool
    p_value: float
    flags: tuple[str, ...] = ()


def _bernoulli(ds: Dataset) -> Bernoulli:
    return Bernoulli(ds.propensity)


def method_art(ds: Dataset, truth: BenefitingSubgroup, params: MethodParams, seed) -> MethodResult:
    res = run_pipeline(ds, _bernoulli(ds), SelectionConfig(batch_size=params.batch_size), M=params.M, seed=seed)
    p = res.test.p_value
    return MethodResult("art", res.selection.subgroup, p <= params.alpha, p, res.selection.flags)


def method_oracle(ds: Dataset, truth: BenefitingSubgroup, params: MethodParams, seed) -> MethodResult:
    p = subgroup_rt(ds, _bernoulli(ds), truth.indices, M=params.M, seed=seed).p_value
    return MethodResult("oracle", truth.indices, p <= params.alpha, p)


def _poly(s: np.ndarray, degree: int) -> np.ndarray:
    return np.vander(s, degree + 1, increasing=True)


def split_cutoff(s: np.ndarray, z: np.ndarray, y: np.ndarray, degree: int = 1) -> float:
    """Cutoff from a monotone-rectified per-arm least-squares effect estimate.

    The raw estimate is the difference of the two arm fits; it is rectified
    to ``max`` over strictly smaller sample biomarkers, and the cutoff is the
    largest sample biomarker whose rectified estimate is still <= 0.
    """
    betas = []
    for arm in (1, 0):
        m = z == arm
        if m.sum() < degree + 1:
            raise ValueError("arm too small to fit")
        beta, *_ = np.linalg.lstsq(_poly(s[m], degree), y[m], rcond=None)
        betas.append(beta)
    order = np.argsort(s, kind="stable")
    ss = s[order]
    raw = _poly(ss, degree) @ (betas[0] - betas[1])
    rect = np.concatenate([[-np.inf], np.maximum.accumulate(raw)[:-1]])
    # equal biomarkers are not "strictly smaller"
    first = np.searchsorted(ss, ss, side="left")
    rect = rect[first]
    nonpos = rect <= 0
    return float(ss[nonpos].max()) if nonpos.any() else -math.inf


def method_split(ds: Dataset, truth: BenefitingSubgroup, params: MethodParams, seed) -> MethodResult:
    rng = make_rng(seed, 0)
    perm = rng.permutation(len(ds))
    fold1, fold2 = np.sort(perm[: len(ds) // 2]), np.sort(perm[len(ds) // 2 :])
    try:
        cut = split_cutoff(ds.biomarker[fold1], ds.treatment[fold1], ds.outcome[fold1], params.split_degree)
    except ValueError:
        return MethodResult("split", np.empty(0, np.int64), False, 1.0, ("degenerate_fold",))
    sub = fold2[ds.biomarker[fold2] > cut]
    p = subgroup_rt(ds, _bernoulli(ds), sub, M=params.M, seed=make_rng_seed(seed, 1)).p_value
    return MethodResult("split", sub, p <= params.alpha, p)


def method_bonferroni(ds: Dataset, truth: BenefitingSubgroup, params: MethodParams, seed) -> MethodResult:
    levels = params.candidate_levels()
    m = levels.size
    M = params.bonferroni_M or params.M * m
    qs = np.quantile(ds.biomarker, levels)
    best = None
    best_p = 1.0
    for k, q in enumerate(qs):
        sub = np.flatnonzero(ds.biomarker > q)
        p = subgroup_rt(ds, _bernoulli(ds), sub, M=M, seed=make_rng_seed(seed, k)).p_value
        adj = min(1.0, m * p)
        if adj <= params.alpha and (best is None or sub.size > best.size):
            best, best_p = sub, adj
        elif best is None:
            best_p = min(best_p, adj)
    if best is None:
        return MethodResult("bonferroni", np.empty(0, np.int64), False, best_p)
    return MethodResult("bonferroni", best, True, best_p)


def make_rng_seed(seed, *counters: int) -> np.random.SeedSequence:
    """A child seed that keeps the counter-based derivation."""
    if isinstance(seed, np.random.SeedSequence):
        entropy = seed.entropy if isinstance(seed.entropy, int) else list(seed.entropy)
        return np.random.SeedSequence(entropy, spawn_key=tuple(seed.spawn_key) + counters)
    return np.random.SeedSequence([int(seed), *counters])


METHODS: dict[str, Callable[..., MethodResult]] = {
    "oracle": method_oracle,
    "art": method_art,
    "split": method_split,
    "bonferroni": method_bonferroni,
}


def power_contribution(truth: BenefitingSubgroup, result: MethodResult) -> float:
    """``|S* & S_hat| / |S*|`` if rejected, else 0; 0 when S* is empty."""
    if not result.reject or truth.indices.size == 0:
        return 0.0
    return np.intersect1d(truth.indices, result.subgroup).size / truth.indices.size


# ---------------------------------------------------------------------------
# Power study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyCell:
    config: PopulationConfig
    panel: str = ""

    @property
    def key(self) -> tuple:
        return (self.config.tau.kind, self.config.n, self.config.tau.delta)


@dataclass(frozen=True)
class PowerRow:
    method: str
    n: int
    delta: float
    tau: str
    power: float
    se: float
    reps: int


@dataclass
class PowerTable:
    rows: list[PowerRow]
    settings: dict = field(default_factory=dict)

    COLUMNS = ("method", "n", "delta", "tau", "power", "se", "reps")

    def lookup(self, method: str, tau: str | None = None, n: int | None = None, delta: float | None = None) -> PowerRow:
        hits = [
            r
            for r in self.rows
            if r.method == method
            and (tau is None or r.tau == tau)
            and (n is None or r.n == n)
            and (delta is None or r.delta == delta)
        ]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {method}, {tau}, {n}, {delta}")
        return hits[0]

    def to_csv(self, path: str | Path, tau: str | None = None) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for r in self.rows:
                if tau is None or r.tau == tau:
                    w.writerow([r.method, r.n, repr(float(r.delta)), r.tau, repr(r.power), repr(r.se), r.reps])

    def to_json(self, path: str | Path) -> None:
        doc = {"settings": self.settings, "rows": [asdict(r) for r in self.rows]}
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _replicate(args) -> list[float]:
    cell_index, cell, rep, methods, params, seed = args
    ds, pt, truth = generate(cell.config, make_rng_seed(seed, cell_index, rep, 0))
    out = []
    for k, name in enumerate(methods):
        res = METHODS[name](ds, truth, params, make_rng_seed(seed, cell_index, rep, 1 + k))
        out.append(power_contribution(truth, res))
    return out


def power_study(
    cells: Sequence[StudyCell],
    methods: Sequence[str] = ("oracle", "art", "split", "bonferroni"),
    reps: int = 200,
    seed: int = 0,
    params: MethodParams = MethodParams(),
    threads: int = 1,
) -> PowerTable:
    """Average power contribution over ``reps`` replicates per cell and method.

    Every replicate draws from its own seed derived from (seed, cell, rep),
    so the table is identical for any thread count.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown method(s): {sorted(unknown)}")
    jobs = [(c, cell, r, tuple(methods), params, seed) for c, cell in enumerate(cells) for r in range(reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replicate, jobs, chunksize=max(1, len(jobs) // (8 * threads))))
    else:
        results = [_replicate(j) for j in jobs]
    contrib = np.asarray(results).reshape(len(cells), reps, len(methods))
    rows = []
    for c, cell in enumerate(cells):
        for k, name in enumerate(methods):
            x = contrib[c, :, k]
            se = float(x.std(ddof=1) / math.sqrt(reps)) if reps > 1 else math.nan
            rows.append(
                PowerRow(name, cell.config.n, float(cell.config.tau.delta), cell.config.tau.kind, float(x.mean()), se, reps)
            )
    settings = {"reps": reps, "seed": seed, "methods": list(methods), "params": asdict(params)}
    return PowerTable(rows, settings)


def default_cells(
    taus: Sequence[str] = ("linear", "sigmoid"),
    ns: Sequence[int] = (200, 300, 400, 500, 600),
    deltas: Sequence[float] = (2, 4, 6, 8, 10, 12),
    base: PopulationConfig = PopulationConfig(),
) -> list[StudyCell]:
    """Power-vs-n sweep at the base effect size plus power-vs-delta sweep at the base n."""
    cells: list[StudyCell] = []
    seen = set()
    for kind in taus:
        for n in ns:
            cell = StudyCell(replace(base, n=n, tau=replace(base.tau, kind=kind)), "n")
            if cell.key not in seen:
                seen.add(cell.key)
                cells.append(cell)
        for d in deltas:
            cell = StudyCell(replace(base, tau=replace(base.tau, kind=kind, delta=float(d))), "delta")
            if cell.key not in seen:
                seen.add(cell.key)
                cells.append(cell)
    return cells

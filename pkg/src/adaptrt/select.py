"""Stage-1 subgroup selection by sequential revelation along a biomarker.

Units are visited in ascending biomarker order, one batch at a time. Only the
treatments and outcomes of visited batches are read; the first batch whose
local effect estimate passes the stopping rule sets the cutoff, and every
unit strictly above it forms the subgroup. Because the subgroup's own
assignments are never read, the selection is self-contained: re-drawing them
cannot change what was selected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.stats import norm

from .design import Seed, make_rng
from .model import Dataset, PotentialTable
from .stats import hajek_diff_in_means, ipw_contributions


class SelectionAuditError(RuntimeError):
    """A selector read the treatment of a unit it later selected."""


@dataclass(frozen=True)
class PositiveEstimate:
    """Stop when the batch estimate exceeds ``threshold``."""

    threshold: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")

    def stops(self, z, y, e) -> tuple[float, bool]:
        tau = hajek_diff_in_means(z, y, e)
        return tau, tau > self.threshold


@dataclass(frozen=True)
class ZScore:
    """Stop when ``1 - Phi(sqrt(k) * tau / sd) < level`` for the batch."""

    level: float = 0.1

    def __post_init__(self) -> None:
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")

    def stops(self, z, y, e) -> tuple[float, bool]:
        tau = hajek_diff_in_means(z, y, e)
        k = len(e)
        sd = float(np.std(ipw_contributions(z, y, e), ddof=1)) if k > 1 else 0.0
        if sd == 0.0:
            return tau, tau > 0
        return tau, bool(norm.sf(math.sqrt(k) * tau / sd) < self.level)


StoppingRule = Union[PositiveEstimate, ZScore]


@dataclass(frozen=True)
class SelectionConfig:
    """Batching and stopping for the sequential selectors.

    Give at most one of ``batch_size`` and ``batch_count``; with neither,
    ``ceil(n ** (1/3))`` batches are used. The last batch absorbs any
    remainder.
    """

    batch_size: int | None = None
    batch_count: int | None = None
    rule: StoppingRule = PositiveEstimate()
    direction: str = "increasing"

    def __post_init__(self) -> None:
        if self.batch_size is not None and self.batch_count is not None:
            raise ValueError("set batch_size or batch_count, not both")
        for name in ("batch_size", "batch_count"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive")
        if self.direction not in ("increasing", "arc", "multi"):
            raise ValueError(f"unknown direction {self.direction!r}")

    def boundaries(self, n: int) -> list[tuple[int, int]]:
        """``[start, stop)`` positions of each batch in reveal order."""
        if self.batch_size is not None:
            if self.batch_size > n:
                raise ValueError(f"batch size {self.batch_size} exceeds n={n}")
            count = n // self.batch_size
            size = self.batch_size
        else:
            count = self.batch_count or math.ceil(round(n ** (1 / 3), 9))
            count = min(count, n)
            size = n // count
        cuts = [j * size for j in range(count)] + [n]
        return list(zip(cuts[:-1], cuts[1:]))


@dataclass(frozen=True)
class TrailEntry:
    batch: int
    max_biomarker: float
    estimate: float
    stop: bool
    note: str = ""


@dataclass(frozen=True, eq=False)
class SelectionOutcome:
    cutoff: float
    subgroup: np.ndarray
    trail: tuple[TrailEntry, ...]
    revealed: np.ndarray
    cutoffs: tuple[float, ...] = ()
    flags: tuple[str, ...] = ()

    @property
    def stopped(self) -> bool:
        return any(t.stop for t in self.trail)

    def selection_rate(self, n: int) -> float:
        return self.subgroup.size / n if n else 0.0


def _sorted(a) -> np.ndarray:
    return np.sort(np.asarray(a, dtype=np.int64))


def sequential_pass(
    dataset: Dataset, order: np.ndarray, score: np.ndarray, config: SelectionConfig
) -> tuple[int | None, list[TrailEntry], list[np.ndarray]]:
    """Reveal ``order`` batch by batch until the stopping rule fires.

    Returns the stopping batch index (or None), the trail and the revealed
    batches. ``score`` is what the trail reports as the batch maximum.
    """
    trail, batches = [], []
    rule = config.rule
    for j, (a, b) in enumerate(config.boundaries(order.size)):
        idx = order[a:b]
        batches.append(idx)
        tau, stop = rule.stops(dataset.treatment[idx], dataset.outcome[idx], dataset.propensity[idx])
        trail.append(TrailEntry(j, float(score[idx].max()), float(tau), bool(stop)))
        if stop:
            return j, trail, batches
    return None, trail, batches


def select_cutoff(dataset: Dataset, config: SelectionConfig = SelectionConfig()) -> SelectionOutcome:
    """Cutoff on an increasing biomarker; subgroup is ``{i : S_i > cutoff}``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    s = dataset.biomarker
    stop, trail, batches = sequential_pass(dataset, dataset.biomarker_order, s, config)
    revealed = _sorted(np.concatenate(batches))
    if stop is None:
        cutoff = float(s.max())
        return SelectionOutcome(cutoff, np.empty(0, np.int64), tuple(trail), revealed, (cutoff,), ("never_stopped",))
    cutoff = trail[stop].max_biomarker
    return SelectionOutcome(cutoff, np.flatnonzero(s > cutoff), tuple(trail), revealed, (cutoff,))


def select_arc(dataset: Dataset, config: SelectionConfig = SelectionConfig()) -> SelectionOutcome:
    """Two-sided cutoffs for an effect that rises then falls with the biomarker.

    The lower cutoff comes from the ascending pass, the upper from the same
    procedure run on the sign-flipped biomarker. Each pass only reveals units
    on its own side of its cutoff, so neither touches the final subgroup.
    """
    lower = select_cutoff(dataset, config)
    flipped = dataset.replace(biomarker=-dataset.biomarker)
    upper = select_cutoff(flipped, config)
    lo, hi = lower.cutoff, -upper.cutoff
    s = dataset.biomarker
    flags = tuple(f"lower_{f}" for f in lower.flags) + tuple(f"upper_{f}" for f in upper.flags)
    if lo >= hi:
        subgroup = np.empty(0, np.int64)
        flags += ("crossed",)
    else:
        subgroup = np.flatnonzero((s > lo) & (s < hi))
    upper_trail = tuple(
        TrailEntry(t.batch, -t.max_biomarker, t.estimate, t.stop, "upper") for t in upper.trail
    )
    trail = tuple(TrailEntry(t.batch, t.max_biomarker, t.estimate, t.stop, "lower") for t in lower.trail)
    revealed = _sorted(np.union1d(lower.revealed, upper.revealed))
    out = SelectionOutcome(lo, subgroup, trail + upper_trail, revealed, (lo, hi), flags)
    _audit(out)
    return out


def _audit(outcome: SelectionOutcome) -> None:
    clash = np.intersect1d(outcome.subgroup, outcome.revealed)
    if clash.size:
        raise SelectionAuditError(f"{clash.size} selected unit(s) had their treatment revealed")


def select_multi(
    dataset: Dataset,
    config: SelectionConfig = SelectionConfig(),
    biomarkers: np.ndarray | None = None,
    single_pass: Callable[[Dataset, SelectionConfig], SelectionOutcome] = select_cutoff,
) -> SelectionOutcome:
    """Intersect per-biomarker upper sets.

    ``biomarkers`` is ``(n, J)``; by default the primary biomarker followed by
    every covariate column. Each pass reveals only units it excludes, so the
    union of revealed units misses the intersection; this is audited and a
    violation raises :class:`SelectionAuditError`.
    """
    if biomarkers is None:
        if dataset.covariates is None:
            raise ValueError("multi-biomarker selection needs covariate columns")
        biomarkers = np.column_stack([dataset.biomarker, dataset.covariates])
    markers = np.asarray(biomarkers, dtype=float)
    if markers.ndim != 2 or markers.shape[0] != len(dataset) or markers.shape[1] < 2:
        raise ValueError("biomarkers must be (n, J) with J >= 2")
    subgroup = np.arange(len(dataset))
    revealed = np.empty(0, np.int64)
    cutoffs, trail, flags = [], [], []
    for j in range(markers.shape[1]):
        res = single_pass(dataset.replace(biomarker=markers[:, j]), config)
        subgroup = np.intersect1d(subgroup, res.subgroup)
        revealed = np.union1d(revealed, res.revealed)
        cutoffs.append(res.cutoff)
        trail += [TrailEntry(t.batch, t.max_biomarker, t.estimate, t.stop, f"marker_{j}") for t in res.trail]
        flags += [f"marker_{j}_{f}" for f in res.flags]
    out = SelectionOutcome(cutoffs[0], subgroup, tuple(trail), _sorted(revealed), tuple(cutoffs), tuple(flags))
    _audit(out)
    return out


# ---------------------------------------------------------------------------
# Data-driven biomarker
# ---------------------------------------------------------------------------

EffectLearner = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def linear_t_learner(x_train, z_train, y_train, x_pred) -> np.ndarray:
    """Per-arm least squares on (1, X); prediction is the arm difference."""
    def fit(mask):
        a = np.column_stack([np.ones(mask.sum()), x_train[mask]])
        beta, *_ = np.linalg.lstsq(a, y_train[mask], rcond=None)
        return beta

    b1, b0 = fit(z_train == 1), fit(z_train == 0)
    a = np.column_stack([np.ones(x_pred.shape[0]), x_pred])
    return a @ (b1 - b0)


@dataclass(frozen=True)
class AdaptiveConfig:
    """Settings for selection with a learned biomarker.

    ``init="systematic"`` seeds training with every k-th unit in id order,
    ``k = round(1 / init_fraction)``; ``init="random"`` draws the seed set
    with ``seed``.
    """

    init_fraction: float = 0.1
    batch_size: int = 20
    rule: StoppingRule = PositiveEstimate()
    init: str = "systematic"
    seed: int | None = None
    learner: EffectLearner = linear_t_learner

    def __post_init__(self) -> None:
        if not 0 < self.init_fraction <= 1:
            raise ValueError("init_fraction must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.init not in ("systematic", "random"):
            raise ValueError("init must be 'systematic' or 'random'")
        if self.init == "random" and self.seed is None:
            raise ValueError("random initialisation needs a seed")


def _initial_training(dataset: Dataset, config: AdaptiveConfig) -> np.ndarray:
    n = len(dataset)
    by_id = np.argsort(dataset.ids, kind="stable")
    if config.init == "systematic":
        step = max(1, round(1 / config.init_fraction))
        return _sorted(by_id[::step])
    k = max(1, round(config.init_fraction * n))
    return _sorted(make_rng(config.seed).choice(n, size=k, replace=False))


def select_adaptive(dataset: Dataset, config: AdaptiveConfig = AdaptiveConfig()) -> SelectionOutcome:
    """Reveal the units with the lowest predicted effect until a batch looks positive.

    The effect model is refitted on all revealed units before every batch.
    The subgroup is whatever is still unrevealed at the stop.
    """
    if dataset.covariates is None:
        raise ValueError("adaptive selection needs covariates")
    x = dataset.covariates
    z, y, e = dataset.treatment, dataset.outcome, dataset.propensity
    revealed = _initial_training(dataset, config)
    remaining = np.setdiff1d(np.arange(len(dataset)), revealed)
    pred = np.zeros(len(dataset))
    trail: list[TrailEntry] = []
    flags: list[str] = []
    j = 0
    while remaining.size:
        note = ""
        zt = z[revealed]
        if zt.size and 0 < zt.sum() < zt.size:
            pred[remaining] = config.learner(x[revealed], zt, y[revealed], x[remaining])
        else:
            note = "arm_empty"
            flags.append(f"batch_{j}_arm_empty")
        order = remaining[np.lexsort((dataset.ids[remaining], pred[remaining]))]
        batch = order[: config.batch_size]
        tau, stop = config.rule.stops(z[batch], y[batch], e[batch])
        trail.append(TrailEntry(j, float(pred[batch].max()), float(tau), bool(stop), note))
        revealed = np.union1d(revealed, batch)
        remaining = np.setdiff1d(remaining, batch)
        j += 1
        if stop:
            out = SelectionOutcome(trail[-1].max_biomarker, remaining, tuple(trail), revealed, (), tuple(flags))
            _audit(out)
            return out
    cutoff = trail[-1].max_biomarker if trail else math.inf
    return SelectionOutcome(cutoff, np.empty(0, np.int64), tuple(trail), revealed, (), tuple(flags) + ("never_stopped",))


# ---------------------------------------------------------------------------
# Self-containedness
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ContainmentCheck:
    passed: bool
    trials: int
    witness: np.ndarray | None = None

    def __bool__(self) -> bool:
        return self.passed


def verify_self_contained(
    selector: Callable[[Dataset], SelectionOutcome],
    dataset: Dataset,
    trials: int = 10,
    seed: Seed = 0,
    potential: PotentialTable | None = None,
) -> ContainmentCheck:
    """Re-draw the selected units' assignments and check the selection holds.

    Each trial keeps every unselected assignment, flips selected ones at
    random and updates their outcomes (from ``potential`` when given,
    otherwise with arbitrary noise, which a selector that never reads them
    cannot notice). Returns a falsy result with the offending assignment if
    any trial changes the subgroup.
    """
    base = selector(dataset)
    sub = base.subgroup
    if sub.size == 0:
        return ContainmentCheck(True, 0)
    rng = make_rng(seed)
    scale = float(np.std(dataset.outcome)) or 1.0
    for t in range(trials):
        z = dataset.treatment.copy()
        z[sub] = rng.integers(0, 2, sub.size)
        if potential is not None:
            y = potential.observed(z)
        else:
            y = dataset.outcome.copy()
            y[sub] = y[sub] + scale * rng.standard_normal(sub.size)
        mutated = dataset.replace(treatment=z, outcome=y)
        if not np.array_equal(selector(mutated).subgroup, sub):
            return ContainmentCheck(False, t + 1, z)
    return ContainmentCheck(True, trials)


def config_from_dict(spec: dict | None) -> SelectionConfig:
    spec = dict(spec or {})
    extra = set(spec) - {"batch_size", "batch_count", "rule", "direction"}
    if extra:
        raise ValueError(f"unknown selection key(s): {sorted(extra)}")
    rule_spec = dict(spec.get("rule", {"kind": "positive"}))
    kind = rule_spec.pop("kind", "positive")
    if kind == "positive":
        rule: StoppingRule = PositiveEstimate(float(rule_spec.pop("threshold", 0.0)))
    elif kind == "zscore":
        rule = ZScore(float(rule_spec.pop("level", 0.1)))
    else:
        raise ValueError(f"unknown stopping rule {kind!r}")
    if rule_spec:
        raise ValueError(f"unknown rule key(s): {sorted(rule_spec)}")
    return SelectionConfig(
        batch_size=spec.get("batch_size"),
        batch_count=spec.get("batch_count"),
        rule=rule,
        direction=spec.get("direction", "increasing"),
    )


def selector_for(config: SelectionConfig) -> Callable[[Dataset], SelectionOutcome]:
    if config.direction == "arc":
        return lambda d: select_arc(d, config)
    if config.direction == "multi":
        return lambda d: select_multi(d, config)
    return lambda d: select_cutoff(d, config)

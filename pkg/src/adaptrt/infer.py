"""Conditional randomization tests on a selected subgroup.

Only the subgroup's assignments are re-drawn; every other unit keeps its
observed assignment. Under the subgroup null the re-drawn units' outcomes
are known, so the statistic can be recomputed for each draw.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .design import ConditionalLaw, Design, Seed, check_assignment, condition, enumerate_free_support, restrict_design
from .model import Dataset, SubgroupHypothesis, impute_under_null
from .select import SelectionConfig, SelectionOutcome, select_cutoff
from .stats import HajekStatistic, TestStatistic

log = logging.getLogger(__name__)

# relative slack when comparing a replicate to the observed statistic, so
# that rounding noise on exact ties still counts as "at least as extreme"
TIE_RTOL = 1e-10


class Orientation(str, Enum):
    GREATER = "greater"
    LESS = "less"


@dataclass(frozen=True, eq=False)
class RandomizationTestResult:
    p_value: float
    observed_stat: float
    replicate_stats: np.ndarray
    M: int
    seed: int | None
    orientation: Orientation
    conditioning: str
    exact: bool = False
    flags: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class ConfidenceSet:
    grid: np.ndarray
    p_curve: np.ndarray
    alpha: float
    intervals: tuple[tuple[float, float], ...]

    def contains(self, c: float, atol: float = 1e-9) -> bool:
        return any(lo - atol <= c <= hi + atol for lo, hi in self.intervals)


def _as_orientation(o) -> Orientation:
    return o if isinstance(o, Orientation) else Orientation(o)


def extreme_mask(replicates: np.ndarray, observed: float, orientation) -> np.ndarray:
    tol = TIE_RTOL * max(1.0, abs(observed))
    if _as_orientation(orientation) is Orientation.GREATER:
        return replicates >= observed - tol
    return replicates <= observed + tol


def _law_for(dataset: Dataset, design: Design, subgroup: np.ndarray) -> ConditionalLaw:
    check_assignment(design, dataset.treatment)
    mask = np.ones(len(dataset), dtype=bool)
    mask[subgroup] = False
    fixed = np.flatnonzero(mask)
    return condition(design, fixed, dataset.treatment[fixed])


def _stats_for_draws(dataset, hyp, stat, z_free):
    """Statistic for each row of ``z_free`` (assignments of ``hyp.subgroup``)."""
    imputed = impute_under_null(dataset, hyp)
    y = np.where(z_free == 1, imputed.y1, imputed.y0)
    return np.asarray(stat(z_free, y, hyp.subgroup, dataset), dtype=float)


def _observed(dataset, hyp, stat) -> float:
    idx = hyp.subgroup
    return float(stat(dataset.treatment[idx], dataset.outcome[idx], idx, dataset))


def _trivial(flag: str, orientation, conditioning: str, seed, exact: bool = False) -> RandomizationTestResult:
    return RandomizationTestResult(
        1.0, float("nan"), np.empty(0), 0, seed, _as_orientation(orientation), conditioning, exact, (flag,)
    )


def conditional_rt(
    dataset: Dataset,
    design: Design,
    hyp: SubgroupHypothesis,
    stat: TestStatistic = HajekStatistic(),
    M: int = 200,
    seed: int = 0,
    orientation: Orientation | str = Orientation.GREATER,
) -> RandomizationTestResult:
    """Monte Carlo p-value ``(1 + #extreme) / (1 + M)`` re-drawing only the subgroup."""
    if hyp.subgroup.size == 0:
        return _trivial("empty_subgroup", orientation, "nothing to re-randomize", seed)
    if M < 1:
        raise ValueError("M must be positive")
    law = _law_for(dataset, design, hyp.subgroup)
    observed = _observed(dataset, hyp, stat)
    reps = _stats_for_draws(dataset, hyp, stat, law.sample_free(seed, M))
    hits = int(extreme_mask(reps, observed, orientation).sum())
    p = (1 + hits) / (1 + M)
    return RandomizationTestResult(p, observed, reps, M, seed, _as_orientation(orientation), law.describe())


def exact_conditional_rt(
    dataset: Dataset,
    design: Design,
    hyp: SubgroupHypothesis,
    stat: TestStatistic = HajekStatistic(),
    orientation: Orientation | str = Orientation.GREATER,
) -> RandomizationTestResult:
    """Exact p-value by summing the conditional law over its whole support."""
    if hyp.subgroup.size == 0:
        return _trivial("empty_subgroup", orientation, "nothing to re-randomize", None, exact=True)
    law = _law_for(dataset, design, hyp.subgroup)
    z, prob = enumerate_free_support(law)
    observed = _observed(dataset, hyp, stat)
    reps = _stats_for_draws(dataset, hyp, stat, z)
    p = float(prob[extreme_mask(reps, observed, orientation)].sum())
    return RandomizationTestResult(
        min(p, 1.0), observed, reps, 0, None, _as_orientation(orientation), law.describe(), exact=True
    )


def randomization_test(
    dataset: Dataset,
    design: Design,
    stat: TestStatistic = HajekStatistic(),
    M: int = 200,
    seed: int = 0,
    orientation: Orientation | str = Orientation.GREATER,
    effect_constant: float = 0.0,
) -> RandomizationTestResult:
    """Standard unconditional test of the sharp null on the whole dataset."""
    hyp = SubgroupHypothesis(np.arange(len(dataset)), effect_constant)
    return conditional_rt(dataset, design, hyp, stat, M, seed, orientation)


def subgroup_rt(
    dataset: Dataset,
    design: Design,
    subgroup: Sequence[int],
    stat: TestStatistic = HajekStatistic(),
    M: int = 200,
    seed: int = 0,
    orientation: Orientation | str = Orientation.GREATER,
) -> RandomizationTestResult:
    """Unconditional test on the restricted dataset with the induced design.

    This is a separate code path from :func:`conditional_rt`; for Bernoulli
    and CRD designs the two coincide.
    """
    idx = np.sort(np.asarray(subgroup, dtype=np.int64))
    if idx.size == 0:
        return _trivial("empty_subgroup", orientation, "nothing to re-randomize", seed)
    sub = dataset.subset(idx)
    return randomization_test(sub, restrict_design(design, idx, dataset.treatment), stat, M, seed, orientation)


def _intervals(grid: np.ndarray, keep: np.ndarray) -> tuple[tuple[float, float], ...]:
    runs = []
    start = None
    for i, k in enumerate(keep):
        if k and start is None:
            start = i
        if not k and start is not None:
            runs.append((float(grid[start]), float(grid[i - 1])))
            start = None
    if start is not None:
        runs.append((float(grid[start]), float(grid[-1])))
    return tuple(runs)


def confidence_set(
    dataset: Dataset,
    design: Design,
    subgroup: Sequence[int],
    stat: TestStatistic = HajekStatistic(),
    grid: Sequence[float] = (),
    alpha: float = 0.05,
    M: int = 200,
    seed: int = 0,
    orientation: Orientation | str = Orientation.GREATER,
) -> ConfidenceSet:
    """Invert the constant-effect tests over ``grid``.

    The same re-drawn assignments serve every grid point. All maximal runs
    of grid points with ``p >= alpha`` are reported, since the p-curve need
    not be unimodal.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be non-empty and strictly increasing")
    idx = np.unique(np.asarray(subgroup, dtype=np.int64))
    if idx.size == 0:
        p = np.ones(grid.size)
        return ConfidenceSet(grid, p, alpha, _intervals(grid, p >= alpha))
    law = _law_for(dataset, design, idx)
    z_free = law.sample_free(seed, M)
    p = np.empty(grid.size)
    for g, c in enumerate(grid):
        hyp = SubgroupHypothesis(idx, float(c))
        observed = _observed(dataset, hyp, stat)
        reps = _stats_for_draws(dataset, hyp, stat, z_free)
        p[g] = (1 + extreme_mask(reps, observed, orientation).sum()) / (1 + M)
    return ConfidenceSet(grid, p, alpha, _intervals(grid, p >= alpha))


@dataclass(frozen=True, eq=False)
class PipelineResult:
    selection: SelectionOutcome
    test: RandomizationTestResult


def run_pipeline(
    dataset: Dataset,
    design: Design,
    config: SelectionConfig = SelectionConfig(),
    stat: TestStatistic = HajekStatistic(),
    M: int = 200,
    seed: int = 0,
    orientation: Orientation | str = Orientation.GREATER,
    selector=None,
) -> PipelineResult:
    """Select a subgroup, then test its sharp null conditionally."""
    selection = (selector or (lambda d: select_cutoff(d, config)))(dataset)
    if np.intersect1d(selection.subgroup, selection.revealed).size:
        raise AssertionError("selection consumed treatments of selected units")
    hyp = SubgroupHypothesis(selection.subgroup)
    test = conditional_rt(dataset, design, hyp, stat, M, seed, orientation)
    log.debug("cutoff=%s size=%d p=%s", selection.cutoff, selection.subgroup.size, test.p_value)
    return PipelineResult(selection, test)

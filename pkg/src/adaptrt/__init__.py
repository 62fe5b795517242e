"""Biomarker cutoff selection and conditional randomization tests for the selected subgroup."""

from .design import Bernoulli, CompletelyRandomized, ConditionalLaw, StratifiedCRD, condition, sample_assignment
from .infer import (
    ConfidenceSet,
    Orientation,
    RandomizationTestResult,
    conditional_rt,
    confidence_set,
    exact_conditional_rt,
    randomization_test,
    run_pipeline,
    subgroup_rt,
)
from .model import BenefitingSubgroup, Dataset, PotentialTable, SubgroupHypothesis, load_dataset, save_dataset
from .select import (
    AdaptiveConfig,
    PositiveEstimate,
    SelectionConfig,
    SelectionOutcome,
    ZScore,
    select_adaptive,
    select_arc,
    select_cutoff,
    select_multi,
    verify_self_contained,
)
from .stats import HajekStatistic, ResidualSumStatistic, UserStatistic, hajek_diff_in_means

__all__ = [
    "AdaptiveConfig",
    "BenefitingSubgroup",
    "Bernoulli",
    "CompletelyRandomized",
    "ConditionalLaw",
    "ConfidenceSet",
    "Dataset",
    "HajekStatistic",
    "Orientation",
    "PositiveEstimate",
    "PotentialTable",
    "RandomizationTestResult",
    "ResidualSumStatistic",
    "SelectionConfig",
    "SelectionOutcome",
    "StratifiedCRD",
    "SubgroupHypothesis",
    "UserStatistic",
    "ZScore",
    "condition",
    "conditional_rt",
    "confidence_set",
    "exact_conditional_rt",
    "hajek_diff_in_means",
    "load_dataset",
    "randomization_test",
    "run_pipeline",
    "sample_assignment",
    "save_dataset",
    "select_adaptive",
    "select_arc",
    "select_cutoff",
    "select_multi",
    "subgroup_rt",
    "verify_self_contained",
]

import numpy as np
import pytest

from adaptrt.model import Dataset


def make_dataset(n=40, seed=0, theta=0.2, effect=None, strata=None, covariates=None):
    """Small synthetic dataset; ``effect`` maps biomarker to the treatment effect."""
    rng = np.random.default_rng(seed)
    s = rng.normal(0.0, 2.0, n)
    z = (rng.random(n) < theta).astype(int)
    y = s + rng.normal(0.0, 1.0, n)
    if effect is not None:
        y = y + z * effect(s)
    return Dataset(
        ids=np.arange(n),
        biomarker=s,
        treatment=z,
        outcome=y,
        propensity=np.full(n, theta),
        stratum=strata,
        covariates=covariates,
    )


@pytest.fixture
def small_dataset():
    return make_dataset()


def support_fit(law, draws):
    """Chi-square p-value and total-variation distance of ``draws`` against the exact support."""
    from scipy import stats

    from adaptrt.design import enumerate_conditional_support

    support, prob = enumerate_conditional_support(law)
    weights = 1 << np.arange(support.shape[1], dtype=np.int64)
    keys = support.astype(np.int64) @ weights
    lookup = {int(k): i for i, k in enumerate(keys)}
    observed_keys = draws.astype(np.int64) @ weights
    counts = np.zeros(len(keys))
    for k, c in zip(*np.unique(observed_keys, return_counts=True)):
        if int(k) not in lookup:
            return 0.0, 1.0
        counts[lookup[int(k)]] = c
    total = counts.sum()
    tv = 0.5 * np.abs(counts / total - prob).sum()
    if len(keys) == 1:
        return 1.0, tv
    return float(stats.chisquare(counts, prob * total).pvalue), float(tv)

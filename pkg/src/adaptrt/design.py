"""Assignment mechanisms and their laws conditional on a fixed set of units.

Three designs are supported: independent Bernoulli, completely randomized
(CRD) and stratified CRD. Fixing the assignments of some units leaves a
design of the same family on the remaining ("free") units, which is what
the conditional randomization test re-draws from.

All sampling goes through :func:`make_rng`, which derives a generator from a
master seed plus integer counters. Large draws are split into fixed-size
blocks, each with its own counter, so results never depend on how the work
is scheduled.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

BLOCK = 4096
MAX_ENUMERATION = 20

Seed = Union[int, np.random.SeedSequence, np.random.Generator]


class InfeasibleConditioning(ValueError):
    """Fixed assignments contradict the design's treated counts."""


def make_rng(seed: Seed, *counters: int) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        if counters:
            raise TypeError("counters need an integer seed or SeedSequence")
        return seed
    if isinstance(seed, np.random.SeedSequence):
        if not counters:
            return np.random.default_rng(seed)
        entropy = seed.entropy if isinstance(seed.entropy, int) else list(seed.entropy)
        key = list(seed.spawn_key) + list(counters)
        return np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=key))
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, counters)]))


def uniform_draws(seed: Seed, size: int, m: int) -> np.ndarray:
    """``(size, m)`` uniforms, generated block by block from counter seeds."""
    if isinstance(seed, np.random.Generator):
        return seed.random((size, m))
    out = np.empty((size, m))
    for b, start in enumerate(range(0, size, BLOCK)):
        stop = min(start + BLOCK, size)
        out[start:stop] = make_rng(seed, b).random((stop - start, m))
    return out


def _first_k(u: np.ndarray, k: int) -> np.ndarray:
    """Mark the k smallest entries of each row: a uniform k-subset per row."""
    m = u.shape[1]
    if k <= 0:
        return np.zeros(u.shape, dtype=np.int8)
    if k >= m:
        return np.ones(u.shape, dtype=np.int8)
    thr = np.partition(u, k - 1, axis=1)[:, k - 1 : k]
    return (u <= thr).astype(np.int8)


# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Bernoulli:
    """Independent assignment with per-unit probabilities."""

    propensity: np.ndarray

    def __post_init__(self) -> None:
        e = np.asarray(self.propensity, dtype=float)
        if e.ndim != 1 or e.size == 0:
            raise ValueError("propensity must be a non-empty 1-d array")
        if np.any(~np.isfinite(e)) or np.any((e <= 0) | (e >= 1)):
            raise ValueError("Bernoulli propensities must lie strictly inside (0, 1)")
        e.setflags(write=False)
        object.__setattr__(self, "propensity", e)

    @property
    def n(self) -> int:
        return self.propensity.shape[0]

    def restrict(self, indices: np.ndarray) -> "Bernoulli":
        return Bernoulli(self.propensity[indices])


@dataclass(frozen=True)
class CompletelyRandomized:
    """Exactly ``treated`` of ``n`` units treated, uniformly at random."""

    n: int
    treated: int

    def __post_init__(self) -> None:
        if not 0 < self.treated < self.n:
            raise ValueError(f"CRD needs 0 < treated < n, got treated={self.treated}, n={self.n}")


@dataclass(frozen=True, eq=False)
class StratifiedCRD:
    """Independent CRDs within strata. ``treated`` maps stratum label to count."""

    strata: np.ndarray
    treated: Mapping[int, int]

    def __post_init__(self) -> None:
        g = np.asarray(self.strata, dtype=np.int64)
        g.setflags(write=False)
        object.__setattr__(self, "strata", g)
        labels, sizes = np.unique(g, return_counts=True)
        treated = {int(k): int(v) for k, v in self.treated.items()}
        if set(treated) != set(map(int, labels)):
            raise ValueError("treated counts must be given for exactly the strata present")
        for lab, size in zip(labels, sizes):
            k = treated[int(lab)]
            if not 0 < k < size:
                raise ValueError(f"stratum {lab}: need 0 < treated < {size}, got {k}")
        object.__setattr__(self, "treated", treated)

    @property
    def n(self) -> int:
        return self.strata.shape[0]


Design = Union[Bernoulli, CompletelyRandomized, StratifiedCRD]


def check_assignment(design: Design, z: np.ndarray) -> None:
    """Raise if ``z`` is outside the design's support."""
    z = np.asarray(z)
    if z.shape != (design.n,):
        raise ValueError(f"assignment length {z.shape} does not match design size {design.n}")
    if isinstance(design, CompletelyRandomized) and int(z.sum()) != design.treated:
        raise ValueError(f"assignment has {int(z.sum())} treated, design requires {design.treated}")
    if isinstance(design, StratifiedCRD):
        for lab, k in design.treated.items():
            got = int(z[design.strata == lab].sum())
            if got != k:
                raise ValueError(f"stratum {lab}: {got} treated, design requires {k}")


# ---------------------------------------------------------------------------
# Conditional laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConditionalLaw:
    """Design law given that ``fixed_indices`` keep ``fixed_values``."""

    design: Design
    fixed_indices: np.ndarray
    fixed_values: np.ndarray
    free_indices: np.ndarray = field(init=False)
    # Bernoulli: per-free-unit probs; CRD: single count; stratified: list of
    # (positions within the free set, count)
    _free_law: object = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = self.design.n
        fixed = np.asarray(self.fixed_indices, dtype=np.int64)
        vals = np.asarray(self.fixed_values, dtype=np.int8)
        if fixed.shape != vals.shape:
            raise ValueError("fixed_indices and fixed_values differ in length")
        if fixed.size and (fixed.min() < 0 or fixed.max() >= n):
            raise IndexError("fixed index out of range")
        if np.unique(fixed).size != fixed.size:
            raise ValueError("duplicate fixed index")
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("fixed values must be binary")
        order = np.argsort(fixed)
        fixed, vals = fixed[order], vals[order]
        mask = np.ones(n, dtype=bool)
        mask[fixed] = False
        free = np.flatnonzero(mask)
        for a in (fixed, vals, free):
            a.setflags(write=False)
        object.__setattr__(self, "fixed_indices", fixed)
        object.__setattr__(self, "fixed_values", vals)
        object.__setattr__(self, "free_indices", free)

        d = self.design
        if isinstance(d, Bernoulli):
            law: object = d.propensity[free]
        elif isinstance(d, CompletelyRandomized):
            k = d.treated - int(vals.sum())
            if not 0 <= k <= free.size:
                raise InfeasibleConditioning(
                    f"fixed units carry {int(vals.sum())} treated; {k} left for {free.size} free units"
                )
            law = k
        else:
            parts = []
            free_g = d.strata[free]
            fixed_g = d.strata[fixed]
            for lab, k_tot in sorted(d.treated.items()):
                k = k_tot - int(vals[fixed_g == lab].sum())
                pos = np.flatnonzero(free_g == lab)
                if not 0 <= k <= pos.size:
                    raise InfeasibleConditioning(
                        f"stratum {lab}: {k} treated left for {pos.size} free units"
                    )
                if pos.size:
                    parts.append((pos, k))
            law = parts
        object.__setattr__(self, "_free_law", law)

    @property
    def n_free(self) -> int:
        return self.free_indices.size

    def describe(self) -> str:
        return (
            f"{type(self.design).__name__}: {self.fixed_indices.size} units fixed, "
            f"{self.n_free} re-randomized"
        )

    def free_from_uniforms(self, u: np.ndarray) -> np.ndarray:
        """Map ``(size, n_free)`` uniforms to free-unit assignments."""
        d = self.design
        if isinstance(d, Bernoulli):
            return (u < self._free_law).astype(np.int8)
        if isinstance(d, CompletelyRandomized):
            return _first_k(u, self._free_law)
        z = np.empty(u.shape, dtype=np.int8)
        for pos, k in self._free_law:
            z[:, pos] = _first_k(u[:, pos], k)
        return z

    def sample_free(self, seed: Seed, size: int) -> np.ndarray:
        """``(size, n_free)`` draws for the free units only."""
        return self.free_from_uniforms(uniform_draws(seed, size, self.n_free))

    def embed(self, free_z: np.ndarray) -> np.ndarray:
        """Complete free-unit draws with the fixed values: ``(size, n)``."""
        free_z = np.atleast_2d(free_z)
        out = np.empty((free_z.shape[0], self.design.n), dtype=np.int8)
        out[:, self.fixed_indices] = self.fixed_values
        out[:, self.free_indices] = free_z
        return out

    def sample(self, seed: Seed, size: int = 1) -> np.ndarray:
        return self.embed(self.sample_free(seed, size))


def condition(design: Design, fixed_indices, fixed_values) -> ConditionalLaw:
    return ConditionalLaw(design, np.asarray(fixed_indices), np.asarray(fixed_values))


def unconditional(design: Design) -> ConditionalLaw:
    return ConditionalLaw(design, np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int8))


def sample_assignment(design: Design, seed: Seed) -> np.ndarray:
    """One draw from the unconditional design law."""
    return unconditional(design).sample(seed, 1)[0]


def conditional_resample(law: ConditionalLaw, seed: Seed) -> np.ndarray:
    """One draw from ``law``; fixed coordinates equal the fixed values."""
    return law.sample(seed, 1)[0]


def _crd_support(m: int, k: int) -> np.ndarray:
    rows = np.zeros((math.comb(m, k), m), dtype=np.int8)
    for r, combo in enumerate(itertools.combinations(range(m), k)):
        rows[r, list(combo)] = 1
    return rows


def enumerate_free_support(law: ConditionalLaw) -> tuple[np.ndarray, np.ndarray]:
    """All free-unit assignments with positive probability, and their probabilities."""
    m = law.n_free
    if m > MAX_ENUMERATION:
        raise ValueError(f"{m} free units exceed the enumeration cap of {MAX_ENUMERATION}")
    d = law.design
    if isinstance(d, Bernoulli):
        z = ((np.arange(2**m)[:, None] >> np.arange(m)) & 1).astype(np.int8)
        e = law._free_law
        p = np.prod(np.where(z == 1, e, 1.0 - e), axis=1)
        return z, p
    if isinstance(d, CompletelyRandomized):
        z = _crd_support(m, law._free_law)
        return z, np.full(z.shape[0], 1.0 / z.shape[0])
    blocks = [(pos, _crd_support(pos.size, k)) for pos, k in law._free_law]
    total = math.prod(b.shape[0] for _, b in blocks)
    z = np.zeros((total, m), dtype=np.int8)
    for r, choice in enumerate(itertools.product(*(range(b.shape[0]) for _, b in blocks))):
        for (pos, b), c in zip(blocks, choice):
            z[r, pos] = b[c]
    return z, np.full(total, 1.0 / total)


def enumerate_conditional_support(law: ConditionalLaw) -> tuple[np.ndarray, np.ndarray]:
    """Full-length support vectors ``(K, n)`` and probabilities ``(K,)``."""
    z, p = enumerate_free_support(law)
    return law.embed(z), p


def design_from_config(spec: Mapping, dataset) -> Design:
    """Build a design from its JSON description and the dataset it governs."""
    kind = spec.get("kind")
    extra = set(spec) - {"kind", "treated", "treated_per_stratum"}
    if extra:
        raise ValueError(f"unknown design key(s): {sorted(extra)}")
    if kind == "bernoulli":
        return Bernoulli(dataset.propensity)
    if kind == "crd":
        if "treated" not in spec:
            raise ValueError("crd design needs 'treated'")
        return CompletelyRandomized(len(dataset), int(spec["treated"]))
    if kind == "stratified":
        if dataset.stratum is None:
            raise ValueError("stratified design needs a stratum column")
        counts = {int(k): int(v) for k, v in spec.get("treated_per_stratum", {}).items()}
        return StratifiedCRD(dataset.stratum, counts)
    raise ValueError(f"unknown design kind {kind!r}")


def restrict_design(design: Design, indices: Sequence[int], z: np.ndarray) -> Design:
    """The design induced on ``indices`` once the other units are fixed at ``z``.

    For Bernoulli designs this is the same per-unit law; for (stratified) CRDs
    the treated counts shrink by what the fixed units already carry.
    """
    idx = np.sort(np.asarray(indices, dtype=np.int64))
    if isinstance(design, Bernoulli):
        return design.restrict(idx)
    mask = np.ones(design.n, dtype=bool)
    mask[idx] = False
    law = condition(design, np.flatnonzero(mask), np.asarray(z)[mask])
    if isinstance(design, CompletelyRandomized):
        k = law._free_law
        if k == 0 or k == idx.size:
            raise InfeasibleConditioning("induced CRD is degenerate (all or none treated)")
        return CompletelyRandomized(idx.size, k)
    counts = {int(design.strata[idx][pos[0]]): k for pos, k in law._free_law}
    return StratifiedCRD(design.strata[idx], counts)

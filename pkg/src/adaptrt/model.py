"""Potential-outcome data model, subgroup hypotheses and dataset ingestion.

A :class:`Dataset` is stored column-wise (numpy arrays) so that the
selection and testing code can slice it cheaply; :class:`Unit` is the
row view for callers who want one unit at a time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

REQUIRED_COLUMNS = ("id", "biomarker", "treatment", "outcome", "propensity")


class DatasetError(ValueError):
    """Raised when a dataset file or array fails validation."""


class Unit(NamedTuple):
    id: int
    biomarker: float
    treatment: int
    outcome: float
    propensity: float
    stratum: int | None
    covariates: tuple[float, ...]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered units with biomarker, treatment, outcome and propensity.

    Rows keep their input order. ``biomarker_order`` is the permutation that
    sorts units ascending by ``(biomarker, id)``.
    """

    ids: np.ndarray
    biomarker: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    propensity: np.ndarray
    stratum: np.ndarray | None = None
    covariates: np.ndarray | None = None
    biomarker_order: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids, dtype=np.int64)
        s = np.asarray(self.biomarker, dtype=float)
        z = np.asarray(self.treatment)
        y = np.asarray(self.outcome, dtype=float)
        e = np.asarray(self.propensity, dtype=float)
        n = ids.shape[0]
        for name, a in (("biomarker", s), ("treatment", z), ("outcome", y), ("propensity", e)):
            if a.shape != (n,):
                raise DatasetError(f"{name} must have shape ({n},), got {a.shape}")
        if np.unique(ids).size != n:
            raise DatasetError("unit ids must be unique")
        if not np.all(np.isin(z, (0, 1))):
            raise DatasetError("treatment must be binary (0/1)")
        for name, a in (("biomarker", s), ("outcome", y), ("propensity", e)):
            if not np.all(np.isfinite(a)):
                raise DatasetError(f"non-finite {name}")
        if np.any((e <= 0) | (e >= 1)):
            raise DatasetError("propensity must lie strictly inside (0, 1)")
        strata = None
        if self.stratum is not None:
            strata = np.asarray(self.stratum, dtype=np.int64)
            if strata.shape != (n,):
                raise DatasetError("stratum length mismatch")
        cov = None
        if self.covariates is not None:
            cov = np.asarray(self.covariates, dtype=float)
            if cov.ndim == 1:
                cov = cov[:, None]
            if cov.shape[0] != n:
                raise DatasetError("covariate rows mismatch")
            if not np.all(np.isfinite(cov)):
                raise DatasetError("non-finite covariate")
        object.__setattr__(self, "ids", _frozen(ids))
        object.__setattr__(self, "biomarker", _frozen(s))
        object.__setattr__(self, "treatment", _frozen(z.astype(np.int8)))
        object.__setattr__(self, "outcome", _frozen(y))
        object.__setattr__(self, "propensity", _frozen(e))
        object.__setattr__(self, "stratum", None if strata is None else _frozen(strata))
        object.__setattr__(self, "covariates", None if cov is None else _frozen(cov))
        # lexsort: last key is primary
        object.__setattr__(self, "biomarker_order", _frozen(np.lexsort((ids, s))))

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    def unit(self, i: int) -> Unit:
        return Unit(
            id=int(self.ids[i]),
            biomarker=float(self.biomarker[i]),
            treatment=int(self.treatment[i]),
            outcome=float(self.outcome[i]),
            propensity=float(self.propensity[i]),
            stratum=None if self.stratum is None else int(self.stratum[i]),
            covariates=() if self.covariates is None else tuple(map(float, self.covariates[i])),
        )

    def __iter__(self) -> Iterator[Unit]:
        return (self.unit(i) for i in range(len(self)))

    @classmethod
    def from_units(cls, units: Sequence[Unit]) -> "Dataset":
        has_stratum = any(u.stratum is not None for u in units)
        has_cov = any(len(u.covariates) for u in units)
        return cls(
            ids=[u.id for u in units],
            biomarker=[u.biomarker for u in units],
            treatment=[u.treatment for u in units],
            outcome=[u.outcome for u in units],
            propensity=[u.propensity for u in units],
            stratum=[u.stratum for u in units] if has_stratum else None,
            covariates=[u.covariates for u in units] if has_cov else None,
        )

    def replace(self, **changes) -> "Dataset":
        """Copy of the dataset with some columns swapped out."""
        cols = dict(
            ids=self.ids,
            biomarker=self.biomarker,
            treatment=self.treatment,
            outcome=self.outcome,
            propensity=self.propensity,
            stratum=self.stratum,
            covariates=self.covariates,
        )
        cols.update(changes)
        return Dataset(**cols)

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            ids=self.ids[idx],
            biomarker=self.biomarker[idx],
            treatment=self.treatment[idx],
            outcome=self.outcome[idx],
            propensity=self.propensity[idx],
            stratum=None if self.stratum is None else self.stratum[idx],
            covariates=None if self.covariates is None else self.covariates[idx],
        )


@dataclass(frozen=True, eq=False)
class PotentialTable:
    """Both potential outcomes per unit. Only simulations know the full table."""

    y0: np.ndarray
    y1: np.ndarray

    def __post_init__(self) -> None:
        y0 = np.asarray(self.y0, dtype=float)
        y1 = np.asarray(self.y1, dtype=float)
        if y0.shape != y1.shape or y0.ndim != 1:
            raise ValueError("y0 and y1 must be 1-d arrays of equal length")
        object.__setattr__(self, "y0", _frozen(y0))
        object.__setattr__(self, "y1", _frozen(y1))

    def __len__(self) -> int:
        return self.y0.shape[0]

    @property
    def effect(self) -> np.ndarray:
        return self.y1 - self.y0

    def observed(self, z: np.ndarray) -> np.ndarray:
        return np.where(np.asarray(z) == 1, self.y1, self.y0)


@dataclass(frozen=True, eq=False)
class SubgroupHypothesis:
    """Y_i(1) - Y_i(0) = effect_constant for every i in ``subgroup``."""

    subgroup: np.ndarray
    effect_constant: float = 0.0

    def __post_init__(self) -> None:
        sub = np.unique(np.asarray(self.subgroup, dtype=np.int64))
        object.__setattr__(self, "subgroup", _frozen(sub))
        if not math.isfinite(self.effect_constant):
            raise ValueError("effect_constant must be finite")


@dataclass(frozen=True, eq=False)
class BenefitingSubgroup:
    """Units with a strictly positive individual effect, and the cutoff s*."""

    indices: np.ndarray
    true_cutoff: float

    @classmethod
    def from_effects(cls, biomarker: np.ndarray, effect: np.ndarray) -> "BenefitingSubgroup":
        effect = np.asarray(effect, dtype=float)
        biomarker = np.asarray(biomarker, dtype=float)
        nonpos = effect <= 0
        cutoff = float(biomarker[nonpos].max()) if nonpos.any() else -math.inf
        return cls(indices=_frozen(np.flatnonzero(~nonpos)), true_cutoff=cutoff)


def impute_under_null(dataset: Dataset, hyp: SubgroupHypothesis) -> PotentialTable:
    """Fill in both potential outcomes on the hypothesis' subgroup.

    Under a constant additive effect c, ``Y(0) = Y - c Z`` and
    ``Y(1) = Y + c (1 - Z)``. The returned table is indexed like
    ``hyp.subgroup``; nothing is imputed outside it.
    """
    idx = hyp.subgroup
    if idx.size and (idx[0] < 0 or idx[-1] >= len(dataset)):
        raise IndexError("subgroup index out of range")
    y = dataset.outcome[idx]
    z = dataset.treatment[idx].astype(float)
    c = hyp.effect_constant
    return PotentialTable(y0=y - c * z, y1=y + c * (1.0 - z))


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def load_dataset(path: str | Path, schema: Mapping[str, str] | None = None) -> Dataset:
    """Read and validate a dataset CSV.

    ``schema`` optionally maps canonical column names (``id``, ``biomarker``,
    ...) to the header names used in the file. Errors name the offending
    data row (1-based, header excluded).
    """
    schema = dict(schema or {})
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        col = {name: schema.get(name, name) for name in REQUIRED_COLUMNS + ("stratum",)}
        missing = [c for c in REQUIRED_COLUMNS if col[c] not in header]
        if missing:
            raise DatasetError(f"{path}: missing column(s) {', '.join(missing)}")
        pos = {name: header.index(h) for name, h in col.items() if h in header}
        cov_cols = sorted(
            (h for h in header if h.startswith("cov_") and h[4:].isdigit()),
            key=lambda h: int(h[4:]),
        )
        cov_pos = [header.index(h) for h in cov_cols]

        ids, s, z, y, e, g, x = [], [], [], [], [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"wrong field count at row {row_no}")

            def num(name: str, p: int) -> float:
                try:
                    v = float(row[p])
                except ValueError:
                    raise DatasetError(f"unparseable {name} at row {row_no}") from None
                if not math.isfinite(v):
                    raise DatasetError(f"non-finite {name} at row {row_no}")
                return v

            try:
                uid = int(row[pos["id"]])
            except ValueError:
                raise DatasetError(f"non-integer id at row {row_no}") from None
            treat = num("treatment", pos["treatment"])
            if treat not in (0.0, 1.0):
                raise DatasetError(f"non-binary treatment at row {row_no}")
            prop = num("propensity", pos["propensity"])
            if not 0.0 < prop < 1.0:
                raise DatasetError(f"propensity outside (0,1) at row {row_no}")
            ids.append(uid)
            s.append(num("biomarker", pos["biomarker"]))
            z.append(int(treat))
            y.append(num("outcome", pos["outcome"]))
            e.append(prop)
            if "stratum" in pos:
                try:
                    g.append(int(row[pos["stratum"]]))
                except ValueError:
                    raise DatasetError(f"non-integer stratum at row {row_no}") from None
            if cov_pos:
                x.append([num(header[p], p) for p in cov_pos])

    if not ids:
        raise DatasetError(f"{path}: no data rows")
    if len(set(ids)) != len(ids):
        seen: set[int] = set()
        for row_no, uid in enumerate(ids, start=1):
            if uid in seen:
                raise DatasetError(f"duplicate id {uid} at row {row_no}")
            seen.add(uid)
    return Dataset(
        ids=ids,
        biomarker=s,
        treatment=z,
        outcome=y,
        propensity=e,
        stratum=g if "stratum" in pos else None,
        covariates=x if cov_pos else None,
    )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset CSV; floats use ``repr`` so a reload is bit-exact."""
    header = list(REQUIRED_COLUMNS)
    if dataset.stratum is not None:
        header.append("stratum")
    p = 0 if dataset.covariates is None else dataset.covariates.shape[1]
    header += [f"cov_{j}" for j in range(p)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row = [
                str(int(dataset.ids[i])),
                repr(float(dataset.biomarker[i])),
                str(int(dataset.treatment[i])),
                repr(float(dataset.outcome[i])),
                repr(float(dataset.propensity[i])),
            ]
            if dataset.stratum is not None:
                row.append(str(int(dataset.stratum[i])))
            if p:
                row += [repr(float(v)) for v in dataset.covariates[i]]
            w.writerow(row)

"""Patient-level trial data: schema, ingestion, validation and design matrices.

A :class:`TrialDataset` is column-oriented and immutable.  Binary outcome and
arm columns are always present; covariates follow a declared schema of
:class:`CovariateSpec`.  A covariate that a source never recorded (for
example a registry without performance status) is kept as an all-missing
column and listed in ``TrialDataset.absent``; partial missingness is an
error.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "SchemaError",
    "DataError",
    "FormulaError",
    "CovariateSpec",
    "PatientRecord",
    "TrialDataset",
    "Formula",
    "DesignMatrixBundle",
    "load_dataset",
    "write_dataset",
    "build_design",
    "split_subgroup",
    "concat_datasets",
]

KINDS = ("continuous", "binary", "categorical")
ROLES = ("prognostic_only", "effect_modifier", "both")


class SchemaError(ValueError):
    """Input columns or schema declarations are inconsistent."""


class DataError(ValueError):
    """A value violates its declared domain."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class FormulaError(ValueError):
    """The analysis formula references covariates it cannot use."""


@dataclass(frozen=True)
class CovariateSpec:
    name: str
    kind: str = "continuous"
    levels: tuple[str, ...] | None = None
    role: str = "prognostic_only"

    def __post_init__(self):
        if not self.name or self.name in ("outcome", "arm"):
            raise SchemaError(f"invalid covariate name {self.name!r}")
        if self.kind not in KINDS:
            raise SchemaError(f"{self.name}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise SchemaError(f"{self.name}: unknown role {self.role!r}")
        if self.kind == "categorical":
            if self.levels is None or len(self.levels) < 2:
                raise SchemaError(f"{self.name}: categorical covariate needs >= 2 levels")
            levels = tuple(str(v) for v in self.levels)
            if len(set(levels)) != len(levels):
                raise SchemaError(f"{self.name}: duplicate levels")
            object.__setattr__(self, "levels", levels)
        elif self.levels is not None:
            raise SchemaError(f"{self.name}: levels only apply to categorical covariates")

    @property
    def is_modifier(self) -> bool:
        return self.role in ("effect_modifier", "both")

    @property
    def width(self) -> int:
        """Number of design-matrix columns after encoding."""
        return len(self.levels) - 1 if self.kind == "categorical" else 1

    def column_names(self) -> list[str]:
        if self.kind == "categorical":
            return [f"{self.name}[{lv}]" for lv in self.levels[1:]]
        return [self.name]

    def encode(self, values: np.ndarray) -> np.ndarray:
        """Encode a value column into ``(n, width)`` float columns.

        Categorical covariates use dummy coding against the first level.
        """
        if self.kind == "categorical":
            values = np.asarray(values).astype(str)
            return np.column_stack([values == lv for lv in self.levels[1:]]).astype(float)
        return np.asarray(values, dtype=float).reshape(-1, 1)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CovariateSpec":
        levels = d.get("levels")
        return cls(
            name=str(d["name"]),
            kind=str(d.get("kind", "continuous")),
            levels=None if levels is None else tuple(str(v) for v in levels),
            role=str(d.get("role", "prognostic_only")),
        )

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind, "role": self.role}
        if self.levels is not None:
            d["levels"] = list(self.levels)
        return d


@dataclass(frozen=True)
class PatientRecord:
    outcome: int
    arm: int
    covariates: Mapping[str, Any]


def _check_schema(schema: Sequence[CovariateSpec]) -> tuple[CovariateSpec, ...]:
    schema = tuple(schema)
    names = [c.name for c in schema]
    if len(set(names)) != len(names):
        raise SchemaError("covariate names must be unique")
    return schema


def _coerce_column(spec: CovariateSpec, raw: Sequence[Any], first_row: int = 1) -> np.ndarray:
    """Validate and convert one raw covariate column; raises DataError with 1-based rows."""
    if isinstance(raw, np.ndarray) and raw.dtype.kind in "fiub" and spec.kind != "categorical":
        x = raw.astype(float)
        bad = ~np.isfinite(x)
        if spec.kind == "binary":
            bad |= (x != 0.0) & (x != 1.0)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"{spec.name}={raw[i]!r} out of domain", first_row + i)
        return x
    n = len(raw)
    if spec.kind == "categorical":
        out = np.empty(n, dtype=object)
        for i, v in enumerate(raw):
            s = _as_label(v)
            if s not in spec.levels:
                raise DataError(f"{spec.name}={v!r} not in levels {list(spec.levels)}", first_row + i)
            out[i] = s
        return out.astype(str)
    out = np.empty(n, dtype=float)
    for i, v in enumerate(raw):
        try:
            x = float(v)
        except (TypeError, ValueError):
            raise DataError(f"{spec.name}={v!r} is not numeric", first_row + i) from None
        if not math.isfinite(x):
            raise DataError(f"{spec.name}={v!r} is not finite", first_row + i)
        if spec.kind == "binary" and x not in (0.0, 1.0):
            raise DataError(f"{spec.name}={v!r} must be 0 or 1", first_row + i)
        out[i] = x
    return out


def _numeric_or_list(a):
    a = np.asarray(a)
    return a if a.dtype.kind in "fiub" else a.tolist()


def _as_label(v: Any) -> str:
    if isinstance(v, float) and v.is_integer():
        return str(int(v))
    return str(v)


def _binary_vector(name: str, raw: Sequence[Any], first_row: int = 1) -> np.ndarray:
    if isinstance(raw, np.ndarray) and raw.dtype.kind in "fiub":
        bad = (raw != 0) & (raw != 1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataError(f"{name}={raw[i]!r} must be 0 or 1", first_row + i)
        return raw.astype(np.int8)
    out = np.empty(len(raw), dtype=np.int8)
    for i, v in enumerate(raw):
        try:
            x = float(v)
        except (TypeError, ValueError):
            raise DataError(f"{name}={v!r} must be 0 or 1", first_row + i) from None
        if x not in (0.0, 1.0):
            raise DataError(f"{name}={v!r} must be 0 or 1", first_row + i)
        out[i] = int(x)
    return out


def _is_missing(v: Any) -> bool:
    if v is None:
        return True
    if isinstance(v, str):
        return v.strip() in ("", "NA", "NaN", "nan")
    return isinstance(v, float) and math.isnan(v)


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Immutable patient-level data for one source.

    Attributes
    ----------
    source_id : str
        Label of the source (``"internal"``, ``"RES"``, ...).
    schema : tuple of CovariateSpec
    outcome, arm : ndarray of int8
    covariates : dict
        Column arrays keyed by covariate name.  Absent covariates hold NaN
        (continuous/binary) or empty strings (categorical).
    absent : frozenset of str
        Covariates not recorded anywhere in this source.
    """

    source_id: str
    schema: tuple[CovariateSpec, ...]
    outcome: np.ndarray
    arm: np.ndarray
    covariates: Mapping[str, np.ndarray]
    absent: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        schema = _check_schema(self.schema)
        object.__setattr__(self, "schema", schema)
        n = len(self.outcome)
        outcome = _binary_vector("outcome", _numeric_or_list(self.outcome))
        arm = _binary_vector("arm", _numeric_or_list(self.arm))
        if len(arm) != n:
            raise SchemaError("outcome and arm lengths differ")
        cols = {}
        absent = frozenset(self.absent)
        for spec in schema:
            if spec.name not in self.covariates:
                raise SchemaError(f"missing covariate column {spec.name!r}")
            col = np.asarray(self.covariates[spec.name])
            if len(col) != n:
                raise SchemaError(f"column {spec.name!r} has length {len(col)}, expected {n}")
            if spec.name in absent:
                col = np.full(n, "", dtype=str) if spec.kind == "categorical" else np.full(n, np.nan)
            else:
                col = _coerce_column(spec, col if spec.kind != "categorical" and col.dtype.kind in "fiub"
                                     else col.tolist())
            col.setflags(write=False)
            cols[spec.name] = col
        extra = set(self.covariates) - {s.name for s in schema}
        if extra:
            raise SchemaError(f"columns not in schema: {sorted(extra)}")
        if not absent <= {s.name for s in schema}:
            raise SchemaError(f"absent covariates not in schema: {sorted(absent)}")
        outcome.setflags(write=False)
        arm.setflags(write=False)
        object.__setattr__(self, "outcome", outcome)
        object.__setattr__(self, "arm", arm)
        object.__setattr__(self, "covariates", cols)
        object.__setattr__(self, "absent", absent)

    def __len__(self) -> int:
        return len(self.outcome)

    @property
    def n(self) -> int:
        return len(self.outcome)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.schema]

    def spec(self, name: str) -> CovariateSpec:
        for s in self.schema:
            if s.name == name:
                return s
        raise SchemaError(f"unknown covariate {name!r}")

    def has(self, name: str) -> bool:
        """True when ``name`` is in the schema and recorded for this source."""
        return name in self.covariates and name not in self.absent

    @property
    def patients(self) -> list[PatientRecord]:
        return [self.record(i) for i in range(self.n)]

    def record(self, i: int) -> PatientRecord:
        cov = {}
        for s in self.schema:
            if s.name in self.absent:
                cov[s.name] = None
            else:
                v = self.covariates[s.name][i]
                cov[s.name] = str(v) if s.kind == "categorical" else float(v)
        return PatientRecord(int(self.outcome[i]), int(self.arm[i]), cov)

    def take(self, index: Sequence[int] | np.ndarray, source_id: str | None = None) -> "TrialDataset":
        """Rows at ``index`` (integer positions or a boolean mask), in that order."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return TrialDataset(
            source_id=self.source_id if source_id is None else source_id,
            schema=self.schema,
            outcome=self.outcome[index],
            arm=self.arm[index],
            covariates={k: v[index] for k, v in self.covariates.items()},
            absent=self.absent,
        )

    def replace(self, **changes) -> "TrialDataset":
        kw = dict(source_id=self.source_id, schema=self.schema, outcome=self.outcome,
                  arm=self.arm, covariates=self.covariates, absent=self.absent)
        kw.update(changes)
        return TrialDataset(**kw)

    def equals(self, other: "TrialDataset") -> bool:
        if self.source_id != other.source_id or self.schema != other.schema:
            return False
        if self.absent != other.absent:
            return False
        if not (np.array_equal(self.outcome, other.outcome) and np.array_equal(self.arm, other.arm)):
            return False
        for s in self.schema:
            a, b = self.covariates[s.name], other.covariates[s.name]
            if s.kind == "categorical":
                if not np.array_equal(a, b):
                    return False
            elif not np.array_equal(a, b, equal_nan=True):
                return False
        return True

    @classmethod
    def from_records(cls, records: Iterable[PatientRecord], schema: Sequence[CovariateSpec],
                     source_id: str = "data") -> "TrialDataset":
        records = list(records)
        schema = _check_schema(schema)
        cols = {s.name: [r.covariates.get(s.name) for r in records] for s in schema}
        return _assemble(source_id, schema, [r.outcome for r in records],
                         [r.arm for r in records], cols, first_row=1)


def _assemble(source_id, schema, outcome, arm, raw_cols, first_row=1) -> TrialDataset:
    """Validate raw string/number columns with row-aware errors and build a dataset."""
    outcome = _binary_vector("outcome", outcome, first_row)
    arm = _binary_vector("arm", arm, first_row)
    cols, absent = {}, set()
    n = len(outcome)
    for spec in schema:
        raw = raw_cols[spec.name]
        missing = [_is_missing(v) for v in raw]
        if n and all(missing):
            absent.add(spec.name)
            cols[spec.name] = np.full(n, np.nan) if spec.kind != "categorical" else np.full(n, "", dtype=str)
            continue
        if any(missing):
            i = missing.index(True)
            raise DataError(f"{spec.name} is missing (partial missingness is not supported)", first_row + i)
        cols[spec.name] = _coerce_column(spec, raw, first_row)
    return TrialDataset(source_id, schema, outcome, arm, cols, frozenset(absent))


def load_dataset(path: str | Path, schema: Sequence[CovariateSpec], source_id: str | None = None,
                 delimiter: str = ",") -> TrialDataset:
    """Read a delimited text file with a header row into a :class:`TrialDataset`.

    The header must contain ``outcome``, ``arm`` and every schema covariate;
    unknown extra columns are ignored.  Errors quote the 1-based data row.
    """
    path = Path(path)
    schema = _check_schema(schema)
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: no data rows")
    needed = ["outcome", "arm"] + [s.name for s in schema]
    for name in needed:
        if name not in header:
            raise SchemaError(f"{path}: missing column {name!r}")
    pos = {h: i for i, h in enumerate(header)}
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise DataError(f"expected {len(header)} fields, found {len(r)}", i + 1)
    col = lambda name: [r[pos[name]].strip() for r in rows]  # noqa: E731
    return _assemble(source_id or path.stem, schema, col("outcome"), col("arm"),
                     {s.name: col(s.name) for s in schema}, first_row=1)


def _format(spec: CovariateSpec, v) -> str:
    if spec.kind == "categorical":
        return str(v)
    if spec.kind == "binary":
        return "" if np.isnan(v) else str(int(v))
    return "" if np.isnan(v) else repr(float(v))


def write_dataset(dataset: TrialDataset, path: str | Path, delimiter: str = ",") -> None:
    """Write ``dataset`` so that :func:`load_dataset` reproduces it exactly."""
    names = dataset.names
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(["outcome", "arm"] + names)
        for i in range(dataset.n):
            row = [int(dataset.outcome[i]), int(dataset.arm[i])]
            for s in dataset.schema:
                row.append(_format(s, dataset.covariates[s.name][i]))
            w.writerow(row)


def concat_datasets(datasets: Sequence[TrialDataset], source_id: str = "external") -> TrialDataset:
    """Stack sources sharing one schema into a single dataset.

    Covariates absent in only some of the sources cannot be represented by
    a per-source mask and raise; keep such sources separate.
    """
    if not datasets:
        raise ValueError("nothing to concatenate")
    schema = datasets[0].schema
    for d in datasets[1:]:
        if d.schema != schema:
            raise SchemaError("schemas differ between sources")
    absent_all = frozenset.intersection(*[d.absent for d in datasets])
    partial = frozenset.union(*[d.absent for d in datasets]) - absent_all
    if partial:
        raise SchemaError(f"covariates {sorted(partial)} absent in only some sources; keep them separate")
    cov = {s.name: np.concatenate([d.covariates[s.name] for d in datasets]) for s in schema}
    return TrialDataset(source_id, schema, np.concatenate([d.outcome for d in datasets]),
                        np.concatenate([d.arm for d in datasets]), cov, absent_all)


@dataclass(frozen=True)
class Formula:
    """Linear predictor ``x'beta + (s'psi) * arm``.

    ``prognostic`` names the covariates in x (intercept implied) and
    ``modifiers`` those in s, which must be a subset of ``prognostic``.
    """

    prognostic: tuple[str, ...] = ()
    modifiers: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "prognostic", tuple(self.prognostic))
        object.__setattr__(self, "modifiers", tuple(self.modifiers))
        missing = [m for m in self.modifiers if m not in self.prognostic]
        if missing:
            raise FormulaError(f"effect modifiers {missing} must also be prognostic covariates")

    def beta_names(self, schema: Sequence[CovariateSpec]) -> list[str]:
        lookup = {s.name: s for s in schema}
        names = ["(Intercept)"]
        for n in self.prognostic:
            names += lookup[n].column_names()
        return names

    def psi_names(self, schema: Sequence[CovariateSpec]) -> list[str]:
        lookup = {s.name: s for s in schema}
        names = ["arm"]
        for n in self.modifiers:
            names += [f"arm:{c}" for c in lookup[n].column_names()]
        return names

    def coef_names(self, schema: Sequence[CovariateSpec]) -> list[str]:
        return self.beta_names(schema) + self.psi_names(schema)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Formula":
        return cls(tuple(d.get("prognostic", ())), tuple(d.get("modifiers", ())))


@dataclass(frozen=True, eq=False)
class DesignMatrixBundle:
    """Encoded design for one dataset under one formula."""

    prognostic_matrix: np.ndarray
    modifier_matrix: np.ndarray
    arm: np.ndarray
    outcome: np.ndarray
    beta_names: tuple[str, ...]
    psi_names: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.prognostic_matrix.shape[0]

    @property
    def p(self) -> int:
        return self.prognostic_matrix.shape[1]

    @property
    def q(self) -> int:
        return self.modifier_matrix.shape[1]

    def full_matrix(self) -> np.ndarray:
        """``[X | S * arm]``, the combined regression matrix for ``theta = (beta, psi)``."""
        return np.hstack([self.prognostic_matrix, self.modifier_matrix * self.arm[:, None]])

    @classmethod
    def empty(cls, p: int, q: int, beta_names=(), psi_names=()) -> "DesignMatrixBundle":
        return cls(np.zeros((0, p)), np.zeros((0, q)), np.zeros(0), np.zeros(0),
                   tuple(beta_names), tuple(psi_names))


def build_design(dataset: TrialDataset, formula: Formula) -> DesignMatrixBundle:
    """Encode ``dataset`` under ``formula``.

    Returns prognostic ``[1 | encoded x]`` and modifier ``[1 | encoded s]``
    matrices; categorical covariates are dummy coded against their first
    declared level.
    """
    if not isinstance(formula, Formula):
        formula = Formula.from_dict(formula)
    known = set(dataset.names)
    for name in formula.prognostic:
        if name not in known:
            raise FormulaError(f"unknown covariate {name!r}")
        if name in dataset.absent:
            raise FormulaError(f"covariate {name!r} is not recorded in source {dataset.source_id!r}")
    n = dataset.n
    ones = np.ones((n, 1))
    x_blocks = [ones] + [dataset.spec(c).encode(dataset.covariates[c]) for c in formula.prognostic]
    s_blocks = [ones] + [dataset.spec(c).encode(dataset.covariates[c]) for c in formula.modifiers]
    return DesignMatrixBundle(
        prognostic_matrix=np.hstack(x_blocks),
        modifier_matrix=np.hstack(s_blocks),
        arm=dataset.arm.astype(float),
        outcome=dataset.outcome.astype(float),
        beta_names=tuple(formula.beta_names(dataset.schema)),
        psi_names=tuple(formula.psi_names(dataset.schema)),
    )


def _match(dataset: TrialDataset, where: Mapping[str, Any]) -> np.ndarray:
    mask = np.ones(dataset.n, dtype=bool)
    for name, value in where.items():
        spec = dataset.spec(name)
        col = dataset.covariates[name]
        values = value if isinstance(value, (list, tuple, set, frozenset)) else [value]
        if spec.kind == "categorical":
            mask &= np.isin(col, [_as_label(v) for v in values])
        else:
            mask &= np.isin(col, [float(v) for v in values])
    return mask


def split_subgroup(dataset: TrialDataset,
                   where: Mapping[str, Any] | Callable[[Mapping[str, np.ndarray]], np.ndarray],
                   negate: bool = False) -> TrialDataset:
    """Rows satisfying ``where`` (or its complement when ``negate``).

    ``where`` maps covariate names to a value or collection of accepted
    values; a callable receiving the covariate columns and returning a
    boolean mask is also accepted.
    """
    if callable(where):
        mask = np.asarray(where(dataset.covariates), dtype=bool)
        if mask.shape != (dataset.n,):
            raise ValueError("predicate must return one boolean per row")
    else:
        for name in where:
            if name not in dataset.covariates:
                raise SchemaError(f"predicate references unknown covariate {name!r}")
        mask = _match(dataset, where)
    return dataset.take(~mask if negate else mask)


def schema_from_config(items: Iterable[Mapping[str, Any]]) -> tuple[CovariateSpec, ...]:
    return _check_schema([CovariateSpec.from_dict(d) for d in items])

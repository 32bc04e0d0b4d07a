"""Tabular ingestion, schema inference, standardization and splitting.

Records are stored row-major as tuples. Continuous cells hold floats,
categorical and ordinal cells hold canonical strings, and absent cells hold
the :data:`MISSING` sentinel.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CellTypeError,
    DegenerateLabelError,
    IngestError,
    SchemaError,
    SplitError,
)

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
ORDINAL = "ordinal"
KINDS = (CONTINUOUS, CATEGORICAL, ORDINAL)

DEFAULT_DECIMAL_PLACES = 2
# a numeric column needs more than this many distinct values to be inferred continuous
MIN_CONTINUOUS_DISTINCT = 10


class _Missing:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "MISSING"

    def __reduce__(self):
        return (_Missing, ())


MISSING = _Missing()


def is_missing(value) -> bool:
    return value is MISSING


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str
    vocabulary: tuple = ()
    mean: float = 0.0
    std: float = 1.0
    decimal_places: int = DEFAULT_DECIMAL_PLACES
    degenerate: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind != CONTINUOUS and not self.vocabulary:
            raise SchemaError(f"feature {self.name!r}: empty vocabulary")
        if not self.std > 0:
            raise SchemaError(f"feature {self.name!r}: std must be positive")
        if self.decimal_places < 0:
            raise SchemaError(f"feature {self.name!r}: negative decimal places")

    @property
    def is_continuous(self) -> bool:
        return self.kind == CONTINUOUS

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.is_continuous:
            out.update(mean=self.mean, std=self.std,
                       decimal_places=self.decimal_places, degenerate=self.degenerate)
        else:
            out["vocabulary"] = list(self.vocabulary)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureSpec":
        return cls(
            name=obj["name"],
            kind=obj["kind"],
            vocabulary=tuple(obj.get("vocabulary", ())),
            mean=float(obj.get("mean", 0.0)),
            std=float(obj.get("std", 1.0)),
            decimal_places=int(obj.get("decimal_places", DEFAULT_DECIMAL_PLACES)),
            degenerate=bool(obj.get("degenerate", False)),
        )


@dataclass(frozen=True)
class Dataset:
    schema: tuple
    records: tuple
    label_index: int
    standardized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "records", tuple(tuple(r) for r in self.records))
        m = len(self.schema)
        if not 0 <= self.label_index < m:
            raise SchemaError(f"label index {self.label_index} outside schema of width {m}")
        if self.schema[self.label_index].is_continuous:
            raise SchemaError("label column must be categorical")
        for i, row in enumerate(self.records):
            if len(row) != m:
                raise IngestError(f"expected {m} values, got {len(row)}", row=i + 1)
            for j, (spec, value) in enumerate(zip(self.schema, row)):
                if value is MISSING:
                    if j == self.label_index:
                        raise IngestError("label value is missing", row=i + 1)
                    continue
                if spec.is_continuous:
                    if not isinstance(value, float) or not math.isfinite(value):
                        raise CellTypeError(f"expected finite float, got {value!r}", i + 1, spec.name)
                elif value not in spec.vocabulary:
                    raise CellTypeError(f"{value!r} not in vocabulary", i + 1, spec.name)

    @property
    def n_features(self) -> int:
        return len(self.schema)

    @property
    def names(self) -> list:
        return [f.name for f in self.schema]

    @property
    def label(self) -> FeatureSpec:
        return self.schema[self.label_index]

    def __len__(self):
        return len(self.records)

    def column(self, j: int) -> list:
        return [row[j] for row in self.records]

    def numeric_column(self, j: int) -> np.ndarray:
        """Continuous column as floats with NaN for missing cells."""
        return np.array([np.nan if v is MISSING else v for v in self.column(j)], dtype=float)

    def labels(self) -> list:
        return self.column(self.label_index)

    def with_records(self, records) -> "Dataset":
        return replace(self, records=tuple(tuple(r) for r in records))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return self.with_records([self.records[i] for i in indices])


@dataclass(frozen=True)
class ClassCensus:
    counts: dict
    total: int
    n_classes: int

    def count(self, y) -> int:
        return self.counts.get(y, 0)


# -- ingestion ---------------------------------------------------------------

def _parse_float(text: str) -> Optional[float]:
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_schema(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict) or "features" not in doc:
        raise SchemaError(f"{path}: schema must be an object with a 'features' list")
    return doc


def infer_schema(header, rows, hints: Optional[dict] = None) -> tuple:
    """Build FeatureSpecs for each column from raw string cells.

    Returns the schema (in header order) and the label index. Hints follow the
    schema-file layout; columns absent from the hints are inferred.
    """
    hints = hints or {}
    by_name = {f["name"]: f for f in hints.get("features", [])}
    unknown = set(by_name) - set(header)
    if unknown:
        raise SchemaError(f"schema names unknown columns: {sorted(unknown)}")
    label_name = hints.get("label", header[-1])
    if label_name not in header:
        raise SchemaError(f"label column {label_name!r} not in header")
    label_index = header.index(label_name)

    schema = []
    for j, name in enumerate(header):
        cells = [row[j] for row in rows if row[j] != ""]
        hint = by_name.get(name, {})
        kind = hint.get("kind")
        dp = int(hint.get("decimal_places", DEFAULT_DECIMAL_PLACES))
        if kind is None:
            parsed = [_parse_float(c) for c in cells]
            numeric = bool(cells) and all(p is not None for p in parsed)
            many = len(set(parsed)) > MIN_CONTINUOUS_DISTINCT
            kind = CONTINUOUS if numeric and many and j != label_index else CATEGORICAL
        if kind == ORDINAL and not (hint.get("order") or hint.get("vocabulary")):
            kind = CATEGORICAL
        if j == label_index and kind == CONTINUOUS:
            raise SchemaError(f"label column {name!r} cannot be continuous")
        if kind == CONTINUOUS:
            schema.append(FeatureSpec(name, CONTINUOUS, decimal_places=dp))
            continue
        if kind == ORDINAL:
            vocab = tuple(str(v) for v in (hint.get("order") or hint["vocabulary"]))
        elif "vocabulary" in hint:
            vocab = tuple(str(v) for v in hint["vocabulary"])
        else:
            vocab = tuple(sorted(set(cells)))
        if not vocab:
            raise SchemaError(f"column {name!r} has no observed values")
        schema.append(FeatureSpec(name, kind, vocabulary=vocab))
    return tuple(schema), label_index


def load_csv(path, schema_hints=None, require_classes: bool = True) -> Dataset:
    """Read a UTF-8 CSV with a header row into a Dataset.

    ``schema_hints`` may be a path to a schema JSON file or an already-parsed
    dict. Empty cells become MISSING. ``require_classes=False`` accepts a
    single-class (or empty) label column, which synthetic files may have.
    """
    if schema_hints is not None and not isinstance(schema_hints, dict):
        schema_hints = load_schema(schema_hints)
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise IngestError(f"{path}: duplicate column names")
        rows = []
        for i, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(f"expected {len(header)} cells, got {len(row)}", row=i)
            rows.append([c.strip() for c in row])

    schema, label_index = infer_schema(header, rows, schema_hints)
    records = []
    for i, row in enumerate(rows, start=1):
        out = []
        for spec, cell in zip(schema, row):
            if cell == "":
                out.append(MISSING)
            elif spec.is_continuous:
                value = _parse_float(cell)
                if value is None:
                    raise CellTypeError(f"cannot parse {cell!r} as a number", i, spec.name)
                out.append(value)
            else:
                if cell not in spec.vocabulary:
                    raise CellTypeError(f"{cell!r} not in declared vocabulary", i, spec.name)
                out.append(cell)
        records.append(out)
    ds = Dataset(schema, records, label_index)
    if require_classes and len(set(ds.labels())) < 2:
        raise DegenerateLabelError(f"label column {ds.label.name!r} has fewer than 2 classes")
    return ds


def format_value(spec: FeatureSpec, value) -> str:
    if value is MISSING:
        return ""
    if spec.is_continuous:
        text = f"{value:.{spec.decimal_places}f}"
        return "0" + text[2:] if text.startswith("-0") and float(text) == 0 else text
    return value


def write_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ds.names)
        for row in ds.records:
            writer.writerow([format_value(s, v) for s, v in zip(ds.schema, row)])


def schema_to_json(ds: Dataset) -> dict:
    return {"features": [f.to_json() for f in ds.schema], "label": ds.label.name}


# -- transforms --------------------------------------------------------------

def standardize(ds: Dataset, reference: Optional[Dataset] = None) -> Dataset:
    """Z-score continuous columns with population statistics.

    Statistics come from ``reference`` when given (for example the training
    split applied to a holdout), otherwise from ``ds`` itself. Constant columns
    get std 1 and are flagged degenerate.
    """
    if ds.standardized:
        raise ValueError("dataset is already standardized")
    ref = ds if reference is None else reference
    schema = list(ds.schema)
    for j, spec in enumerate(ds.schema):
        if not spec.is_continuous:
            continue
        if reference is not None and reference.standardized:
            mean, std, degenerate = ref.schema[j].mean, ref.schema[j].std, ref.schema[j].degenerate
        else:
            col = ref.numeric_column(j)
            col = col[~np.isnan(col)]
            mean = float(col.mean()) if col.size else 0.0
            std = float(col.std()) if col.size else 0.0
            degenerate = not std > 0
            if degenerate:
                std = 1.0
        schema[j] = replace(spec, mean=mean, std=std, degenerate=degenerate)
    records = [
        tuple(v if (v is MISSING or not s.is_continuous) else (v - s.mean) / s.std
              for s, v in zip(schema, row))
        for row in ds.records
    ]
    return Dataset(schema, records, ds.label_index, standardized=True)


def destandardize(ds: Dataset, round_values: bool = False) -> Dataset:
    """Invert :func:`standardize` using the statistics stored in the schema."""
    if not ds.standardized:
        return ds
    records = []
    for row in ds.records:
        out = []
        for s, v in zip(ds.schema, row):
            if s.is_continuous and v is not MISSING:
                v = v * s.std + s.mean
                if round_values:
                    v = round(v, s.decimal_places)
            out.append(v)
        records.append(tuple(out))
    return Dataset(ds.schema, records, ds.label_index, standardized=False)


def census(ds: Dataset) -> ClassCensus:
    counts = Counter(ds.labels())
    if len(counts) < 2:
        raise DegenerateLabelError("census needs at least two classes")
    order = [c for c in ds.label.vocabulary if c in counts]
    ordered = {c: counts[c] for c in order}
    return ClassCensus(ordered, sum(ordered.values()), len(ordered))


def split(ds: Dataset, holdout_fraction: float, seed: int):
    """Stratified, seeded train/holdout partition.

    The holdout size is ``round(fraction * N)``; per-class holdout counts are
    allocated by largest remainder so every class keeps its ratio within one
    row. Returns ``(train, holdout)``; row order inside each part follows the
    original order.
    """
    if not 0 < holdout_fraction < 1:
        raise SplitError("holdout fraction must lie in (0, 1)")
    n = len(ds)
    if n < 10:
        raise SplitError(f"need at least 10 rows to split, got {n}")
    labels = ds.labels()
    classes = [c for c in ds.label.vocabulary if c in set(labels)]
    members = {c: [i for i, y in enumerate(labels) if y == c] for c in classes}

    target = round(holdout_fraction * n)
    ideal = {c: holdout_fraction * len(members[c]) for c in classes}
    alloc = {c: math.floor(ideal[c]) for c in classes}
    remaining = target - sum(alloc.values())
    by_remainder = sorted(classes, key=lambda c: (-(ideal[c] - alloc[c]), classes.index(c)))
    for c in by_remainder[:max(remaining, 0)]:
        alloc[c] += 1
    for c in classes:
        if alloc[c] < 1 or len(members[c]) - alloc[c] < 1:
            raise SplitError(f"class {c!r} ({len(members[c])} rows) cannot populate both parts")

    rng = np.random.default_rng(seed)
    holdout = []
    for c in classes:
        idx = np.array(members[c])
        rng.shuffle(idx)
        holdout.extend(idx[: alloc[c]].tolist())
    held = set(holdout)
    train_idx = [i for i in range(n) if i not in held]
    return ds.subset(train_idx), ds.subset(sorted(holdout))

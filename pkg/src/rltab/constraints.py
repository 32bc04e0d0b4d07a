"""Mixed-type association analysis, critical-pair discovery and row rules."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import MISSING, Dataset
from .errors import InsufficientDataError, RuleParseError

log = logging.getLogger(__name__)

PEARSON = "pearson"
CRAMERS_V = "cramers_v"
CORR_RATIO = "corr_ratio"

DEFAULT_DELTA_THRESH = 0.3
DEFAULT_K = 10


# -- pairwise statistics -----------------------------------------------------

def _complete_pairs(x, y):
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    keep = [i for i in range(len(x))
            if x[i] is not MISSING and y[i] is not MISSING
            and not (isinstance(x[i], float) and math.isnan(x[i]))
            and not (isinstance(y[i], float) and math.isnan(y[i]))]
    return [x[i] for i in keep], [y[i] for i in keep]


def pearson(x, y, return_flag: bool = False):
    """Product-moment correlation over pairwise-complete observations.

    Returns 0 (flagged degenerate) when either side is constant.
    """
    x, y = _complete_pairs(list(x), list(y))
    if len(x) < 2:
        raise InsufficientDataError("pearson needs at least 2 complete pairs")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        return (0.0, True) if return_flag else 0.0
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    return (r, False) if return_flag else r


def contingency(x, y):
    xs = sorted(set(x))
    ys = sorted(set(y))
    xi = {v: i for i, v in enumerate(xs)}
    yi = {v: i for i, v in enumerate(ys)}
    table = np.zeros((len(xs), len(ys)))
    np.add.at(table, ([xi[v] for v in x], [yi[v] for v in y]), 1)
    return table


def cramers_v_table(table) -> float:
    table = np.asarray(table, dtype=float)
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    r, c = table.shape
    if r < 2 or c < 2:
        raise InsufficientDataError("cramers_v needs at least 2 categories on each side")
    n = table.sum()
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / n
    chi2 = float(((table - expected) ** 2 / expected).sum())
    return min(1.0, math.sqrt(chi2 / (n * (min(r, c) - 1))))


def cramers_v(x, y) -> float:
    """Uncorrected Cramér's V between two categorical vectors."""
    x, y = _complete_pairs(list(x), list(y))
    return cramers_v_table(contingency(x, y))


def correlation_ratio(cat, num, return_flag: bool = False):
    """η = sqrt(between-category sum of squares / total sum of squares)."""
    cat, num = _complete_pairs(list(cat), list(num))
    if len(set(cat)) < 2:
        raise InsufficientDataError("correlation ratio needs at least 2 categories")
    num = np.asarray(num, dtype=float)
    total = float(((num - num.mean()) ** 2).sum())
    if total == 0:
        return (0.0, True) if return_flag else 0.0
    codes = {v: i for i, v in enumerate(sorted(set(cat)))}
    idx = np.array([codes[v] for v in cat])
    counts = np.bincount(idx)
    means = np.bincount(idx, weights=num) / counts
    between = float((counts * (means - num.mean()) ** 2).sum())
    eta = float(np.clip(math.sqrt(between / total), 0.0, 1.0))
    return (eta, False) if return_flag else eta


# -- association matrix ------------------------------------------------------

@dataclass
class AssociationMatrix:
    values: np.ndarray
    methods: list
    flagged: np.ndarray
    names: list

    def to_csv(self) -> str:
        lines = ["," + ",".join(self.names)]
        for name, row in zip(self.names, self.values):
            lines.append(name + "," + ",".join(f"{v:.12g}" for v in row))
        return "\n".join(lines) + "\n"


def _pair_value(ds: Dataset, a: int, b: int):
    sa, sb = ds.schema[a], ds.schema[b]
    xa, xb = ds.column(a), ds.column(b)
    if sa.is_continuous and sb.is_continuous:
        value, flag = pearson(xa, xb, return_flag=True)
        return value, PEARSON, flag
    if not sa.is_continuous and not sb.is_continuous:
        return cramers_v(xa, xb), CRAMERS_V, False
    cat, num = (xa, xb) if not sa.is_continuous else (xb, xa)
    value, flag = correlation_ratio(cat, num, return_flag=True)
    return value, CORR_RATIO, flag


def association_matrix(ds: Dataset) -> AssociationMatrix:
    """Pearson / Cramér's V / correlation-ratio matrix over all features.

    Entries that cannot be estimated are stored as 0 and flagged. The
    correlation ratio is one-directional, so both cells of a mixed pair hold
    the same value.
    """
    m = ds.n_features
    values = np.eye(m)
    flagged = np.zeros((m, m), dtype=bool)
    methods = [[None] * m for _ in range(m)]
    for a in range(m):
        sa = ds.schema[a]
        methods[a][a] = PEARSON if sa.is_continuous else CRAMERS_V
        for b in range(a + 1, m):
            try:
                value, method, flag = _pair_value(ds, a, b)
            except InsufficientDataError:
                sb = ds.schema[b]
                method = PEARSON if sa.is_continuous and sb.is_continuous else (
                    CRAMERS_V if not sa.is_continuous and not sb.is_continuous else CORR_RATIO)
                value, flag = 0.0, True
            values[a, b] = values[b, a] = value
            methods[a][b] = methods[b][a] = method
            flagged[a, b] = flagged[b, a] = flag
    return AssociationMatrix(values, methods, flagged, ds.names)


# -- critical pairs ----------------------------------------------------------

@dataclass
class CriticalPairs:
    pairs: list            # (a, b, strength)
    threshold: float
    cap: int

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def index_pairs(self) -> list:
        return [(a, b) for a, b, _ in self.pairs]

    def to_json(self, names=None) -> dict:
        out = []
        for a, b, s in self.pairs:
            item = {"a": a, "b": b, "strength": s}
            if names is not None:
                item["names"] = [names[a], names[b]]
            out.append(item)
        return {"threshold": self.threshold, "k": self.cap, "pairs": out}

    @classmethod
    def from_json(cls, obj: dict) -> "CriticalPairs":
        pairs = [(int(p["a"]), int(p["b"]), float(p["strength"])) for p in obj["pairs"]]
        return cls(pairs, float(obj["threshold"]), int(obj["k"]))


def extract_pcrit(C: AssociationMatrix, delta_thresh: float = DEFAULT_DELTA_THRESH,
                  k: int = DEFAULT_K, exclude=()) -> CriticalPairs:
    """Threshold |C_ab| at ``delta_thresh`` then keep the top ``k`` pairs.

    ``exclude`` lists feature indices (the label column) never paired.
    """
    if not 0 < delta_thresh < 1:
        raise ValueError("delta_thresh must lie in (0, 1)")
    if k < 1:
        raise ValueError("k must be at least 1")
    values = C.values if isinstance(C, AssociationMatrix) else np.asarray(C)
    m = values.shape[0]
    skip = set(exclude)
    candidates = [(a, b, float(values[a, b]))
                  for a in range(m) for b in range(a + 1, m)
                  if a not in skip and b not in skip and abs(values[a, b]) >= delta_thresh]
    candidates.sort(key=lambda p: (-abs(p[2]), p[0], p[1]))
    if not candidates:
        log.warning("no feature pair reaches |C| >= %.3f; feature-level discriminator disabled",
                    delta_thresh)
    return CriticalPairs(candidates[:k], delta_thresh, k)


def discover(ds: Dataset, delta_thresh: float = DEFAULT_DELTA_THRESH, k: int = DEFAULT_K):
    C = association_matrix(ds)
    return C, extract_pcrit(C, delta_thresh, k, exclude=(ds.label_index,))


# -- rules -------------------------------------------------------------------

_OPS = {
    "eq": lambda a, b: a == b,
    "ne": lambda a, b: a != b,
    "lt": lambda a, b: a < b,
    "le": lambda a, b: a <= b,
    "gt": lambda a, b: a > b,
    "ge": lambda a, b: a >= b,
}


@dataclass(frozen=True)
class RangeRule:
    feature: int
    min: Optional[float] = None
    max: Optional[float] = None

    def check(self, row) -> bool:
        v = row[self.feature]
        if v is MISSING:
            return True
        return (self.min is None or v >= self.min) and (self.max is None or v <= self.max)

    def describe(self, names) -> str:
        lo = "-inf" if self.min is None else f"{self.min:g}"
        hi = "inf" if self.max is None else f"{self.max:g}"
        return f"{lo} <= {names[self.feature]} <= {hi}"


@dataclass(frozen=True)
class SupportRule:
    feature: int
    allowed: frozenset

    def check(self, row) -> bool:
        v = row[self.feature]
        return v is MISSING or v in self.allowed

    def describe(self, names) -> str:
        return f"{names[self.feature]} in {{{', '.join(sorted(map(str, self.allowed)))}}}"


@dataclass(frozen=True)
class Condition:
    feature: int
    op: str
    value: object

    def holds(self, row) -> bool:
        v = row[self.feature]
        if v is MISSING:
            return False
        try:
            return bool(_OPS[self.op](v, self.value))
        except TypeError:
            return False


@dataclass(frozen=True)
class ImplicationRule:
    condition: Condition
    consequence: Condition

    def check(self, row) -> bool:
        return not self.condition.holds(row) or self.consequence.holds(row)

    def describe(self, names) -> str:
        c, q = self.condition, self.consequence
        return (f"if {names[c.feature]} {c.op} {c.value!r} "
                f"then {names[q.feature]} {q.op} {q.value!r}")


@dataclass
class RuleSet:
    rules: list = field(default_factory=list)
    names: list = field(default_factory=list)
    n_user: int = 0

    def __len__(self):
        return len(self.rules)

    def check(self, row) -> bool:
        return all(r.check(row) for r in self.rules)

    def violations(self, row) -> list:
        return [i for i, r in enumerate(self.rules) if not r.check(row)]

    def satisfaction(self, ds: Dataset) -> float:
        if not len(ds):
            return 0.0
        return sum(self.check(row) for row in ds.records) / len(ds)

    def describe(self) -> list:
        return [r.describe(self.names) for r in self.rules]


def _coerce(ds: Dataset, j: int, value, index: int):
    spec = ds.schema[j]
    if spec.is_continuous:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise RuleParseError(f"value {value!r} is not numeric for {spec.name!r}", index) from None
    return str(value)


def _feature_index(ds: Dataset, name, index: int) -> int:
    try:
        return ds.names.index(name)
    except ValueError:
        raise RuleParseError(f"unknown feature {name!r}", index) from None


def _condition(ds: Dataset, obj, index: int) -> Condition:
    if not isinstance(obj, dict) or not {"feature", "op", "value"} <= set(obj):
        raise RuleParseError("condition needs feature, op and value", index)
    if obj["op"] not in _OPS:
        raise RuleParseError(f"unknown operator {obj['op']!r}", index)
    j = _feature_index(ds, obj["feature"], index)
    return Condition(j, obj["op"], _coerce(ds, j, obj["value"], index))


def parse_rules(ds: Dataset, doc) -> list:
    """Parse the JSON rule-file layout into rule objects."""
    if not isinstance(doc, list):
        raise RuleParseError("rule file must hold a JSON list")
    rules = []
    for i, obj in enumerate(doc):
        if not isinstance(obj, dict):
            raise RuleParseError("rule must be an object", i)
        if "if" in obj or "then" in obj:
            if "if" not in obj or "then" not in obj:
                raise RuleParseError("implication needs both 'if' and 'then'", i)
            rules.append(ImplicationRule(_condition(ds, obj["if"], i), _condition(ds, obj["then"], i)))
        elif "feature" in obj:
            j = _feature_index(ds, obj["feature"], i)
            if not {"min", "max", "allowed"} & set(obj):
                raise RuleParseError("unary rule needs min, max or allowed", i)
            if "allowed" in obj:
                if not isinstance(obj["allowed"], list):
                    raise RuleParseError("'allowed' must be a list", i)
                rules.append(SupportRule(j, frozenset(_coerce(ds, j, v, i) for v in obj["allowed"])))
            if "min" in obj or "max" in obj:
                lo = _coerce(ds, j, obj["min"], i) if "min" in obj else None
                hi = _coerce(ds, j, obj["max"], i) if "max" in obj else None
                rules.append(RangeRule(j, lo, hi))
        else:
            raise RuleParseError("unrecognised rule shape", i)
    return rules


def auto_rules(ds: Dataset, user_rules=None) -> RuleSet:
    """Range rules per continuous feature and support rules per categorical one.

    ``user_rules`` may be a path to a JSON rule file or an already-loaded list;
    its rules are appended after the automatic ones.
    """
    rules = []
    for j, spec in enumerate(ds.schema):
        observed = [v for v in ds.column(j) if v is not MISSING]
        if not observed:
            continue
        if spec.is_continuous:
            rules.append(RangeRule(j, float(min(observed)), float(max(observed))))
        else:
            rules.append(SupportRule(j, frozenset(observed)))
    extra = []
    if user_rules is not None:
        if not isinstance(user_rules, list):
            try:
                with open(user_rules, encoding="utf-8") as fh:
                    user_rules = json.load(fh)
            except json.JSONDecodeError as exc:
                raise RuleParseError(f"invalid JSON: {exc}") from None
        extra = parse_rules(ds, user_rules)
    return RuleSet(rules + extra, ds.names, len(extra))

"""Invertible linearization of table rows into token-id sequences.

Each feature becomes one clause ``<name> IS <value tokens> SEP``; clauses
follow schema order with the class label moved to the final clause, and the
record closes with ``EOR``. Continuous values are emitted digit by digit at
the feature's fixed decimal precision, categorical values as one token each.
Value tokens are scoped per feature, so the same surface string under two
features maps to two distinct ids.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

from .data import MISSING, Dataset, FeatureSpec, format_value
from .errors import VocabError

IS = "<IS>"
SEP = "<SEP>"
MISSING_TOKEN = "<MISSING>"
EOR = "<EOR>"
STRUCTURAL = (IS, SEP, MISSING_TOKEN, EOR)
DIGITS = tuple("0123456789")
MINUS = "-"
POINT = "."
NUMERIC = DIGITS + (MINUS, POINT)

VOCAB_VERSION = 1


def _name_key(name: str) -> str:
    return f"@{name}"


def _value_key(name: str, value: str) -> str:
    return f"{name}={value}"


class TokenVocabulary:
    """Ordered token set with contiguous ids and schema-derived grammar data."""

    def __init__(self, tokens: Sequence[str], schema: Sequence[FeatureSpec], label_index: int,
                 max_value_len: Sequence[int]):
        self.tokens = tuple(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")
        self.schema = tuple(schema)
        self.label_index = label_index
        self.max_value_len = tuple(max_value_len)
        m = len(self.schema)
        self.order = tuple([j for j in range(m) if j != label_index] + [label_index])
        self.name_ids = tuple(self.ids[_name_key(f.name)] for f in self.schema)
        self.feature_of_name = {tid: j for j, tid in enumerate(self.name_ids)}
        self.value_ids = tuple(
            {} if f.is_continuous else {v: self.ids[_value_key(f.name, v)] for v in f.vocabulary}
            for f in self.schema
        )
        self.value_of_id = {}
        for j, mapping in enumerate(self.value_ids):
            for v, tid in mapping.items():
                self.value_of_id[tid] = (j, v)
        self.is_id = self.ids[IS]
        self.sep_id = self.ids[SEP]
        self.missing_id = self.ids[MISSING_TOKEN]
        self.eor_id = self.ids[EOR]
        self.digit_ids = {self.ids[d]: d for d in DIGITS}
        self.minus_id = self.ids[MINUS]
        self.point_id = self.ids[POINT]
        self.max_length = sum(2 + n + 1 for n in self.max_value_len) + 1

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, TokenVocabulary) and self.tokens == other.tokens \
            and self.schema == other.schema and self.label_index == other.label_index \
            and self.max_value_len == other.max_value_len

    def display(self, token_id: int) -> str:
        """Surface form of a token, without feature scoping."""
        tok = self.tokens[token_id]
        if tok.startswith("@"):
            return tok[1:]
        if token_id in self.value_of_id:
            return self.value_of_id[token_id][1]
        return tok

    def render(self, token_ids) -> str:
        return " ".join(self.display(t) for t in token_ids)

    def name_token(self, name: str) -> int:
        return self.ids[_name_key(name)]

    def value_token(self, feature: int, value: str) -> int:
        try:
            return self.value_ids[feature][value]
        except KeyError:
            raise VocabError(f"{value!r} is not a value of {self.schema[feature].name!r}") from None

    def to_json(self) -> dict:
        return {
            "version": VOCAB_VERSION,
            "tokens": list(self.tokens),
            "schema": [f.to_json() for f in self.schema],
            "label_index": self.label_index,
            "max_value_len": list(self.max_value_len),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TokenVocabulary":
        if obj.get("version") != VOCAB_VERSION:
            raise VocabError(f"unsupported vocabulary version {obj.get('version')!r}")
        schema = [FeatureSpec.from_json(f) for f in obj["schema"]]
        return cls(obj["tokens"], schema, obj["label_index"], obj["max_value_len"])


def _numeric_text(spec: FeatureSpec, value: float) -> str:
    return format_value(spec, value)


def build_vocabulary(ds: Dataset) -> TokenVocabulary:
    """Vocabulary covering every token the serializer emits for ``ds``."""
    tokens = list(STRUCTURAL) + list(NUMERIC)
    max_len = []
    for spec in ds.schema:
        tokens.append(_name_key(spec.name))
    for j, spec in enumerate(ds.schema):
        if spec.is_continuous:
            widths = [len(_numeric_text(spec, v)) for v in ds.column(j) if v is not MISSING]
            max_len.append(max(widths + [1]))
        else:
            tokens.extend(_value_key(spec.name, v) for v in spec.vocabulary)
            max_len.append(1)
    return TokenVocabulary(tokens, ds.schema, ds.label_index, max_len)


@dataclass(frozen=True)
class SerializedRecord:
    token_ids: tuple
    clause_boundaries: tuple    # (start, end) per clause, end exclusive, serialization order
    clause_features: tuple      # feature index of each clause
    value_spans: dict           # feature index -> tuple of token positions
    label: object

    def __len__(self):
        return len(self.token_ids)


@dataclass(frozen=True)
class MalformedReport:
    index: int
    rule: str

    def __bool__(self):
        return False


def serialize(row: Sequence, vocab: TokenVocabulary) -> SerializedRecord:
    ids = []
    bounds, spans = [], {}
    for j in vocab.order:
        spec = vocab.schema[j]
        value = row[j]
        start = len(ids)
        ids += [vocab.name_ids[j], vocab.is_id]
        vstart = len(ids)
        if value is MISSING:
            ids.append(vocab.missing_id)
            span = ()
        elif spec.is_continuous:
            text = _numeric_text(spec, value)
            ids.extend(vocab.ids[ch] for ch in text)
            span = tuple(range(vstart, len(ids)))
        else:
            ids.append(vocab.value_token(j, value))
            span = (vstart,)
        ids.append(vocab.sep_id)
        bounds.append((start, len(ids)))
        spans[j] = span
    ids.append(vocab.eor_id)
    return SerializedRecord(tuple(ids), tuple(bounds), tuple(vocab.order), spans,
                            row[vocab.label_index])


def _parse_number(digits: list, spec: FeatureSpec, start: int):
    """Validate numeric surface tokens; return (value, None) or (None, report)."""
    pos = 0
    if digits and digits[0] == MINUS:
        pos = 1
    int_digits = 0
    while pos < len(digits) and digits[pos] in DIGITS:
        pos += 1
        int_digits += 1
    if int_digits == 0:
        rule = "sign not followed by digit" if digits and digits[0] == MINUS else "number must start with a digit"
        return None, MalformedReport(start + pos, rule)
    first = 1 if digits[0] == MINUS else 0
    if int_digits > 1 and digits[first] == "0":
        return None, MalformedReport(start + first, "leading zero")
    frac = 0
    if pos < len(digits):
        if digits[pos] == MINUS:
            return None, MalformedReport(start + pos, "sign only allowed first")
        # digits[pos] is POINT here
        pos += 1
        while pos < len(digits) and digits[pos] in DIGITS:
            pos += 1
            frac += 1
        if pos < len(digits):
            rule = "at most one decimal point" if digits[pos] == POINT else "sign only allowed first"
            return None, MalformedReport(start + pos, rule)
        if frac == 0:
            return None, MalformedReport(start + pos - 1, "decimal point without digits")
    if frac != spec.decimal_places:
        return None, MalformedReport(start + len(digits) - 1, "wrong number of decimal places")
    return float("".join(digits)), None


def parse(tokens: Sequence[int], vocab: TokenVocabulary) -> Union[tuple, MalformedReport]:
    """Strict parse of a token sequence.

    Returns ``(row, SerializedRecord)`` or a :class:`MalformedReport` naming the
    first offending token index and the grammar rule it breaks.
    """
    tokens = [int(t) for t in tokens]
    n = len(tokens)
    row = [None] * len(vocab.schema)
    bounds, spans = [], {}
    pos = 0
    for clause, j in enumerate(vocab.order):
        spec = vocab.schema[j]
        start = pos
        if pos >= n:
            return MalformedReport(pos, "truncated record")
        tok = tokens[pos]
        if tok == vocab.eor_id:
            return MalformedReport(pos, "missing clause")
        if tok != vocab.name_ids[j]:
            if tok in vocab.feature_of_name:
                other = vocab.feature_of_name[tok]
                rule = "duplicate clause" if other in spans else "missing clause"
                return MalformedReport(pos, rule)
            return MalformedReport(pos, "expected feature name")
        pos += 1
        if pos >= n:
            return MalformedReport(pos, "truncated record")
        if tokens[pos] != vocab.is_id:
            return MalformedReport(pos, "expected IS")
        pos += 1
        vstart = pos
        while pos < n and tokens[pos] not in (vocab.sep_id, vocab.eor_id) \
                and tokens[pos] not in vocab.feature_of_name and tokens[pos] != vocab.is_id:
            pos += 1
        value_tokens = tokens[vstart:pos]
        if pos >= n:
            return MalformedReport(pos, "truncated record")
        if tokens[pos] != vocab.sep_id:
            return MalformedReport(pos, "expected SEP")
        if not value_tokens:
            return MalformedReport(vstart, "empty value")
        if value_tokens == [vocab.missing_id]:
            if j == vocab.label_index:
                return MalformedReport(vstart, "label value missing")
            value, span = MISSING, ()
        elif spec.is_continuous:
            surface = []
            for k, t in enumerate(value_tokens):
                if t == vocab.point_id:
                    surface.append(POINT)
                elif t == vocab.minus_id:
                    surface.append(MINUS)
                elif t in vocab.digit_ids:
                    surface.append(vocab.digit_ids[t])
                else:
                    return MalformedReport(vstart + k, "non-numeric token in numeric value")
            value, report = _parse_number(surface, spec, vstart)
            if report is not None:
                return report
            span = tuple(range(vstart, pos))
        else:
            if len(value_tokens) != 1:
                return MalformedReport(vstart + 1, "categorical value must be one token")
            owner = vocab.value_of_id.get(value_tokens[0])
            if owner is None or owner[0] != j:
                return MalformedReport(vstart, "value outside feature vocabulary")
            value, span = owner[1], (vstart,)
        pos += 1
        bounds.append((start, pos))
        spans[j] = span
        row[j] = value
    if pos >= n:
        return MalformedReport(pos, "missing EOR")
    if tokens[pos] != vocab.eor_id:
        return MalformedReport(pos, "expected EOR")
    if pos + 1 != n:
        return MalformedReport(pos + 1, "tokens after EOR")
    record = SerializedRecord(tuple(tokens), tuple(bounds), tuple(vocab.order), spans,
                              row[vocab.label_index])
    return tuple(row), record


def deserialize(tokens: Sequence[int], vocab: TokenVocabulary):
    """Row for a well-formed sequence, otherwise a MalformedReport."""
    out = parse(tokens, vocab)
    return out if isinstance(out, MalformedReport) else out[0]


def segment_clauses(sr: SerializedRecord) -> list:
    return [sr.token_ids[a:b] for a, b in sr.clause_boundaries]


def serialize_dataset(ds: Dataset, vocab: TokenVocabulary) -> list:
    return [serialize(row, vocab) for row in ds.records]


def is_well_formed(tokens, vocab: TokenVocabulary) -> bool:
    return not isinstance(parse(tokens, vocab), MalformedReport)


def label_of(tokens, vocab: TokenVocabulary) -> Optional[str]:
    """Class value of the final clause, or None when it cannot be read.

    Only the last clause is inspected, so a record malformed earlier on still
    yields its label when the tail parses.
    """
    tokens = [int(t) for t in tokens]
    if not tokens or tokens[-1] != vocab.eor_id:
        return None
    j = vocab.label_index
    # tail must read: <label-name> IS <value> SEP EOR
    if len(tokens) < 5:
        return None
    name, is_, value, sep = tokens[-5:-1]
    if name != vocab.name_ids[j] or is_ != vocab.is_id or sep != vocab.sep_id:
        return None
    owner = vocab.value_of_id.get(value)
    if owner is None or owner[0] != j:
        return None
    return owner[1]

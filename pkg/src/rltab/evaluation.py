"""Fidelity, utility, privacy and hallucination audit of synthetic tables.

All functions take datasets in the same units (usually the original,
de-standardized ones); distance computations standardize continuous columns
internally with the real data's statistics.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from sklearn.ensemble import RandomForestClassifier
from sklearn.metrics import f1_score
from sklearn.model_selection import StratifiedKFold

from .constraints import CriticalPairs, RuleSet, association_matrix, auto_rules
from .data import MISSING, Dataset
from .errors import EmptySampleError, SchemaError

REPORT_VERSION = 1
KL_SMOOTHING = 1e-8
DEFAULT_BINS = 20
FAITH_WEIGHTS = {"fact": 0.25, "align": 0.25, "integ": 0.25, "track": 0.25}


# -- marginal divergences ----------------------------------------------------

def ks_statistic(real, synthetic) -> float:
    """Two-sample Kolmogorov-Smirnov statistic, sup |F_real - F_syn|."""
    a = np.sort(np.asarray(real, dtype=float))
    b = np.sort(np.asarray(synthetic, dtype=float))
    if a.size == 0 or b.size == 0:
        raise EmptySampleError("KS needs two non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


def _kl_to_midpoint(p, s):
    # p / m written as 2p / (p + q); the midpoint itself underflows for subnormal p
    nz = p > 0
    return float((p[nz] * np.log2(2 * p[nz] / s[nz])).sum())


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in bits (bounded by 1)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    s = p + q
    value = 0.5 * (_kl_to_midpoint(p, s) + _kl_to_midpoint(q, s))
    return float(min(max(value, 0.0), 1.0))


def kl_div(p, q, eps: float = KL_SMOOTHING) -> float:
    """D_KL(P ‖ Q) in nats after adding ``eps`` to every bin and renormalizing."""
    p = np.asarray(p, dtype=float) + eps
    q = np.asarray(q, dtype=float) + eps
    p /= p.sum()
    q /= q.sum()
    return float(max((p * np.log(p / q)).sum(), 0.0))


def hellinger(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    bc = np.sqrt(p * q).sum()
    return float(math.sqrt(max(0.0, 1.0 - bc)))


@dataclass
class Histogramized:
    p: np.ndarray
    q: np.ndarray
    bins: list


def histogramize(real: Dataset, syn: Dataset, j: int, bins: int = DEFAULT_BINS) -> Histogramized:
    """Shared-bin marginal distributions of feature ``j``.

    Categorical features use the union of observed categories; continuous
    features use equal-width bins over the real range with out-of-range
    synthetic values clamped into the edge bins. A missing-value bin is added
    when either side has missing cells.
    """
    spec = real.schema[j]
    rcol, scol = real.column(j), syn.column(j)
    if not rcol or not scol:
        raise EmptySampleError(f"feature {spec.name!r} has an empty sample")
    has_missing = any(v is MISSING for v in rcol) or any(v is MISSING for v in scol)
    if spec.is_continuous:
        r = np.array([v for v in rcol if v is not MISSING], dtype=float)
        s = np.array([v for v in scol if v is not MISSING], dtype=float)
        lo, hi = (float(r.min()), float(r.max())) if r.size else (0.0, 0.0)
        if hi > lo:
            edges = np.linspace(lo, hi, bins + 1)
            labels = [f"[{edges[i]:.6g},{edges[i + 1]:.6g}]" for i in range(bins)]

            def index(x):
                return np.clip(np.searchsorted(edges, x, side="right") - 1, 0, bins - 1)
            n_bins = bins
        else:
            labels = [f"{lo:.6g}"]

            def index(x):
                return np.zeros(len(x), dtype=int)
            n_bins = 1
        pr = np.bincount(index(r), minlength=n_bins).astype(float)
        ps = np.bincount(index(s), minlength=n_bins).astype(float)
    else:
        cats = [c for c in spec.vocabulary if c in set(rcol) | set(scol)]
        extra = sorted({v for v in rcol + scol if v is not MISSING and v not in cats})
        labels = cats + extra
        pos = {c: i for i, c in enumerate(labels)}
        pr = np.zeros(len(labels))
        ps = np.zeros(len(labels))
        for v in rcol:
            if v is not MISSING:
                pr[pos[v]] += 1
        for v in scol:
            if v is not MISSING:
                ps[pos[v]] += 1
    if has_missing:
        pr = np.append(pr, sum(v is MISSING for v in rcol))
        ps = np.append(ps, sum(v is MISSING for v in scol))
        labels = list(labels) + ["<MISSING>"]
    return Histogramized(pr / pr.sum(), ps / ps.sum(), list(labels))


@dataclass
class FeatureDivergence:
    name: str
    kind: str
    ks: Optional[float]
    jsd: float
    kl: float
    hellinger: float


def marginal_divergences(real: Dataset, syn: Dataset, bins: int = DEFAULT_BINS) -> list:
    out = []
    for j, spec in enumerate(real.schema):
        h = histogramize(real, syn, j, bins)
        ks = None
        if spec.is_continuous:
            r = [v for v in real.column(j) if v is not MISSING]
            s = [v for v in syn.column(j) if v is not MISSING]
            ks = ks_statistic(r, s) if r and s else None
        out.append(FeatureDivergence(spec.name, spec.kind, ks, jsd(h.p, h.q), kl_div(h.p, h.q),
                                     hellinger(h.p, h.q)))
    return out


# -- correlation fidelity ----------------------------------------------------

def correlation_fidelity(real: Dataset, syn: Dataset, pcrit: Optional[CriticalPairs]) -> Optional[float]:
    """1 - mean |C_real - C_syn| over critical pairs, clamped to [0, 1].

    None when there are no critical pairs.
    """
    if pcrit is None or not len(pcrit):
        return None
    cr = association_matrix(real).values
    cs = association_matrix(syn).values
    dev = np.mean([abs(cr[a, b] - cs[a, b]) for a, b, _ in pcrit.pairs])
    return float(min(1.0, max(0.0, 1.0 - dev)))


# -- distances ---------------------------------------------------------------

def _encode(ds: Dataset, reference: Dataset):
    """Continuous columns z-scored with reference statistics (NaN for missing),
    categorical columns as object arrays."""
    cont, cat = [], []
    for j, spec in enumerate(reference.schema):
        if spec.is_continuous:
            ref = reference.numeric_column(j)
            ref = ref[~np.isnan(ref)]
            mean = ref.mean() if ref.size else 0.0
            std = ref.std() if ref.size else 1.0
            std = std if std > 0 else 1.0
            cont.append((ds.numeric_column(j) - mean) / std)
        else:
            cat.append(np.array(["\x00MISSING" if v is MISSING else v for v in ds.column(j)], dtype=object))
    return cont, cat


def _sq_distances(sc, scat, rc, rcat):
    """Squared mixed distances between synthetic rows (chunk) and all real rows."""
    n_s = sc[0].shape[0] if sc else scat[0].shape[0]
    n_r = rc[0].shape[0] if rc else rcat[0].shape[0]
    d2 = np.zeros((n_s, n_r))
    for a, b in zip(sc, rc):
        diff = a[:, None] - b[None, :]
        miss = np.isnan(diff)
        both = np.isnan(a)[:, None] & np.isnan(b)[None, :]
        diff = np.where(miss, np.where(both, 0.0, 1.0), diff)
        d2 += diff * diff
    for a, b in zip(scat, rcat):
        d2 += (a[:, None] != b[None, :]).astype(float)
    return d2


def dcr(real: Dataset, syn: Dataset, chunk: int = 512, exclude_self: bool = False) -> np.ndarray:
    """Distance from every synthetic row to its closest real row.

    Standardized Euclidean on continuous features plus a 0/1 mismatch per
    categorical feature; a missing cell is 0 away from another missing cell
    and 1 away from anything else. Exact brute force over all pairs, in
    chunks of synthetic rows. ``exclude_self`` drops the diagonal (for
    real-vs-real leave-one-out distances).
    """
    if real.names != syn.names:
        raise SchemaError("real and synthetic schemas differ")
    if not len(syn):
        return np.zeros(0)
    if not len(real):
        raise EmptySampleError("no real rows to compare against")
    rc, rcat = _encode(real, real)
    sc, scat = _encode(syn, real)
    out = np.empty(len(syn))
    for start in range(0, len(syn), chunk):
        sl = slice(start, start + chunk)
        d2 = _sq_distances([a[sl] for a in sc], [a[sl] for a in scat], rc, rcat)
        if exclude_self:
            rows = np.arange(start, min(start + chunk, len(syn)))
            d2[rows - start, rows] = np.inf
        out[sl] = np.sqrt(d2.min(axis=1))
    return out


def dcr_summary(distances) -> dict:
    d = np.asarray(distances, dtype=float)
    if d.size == 0:
        return {"min": None, "p5": None, "median": None, "mean": None}
    return {"min": float(d.min()), "p5": float(np.percentile(d, 5)),
            "median": float(np.median(d)), "mean": float(d.mean())}


def default_privacy_radius(real: Dataset, percentile: float = 5.0) -> float:
    """5th percentile of leave-one-out real-to-real nearest-neighbour distances."""
    if len(real) < 2:
        return 0.0
    return float(np.percentile(dcr(real, real, exclude_self=True), percentile))


# -- utility -----------------------------------------------------------------

def _design(ds: Dataset, reference: Dataset):
    cols = []
    for j, spec in enumerate(reference.schema):
        if j == reference.label_index:
            continue
        if spec.is_continuous:
            col = ds.numeric_column(j)
            ref = reference.numeric_column(j)
            fill = np.nanmean(ref) if np.isfinite(ref).any() else 0.0
            cols.append(np.where(np.isnan(col), fill, col)[:, None])
        else:
            values = ds.column(j)
            cols.append(np.array([[v == c for c in spec.vocabulary] for v in values], dtype=float)
                        .reshape(len(values), len(spec.vocabulary)))
    return np.hstack(cols) if cols else np.zeros((len(ds), 0))


def random_forest(seed: int) -> RandomForestClassifier:
    return RandomForestClassifier(n_estimators=50, max_depth=8, criterion="gini",
                                  max_features="sqrt", bootstrap=True, random_state=seed, n_jobs=1)


def macro_f1(y_true, y_pred, classes) -> float:
    return float(f1_score(y_true, y_pred, labels=list(classes), average="macro", zero_division=0))


@dataclass
class TstrResult:
    fold_f1: list
    mean: float
    missing_classes: list = field(default_factory=list)


def folds_of(real_test: Dataset, folds: int, seed: int) -> list:
    y = np.array(real_test.labels(), dtype=object)
    counts = {c: int((y == c).sum()) for c in set(y)}
    n_splits = min(folds, min(counts.values()))
    if n_splits < 2:
        return [np.arange(len(real_test))]
    skf = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=seed)
    return [test for _, test in skf.split(np.zeros(len(y)), y.astype(str))]


def tstr_f1(syn_train: Dataset, real_test: Dataset, folds: int = 5, seed: int = 0) -> TstrResult:
    """Train a random forest on synthetic rows and score macro-F1 on real folds.

    The forest is fitted once (seeded) and evaluated on each stratified fold
    of the real test data. Classes absent from the synthetic training data
    get recall 0 and are listed in ``missing_classes``.
    """
    if syn_train.names != real_test.names:
        raise SchemaError("synthetic and real schemas differ")
    classes = [c for c in real_test.label.vocabulary if c in set(real_test.labels())]
    missing = [c for c in classes if c not in set(syn_train.labels())]
    y_test = np.array(real_test.labels(), dtype=object)
    X_test = _design(real_test, real_test)
    splits = folds_of(real_test, folds, seed)
    y_syn = np.array(syn_train.labels(), dtype=object)
    if len(set(y_syn)) == 0:
        preds = np.array([None] * len(y_test), dtype=object)
    elif len(set(y_syn)) == 1:
        preds = np.array([y_syn[0]] * len(y_test), dtype=object)
    else:
        model = random_forest(seed).fit(_design(syn_train, real_test), y_syn.astype(str))
        preds = model.predict(X_test).astype(object)
    fold_f1 = [macro_f1(y_test[idx].astype(str), np.asarray(preds[idx]).astype(str), classes)
               for idx in splits]
    return TstrResult(fold_f1, float(np.mean(fold_f1)), missing)


def delta_gain(ours: float, baselines: dict) -> float:
    """Margin of ``ours`` over the strongest baseline F1."""
    if not baselines:
        raise ValueError("need at least one baseline")
    return float(ours) - max(float(v) for v in baselines.values())


# -- FAITH -------------------------------------------------------------------

@dataclass
class FaithReport:
    fact: float
    align: float
    integ: float
    track: float
    weights: dict
    composite: float
    violations: dict
    eps_priv: float
    notes: list = field(default_factory=list)


def faith_composite(components: dict, weights: Optional[dict] = None) -> float:
    weights = FAITH_WEIGHTS if weights is None else weights
    total = sum(weights.values())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"FAITH weights must sum to 1, got {total}")
    return sum(weights[k] * components[k] for k in ("fact", "align", "integ", "track"))


def alignment_score(c_real, c_syn) -> float:
    """1 - ‖C_R - C_S‖_F / (2·sqrt(M(M-1))), clamped to [0, 1]."""
    c_real = np.asarray(c_real, dtype=float)
    c_syn = np.asarray(c_syn, dtype=float)
    m = c_real.shape[0]
    if m < 2:
        return 1.0
    d = 2.0 * math.sqrt(m * (m - 1))
    return float(min(1.0, max(0.0, 1.0 - np.linalg.norm(c_real - c_syn) / d)))


def outside_support(real: Dataset, syn: Dataset) -> np.ndarray:
    """Boolean per synthetic row: any value outside the real data's support."""
    flags = np.zeros(len(syn), dtype=bool)
    for j, spec in enumerate(real.schema):
        rcol = real.column(j)
        real_missing = any(v is MISSING for v in rcol)
        observed = [v for v in rcol if v is not MISSING]
        if spec.is_continuous:
            lo, hi = (min(observed), max(observed)) if observed else (math.inf, -math.inf)
            for i, v in enumerate(syn.column(j)):
                if v is MISSING:
                    flags[i] |= not real_missing
                else:
                    flags[i] |= not (lo <= v <= hi)
        else:
            allowed = set(observed)
            for i, v in enumerate(syn.column(j)):
                flags[i] |= (not real_missing) if v is MISSING else v not in allowed
    return flags


def faith(real: Dataset, syn: Dataset, rules: Optional[RuleSet] = None, weights: Optional[dict] = None,
          eps_priv: Optional[float] = None, distances=None) -> FaithReport:
    if real.names != syn.names:
        raise SchemaError("real and synthetic schemas differ")
    notes = []
    if rules is None:
        rules = auto_rules(real)
        notes.append("constraint set: automatic range/support rules only")
    weights = dict(FAITH_WEIGHTS if weights is None else weights)
    n = len(syn)
    violations = {}
    ok = 0
    for row in syn.records:
        bad = rules.violations(row)
        ok += not bad
        for i in bad:
            violations[i] = violations.get(i, 0) + 1
    fact = ok / n if n else 0.0
    align = alignment_score(association_matrix(real).values, association_matrix(syn).values) if n > 1 else 0.0
    if eps_priv is None:
        eps_priv = default_privacy_radius(real)
    d = dcr(real, syn) if distances is None else np.asarray(distances)
    integ = float(np.mean(d > eps_priv)) if n else 0.0
    track = 1.0 - float(outside_support(real, syn).mean()) if n else 0.0
    comps = {"fact": fact, "align": align, "integ": integ, "track": track}
    descriptions = rules.describe()
    tally = {descriptions[i]: c for i, c in sorted(violations.items())}
    return FaithReport(fact, align, integ, track, weights, faith_composite(comps, weights),
                       tally, float(eps_priv), notes)


# -- full audit --------------------------------------------------------------

@dataclass
class AuditReport:
    features: list
    mean_ks: Optional[float]
    mean_jsd: float
    mean_kl: float
    mean_hellinger: float
    jsd_numeric: Optional[float]
    jsd_categorical: Optional[float]
    correlation_fidelity: Optional[float]
    dcr: dict
    tstr: Optional[dict]
    delta: Optional[float]
    faith: FaithReport
    n_real: int
    n_synthetic: int
    notes: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = asdict(self)
        out["format_version"] = REPORT_VERSION
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True, default=_json_default)

    def features_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["feature", "kind", "ks", "jsd", "kl", "hellinger"])
        for f in self.features:
            writer.writerow([f.name, f.kind, "" if f.ks is None else repr(f.ks),
                             repr(f.jsd), repr(f.kl), repr(f.hellinger)])
        return buf.getvalue()


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def audit(real: Dataset, syn: Dataset, real_test: Optional[Dataset] = None,
          pcrit: Optional[CriticalPairs] = None, rules: Optional[RuleSet] = None,
          baselines: Optional[dict] = None, bins: int = DEFAULT_BINS, folds: int = 5,
          eps_priv: Optional[float] = None, weights: Optional[dict] = None,
          seed: int = 0) -> AuditReport:
    """Fidelity, correlation, DCR and FAITH against ``real``; TSTR on ``real_test``."""
    if real.names != syn.names:
        missing = sorted(set(real.names) - set(syn.names))
        extra = sorted(set(syn.names) - set(real.names))
        raise SchemaError(f"schema mismatch: missing {missing}, unexpected {extra}")
    feats = marginal_divergences(real, syn, bins)
    distances = dcr(real, syn)
    faith_report = faith(real, syn, rules, weights, eps_priv, distances)
    tstr = delta = None
    if real_test is not None and len(syn):
        result = tstr_f1(syn, real_test, folds, seed)
        tstr = asdict(result)
        if baselines:
            delta = delta_gain(result.mean, baselines)
    notes = [
        "correlation fidelity is reported as 1 - mean absolute deviation over critical pairs "
        "(higher is better), although a deviation itself is lower-is-better",
    ]
    if pcrit is None or not len(pcrit):
        notes.append("correlation fidelity not applicable: no critical pairs")
    notes.extend(faith_report.notes)
    return AuditReport(
        features=feats,
        mean_ks=_mean([f.ks for f in feats]),
        mean_jsd=float(np.mean([f.jsd for f in feats])),
        mean_kl=float(np.mean([f.kl for f in feats])),
        mean_hellinger=float(np.mean([f.hellinger for f in feats])),
        jsd_numeric=_mean([f.jsd for f in feats if f.kind == "continuous"]),
        jsd_categorical=_mean([f.jsd for f in feats if f.kind != "continuous"]),
        correlation_fidelity=correlation_fidelity(real, syn, pcrit),
        dcr=dcr_summary(distances),
        tstr=tstr,
        delta=delta,
        faith=faith_report,
        n_real=len(real),
        n_synthetic=len(syn),
        notes=notes,
    )

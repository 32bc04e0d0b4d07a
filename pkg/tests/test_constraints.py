import json
import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rltab.constraints import (
    CORR_RATIO,
    CRAMERS_V,
    PEARSON,
    AssociationMatrix,
    CriticalPairs,
    association_matrix,
    auto_rules,
    correlation_ratio,
    cramers_v,
    cramers_v_table,
    discover,
    extract_pcrit,
    pearson,
)
from rltab.data import CATEGORICAL, CONTINUOUS, MISSING
from rltab.errors import InsufficientDataError, RuleParseError

from . import oracles
from .helpers import make_dataset


def test_pearson_basics():
    x = [1.0, 2.0, 3.0, 4.0]
    assert pearson(x, x) == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, [-v for v in x]) == pytest.approx(-1.0, abs=1e-15)
    assert pearson(x, [5.0] * 4, return_flag=True) == (0.0, True)


def test_pearson_hand_example():
    # 11 / sqrt(5 * 26); see the ledger on the published rounding of this example
    r = pearson([1, 2, 3, 4], [2, 4, 5, 9])
    assert r == pytest.approx(11 / math.sqrt(130), abs=1e-12)
    assert r == pytest.approx(oracles.pearson([1, 2, 3, 4], [2, 4, 5, 9]), abs=1e-12)


def test_pearson_drops_missing_pairwise():
    assert pearson([1.0, MISSING, 3.0, 4.0], [2.0, 9.0, 6.0, 8.0]) == pytest.approx(
        oracles.pearson([1, 3, 4], [2, 6, 8]), abs=1e-12)
    with pytest.raises(InsufficientDataError):
        pearson([1.0, MISSING], [MISSING, 2.0])


def test_cramers_v_examples():
    assert cramers_v(["a", "a", "b", "b"], ["x", "x", "y", "y"]) == pytest.approx(1.0)
    assert cramers_v_table([[10, 20], [30, 60]]) == pytest.approx(0.0, abs=1e-12)
    table = [[10, 5, 5], [2, 8, 10]]
    assert cramers_v_table(table) == pytest.approx(oracles.cramers_v_table(table), abs=1e-10)
    with pytest.raises(InsufficientDataError):
        cramers_v(["a", "a"], ["x", "y"])


def test_correlation_ratio_examples():
    assert correlation_ratio(["A", "A", "B", "B"], [1, 3, 1, 3]) == pytest.approx(0.0, abs=1e-12)
    assert correlation_ratio(["A", "A", "B", "B"], [1, 1, 7, 7]) == pytest.approx(1.0)
    assert correlation_ratio(["A", "A", "B", "B"], [1, 2, 3, 5]) == pytest.approx(
        oracles.correlation_ratio(["A", "A", "B", "B"], [1, 2, 3, 5]), abs=1e-12)
    assert correlation_ratio(["A", "B"], [2.0, 2.0], return_flag=True) == (0.0, True)


def test_oracle_equivalence_random_inputs():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(5, 30))
        x = rng.normal(size=n).tolist()
        y = (0.5 * np.array(x) + rng.normal(size=n)).tolist()
        assert abs(pearson(x, y) - oracles.pearson(x, y)) < 1e-10
        a = rng.choice(list("abc"), size=n).tolist()
        b = rng.choice(list("pq"), size=n).tolist()
        a[:3], b[:2] = ["a", "b", "c"], ["p", "q"]
        assert abs(cramers_v(a, b) - oracles.cramers_v(a, b)) < 1e-10
        assert abs(correlation_ratio(a, x) - oracles.correlation_ratio(a, x)) < 1e-10


def _mixed(seed=0, n=200):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    g = np.where(x + rng.normal(scale=0.5, size=n) > 0, "hi", "lo")
    return make_dataset(
        {"x": x.round(2).tolist(), "z": (2 * x + rng.normal(size=n)).round(2).tolist(),
         "g": g.tolist(), "y": rng.choice(["0", "1"], size=n).tolist()},
        {"x": CONTINUOUS, "z": CONTINUOUS, "g": CATEGORICAL, "y": CATEGORICAL}, "y")


def test_association_matrix_shape_and_tags():
    C = association_matrix(_mixed())
    assert np.allclose(C.values, C.values.T)
    assert np.allclose(np.diag(C.values), 1.0)
    assert C.methods[0][1] == PEARSON and C.methods[0][2] == CORR_RATIO and C.methods[2][3] == CRAMERS_V
    for a in range(4):
        for b in range(4):
            lo = -1 if C.methods[a][b] == PEARSON else 0
            assert lo <= C.values[a, b] <= 1


def test_association_matrix_single_feature():
    ds = make_dataset({"y": ["a", "b"]}, {"y": CATEGORICAL}, "y")
    assert association_matrix(ds).values.tolist() == [[1.0]]


def test_association_matrix_flags_instead_of_raising():
    ds = make_dataset({"c": ["k", "k", "k"], "y": ["a", "b", "a"]}, {"c": CATEGORICAL, "y": CATEGORICAL}, "y")
    C = association_matrix(ds)
    assert C.values[0, 1] == 0.0 and C.flagged[0, 1]


def test_planted_pearson():
    rng = np.random.default_rng(5)
    n = 2000
    a = rng.normal(size=n)
    b = 0.8 * a + 0.6 * rng.normal(size=n)
    ds = make_dataset({"a": a.tolist(), "b": b.tolist(), "y": rng.choice(["0", "1"], size=n).tolist()},
                      {"a": CONTINUOUS, "b": CONTINUOUS, "y": CATEGORICAL}, "y")
    assert abs(association_matrix(ds).values[0, 1] - 0.8) <= 0.1


def _matrix(values):
    v = np.array(values, dtype=float)
    m = v.shape[0]
    return AssociationMatrix(v, [[PEARSON] * m for _ in range(m)], np.zeros((m, m), bool),
                             [f"f{i}" for i in range(m)])


def test_extract_pcrit_examples(caplog):
    C = _matrix([[1, 0.9, 0.1], [0.9, 1, -0.5], [0.1, -0.5, 1]])
    assert extract_pcrit(C, 0.3, 10).pairs == [(0, 1, 0.9), (1, 2, -0.5)]
    assert extract_pcrit(C, 0.3, 1).pairs == [(0, 1, 0.9)]
    with caplog.at_level(logging.WARNING):
        assert len(extract_pcrit(C, 0.95, 10)) == 0
    assert "disabled" in caplog.text


def test_extract_pcrit_ties_and_exclusion():
    C = _matrix([[1, 0.5, 0.5], [0.5, 1, 0.5], [0.5, 0.5, 1]])
    assert extract_pcrit(C, 0.3, 10).index_pairs() == [(0, 1), (0, 2), (1, 2)]
    assert extract_pcrit(C, 0.3, 10, exclude=(0,)).index_pairs() == [(1, 2)]
    with pytest.raises(ValueError):
        extract_pcrit(C, 0.0, 1)
    with pytest.raises(ValueError):
        extract_pcrit(C, 0.5, 0)


def test_pcrit_json_roundtrip():
    cp = CriticalPairs([(0, 2, 0.7), (1, 3, -0.4)], 0.3, 10)
    assert CriticalPairs.from_json(json.loads(json.dumps(cp.to_json(["a", "b", "c", "d"])))) == cp


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(0.01, 100.0))
def test_pcrit_invariant_to_row_order_and_scale(seed, scale):
    ds = _mixed(3, 80)
    base = discover(ds, 0.3, 10)[1].index_pairs()
    perm = np.random.default_rng(seed).permutation(len(ds))
    shuffled = ds.subset(perm.tolist())
    assert discover(shuffled, 0.3, 10)[1].index_pairs() == base
    scaled = make_dataset({"x": [r[0] * scale for r in ds.records], "z": ds.column(1),
                           "g": ds.column(2), "y": ds.column(3)},
                          {"x": CONTINUOUS, "z": CONTINUOUS, "g": CATEGORICAL, "y": CATEGORICAL}, "y")
    assert discover(scaled, 0.3, 10)[1].index_pairs() == base


def test_auto_rules_construction_and_real_satisfaction(toy):
    rs = auto_rules(toy)
    assert rs.satisfaction(toy) == 1.0
    ages = [v for v in toy.column(0) if v is not MISSING]
    assert rs.rules[0].min == min(ages) and rs.rules[0].max == max(ages)


def test_range_rule_text():
    ds = make_dataset({"age": [40.0, 95.0, 60.0], "y": ["a", "b", "a"]}, {"age": CONTINUOUS, "y": CATEGORICAL}, "y")
    assert auto_rules(ds).describe()[0] == "40 <= age <= 95"


def test_user_implication_rule(tmp_path):
    ds = make_dataset({"sex": ["Male", "Female", "Female"], "pregnancy": ["No", "Yes", "No"], "y": ["a", "b", "a"]},
                      {"sex": CATEGORICAL, "pregnancy": CATEGORICAL, "y": CATEGORICAL}, "y")
    doc = [{"if": {"feature": "sex", "op": "eq", "value": "Male"},
            "then": {"feature": "pregnancy", "op": "ne", "value": "Yes"}}]
    path = tmp_path / "rules.json"
    path.write_text(json.dumps(doc))
    rs = auto_rules(ds, path)
    assert not rs.check(("Male", "Yes", "a"))
    assert rs.check(("Female", "Yes", "a"))


@pytest.mark.parametrize("doc,index", [
    ([{"feature": "nope", "min": 1}], 0),
    ([{"feature": "sex", "allowed": ["Male"]}, {"if": {"feature": "sex", "op": "eq", "value": "Male"}}], 1),
    ([{"feature": "sex", "allowed": ["Male"]}, {"if": {"feature": "sex", "op": "xx", "value": 1},
                                                "then": {"feature": "sex", "op": "eq", "value": 1}}], 1),
])
def test_rule_parse_errors(doc, index):
    ds = make_dataset({"sex": ["Male", "Female"], "y": ["a", "b"]}, {"sex": CATEGORICAL, "y": CATEGORICAL}, "y")
    with pytest.raises(RuleParseError) as err:
        auto_rules(ds, doc)
    assert err.value.index == index

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from synthrec.datagen import builtin_oracle
from synthrec.dsl import (
    CATEGORICAL,
    FIELDS,
    JOIN_PAIRS,
    OPS,
    DSLError,
    DSLSyntaxError,
    DSLTypeError,
    BoundsError,
    Interest,
    InterestFunction,
    Predicate,
    canonicalize,
    columns,
    eval_interest_function,
    eval_predicate,
    field_value,
    format_interest_function,
    parse_interest_function,
    parse_predicate,
)

from conftest import ev, micro_events

MICRO = micro_events()
MICRO_COLS = columns(MICRO)


def test_eval_predicate_examples():
    assert eval_predicate(parse_predicate("locUser = actUser"), ev(act_user=2, loc_user=2))
    assert not eval_predicate(parse_predicate("locDuration > 1"), ev(l_start=4, l_end=5))
    assert eval_predicate(parse_predicate("activity = 0"), ev(activity=0))


def test_eval_oracles():
    e = ev(loc_user=3, l_start=0, l_end=2, activity=0, act_user=1)
    assert eval_interest_function(builtin_oracle(2), e)
    assert not eval_interest_function(builtin_oracle(1), ev(loc_user=1, act_user=3))


def test_single_predicate_function_matches_predicate():
    p = parse_predicate("locStart - actStart < 2")
    f = InterestFunction((Interest((p,)),))
    for e in MICRO:
        assert eval_interest_function(f, e) == eval_predicate(p, e)


def test_parse_examples():
    f = parse_interest_function("(locUser = actUser)")
    assert len(f.disjuncts) == 1 and f.disjuncts[0].conjuncts[0].is_join
    g = parse_interest_function("(locUser = 3 & locDuration > 1 & activity = 0) | (locUser = 0 & activity = 2)")
    assert [len(d) for d in g.disjuncts] == [3, 2]
    assert g == builtin_oracle(2)
    with pytest.raises(DSLSyntaxError):
        parse_interest_function("(locDuration < )")


@pytest.mark.parametrize("text", [
    "(locUser = actUser)",
    "(locUser = 3 & locDuration > 1 & activity = 0) | (locUser = 0 & activity = 2)",
    "(locStart - actEnd <= -7)",
])
def test_format_inverts_parse(text):
    assert format_interest_function(parse_interest_function(text)) == text


def test_parse_is_whitespace_insensitive():
    a = parse_interest_function("(locUser=3&activity!=0)|(actDuration>=2)")
    b = parse_interest_function("( locUser = 3 & activity != 0 ) | ( actDuration >= 2 )")
    assert a == b


def test_join_orientation_normalized():
    # act-side first is mirrored to the location side
    assert parse_predicate("actStart - locStart > 2") == Predicate("locStart", "<", "actStart", -2)


@pytest.mark.parametrize("bad", ["actUser < 3", "location >= 1", "activity > locUser"])
def test_categorical_order_rejected(bad):
    with pytest.raises(DSLError):
        parse_predicate(bad)


def test_type_errors():
    with pytest.raises(DSLTypeError):
        Predicate("actUser", "<", 1)
    with pytest.raises(DSLTypeError):
        Predicate("bogus", "=", 1)
    with pytest.raises(DSLTypeError):
        Predicate("locStart", "=", "actUser")
    with pytest.raises(DSLTypeError):
        Predicate("actStart", "=", 1, offset=2)


def test_bounds_error():
    with pytest.raises(BoundsError):
        parse_interest_function("(actUser = 1) | (actUser = 2)", max_interests=1)
    with pytest.raises(BoundsError):
        parse_interest_function("(actUser = 1 & activity = 2)", max_conjuncts=1)


def test_canonicalize_examples():
    a, b = parse_predicate("activity = 0"), parse_predicate("locUser = 1")
    f = InterestFunction((Interest((b, a)), Interest((b, a))))
    assert canonicalize(f) == InterestFunction((Interest((a, b)),))
    g = canonicalize(f)
    assert canonicalize(g) == g
    # subsumed disjunct kept
    h = InterestFunction((Interest((a,)), Interest((a, b))))
    assert len(canonicalize(h).disjuncts) == 2
    assert all(eval_interest_function(h, e) == eval_interest_function(canonicalize(h), e) for e in MICRO)


def test_field_value_and_columns_agree():
    for e in MICRO[::37]:
        for f in FIELDS:
            assert MICRO_COLS[f][e.id] == field_value(e, f)


def test_oracle_transcription():
    # oracle 3 starts a fresh chain; 4..6 each add one disjunct
    for k in range(4, 7):
        prev = [str(d) for d in canonicalize(builtin_oracle(k - 1)).disjuncts]
        cur = [str(d) for d in canonicalize(builtin_oracle(k)).disjuncts]
        assert set(prev) <= set(cur) and len(cur) == len(prev) + 1
    assert str(builtin_oracle(1)) == "(locUser = actUser)"


# -- properties ----------------------------------------------------------------

NUMERIC_FIELDS = [f for f in FIELDS if f not in CATEGORICAL]


@st.composite
def predicates(draw):
    kind = draw(st.sampled_from(["cat", "num", "join"]))
    if kind == "cat":
        return Predicate(draw(st.sampled_from(sorted(CATEGORICAL))), draw(st.sampled_from(["=", "!="])), draw(st.integers(0, 2)))
    if kind == "num":
        return Predicate(draw(st.sampled_from(NUMERIC_FIELDS)), draw(st.sampled_from(OPS)), draw(st.integers(0, 4)))
    lhs, rhs = draw(st.sampled_from(JOIN_PAIRS))
    if lhs in CATEGORICAL:
        return Predicate(lhs, draw(st.sampled_from(["=", "!="])), rhs)
    return Predicate(lhs, draw(st.sampled_from(OPS)), rhs, draw(st.integers(-3, 3)))


functions = st.lists(st.lists(predicates(), min_size=1, max_size=3), min_size=1, max_size=3).map(
    lambda ds: InterestFunction(tuple(Interest(tuple(d)) for d in ds))
)


@given(functions)
def test_prop_dnf_semantics(f):
    direct = np.array([any(all(eval_predicate(p, e) for p in d.conjuncts) for d in f.disjuncts) for e in MICRO])
    assert np.array_equal(f.mask(MICRO_COLS), direct)
    assert all(eval_interest_function(f, e) == direct[e.id] for e in MICRO[::13])


@given(functions)
def test_prop_canonicalize_preserves_semantics(f):
    assert np.array_equal(f.mask(MICRO_COLS), canonicalize(f).mask(MICRO_COLS))


@given(functions)
def test_prop_round_trip(f):
    assert canonicalize(parse_interest_function(format_interest_function(f))) == canonicalize(f)


@given(st.sampled_from(sorted(CATEGORICAL)), st.sampled_from(["<", "<=", ">", ">="]), st.integers(0, 5))
def test_prop_categorical_order_rejected(field, op, v):
    with pytest.raises(DSLTypeError):
        Predicate(field, op, v)

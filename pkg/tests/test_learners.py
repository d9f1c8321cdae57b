import io
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthrec.datagen import DomainConfig, LabeledDataset, builtin_oracle, inject_label_noise
from synthrec.dsl import canonicalize, parse_interest_function, parse_predicate
from synthrec.features import PredicateBank
from synthrec.ml import LinearModel, support_vectors
from synthrec.learners import (
    KINDS,
    CannotResolve,
    LearnerConfig,
    LearnerState,
    PoolExhausted,
    TRACE_HEADER,
    TraceRow,
    active_learning_round,
    build_portfolio,
    classify,
    decompose,
    ensemble_votes,
    generate_decomposable_model,
    learn_model,
    predict,
    query_scores,
    subsample,
    write_trace,
)
from synthrec.synth import SynthBounds, synthesize, verify_consistent

from conftest import ev, oracle_data

FAST = LearnerConfig(C=1.0)


def _binary(ds):
    return LabeledDataset(ds.events, ds.labels)


def test_subsample_identity():
    ds = _binary(oracle_data(2))
    p, n = subsample(ds.positives(), ds.negatives(), 1.0, seed=0)
    assert p.events == ds.positives().events and n.events == ds.negatives().events


def test_subsample_avoids_contradiction():
    e = ev(act_user=1, loc_user=2)
    pos = LabeledDataset([e, ev(act_user=0, id=1)], [1, 1])
    neg = LabeledDataset([e, ev(act_user=3, id=2)], [-1, -1])
    for s in range(30):
        try:
            p, n = subsample(pos, neg, 0.5, seed=s)
        except CannotResolve:
            continue
        contents = {x.content for x in p.events} & {x.content for x in n.events}
        assert not contents
    with pytest.raises(CannotResolve):
        subsample(LabeledDataset([e], [1]), LabeledDataset([e], [-1]), 1.0)
    with pytest.raises(ValueError):
        subsample(pos, neg, 0.0)


@pytest.mark.xfail(strict=False, reason=(
    "at 3:1 class balance, 5% noise leaves ~13 flipped negatives in a 0.8 subsample; "
    "each needs its own interest, so 14 interests cannot cover them plus the 6 true ones"
))
def test_subsample_noisy_synthesizes():
    ds = _binary(inject_label_noise(oracle_data(6), 0.05, 1))
    ok = 0
    for s in range(10):
        try:
            p, n = subsample(ds.positives(), ds.negatives(), 0.8, seed=s)
            r = synthesize(p.concat(n), SynthBounds(), seed=s, budget=60)
        except Exception:
            continue
        assert verify_consistent(r.function, p.concat(n)) is None
        ok += 1
    assert ok >= 8


def test_portfolio_shrinks_on_noise():
    ds = _binary(inject_label_noise(oracle_data(6), 0.05, 1))
    fs = build_portfolio(ds, LearnerConfig(), seed=0)
    assert len(fs) == 10 and len({canonicalize(f) for f in fs}) == 10
    # every member explains most of the noisy labels
    for f in fs:
        agree = (f.mask(ds.cols) == (ds.labels == 1)).mean()
        assert agree >= 0.8


def test_wider_bounds_absorb_noise():
    ds = _binary(inject_label_noise(oracle_data(6), 0.05, 1))
    p, n = subsample(ds.positives(), ds.negatives(), 0.8, seed=0)
    r = synthesize(p.concat(n), SynthBounds(30, 7), seed=0)
    assert verify_consistent(r.function, p.concat(n)) is None


def test_hybrid_oracle1_training_accuracy():
    ds = oracle_data(1)
    st_ = learn_model(LearnerState("hybrid", _binary(ds), LearnerConfig(), seed=0))
    assert np.array_equal(predict(st_, ds.events), ds.labels)
    assert classify(st_, ds.events[0]) == ds.labels[0]


@pytest.mark.parametrize("k", [2, 3])
def test_hybrid_clean_training_accuracy(k):
    ds = _binary(oracle_data(k))
    st_ = learn_model(LearnerState("hybrid", ds, LearnerConfig(), seed=1))
    assert np.array_equal(predict(st_, ds.events), ds.labels)


def test_ensemble_members_consistent():
    ds = _binary(oracle_data(3))
    st_ = learn_model(LearnerState("ensemble", ds, replace(FAST, subsample_fraction=1.0), seed=0))
    assert len(st_.portfolio) == 10
    assert len({canonicalize(f) for f in st_.portfolio}) == 10
    for f in st_.portfolio:
        assert verify_consistent(f, ds) is None
    assert np.array_equal(predict(st_, ds.events), ds.labels)


def _ensemble_with_votes(yes: int, no: int):
    true_fs = [parse_interest_function(f"(actDuration >= 0 & actUser != {9 + i})") for i in range(yes)]
    false_fs = [parse_interest_function(f"(actUser = {20 + i})") for i in range(no)]
    ds = LabeledDataset([ev(id=0), ev(act_user=1, id=1)], [1, -1])
    return LearnerState("ensemble", ds, FAST, portfolio=true_fs + false_fs)


def test_ensemble_votes_and_ties():
    e = ev(act_user=0)
    s = _ensemble_with_votes(7, 3)
    assert ensemble_votes(s, [e])[0] == 7 and classify(s, e) == 1
    tie = _ensemble_with_votes(5, 5)
    assert classify(tie, e) == -1
    assert query_scores(tie, [e])[0] == 0
    assert query_scores(_ensemble_with_votes(10, 0), [e])[0] == 10


def _manual_linear(weight=1.0, bias=0.0):
    bank = PredicateBank.of([parse_predicate("actUser = 1")])
    m = LinearModel(np.array([weight]), bias, np.zeros(2), 1.0, bank)
    ds = LabeledDataset([ev(act_user=1, id=0), ev(act_user=0, id=1)], [1, -1])
    return LearnerState("hybrid", ds, FAST, model=m, bank=bank)


def test_zero_decision_ranked_first():
    s = _manual_linear(1.0, 0.0)
    pool = [ev(act_user=1, id=10), ev(act_user=0, id=11)]
    sc = query_scores(s, pool)
    assert sc[1] == 0 and np.argmin(sc) == 1
    assert classify(s, pool[1]) == 1  # boundary counts as interesting


def test_stable_tie_break():
    s = _manual_linear(1.0, 0.0)
    pool = [ev(act_user=0, id=31), ev(act_user=0, id=12), ev(act_user=1, id=5)]
    answers = LabeledDataset(list(pool), [-1, -1, 1])
    _, chosen = active_learning_round(replace(s, kind="unary"), list(pool), answers, 1)
    assert chosen == [12]


def _al_setup(k=6, seed=0):
    ds = oracle_data(k, seed)
    pos, neg = np.flatnonzero(ds.labels == 1), np.flatnonzero(ds.labels == -1)
    init = [int(pos[0]), int(neg[0])]
    rated = ds.subset(init)
    pool = [e for i, e in enumerate(ds.events) if i not in init]
    return ds, rated, pool


def test_active_rounds_count_and_partition():
    ds, rated, pool = _al_setup()
    st_ = learn_model(LearnerState("unary", _binary(rated), FAST, seed=0))
    universe = {e.id for e in ds.events}
    sizes = [len(st_.rated)]
    for _ in range(20):
        st_, chosen = active_learning_round(st_, pool, ds, 5)
        assert len(chosen) == 5
        sizes.append(len(st_.rated))
        rated_ids = set(st_.rated.ids)
        assert rated_ids.isdisjoint(e.id for e in pool)
        assert rated_ids | {e.id for e in pool} == universe
    assert sizes[-1] == 102 and all(b > a for a, b in zip(sizes, sizes[1:]))
    assert st_.rounds == 20
    for e, y in zip(st_.rated.events, st_.rated.labels):
        assert y == ds.labels[e.id]


def test_active_round_uses_ratings_when_present():
    ds, rated, pool = _al_setup()
    st_ = learn_model(LearnerState("hybrid-regression", rated, FAST, seed=0))
    st_, chosen = active_learning_round(st_, pool, ds, 5)
    assert st_.rated.ratings is not None
    assert np.allclose(st_.rated.ratings[-5:], ds.ratings[sorted(chosen)])


def test_pool_drained():
    ds, rated, pool = _al_setup(1)
    pool = pool[:7]
    st_ = learn_model(LearnerState("unary", _binary(rated), FAST))
    st_, chosen = active_learning_round(st_, pool, ds, 7)
    assert pool == [] and len(chosen) == 7
    with pytest.raises(PoolExhausted):
        active_learning_round(st_, pool, ds, 1)


def test_decompose_oracle1():
    ds = _binary(oracle_data(1))
    st_ = learn_model(LearnerState("hybrid", ds, LearnerConfig(), seed=0))
    dec = decompose(st_)
    assert str(dec.function) == "(locUser = actUser)" and dec.interests == 1
    assert len(dec.support) <= 0.15 * len(ds) and not dec.used_fallback
    assert generate_decomposable_model(st_) == dec.function


def test_decompose_oracle2():
    ds = _binary(oracle_data(2))
    st_ = learn_model(LearnerState("hybrid", ds, LearnerConfig(interest_features=False), seed=0))
    dec = decompose(st_)
    assert dec.interests <= 6
    sv = ds.subset(support_vectors(st_.model))
    assert verify_consistent(dec.function, sv) is None


def test_decompose_single_support_vector():
    s = _manual_linear()
    s.model.duals[:] = [0.0, 0.7]
    dec = decompose(s)
    assert len(dec.function.disjuncts) == 1 and dec.support == [1]
    assert not dec.function.evaluate(s.rated.events[1])


def test_decompose_needs_linear_model():
    with pytest.raises(ValueError):
        decompose(_ensemble_with_votes(1, 1))


def test_kind_isolation():
    ds = _binary(oracle_data(4))
    a = learn_model(LearnerState("hybrid", ds, FAST, seed=2))
    before = a.model.weights.copy(), predict(a, ds.events)
    b = learn_model(LearnerState("unary", ds, FAST, seed=2))
    c = learn_model(LearnerState("mi", ds, FAST, seed=2))
    assert a.bank is not b.bank and a.model is not b.model and b.bank is not c.bank
    assert np.array_equal(a.model.weights, before[0]) and np.array_equal(predict(a, ds.events), before[1])


def test_selection_fallbacks():
    ds = _binary(oracle_data(1))
    mi = learn_model(LearnerState("mi", ds, replace(FAST, mi_threshold=10.0)))
    assert len(mi.bank) == 1
    l1 = learn_model(LearnerState("l1", ds.subset(range(0, 400, 20)), replace(FAST, lasso_lambda=1e6)))
    assert len(l1.bank) == 1


def test_every_kind_trains():
    ds = oracle_data(2).subset(list(range(0, 400, 4)))
    for kind in KINDS:
        st_ = learn_model(LearnerState(kind, ds, FAST, seed=0))
        pred = predict(st_, ds.events)
        assert pred.shape == (len(ds),) and set(pred.tolist()) <= {-1, 1}
        assert st_.bank_size > 0


def test_learner_errors():
    with pytest.raises(ValueError):
        LearnerState("tree", _binary(oracle_data(1)))
    with pytest.raises(ValueError):
        learn_model(LearnerState("hybrid-regression", _binary(oracle_data(1)), FAST))
    with pytest.raises(ValueError):
        learn_model(LearnerState("unary", oracle_data(1).positives(), FAST))


def test_trace_csv():
    out = io.StringIO()
    text = write_trace([TraceRow(0, "hybrid", 0.5, 0.25, 12, (3, 4))], out)
    assert text.splitlines()[0] == ",".join(TRACE_HEADER)
    assert text.splitlines()[1] == "0,hybrid,0.500000,0.250000,12,3 4"
    assert out.getvalue() == text


# -- properties ----------------------------------------------------------------

@settings(max_examples=15)
@given(st.integers(0, 2**16), st.sampled_from([1.0, 2.0, 3.0]))
def test_prop_query_order(seed, scale):
    rng = np.random.default_rng(seed)
    s = _manual_linear(scale, float(rng.choice([-1.0, 0.0, -scale / 2])))
    pool = [ev(act_user=int(rng.integers(0, 3)), id=int(i)) for i in rng.permutation(30)]
    answers = LabeledDataset(list(pool), [1 if e.activity.user == 1 else -1 for e in pool])
    scores = dict(zip([e.id for e in pool], query_scores(s, pool)))
    n = int(rng.integers(1, 10))
    _, chosen = active_learning_round(replace(s, kind="unary"), list(pool), answers, n)
    expect = sorted(scores, key=lambda i: (scores[i], i))[:n]
    assert chosen == expect


@settings(max_examples=8)
@given(st.integers(1, 3), st.integers(0, 50))
def test_prop_decomposition_consistent_on_support(k, seed):
    ds = _binary(oracle_data(k)).subset(range(seed, 400, 3))
    st_ = learn_model(LearnerState("hybrid", ds, FAST, seed=seed))
    dec = decompose(st_)
    if not dec.used_fallback:
        assert verify_consistent(dec.function, ds.subset(dec.support)) is None
    else:
        assert verify_consistent(dec.function, ds) is None

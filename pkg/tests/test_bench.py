import json
import math

import numpy as np
import pytest

import synthrec.bench as bench
from synthrec.bench import (
    ExperimentConfig,
    NoNegatives,
    NoPositives,
    Report,
    compute_metrics,
    learning_curve,
    rounds_to_reach,
    run,
    run_active_learning,
    run_cross_validation,
    run_explain,
)
from synthrec.learners import LearnerConfig


def test_metrics_examples():
    m = compute_metrics([1, -1, 1], [1, -1, 1])
    assert (m.accuracy, m.positive_accuracy, m.negative_accuracy) == (1.0, 1.0, 1.0)
    truth = np.array([1] * 3 + [-1] * 97)
    m = compute_metrics(-np.ones(100, int), truth)
    assert m.accuracy == pytest.approx(0.97) and m.positive_accuracy == 0.0
    m = compute_metrics([1, -1, -1, 1], [1, 1, -1, -1])
    assert m.positive_accuracy == 0.5 and m.negative_accuracy == 0.5


def test_metrics_errors():
    with pytest.raises(NoPositives):
        compute_metrics([1, -1], [-1, -1]).positive_accuracy
    with pytest.raises(NoNegatives):
        compute_metrics([1, -1], [1, 1]).negative_accuracy
    assert math.isnan(compute_metrics([1], [1]).as_dict()["negative_accuracy"])
    with pytest.raises(ValueError):
        compute_metrics([1], [1, -1])
    with pytest.raises(ValueError):
        compute_metrics([], [])


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(experiment="tree")
    with pytest.raises(ValueError):
        ExperimentConfig(oracles=(7,))
    with pytest.raises(ValueError):
        ExperimentConfig(learners=("tree",))
    with pytest.raises(ValueError):
        ExperimentConfig(folds=1)
    assert ExperimentConfig(experiment="active").learner_config().C == 1.0
    assert ExperimentConfig().learner_config().C is None
    assert not ExperimentConfig(experiment="explain").learner_config().interest_features
    custom = ExperimentConfig(experiment="active", per_round=3, learner=LearnerConfig(C=7.0))
    assert custom.learner_config().C == 7.0 and custom.learner_config().per_round == 3


SMALL_CV = dict(experiment="crossval", oracles=(1, 2), learners=("unary", "hybrid"), folds=3, seed=4)


def test_crossval_report_deterministic(tmp_path):
    a, b = run_cross_validation(ExperimentConfig(**SMALL_CV)), run_cross_validation(ExperimentConfig(**SMALL_CV))
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_time"} for r in rows]
    assert strip(a.rows) == strip(b.rows) and strip(a.summary) == strip(b.summary)
    assert len(a.rows) == 2 * 2 * 3 and len(a.summary) == 4
    assert a.cell(oracle=1, learner="hybrid")["accuracy"] == 1.0
    paths = a.write(str(tmp_path))
    assert sorted(p.rsplit("/", 1)[1] for p in paths) == ["crossval.csv", "crossval.json", "crossval_summary.csv"]
    payload = json.loads(open(paths[-1]).read())
    assert payload["experiment"] == "crossval" and payload["config"]["folds"] == 3
    assert not a.failed
    with pytest.raises(KeyError):
        a.cell(oracle=6)


def test_crossval_seed_changes_data():
    a = run_cross_validation(ExperimentConfig(**{**SMALL_CV, "learners": ("unary",), "oracles": (2,)}))
    b = run_cross_validation(ExperimentConfig(**{**SMALL_CV, "learners": ("unary",), "oracles": (2,), "seed": 5}))
    assert [r["accuracy"] for r in a.rows] != [r["accuracy"] for r in b.rows]


def test_crossval_no_holdout_leakage(monkeypatch):
    seen = []
    real = bench.learn_model

    def spy(state):
        seen.append(set(state.rated.ids))
        return real(state)

    monkeypatch.setattr(bench, "learn_model", spy)
    run_cross_validation(ExperimentConfig(**{**SMALL_CV, "learners": ("unary",), "oracles": (3,), "folds": 4}))
    universe = set(range(400))
    held = [universe - s for s in seen]
    assert len(held) == 4
    assert set().union(*held) == universe and sum(len(h) for h in held) == 400


def test_crossval_noise_only_in_training(monkeypatch):
    flips = []
    real = bench.inject_label_noise

    def spy(ds, rate, seed=0):
        out = real(ds, rate, seed)
        flips.append(len(ds))
        return out

    monkeypatch.setattr(bench, "inject_label_noise", spy)
    run_cross_validation(ExperimentConfig(**{**SMALL_CV, "learners": ("unary",), "oracles": (1,), "noise_rate": 0.05}))
    assert flips and all(n < 400 for n in flips)


def test_timeout_cells_reported():
    rep = run_cross_validation(ExperimentConfig(**{**SMALL_CV, "learners": ("unary",), "oracles": (1,), "budget": 0.0}))
    assert rep.failed and rep.summary[0]["status"] == bench.TIMEOUT


def test_active_rounds_zero():
    cfg = ExperimentConfig(experiment="active", oracles=(1,), learners=("unary",), rounds=0, runs=2, test_size=500)
    rep = run_active_learning(cfg)
    assert [r["round"] for r in rep.rows] == [0, 0]
    assert all(r["rated"] == 2 for r in rep.rows)


def test_active_report_deterministic():
    cfg = ExperimentConfig(experiment="active", oracles=(2,), learners=("unary", "ensemble"), rounds=3, runs=2,
                           test_size=800, seed=1)
    a, b = run_active_learning(cfg), run_active_learning(cfg)
    assert a.to_csv(a.summary) == b.to_csv(b.summary) or _same_but_time(a, b)
    curve = learning_curve(a, 2, "unary")
    assert len(curve) == 4
    assert all(r["rated"] == 2 + 5 * r["round"] for r in a.rows)
    assert rounds_to_reach(curve, -1.0) == 0 and rounds_to_reach(curve, 2.0) is None


def _same_but_time(a, b):
    strip = lambda rows: [{k: v for k, v in r.items() if k not in ("wall_time",)} for r in rows]
    return strip(a.summary) == strip(b.summary) and strip(a.rows) == strip(b.rows)


def test_parallel_matches_serial():
    cfg = dict(experiment="active", oracles=(1,), learners=("unary", "mi"), rounds=2, runs=2, test_size=500)
    a = run_active_learning(ExperimentConfig(**cfg))
    b = run_active_learning(ExperimentConfig(**cfg, workers=2))
    assert _same_but_time(a, b)


def test_explain_report():
    rep = run(ExperimentConfig(experiment="explain", oracles=(1,), test_size=2000))
    row = rep.rows[0]
    assert row["function"] == "(locUser = actUser)" and row["agreement"] == 1.0
    assert row["support_vectors"] <= row["train_size"]
    assert "agreement" in rep.to_csv(rep.summary).splitlines()[0]


def test_report_json_nan_to_null():
    rep = Report("x", summary=[{"a": float("nan"), "b": np.int64(3)}])
    assert json.loads(rep.to_json())["summary"] == [{"a": None, "b": 3}]

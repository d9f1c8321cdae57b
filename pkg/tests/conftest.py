import functools
import itertools

import pytest
from hypothesis import HealthCheck, settings

from synthrec.datagen import (
    DomainConfig,
    LabeledDataset,
    builtin_oracle,
    sample_composite_events,
    simulate_traces,
)
from synthrec.dsl import ActivityEvent, CompositeEvent, LocationEvent

settings.register_profile("repo", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def micro_events(users=2, locations=2, activities=2, horizon=4):
    """Every composite event of a tiny domain: ids in range, 0 <= start < end <= horizon."""
    spans = [(s, e) for s in range(horizon) for e in range(s + 1, horizon + 1)]
    acts = [ActivityEvent(u, a, s, e) for u in range(users) for a in range(activities) for s, e in spans]
    locs = [LocationEvent(u, l, s, e) for u in range(users) for l in range(locations) for s, e in spans]
    return [CompositeEvent(a, l, i) for i, (a, l) in enumerate(itertools.product(acts, locs))]


@functools.lru_cache(maxsize=None)
def oracle_data(k: int, seed: int = 0, n_pos: int = 100, n_neg: int = 300, extended: bool = True) -> LabeledDataset:
    cfg = DomainConfig()
    traces = simulate_traces(cfg, seed)
    return sample_composite_events(traces, builtin_oracle(k), n_pos, n_neg, cfg.mix, seed + 1, extended=extended, cfg=cfg)


@pytest.fixture(scope="session")
def micro():
    return micro_events()


def ev(act_user=0, activity=0, a_start=0, a_end=1, loc_user=0, location=0, l_start=0, l_end=1, id=0):
    return CompositeEvent(ActivityEvent(act_user, activity, a_start, a_end), LocationEvent(loc_user, location, l_start, l_end), id)


def micro_instance(rng, events=None, lo=3, hi=8):
    """Random small labeled set over the 2x2x2 micro-domain.

    Half the instances are labeled by a random one-predicate oracle, half by
    coin flips, so both feasible and infeasible cases show up.
    """
    from synthrec.synth import candidate_predicates, SynthBounds

    events = events or micro_events()
    n = int(rng.integers(lo, hi + 1))
    pick = [events[i] for i in rng.choice(len(events), size=n, replace=False)]
    pick = [CompositeEvent(e.activity, e.location, k) for k, e in enumerate(pick)]
    if rng.random() < 0.5:
        from synthrec.dsl import columns
        preds = candidate_predicates(columns(pick), SynthBounds())
        p = preds[int(rng.integers(len(preds)))]
        labels = [1 if p.evaluate(e) else -1 for e in pick]
    else:
        labels = [1 if b else -1 for b in rng.random(n) < 0.5]
    return LabeledDataset(pick, labels)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed at session end."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])

"""Synthetic activity/location traces and labeled composite events."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .dsl import (
    ActivityEvent,
    CompositeEvent,
    InterestFunction,
    LocationEvent,
    columns,
    parse_interest_function,
)

_ORACLE_TEXT = {
    1: ["(locUser = actUser)"],
    2: ["(locUser = 3 & locDuration > 1 & activity = 0)", "(locUser = 0 & activity = 2)"],
    3: [
        "(location = 3 & locUser = actUser & locDuration > 3)",
        "(location = 2 & activity = 1 & actDuration > 2)",
        "(locUser = 1 & locDuration > 4)",
    ],
}
_ORACLE_TEXT[4] = _ORACLE_TEXT[3] + ["(actUser = 3 & activity = 2 & actDuration > 1)"]
_ORACLE_TEXT[5] = _ORACLE_TEXT[4] + ["(actUser = 1 & actDuration > 1)"]
_ORACLE_TEXT[6] = _ORACLE_TEXT[5] + ["(locUser = actUser & actUser = 2 & locStart - actStart < 2)"]

# Probability of drawing a same-visit (activity, location) pair.  Frozen from
# calibrate_mix(): oracle 1 accepts 40% of the raw stream at this value.
DEFAULT_MIX = 0.25


def builtin_oracle(k: int) -> InterestFunction:
    if k not in _ORACLE_TEXT:
        raise ValueError(f"oracle must be in 1..6, got {k}")
    return parse_interest_function(" | ".join(_ORACLE_TEXT[k]))


@dataclass(frozen=True)
class DomainConfig:
    users: int = 5
    locations: int = 5
    activities: int = 5
    horizon_hours: int = 168
    duration_range: tuple[int, int] = (1, 10)
    seed: int = 0
    mix: float = DEFAULT_MIX
    # Zipf exponent biasing users and locations; 0 means uniform.
    skew: float = 0.0

    def __post_init__(self):
        if min(self.users, self.locations, self.activities) < 1:
            raise ValueError("domain sizes must be >= 1")
        lo, hi = self.duration_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad duration range {self.duration_range}")
        if self.horizon_hours < 1:
            raise ValueError("horizon must be positive")

    @classmethod
    def large(cls, **kw) -> "DomainConfig":
        return cls(users=50, locations=50, activities=10, **kw)


def _weights(n: int, skew: float) -> np.ndarray | None:
    if skew == 0:
        return None
    w = 1.0 / np.arange(1, n + 1) ** skew
    return w / w.sum()


@dataclass
class Traces:
    activities: list[ActivityEvent]
    locations: list[LocationEvent]

    def __iter__(self):
        return iter((self.activities, self.locations))


def simulate_traces(cfg: DomainConfig, seed: int | None = None) -> Traces:
    """Chains of visits per user covering the horizon.

    Each visit has a uniform location, a uniform integer duration and one
    co-temporal activity event of the same user.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    lo, hi = cfg.duration_range
    loc_w = _weights(cfg.locations, cfg.skew)
    acts, locs = [], []
    for user in range(cfg.users):
        t = 0
        while t < cfg.horizon_hours:
            dur = int(rng.integers(lo, hi + 1))
            loc = int(rng.choice(cfg.locations, p=loc_w))
            act = int(rng.integers(cfg.activities))
            locs.append(LocationEvent(user, loc, t, t + dur))
            acts.append(ActivityEvent(user, act, t, t + dur))
            t += max(dur, 1)
    return Traces(acts, locs)


class RejectionBudgetExceeded(RuntimeError):
    pass


@dataclass
class LabeledDataset:
    events: list[CompositeEvent]
    labels: np.ndarray
    ratings: np.ndarray | None = None
    _cols: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.events = list(self.events)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.events):
            raise ValueError("events and labels differ in length")
        if not np.all(np.isin(self.labels, (-1, 1))):
            raise ValueError("labels must be -1 or +1")
        if self.ratings is not None:
            self.ratings = np.asarray(self.ratings, dtype=np.float64).reshape(-1)
            if len(self.ratings) != len(self.events):
                raise ValueError("ratings and events differ in length")

    def __len__(self):
        return len(self.events)

    @property
    def cols(self) -> dict[str, np.ndarray]:
        if self._cols is None:
            self._cols = columns(self.events)
        return self._cols

    @property
    def ids(self) -> list[int]:
        return [e.id for e in self.events]

    def subset(self, idx: Iterable[int]) -> "LabeledDataset":
        idx = list(idx)
        return LabeledDataset(
            [self.events[i] for i in idx],
            self.labels[idx],
            None if self.ratings is None else self.ratings[idx],
        )

    def positives(self) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels == 1))

    def negatives(self) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.labels == -1))

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if (self.ratings is None) != (other.ratings is None):
            raise ValueError("cannot mix rated and unrated datasets")
        ratings = None if self.ratings is None else np.concatenate([self.ratings, other.ratings])
        return LabeledDataset(
            self.events + other.events, np.concatenate([self.labels, other.labels]), ratings
        )

    def to_jsonl(self) -> str:
        lines = []
        for i, e in enumerate(self.events):
            a, l = e.activity, e.location
            rec = {
                "id": e.id,
                "act": {"user": a.user, "activity": a.activity, "start": a.start, "end": a.end},
                "loc": {"user": l.user, "location": l.location, "start": l.start, "end": l.end},
                "label": int(self.labels[i]),
            }
            if self.ratings is not None:
                rec["rating"] = float(self.ratings[i])
            lines.append(json.dumps(rec, separators=(",", ":")))
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text: str) -> "LabeledDataset":
        events, labels, ratings = [], [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            a, l = rec["act"], rec["loc"]
            events.append(
                CompositeEvent(
                    ActivityEvent(a["user"], a["activity"], a["start"], a["end"]),
                    LocationEvent(l["user"], l["location"], l["start"], l["end"]),
                    rec["id"],
                )
            )
            labels.append(rec["label"])
            ratings.append(rec.get("rating"))
        has = [r is not None for r in ratings]
        if any(has) and not all(has):
            raise ValueError("ratings must be present on every line or none")
        return cls(events, labels, ratings if ratings and all(has) else None)


def _draw(traces: Traces, n: int, mix: float, rng: np.random.Generator, cfg: DomainConfig | None):
    acts, locs = traces.activities, traces.locations
    paired = rng.random(n) < mix
    visit = rng.integers(len(acts), size=n)
    if cfg is not None and cfg.skew:
        # visits of popular users are drawn more often
        uw = _weights(cfg.users, cfg.skew)
        w = uw[[a.user for a in acts]]
        w = w / w.sum()
        ia = rng.choice(len(acts), size=n, p=w)
        il = rng.choice(len(locs), size=n, p=w)
    else:
        ia = rng.integers(len(acts), size=n)
        il = rng.integers(len(locs), size=n)
    for k in range(n):
        if paired[k]:
            yield acts[visit[k]], locs[visit[k]]
        else:
            yield acts[ia[k]], locs[il[k]]


def sample_events(
    traces: Traces, n: int, mix: float = DEFAULT_MIX, seed: int = 0, start_id: int = 0,
    cfg: DomainConfig | None = None,
) -> list[CompositeEvent]:
    """Raw composite-event stream drawn from the pairing mixture."""
    rng = np.random.default_rng(seed)
    return [CompositeEvent(a, l, start_id + k) for k, (a, l) in enumerate(_draw(traces, n, mix, rng, cfg))]


def label_events(
    oracle: InterestFunction, events: Sequence[CompositeEvent], extended: bool = False
) -> LabeledDataset:
    labels = np.where(oracle.mask(columns(events)), 1, -1) if events else np.zeros(0)
    ratings = None
    if extended:
        ratings = [extended_label(oracle, e) for e in events]
    return LabeledDataset(list(events), labels, ratings)


def sample_composite_events(
    traces: Traces,
    oracle: InterestFunction,
    n_pos: int,
    n_neg: int,
    mix: float = DEFAULT_MIX,
    seed: int = 0,
    extended: bool = False,
    max_draws: int = 1_000_000,
    start_id: int = 0,
    cfg: DomainConfig | None = None,
    distinct: bool = True,
) -> LabeledDataset:
    """Rejection-sample exactly ``n_pos`` accepted and ``n_neg`` rejected events.

    With ``distinct`` a repeated (activity, location) pair is skipped, so a
    user never rates the same composite event twice.
    """
    rng = np.random.default_rng(seed)
    events, labels = [], []
    seen = set()
    need = {1: n_pos, -1: n_neg}
    drawn = 0
    batch = max(256, 4 * (n_pos + n_neg))
    while need[1] or need[-1]:
        if drawn >= max_draws:
            raise RejectionBudgetExceeded(
                f"oracle too skewed: still need {need[1]} positive and {need[-1]} negative events"
            )
        pairs = list(_draw(traces, batch, mix, rng, cfg))
        cand = [CompositeEvent(a, l, 0) for a, l in pairs]
        accepted = oracle.mask(columns(cand))
        for ev, ok in zip(cand, accepted):
            lab = 1 if ok else -1
            if distinct:
                if ev.content in seen:
                    continue
                seen.add(ev.content)
            if need[lab]:
                need[lab] -= 1
                events.append(replace(ev, id=start_id + len(events)))
                labels.append(lab)
        drawn += batch
    ratings = [extended_label(oracle, e) for e in events] if extended else None
    return LabeledDataset(events, labels, ratings)


def positive_rate(oracle: InterestFunction, traces: Traces, mix: float, n: int = 20000, seed: int = 0) -> float:
    events = sample_events(traces, n, mix, seed)
    return float(oracle.mask(columns(events)).mean())


def calibrate_mix(
    cfg: DomainConfig | None = None, target: float = 0.4, n: int = 20000, seed: int = 0, iters: int = 20
) -> float:
    """Binary search the pairing mix until oracle 1 accepts ``target`` of the raw stream."""
    cfg = cfg or DomainConfig()
    traces = simulate_traces(cfg, seed)
    oracle = builtin_oracle(1)
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = (lo + hi) / 2
        if positive_rate(oracle, traces, mid, n, seed) < target:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2


def inject_label_noise(ds: LabeledDataset, rate: float, seed: int = 0) -> LabeledDataset:
    """Flip each label independently with probability ``rate``."""
    if not 0 <= rate < 0.5:
        raise ValueError("noise rate must be in [0, 0.5)")
    rng = np.random.default_rng(seed)
    flip = rng.random(len(ds)) < rate
    labels = np.where(flip, -ds.labels, ds.labels)
    ratings = None
    if ds.ratings is not None:
        # a flipped negative becomes +1; a flipped positive becomes -1
        ratings = np.where(flip, labels.astype(float), ds.ratings)
    return LabeledDataset(list(ds.events), labels, ratings)


def extended_label(oracle: InterestFunction, e: CompositeEvent) -> float:
    """+1 when accepted, else minus the smallest fraction of failed conjuncts."""
    fractions = []
    for d in oracle.disjuncts:
        failed = sum(not p.evaluate(e) for p in d.conjuncts)
        if failed == 0:
            return 1.0
        fractions.append(failed / len(d.conjuncts))
    return -min(fractions)

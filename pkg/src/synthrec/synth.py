"""Bounded counterexample-guided synthesis of DNF interest functions.

The search keeps a working subset of the labeled examples, proposes a
function consistent with that subset, checks it against every example and
adds the failures to the subset.  Proposals come from one of two engines:

* an exact anchored depth-first search, used when the whole bounded space
  is small; it is complete, so failure means no function exists;
* a randomized greedy sequential cover (FOIL-style gain), with restarts,
  for realistic bounds.

Candidate predicates are evaluated once over all examples and stored as
packed bitsets, so every gain computation is a vectorized AND + popcount.
"""
from __future__ import annotations

import itertools
import logging
import math
import random
import time
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datagen import LabeledDataset
from .dsl import (
    CATEGORICAL,
    JOIN_PAIRS,
    OPS,
    CompositeEvent,
    Interest,
    InterestFunction,
    Predicate,
    canonicalize,
    columns,
)

log = logging.getLogger(__name__)

DURATION_CONSTANTS = frozenset(range(0, 11))
MAX_OFFSET = 10
EXACT_LIMIT = 500_000
BRUTE_FORCE_LIMIT = 1_000_000


class SynthError(Exception):
    pass


class Infeasible(SynthError):
    """No function within the bounds is consistent with the examples."""


class SynthTimeout(SynthError, TimeoutError):
    pass


class SpaceTooLarge(SynthError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    event: CompositeEvent
    label: bool


@dataclass(frozen=True)
class SynthBounds:
    max_interests: int = 14
    max_conjuncts: int = 7
    # numeric field -> integer constants; derived from the examples when None
    constant_pool: Mapping[str, frozenset] | None = None
    # "users" / "locations" / "activities" -> ids; observed ids when None
    id_pools: Mapping[str, frozenset] | None = None
    # (loc field, act field) -> join offsets; observed differences when None
    offset_pool: Mapping[tuple[str, str], frozenset] | None = None
    # explicit candidate predicates; replaces the grammar enumeration when set
    predicate_pool: tuple | None = None

    def __post_init__(self):
        if self.max_interests < 1 or self.max_conjuncts < 1:
            raise ValueError("bounds must be positive")
        for pools in (self.constant_pool, self.id_pools):
            if pools is not None and any(len(v) == 0 for v in pools.values()):
                raise ValueError("constant pools must be non-empty")

    def with_interests(self, k: int) -> "SynthBounds":
        return replace(self, max_interests=k)


@dataclass
class SynthStats:
    candidates_examined: int = 0
    cegis_iterations: int = 0
    elapsed: float = 0.0
    engine: str = ""


@dataclass
class SynthResult:
    function: InterestFunction
    stats: SynthStats = field(default_factory=SynthStats)


def as_dataset(examples) -> LabeledDataset:
    if isinstance(examples, LabeledDataset):
        return examples
    examples = list(examples)
    return LabeledDataset([x.event for x in examples], [1 if x.label else -1 for x in examples])


def find_contradiction(ds: LabeledDataset) -> tuple[int, int] | None:
    seen: dict[tuple, int] = {}
    for i, e in enumerate(ds.events):
        j = seen.setdefault(e.content, i)
        if ds.labels[j] != ds.labels[i]:
            return j, i
    return None


def _id_pools(cols, bounds: SynthBounds) -> dict[str, list[int]]:
    if bounds.id_pools is not None:
        pools = {k: sorted(v) for k, v in bounds.id_pools.items()}
        return {
            "actUser": pools["users"],
            "locUser": pools["users"],
            "activity": pools["activities"],
            "location": pools["locations"],
        }
    users = sorted(set(cols["actUser"].tolist()) | set(cols["locUser"].tolist()))
    return {
        "actUser": users,
        "locUser": users,
        "activity": sorted(set(cols["activity"].tolist())),
        "location": sorted(set(cols["location"].tolist())),
    }


def candidate_predicates(cols: Mapping[str, np.ndarray], bounds: SynthBounds) -> list[Predicate]:
    """Every grammar predicate over the bounds' pools, in canonical order.

    Numeric constants default to the values observed in the examples, plus
    0..10 for durations; join offsets default to observed differences
    within +-10.  An explicit predicate_pool short-circuits all of this.
    """
    if bounds.predicate_pool is not None:
        return sorted(set(bounds.predicate_pool), key=Predicate.sort_key)
    preds: list[Predicate] = []
    for f, ids in _id_pools(cols, bounds).items():
        preds += [Predicate(f, op, v) for v in ids for op in ("=", "!=")]
    for f in ("actStart", "actEnd", "actDuration", "locStart", "locEnd", "locDuration"):
        if bounds.constant_pool is not None and f in bounds.constant_pool:
            consts = set(bounds.constant_pool[f])
        else:
            consts = set(cols[f].tolist())
            if f.endswith("Duration"):
                consts |= DURATION_CONSTANTS
        preds += [Predicate(f, op, int(c)) for c in sorted(consts) for op in OPS]
    for lhs, rhs in JOIN_PAIRS:
        if lhs in CATEGORICAL:
            preds += [Predicate(lhs, op, rhs) for op in ("=", "!=")]
            continue
        offsets = {0}
        if lhs.endswith("Duration"):
            pass
        elif bounds.offset_pool is not None and (lhs, rhs) in bounds.offset_pool:
            offsets |= set(bounds.offset_pool[(lhs, rhs)])
        else:
            diff = (cols[lhs] - cols[rhs]).tolist()
            offsets |= {d for d in diff if abs(d) <= MAX_OFFSET}
        preds += [Predicate(lhs, op, rhs, int(o)) for o in sorted(offsets) for op in OPS]
    return sorted(set(preds), key=Predicate.sort_key)


# -- packed bitsets ----------------------------------------------------------


def pack(mask: np.ndarray) -> np.ndarray:
    """Pack a bool array (..., n) into uint64 words (..., ceil(n/64))."""
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[-1]
    words = max(1, -(-n // 64))
    padded = np.zeros(mask.shape[:-1] + (words * 64,), dtype=bool)
    padded[..., :n] = mask
    return np.packbits(padded, axis=-1, bitorder="little").view(np.uint64)


def popcount(a: np.ndarray) -> np.ndarray:
    return np.bitwise_count(a).sum(axis=-1, dtype=np.int64)


def _bits(words: np.ndarray, n: int) -> np.ndarray:
    return np.unpackbits(words.view(np.uint8), bitorder="little")[:n].astype(bool)


class _Space:
    def __init__(self, ds: LabeledDataset, bounds: SynthBounds):
        self.ds = ds
        self.n = len(ds)
        self.bounds = bounds
        self.preds = candidate_predicates(ds.cols, bounds)
        truth = np.stack([p.mask(ds.cols) for p in self.preds]) if self.preds else np.zeros((0, self.n), bool)
        self.M = pack(truth)
        self.pos = pack(ds.labels == 1)
        self.neg = pack(ds.labels == -1)
        self.size = bounded_space_size(len(self.preds), bounds.max_interests, bounds.max_conjuncts)
        self._informative = None

    @property
    def informative(self) -> np.ndarray:
        """Rows with distinct, non-constant masks; first canonical row kept."""
        if self._informative is None:
            counts = popcount(self.M)
            keep = np.flatnonzero((counts > 0) & (counts < self.n))
            _, first = np.unique(self.M[keep], axis=0, return_index=True)
            self._informative = keep[np.sort(first)]
        return self._informative

    def cover(self, interests: Sequence[Sequence[int]]) -> np.ndarray:
        out = np.zeros_like(self.pos)
        for rows in interests:
            c = np.bitwise_and.reduce(self.M[list(rows)], axis=0)
            out |= c
        return out

    def function(self, interests: Sequence[Sequence[int]]) -> InterestFunction:
        return InterestFunction(
            tuple(Interest(tuple(self.preds[r] for r in rows)) for rows in interests)
        )


def bounded_space_size(n_preds: int, max_interests: int, max_conjuncts: int) -> int:
    conjs = sum(math.comb(n_preds, j) for j in range(1, max_conjuncts + 1))
    if conjs > 10**12:
        return 10**30
    return sum(math.comb(conjs, i) for i in range(1, max_interests + 1))


# -- exact engine --------------------------------------------------------------


def _exact_propose(space: _Space, S: np.ndarray, blocked: set, stats: SynthStats, deadline: float):
    I, J = space.bounds.max_interests, space.bounds.max_conjuncts
    M = space.M
    P = space.pos & S
    N = space.neg & S

    def conjunctions(anchor: int | None):
        if anchor is None:
            rows = np.arange(len(M))
        else:
            w, b = divmod(anchor, 64)
            rows = np.flatnonzero((M[:, w] >> np.uint64(b)) & np.uint64(1))
        for size in range(1, J + 1):
            for combo in itertools.combinations(rows.tolist(), size):
                stats.candidates_examined += 1
                c = np.bitwise_and.reduce(M[list(combo)], axis=0)
                if not (c & N).any():
                    yield combo, c
            if time.monotonic() > deadline:
                raise SynthTimeout("exact search exceeded its budget")

    def dfs(uncovered, left, chosen):
        if not uncovered.any():
            f = space.function(chosen)
            if canonicalize(f) not in blocked:
                return chosen
            return None
        if left == 0:
            return None
        bits = _bits(uncovered, space.n)
        anchor = int(np.flatnonzero(bits)[0])
        for combo, c in conjunctions(anchor):
            got = dfs(uncovered & ~c, left - 1, chosen + [combo])
            if got is not None:
                return got
        return None

    if not P.any():
        for combo, _ in conjunctions(None):
            f = space.function([combo])
            if canonicalize(f) not in blocked:
                return [combo]
        return None
    return dfs(P, I, [])


# -- greedy engine -------------------------------------------------------------


def _grow(M, rows, P, N, J, rng: random.Random, slack: float, stats: SynthStats):
    """Add predicates to one interest until it rejects every negative in N."""
    chosen: list[int] = []
    pc_p, pc_n = int(popcount(P)), int(popcount(N))
    sub = M[rows]
    while pc_n > 0:
        if len(chosen) == J:
            return None
        p = popcount(sub & P)
        n = popcount(sub & N)
        stats.candidates_examined += len(rows)
        valid = (p > 0) & (n < pc_n)
        if not valid.any():
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = p * (np.log2(p / (p + n)) - math.log2(pc_p / (pc_p + pc_n)))
        gain = np.where(valid, gain, -np.inf)
        best = gain.max()
        if slack > 0:
            near = np.flatnonzero(gain >= best - slack * abs(best))
            k = int(near[rng.randrange(len(near))])
        else:
            k = int(np.argmax(gain))
        chosen.append(int(rows[k]))
        P = P & sub[k]
        N = N & sub[k]
        pc_p, pc_n = int(p[k]), int(n[k])
    return chosen


def _prune_interest(M, chosen, N0):
    """Drop conjuncts that are not needed to reject N0, latest first."""
    chosen = list(chosen)
    for r in reversed(list(chosen)):
        if len(chosen) == 1:
            break
        rest = [c for c in chosen if c != r]
        c = np.bitwise_and.reduce(M[rest], axis=0)
        if not (c & N0).any():
            chosen = rest
    return chosen


def _greedy_cover(space: _Space, S, rng: random.Random, slack: float, stats: SynthStats, taboo=frozenset()):
    I, J = space.bounds.max_interests, space.bounds.max_conjuncts
    M = space.M
    rows = space.informative
    if taboo:
        rows = rows[~np.isin(rows, list(taboo))]
    P0 = space.pos & S
    N0 = space.neg & S
    if not P0.any():
        # reject everything in S with a single predicate if possible
        hits = popcount(M[rows] & N0)
        zero = np.flatnonzero(hits == 0)
        if len(zero):
            return [[int(rows[zero[0]])]]
        never = np.flatnonzero(popcount(M) == 0)
        return [[int(never[0])]] if len(never) else None
    if not N0.any():
        # nothing to reject: one predicate holding on every positive in S
        for cand in (rows, np.arange(len(M))):
            hold = cand[np.all((M[cand] & P0) == P0, axis=1)]
            if len(hold):
                return [[int(hold[rng.randrange(len(hold))] if slack > 0 else hold[0])]]
        return None
    interests: list[list[int]] = []
    uncovered = P0.copy()
    while uncovered.any():
        if len(interests) >= I:
            return None
        chosen = _grow(M, rows, uncovered, N0, J, rng, slack, stats)
        if chosen is None:
            # anchor on one uncovered positive so the interest covers at least it
            idx = np.flatnonzero(_bits(uncovered, space.n))
            for _ in range(3):
                anchor = int(idx[rng.randrange(len(idx))])
                w, b = divmod(anchor, 64)
                on = rows[((M[rows, w] >> np.uint64(b)) & np.uint64(1)).astype(bool)]
                chosen = _grow(M, on, uncovered, N0, J, rng, slack, stats)
                if chosen is not None:
                    break
            if chosen is None:
                return None
        chosen = _prune_interest(M, chosen, N0)
        interests.append(chosen)
        c = np.bitwise_and.reduce(M[chosen], axis=0)
        uncovered &= ~c
    # drop interests whose positives are all covered by the others
    covers = [np.bitwise_and.reduce(M[c], axis=0) & P0 for c in interests]
    order = sorted(range(len(interests)), key=lambda i: int(popcount(covers[i])))
    keep = set(range(len(interests)))
    for i in order:
        others = np.zeros_like(P0)
        for j in keep - {i}:
            others |= covers[j]
        if not (P0 & ~others).any():
            keep.discard(i)
    return [interests[i] for i in sorted(keep)]


def _pad_variant(space: _Space, got, S, blocked, rng: random.Random, tries: int = 8):
    """A syntactic variant of ``got`` with one extra, permissive conjunct.

    The added predicate holds on every positive of S the interest covers, so
    the variant stays consistent on S.
    """
    M = space.M
    P0 = space.pos & S
    counts = popcount(M)
    for _ in range(tries):
        i = rng.randrange(len(got))
        if len(got[i]) >= space.bounds.max_conjuncts:
            continue
        covered = np.bitwise_and.reduce(M[got[i]], axis=0) & P0
        ok = np.flatnonzero(np.all((M & covered) == covered, axis=1))
        ok = ok[~np.isin(ok, got[i])]
        # prefer predicates that actually split the data over tautologies
        useful = ok[counts[ok] < space.n]
        if len(useful):
            ok = useful
        if not len(ok):
            continue
        # most permissive first, so the variant changes the least
        top = ok[np.argsort(-counts[ok], kind="stable")[:10]]
        extra = int(top[rng.randrange(len(top))])
        variant = [list(c) for c in got]
        variant[i] = variant[i] + [extra]
        if canonicalize(space.function(variant)) not in blocked:
            return variant
    return None


def _greedy_propose(space, S, blocked, rng, jitter, max_restarts, stats, deadline):
    taboo: set[int] = set()
    for attempt in range(max_restarts):
        if time.monotonic() > deadline:
            raise SynthTimeout("greedy search exceeded its budget")
        slack = min(0.6, jitter + 0.1 * attempt)
        got = _greedy_cover(space, S, rng, slack, stats, frozenset(taboo))
        if got is None:
            continue
        if canonicalize(space.function(got)) not in blocked:
            return got
        variant = _pad_variant(space, got, S, blocked, rng)
        if variant is not None:
            return variant
        # steer later restarts away from an already-found function
        rows = sorted({r for conj in got for r in conj})
        taboo.add(rows[rng.randrange(len(rows))])
    return None


# -- public API -----------------------------------------------------------------


def verify_consistent(f: InterestFunction, examples) -> LabeledExample | None:
    """First example whose label disagrees with ``f``, or None."""
    ds = as_dataset(examples)
    if len(ds) == 0:
        return None
    bad = np.flatnonzero(f.mask(ds.cols) != (ds.labels == 1))
    if len(bad) == 0:
        return None
    i = int(bad[0])
    return LabeledExample(ds.events[i], bool(ds.labels[i] == 1))


def synthesize(
    examples,
    bounds: SynthBounds | None = None,
    seed: int = 0,
    *,
    blocked: Iterable[InterestFunction] = (),
    budget: float = 60.0,
    jitter: float = 0.0,
    max_restarts: int = 30,
    init_size: int = 16,
) -> SynthResult:
    """Find an interest function that agrees with every labeled example.

    Raises Infeasible when no function is found within the bounds (proved
    when the exact engine is used) and SynthTimeout past ``budget`` seconds.
    Functions whose canonical form is in ``blocked`` are never returned.
    """
    t0 = time.monotonic()
    deadline = t0 + budget
    bounds = bounds or SynthBounds()
    ds = as_dataset(examples)
    if len(ds) == 0:
        raise ValueError("synthesize needs at least one example")
    clash = find_contradiction(ds)
    if clash is not None:
        raise Infeasible(f"examples {clash[0]} and {clash[1]} are identical with opposite labels")
    blocked = {canonicalize(b) for b in blocked}
    space = _Space(ds, bounds)
    stats = SynthStats(engine="exact" if space.size <= EXACT_LIMIT else "greedy")
    rng = random.Random(seed)

    n = space.n
    order = list(range(n))
    rng.shuffle(order)
    start = order[: min(n, init_size)]
    for lab in (1, -1):
        hit = np.flatnonzero(ds.labels == lab)
        if len(hit) and not any(ds.labels[i] == lab for i in start):
            start.append(int(hit[0]))
    in_s = np.zeros(n, dtype=bool)
    in_s[start] = True

    truth = ds.labels == 1
    while True:
        stats.cegis_iterations += 1
        S = pack(in_s)
        if stats.engine == "exact":
            got = _exact_propose(space, S, blocked, stats, deadline)
        else:
            got = _greedy_propose(space, S, blocked, rng, jitter, max_restarts, stats, deadline)
        if got is None:
            raise Infeasible(f"no function within {bounds.max_interests}x{bounds.max_conjuncts} bounds")
        wrong = np.flatnonzero(_bits(space.cover(got), n) != truth)
        if len(wrong) == 0:
            break
        # several counterexamples per round keep the number of rounds logarithmic
        fresh = [int(i) for i in wrong if not in_s[i]]
        rng.shuffle(fresh)
        in_s[fresh[: max(1, int(in_s.sum()) // 2)]] = True

    f = space.function(got)
    assert verify_consistent(f, ds) is None
    stats.elapsed = time.monotonic() - t0
    return SynthResult(f, stats)


def synthesize_portfolio(
    examples, bounds: SynthBounds | None = None, k: int = 10, seed: int = 0, *, budget: float = 60.0,
    jitter: float = 0.1,
) -> list[SynthResult]:
    """Up to ``k`` consistent functions with pairwise distinct canonical forms."""
    if k < 1:
        raise ValueError("k must be >= 1")
    results: list[SynthResult] = []
    blocked: list[InterestFunction] = []
    for i in range(k):
        try:
            r = synthesize(
                examples, bounds, seed=seed * 7919 + i, blocked=blocked, budget=budget,
                jitter=0.0 if i == 0 else jitter,
            )
        except Infeasible:
            if not results:
                raise
            break
        results.append(r)
        blocked.append(canonicalize(r.function))
    return results


def brute_force_synthesize(examples, bounds: SynthBounds) -> InterestFunction | None:
    """Exhaustive reference search in canonical order; for tiny bounds only.

    Candidate truth values come from scalar predicate evaluation, not from
    the vectorized masks the synthesizer uses.
    """
    ds = as_dataset(examples)
    if len(ds) == 0:
        return None
    preds = candidate_predicates(ds.cols, bounds)
    I, J = bounds.max_interests, bounds.max_conjuncts
    if bounded_space_size(len(preds), I, J) > BRUTE_FORCE_LIMIT:
        raise SpaceTooLarge("candidate space exceeds the brute-force limit")
    target = 0
    for i, lab in enumerate(ds.labels):
        if lab == 1:
            target |= 1 << i
    truth = []
    for p in preds:
        t = 0
        for i, e in enumerate(ds.events):
            if p.evaluate(e):
                t |= 1 << i
        truth.append(t)
    full = (1 << len(ds)) - 1
    conjs = []
    for size in range(1, J + 1):
        for combo in itertools.combinations(range(len(preds)), size):
            t = full
            for c in combo:
                t &= truth[c]
            conjs.append((combo, t))
    for count in range(1, I + 1):
        for group in itertools.combinations(range(len(conjs)), count):
            t = 0
            for g in group:
                t |= conjs[g][1]
            if t == target:
                return InterestFunction(
                    tuple(Interest(tuple(preds[c] for c in conjs[g][0])) for g in group)
                )
    return None


def enumerate_consistent(examples, bounds: SynthBounds) -> list[InterestFunction]:
    """All consistent functions in a tiny space (test oracle), canonical order."""
    ds = as_dataset(examples)
    preds = candidate_predicates(ds.cols, bounds)
    I, J = bounds.max_interests, bounds.max_conjuncts
    if bounded_space_size(len(preds), I, J) > BRUTE_FORCE_LIMIT:
        raise SpaceTooLarge("candidate space exceeds the brute-force limit")
    conjs = [
        Interest(tuple(preds[c] for c in combo))
        for size in range(1, J + 1)
        for combo in itertools.combinations(range(len(preds)), size)
    ]
    out = []
    for count in range(1, I + 1):
        for group in itertools.combinations(conjs, count):
            f = InterestFunction(group)
            if all(f.evaluate(e) == (lab == 1) for e, lab in zip(ds.events, ds.labels)):
                out.append(f)
    return out

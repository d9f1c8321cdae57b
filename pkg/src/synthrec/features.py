"""Predicate banks and binary featurization."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dsl import (
    CATEGORICAL,
    JOIN_PAIRS,
    OPS,
    CompositeEvent,
    InterestFunction,
    Predicate,
    columns,
)

SYNTHESIZED = "synthesized"
UNARY_ENUM = "unary-enum"
CONJUNCTIVE_ENUM = "conjunctive-enum"
SELECTED = "selected"

DURATION_CONSTANTS = tuple(range(0, 11))

Feature = tuple[Predicate, ...]


class CombinatorialLimit(RuntimeError):
    pass


class DegenerateDataset(ValueError):
    pass


class EmptySelection(ValueError):
    pass


def feature_text(feat: Feature) -> str:
    return " & ".join(str(p) for p in feat)


@dataclass(frozen=True)
class PredicateBank:
    """Ordered, duplicate-free features; each is a conjunction of predicates."""

    features: tuple[Feature, ...]
    provenance: str = SELECTED

    def __post_init__(self):
        seen = {}
        for feat in self.features:
            if isinstance(feat, Predicate):
                feat = (feat,)
            key = tuple(sorted(set(feat), key=Predicate.sort_key))
            seen.setdefault(key, None)
        object.__setattr__(self, "features", tuple(seen))

    @classmethod
    def of(cls, preds: Iterable[Predicate], provenance: str = SELECTED) -> "PredicateBank":
        return cls(tuple((p,) for p in preds), provenance)

    def __len__(self):
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    @property
    def predicates(self) -> list[Predicate]:
        """Distinct atomic predicates in first-appearance order."""
        return list(dict.fromkeys(p for feat in self.features for p in feat))

    @property
    def max_arity(self) -> int:
        return max((len(f) for f in self.features), default=0)

    def texts(self) -> list[str]:
        return [feature_text(f) for f in self.features]

    def subset(self, idx: Sequence[int], provenance: str = SELECTED) -> "PredicateBank":
        return PredicateBank(tuple(self.features[i] for i in idx), provenance)

    def concat(self, other: "PredicateBank", provenance: str | None = None) -> "PredicateBank":
        return PredicateBank(self.features + other.features, provenance or self.provenance)

    # -- evaluation ------------------------------------------------------

    def _atoms(self, cols) -> tuple[np.ndarray, dict[Predicate, int]]:
        atoms = self.predicates
        index = {p: i for i, p in enumerate(atoms)}
        n = len(next(iter(cols.values())))
        A = np.empty((n, len(atoms)), dtype=bool)
        for i, p in enumerate(atoms):
            A[:, i] = p.mask(cols)
        return A, index

    def matrix(self, events_or_cols) -> np.ndarray:
        """0/1 feature matrix, one row per event."""
        cols = _as_cols(events_or_cols)
        A, index = self._atoms(cols)
        X = np.empty((A.shape[0], len(self)), dtype=np.uint8)
        for arity in range(1, self.max_arity + 1):
            pos = [k for k, f in enumerate(self.features) if len(f) == arity]
            if not pos:
                continue
            members = np.array([[index[p] for p in self.features[k]] for k in pos])
            block = A[:, members[:, 0]]
            for c in range(1, arity):
                block = block & A[:, members[:, c]]
            X[:, pos] = block
        return X

    def decision(self, events_or_cols, weights: np.ndarray, bias: float = 0.0, chunk: int = 2048) -> np.ndarray:
        """``X @ weights + bias`` without materializing large conjunctive matrices."""
        cols = _as_cols(events_or_cols)
        weights = np.asarray(weights, dtype=np.float64)
        if len(weights) != len(self):
            raise ValueError(f"weights have length {len(weights)}, bank has {len(self)}")
        if self.max_arity > 2:
            out = []
            n = len(next(iter(cols.values())))
            for s in range(0, n, chunk):
                part = {k: v[s : s + chunk] for k, v in cols.items()}
                out.append(self.matrix(part) @ weights)
            return np.concatenate(out) + bias if out else np.zeros(0)
        A, index = self._atoms(cols)
        w1 = np.zeros(A.shape[1])
        W2 = np.zeros((A.shape[1], A.shape[1]))
        for k, f in enumerate(self.features):
            if len(f) == 1:
                w1[index[f[0]]] += weights[k]
            else:
                W2[index[f[0]], index[f[1]]] += weights[k]
        Af = A.astype(np.float64)
        out = Af @ w1 + bias
        if W2.any():
            out += np.einsum("ij,ij->i", Af @ W2, Af)
        return out

    def storage_bytes(self, n_events: int) -> int:
        """Bytes needed to store ``n_events`` packed feature vectors."""
        return n_events * math.ceil(len(self) / 8)


def _as_cols(events_or_cols) -> Mapping[str, np.ndarray]:
    if isinstance(events_or_cols, Mapping):
        return events_or_cols
    return columns(list(events_or_cols))


@dataclass(frozen=True)
class FeatureVector:
    bits: tuple[int, ...]
    event_id: int = 0


def featurize(bank: PredicateBank, e: CompositeEvent) -> FeatureVector:
    return FeatureVector(tuple(int(all(p.evaluate(e) for p in f)) for f in bank.features), e.id)


def featurize_many(bank: PredicateBank, events: Sequence[CompositeEvent]) -> np.ndarray:
    return bank.matrix(events)


def extract_predicates(functions: Sequence[InterestFunction]) -> PredicateBank:
    """Union of the atomic predicates of every function, first appearance first."""
    if not functions:
        raise ValueError("need at least one function")
    preds = dict.fromkeys(p for f in functions for p in f.predicates())
    return PredicateBank.of(preds, SYNTHESIZED)


def enumerate_unary(domain, time_constants: Mapping[str, Iterable[int]] | None = None) -> PredicateBank:
    """All well-typed single predicates over the domain's id ranges.

    ``domain`` needs ``users``, ``locations`` and ``activities`` counts.
    Absolute start/end predicates are only produced for fields listed in
    ``time_constants``.
    """
    preds = []
    ids = {
        "actUser": domain.users,
        "locUser": domain.users,
        "activity": domain.activities,
        "location": domain.locations,
    }
    for f, n in ids.items():
        if n < 1:
            raise ValueError("domain sizes must be positive")
        preds += [Predicate(f, op, v) for v in range(n) for op in ("=", "!=")]
    for f in ("actDuration", "locDuration"):
        preds += [Predicate(f, op, c) for c in DURATION_CONSTANTS for op in OPS]
    for f, consts in (time_constants or {}).items():
        preds += [Predicate(f, op, int(c)) for c in sorted(set(consts)) for op in OPS]
    for lhs, rhs in JOIN_PAIRS:
        ops = ("=", "!=") if lhs in CATEGORICAL else OPS
        preds += [Predicate(lhs, op, rhs) for op in ops]
    preds = sorted(set(preds), key=Predicate.sort_key)
    return PredicateBank.of(preds, UNARY_ENUM)


def _conflicts(a: Predicate, b: Predicate) -> bool:
    if a.is_join or b.is_join or a.lhs != b.lhs:
        return False
    if a.op == "=" and b.op == "=":
        return a.rhs != b.rhs
    if {a.op, b.op} == {"=", "!="}:
        return a.rhs == b.rhs
    return False


def enumerate_conjunctive(unary: PredicateBank, max_arity: int = 2, cap: int = 2_000_000) -> PredicateBank:
    """Compatible conjunctions of 2..max_arity distinct unary predicates."""
    if max_arity < 2:
        raise ValueError("max_arity must be >= 2")
    preds = [f[0] for f in unary.features if len(f) == 1]
    n = len(preds)
    projected = sum(math.comb(n, k) for k in range(2, max_arity + 1))
    if projected > cap:
        raise CombinatorialLimit(f"{projected} conjunctive features exceed the cap of {cap}")
    bad = np.zeros((n, n), dtype=bool)
    by_field: dict[str, list[int]] = {}
    for i, p in enumerate(preds):
        if not p.is_join:
            by_field.setdefault(p.lhs, []).append(i)
    for idx in by_field.values():
        for i in idx:
            for j in idx:
                if i != j and _conflicts(preds[i], preds[j]):
                    bad[i, j] = True
    feats = []
    if max_arity == 2:
        I, J = np.triu_indices(n, 1)
        keep = ~bad[I, J]
        feats = [(preds[i], preds[j]) for i, j in zip(I[keep].tolist(), J[keep].tolist())]
    else:
        import itertools

        for k in range(2, max_arity + 1):
            for combo in itertools.combinations(range(n), k):
                if not any(bad[i, j] for i, j in itertools.combinations(combo, 2)):
                    feats.append(tuple(preds[i] for i in combo))
    return PredicateBank(tuple(feats), CONJUNCTIVE_ENUM)


def full_bank(domain, max_arity: int = 2) -> PredicateBank:
    unary = enumerate_unary(domain)
    return unary.concat(enumerate_conjunctive(unary, max_arity), CONJUNCTIVE_ENUM)


def mutual_information_scores(bank_or_X, ds, X: np.ndarray | None = None) -> np.ndarray:
    """Empirical I(feature; label) in bits from 2x2 counts.

    ``bank_or_X`` is a PredicateBank (featurized over ``ds``) or a
    precomputed 0/1 matrix.
    """
    labels = np.asarray(ds.labels if hasattr(ds, "labels") else ds)
    if X is None:
        X = bank_or_X.matrix(ds.events) if isinstance(bank_or_X, PredicateBank) else np.asarray(bank_or_X)
    pos = labels == 1
    n = len(labels)
    n_pos = int(pos.sum())
    if n_pos == 0 or n_pos == n:
        raise DegenerateDataset("mutual information needs both classes")
    Xf = X.astype(np.float64)
    c11 = pos.astype(np.float64) @ Xf
    c1 = Xf.sum(axis=0)
    c10 = c1 - c11
    c01 = n_pos - c11
    c00 = (n - n_pos) - c10
    mi = np.zeros(X.shape[1])
    for cxy, cx, cy in (
        (c11, c1, n_pos),
        (c10, c1, n - n_pos),
        (c01, n - c1, n_pos),
        (c00, n - c1, n - n_pos),
    ):
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(cxy > 0, (cxy / n) * np.log2(cxy * n / (cx * cy)), 0.0)
        mi += term
    return np.maximum(mi, 0.0)


def select_by_mi(scores: Sequence[float], bank: PredicateBank, threshold: float = 0.01) -> PredicateBank:
    scores = np.asarray(scores)
    if len(scores) != len(bank):
        raise ValueError("scores are not aligned with the bank")
    keep = np.flatnonzero(scores > threshold)
    if len(keep) == 0:
        raise EmptySelection(f"no feature scores above {threshold}")
    return bank.subset(keep, SELECTED)


def export_csv(bank: PredicateBank, events: Sequence[CompositeEvent], out=None) -> str:
    """Feature matrix as CSV; header is ``id`` plus each feature's text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id"] + bank.texts())
    X = bank.matrix(events)
    for e, row in zip(events, X):
        w.writerow([e.id] + row.tolist())
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text

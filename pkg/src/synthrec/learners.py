"""Learner strategies, active-learning rounds and model explanation."""
from __future__ import annotations

import csv
import functools
import io
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .datagen import DomainConfig, LabeledDataset
from .dsl import CompositeEvent, InterestFunction, columns
from .features import (
    EmptySelection,
    PredicateBank,
    enumerate_conjunctive,
    enumerate_unary,
    extract_predicates,
    mutual_information_scores,
    select_by_mi,
)
from .ml import (
    DEFAULT_C_GRID,
    DidNotConverge,
    KernelModel,
    LinearModel,
    TrainConfig,
    lasso_select,
    support_vectors,
    train_kernel_svm,
    train_linear_svm,
    train_regression,
    tune_C,
)
from .synth import Infeasible, SynthBounds, SynthError, canonicalize, find_contradiction, synthesize

KINDS = ("full", "unary", "poly", "l1", "mi", "ensemble", "hybrid", "hybrid-regression")
SVM_KINDS = frozenset(KINDS) - {"ensemble"}
LINEAR_KINDS = frozenset({"full", "unary", "l1", "mi", "hybrid", "hybrid-regression"})
PORTFOLIO_KINDS = frozenset({"ensemble", "hybrid", "hybrid-regression"})


class CannotResolve(RuntimeError):
    pass


class PoolExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnerConfig:
    portfolio_k: int = 10
    subsample_fraction: float = 0.8
    subsample_retries: int = 5
    # fresh subsamples tried per portfolio member before giving up on it
    infeasible_retries: int = 6
    min_fraction: float = 0.2
    bounds: SynthBounds = field(default_factory=SynthBounds)
    per_round: int = 5
    synth_budget: float = 60.0
    jitter: float = 0.1
    C: float | None = None  # None: pick from c_grid by cross-validation
    c_grid: tuple = DEFAULT_C_GRID
    tune_folds: int = 3
    mi_threshold: float = 0.01
    lasso_lambda: float = 0.01
    poly_degree: int = 6
    epsilon: float = 0.05
    domain: DomainConfig = field(default_factory=DomainConfig)
    # hybrid features: atomic predicates only, or also each multi-predicate interest
    interest_features: bool = True


@dataclass
class LearnerState:
    kind: str
    rated: LabeledDataset
    config: LearnerConfig = field(default_factory=LearnerConfig)
    seed: int = 0
    model: LinearModel | KernelModel | None = None
    bank: PredicateBank | None = None
    portfolio: list[InterestFunction] = field(default_factory=list)
    rounds: int = 0
    C: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner {self.kind!r}; choose from {', '.join(KINDS)}")

    @property
    def rated_positive(self) -> LabeledDataset:
        return self.rated.positives()

    @property
    def rated_negative(self) -> LabeledDataset:
        return self.rated.negatives()

    @property
    def bank_size(self) -> int:
        if self.kind == "ensemble":
            return len(extract_predicates(self.portfolio)) if self.portfolio else 0
        return len(self.bank) if self.bank is not None else 0


def subsample(pos: LabeledDataset, neg: LabeledDataset, fraction: float, seed: int = 0, retries: int = 5):
    """Uniform per-class subsets of ``fraction`` that contain no contradiction."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    for _ in range(max(1, retries)):
        parts = []
        for ds in (pos, neg):
            n = len(ds)
            m = min(n, max(1, int(round(fraction * n)))) if n else 0
            idx = np.sort(rng.choice(n, size=m, replace=False)) if m < n else np.arange(n)
            parts.append(ds.subset(idx))
        if find_contradiction(parts[0].concat(parts[1])) is None:
            return parts[0], parts[1]
    raise CannotResolve(f"still contradictory after {retries} resamples at fraction {fraction}")


def build_portfolio(ds: LabeledDataset, cfg: LearnerConfig, seed: int = 0) -> list[InterestFunction]:
    """``portfolio_k`` distinct functions, each fit to its own random subsample.

    A member whose subsample is unsatisfiable is retried on a fresh, smaller
    subsample; the fraction is shared so later members start from it.
    """
    binary = LabeledDataset(ds.events, ds.labels)
    pos, neg = binary.positives(), binary.negatives()
    if not len(pos) or not len(neg):
        raise ValueError("need at least one positive and one negative event")
    fraction = cfg.subsample_fraction
    found: list[InterestFunction] = []
    for i in range(cfg.portfolio_k):
        for attempt in range(cfg.infeasible_retries):
            s = (seed * 1_000_003 + i * 101 + attempt) % (2**32)
            try:
                p, n = subsample(pos, neg, fraction, s, cfg.subsample_retries)
                r = synthesize(
                    p.concat(n), cfg.bounds, seed=s, blocked=found, budget=cfg.synth_budget,
                    jitter=0.0 if i == 0 else cfg.jitter,
                )
            except (SynthError, CannotResolve):
                fraction = max(cfg.min_fraction, fraction * 0.8)
                continue
            found.append(canonicalize(r.function))
            break
    if not found:
        raise Infeasible("every portfolio member was unsatisfiable")
    return found


@functools.lru_cache(maxsize=8)
def _unary_bank(users: int, locations: int, activities: int) -> PredicateBank:
    return enumerate_unary(DomainConfig(users=users, locations=locations, activities=activities))


@functools.lru_cache(maxsize=4)
def _full_bank(users: int, locations: int, activities: int) -> PredicateBank:
    unary = _unary_bank(users, locations, activities)
    return unary.concat(enumerate_conjunctive(unary, 2), "conjunctive-enum")


def _dims(d: DomainConfig):
    return d.users, d.locations, d.activities


def enumeration_bank(kind: str, domain: DomainConfig) -> PredicateBank:
    if kind in ("unary", "poly"):
        return _unary_bank(*_dims(domain))
    return _full_bank(*_dims(domain))


def _pick_C(state: LearnerState, X, y, trainer=None, **kw) -> float:
    cfg = state.config
    if cfg.C is not None:
        return cfg.C
    return tune_C(X, y, cfg.tune_folds, cfg.c_grid, seed=state.seed, trainer=trainer, **kw)


def _top1(scores: np.ndarray, bank: PredicateBank) -> PredicateBank:
    return bank.subset([int(np.argmax(scores))])


def learn_model(state: LearnerState) -> LearnerState:
    """Retrain ``state`` on its rated events; returns a new state."""
    ds = state.rated
    y = ds.labels
    if not (y == 1).any() or not (y == -1).any():
        raise ValueError("need at least one positive and one negative rated event")
    cfg = state.config
    kind = state.kind
    out = replace(state, model=None, bank=None, portfolio=[], C=None)

    if kind in PORTFOLIO_KINDS:
        out.portfolio = build_portfolio(ds, cfg, seed=state.seed * 997 + state.rounds)
        if kind == "ensemble":
            return out
        bank = extract_predicates(out.portfolio)
        if cfg.interest_features:
            conj = tuple(d.conjuncts for f in out.portfolio for d in f.disjuncts if len(d.conjuncts) > 1)
            bank = bank.concat(PredicateBank(conj), bank.provenance)
    else:
        bank = enumeration_bank(kind, cfg.domain)

    X = bank.matrix(ds.cols)
    if kind == "mi":
        full = bank
        scores = mutual_information_scores(X, ds)
        try:
            bank = select_by_mi(scores, full, cfg.mi_threshold)
        except EmptySelection:
            bank = _top1(scores, full)
        X = bank.matrix(ds.cols)
    elif kind == "l1":
        full = bank
        try:
            idx = lasso_select(X, y, cfg.lasso_lambda)
        except EmptySelection:
            idx = [int(np.argmax(mutual_information_scores(X, ds)))]
        bank = full.subset(idx)
        X = X[:, idx]

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DidNotConverge)
        if kind == "poly":
            gamma = 1.0 / max(1, len(bank))
            C = _pick_C(out, X, y, trainer=_poly_trainer(cfg.poly_degree, gamma))
            out.model = train_kernel_svm(X, y, cfg.poly_degree, TrainConfig(C=C), gamma=gamma)
        elif kind == "hybrid-regression":
            if ds.ratings is None:
                raise ValueError("hybrid-regression needs rated (extended-label) data")
            C = cfg.C if cfg.C is not None else 1.0
            out.model = train_regression(
                X, ds.ratings, TrainConfig(C=C, mode="regression", epsilon=cfg.epsilon), bank
            )
        else:
            C = _pick_C(out, X, y)
            out.model = train_linear_svm(X, y, TrainConfig(C=C), bank)
    out.C = C
    out.bank = bank
    return out


def _poly_trainer(degree: int, gamma: float):
    def train(X, y, cfg, alpha=None):
        return train_kernel_svm(X, y, degree, cfg, gamma=gamma, alpha=alpha)

    return train


def _cols(events) -> Mapping[str, np.ndarray]:
    if isinstance(events, Mapping):
        return events
    if isinstance(events, LabeledDataset):
        return events.cols
    return columns(list(events))


def ensemble_votes(state: LearnerState, events) -> np.ndarray:
    cols = _cols(events)
    votes = np.zeros(len(next(iter(cols.values()))), dtype=np.int64)
    for f in state.portfolio:
        votes += f.mask(cols)
    return votes


def decision_values(state: LearnerState, events) -> np.ndarray:
    """Signed scores; ensembles report 2 * votes - K."""
    if state.kind == "ensemble":
        return 2 * ensemble_votes(state, events) - len(state.portfolio)
    if state.model is None:
        raise ValueError("model not trained")
    cols = _cols(events)
    if isinstance(state.model, KernelModel):
        return state.model.decision(state.bank.matrix(cols))
    return state.bank.decision(cols, state.model.weights, state.model.bias)


def predict(state: LearnerState, events) -> np.ndarray:
    d = decision_values(state, events)
    if state.kind == "ensemble":
        # a tied vote counts as uninteresting
        return np.where(d > 0, 1, -1)
    return np.where(d >= 0, 1, -1)


def classify(state: LearnerState, e: CompositeEvent) -> int:
    return int(predict(state, [e])[0])


def query_scores(state: LearnerState, pool) -> np.ndarray:
    """Lower means more informative."""
    return np.abs(decision_values(state, pool)).astype(np.float64)


def active_learning_round(
    state: LearnerState, pool: list[CompositeEvent], oracle_labels: LabeledDataset, n: int | None = None
) -> tuple[LearnerState, list[int]]:
    """Move the ``n`` lowest-scoring pool events into the rated set and retrain.

    ``pool`` is edited in place.  ``oracle_labels`` answers queries by event
    id (its ratings are used too when present).
    """
    n = n or state.config.per_round
    if n < 1:
        raise ValueError("n must be >= 1")
    if not pool:
        raise PoolExhausted("no unlabeled events left")
    scores = query_scores(state, pool)
    ids = np.array([e.id for e in pool])
    order = np.lexsort((ids, scores))[:n]
    chosen = sorted(order.tolist())
    where = {e_id: i for i, e_id in enumerate(oracle_labels.ids)}
    try:
        answer = oracle_labels.subset([where[pool[i].id] for i in chosen])
    except KeyError as exc:
        raise ValueError(f"no oracle label for event {exc.args[0]}") from None
    answer = LabeledDataset(
        [pool[i] for i in chosen], answer.labels, None if state.rated.ratings is None else answer.ratings
    )
    picked_ids = [int(ids[i]) for i in order]
    for i in sorted(chosen, reverse=True):
        del pool[i]
    new = replace(state, rated=state.rated.concat(answer), rounds=state.rounds + 1)
    return learn_model(new), picked_ids


@dataclass
class Decomposition:
    function: InterestFunction
    interests: int  # the k that first succeeded
    support: list[int]  # indices into the rated set
    used_fallback: bool = False


def decompose(state: LearnerState) -> Decomposition:
    """Regenerate a DNF from the support vectors, escalating the interest bound."""
    if state.kind not in LINEAR_KINDS or not isinstance(state.model, LinearModel):
        raise ValueError("decomposition needs a trained linear model")
    cfg = state.config
    sv = support_vectors(state.model)
    binary = LabeledDataset(state.rated.events, state.rated.labels)
    sv_ds = binary.subset(sv)
    # Phrase the explanation in the model's own predicates; the raw grammar
    # over a few dozen support vectors happily memorizes single timestamps.
    bounds = cfg.bounds
    if state.bank is not None and len(state.bank):
        bounds = replace(bounds, predicate_pool=tuple(state.bank.predicates))
    if len(sv_ds):
        for k in range(1, bounds.max_interests + 1):
            try:
                r = synthesize(sv_ds, bounds.with_interests(k), seed=state.seed, budget=cfg.synth_budget)
            except SynthError:
                continue
            return Decomposition(r.function, k, sv)
    r = synthesize(binary, cfg.bounds, seed=state.seed, budget=cfg.synth_budget)
    return Decomposition(r.function, cfg.bounds.max_interests, sv, used_fallback=True)


def generate_decomposable_model(state: LearnerState) -> InterestFunction:
    return decompose(state).function


@dataclass
class TraceRow:
    round: int
    learner: str
    accuracy: float
    positive_accuracy: float
    bank_size: int
    chosen: Sequence[int] = ()


TRACE_HEADER = ["round", "learner", "accuracy", "positive_accuracy", "bank_size", "chosen"]


def write_trace(rows: Sequence[TraceRow], out=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in rows:
        w.writerow(
            [r.round, r.learner, f"{r.accuracy:.6f}", f"{r.positive_accuracy:.6f}", r.bank_size,
             " ".join(str(i) for i in r.chosen)]
        )
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text

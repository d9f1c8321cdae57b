"""Interest-function language: events, predicates, DNF formulas.

An interest function is a disjunction of interests; an interest is a
conjunction of predicates over one (activity, location) composite event.

Text format::

    (locUser = 3 & locDuration > 1 & activity = 0) | (locUser = 0 & activity = 2)

Join predicates relate a location field to an activity field and are
always stored with the location field on the left.  Numeric joins may carry
an integer offset, written ``locStart - actStart < 2``.
"""
from __future__ import annotations

import operator
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

ACT_FIELDS = ("actUser", "activity", "actStart", "actEnd", "actDuration")
LOC_FIELDS = ("locUser", "location", "locStart", "locEnd", "locDuration")
FIELDS = ACT_FIELDS + LOC_FIELDS
FIELD_INDEX = {f: i for i, f in enumerate(FIELDS)}
CATEGORICAL = frozenset({"actUser", "activity", "locUser", "location"})
NUMERIC = frozenset(FIELDS) - CATEGORICAL

OPS = ("=", "!=", "<", "<=", ">", ">=")
OP_INDEX = {o: i for i, o in enumerate(OPS)}
EQUALITY_OPS = ("=", "!=")
MIRROR = {"=": "=", "!=": "!=", "<": ">", "<=": ">=", ">": "<", ">=": "<="}
NEGATE = {"=": "!=", "!=": "=", "<": ">=", "<=": ">", ">": "<=", ">=": "<"}
_CMP = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}

# (location side, activity side), the pairings allowed by the grammar
JOIN_PAIRS = (
    ("locUser", "actUser"),
    ("locStart", "actStart"),
    ("locEnd", "actEnd"),
    ("locEnd", "actStart"),
    ("locStart", "actEnd"),
    ("locDuration", "actDuration"),
)
_JOIN_SET = frozenset(JOIN_PAIRS)

ACTIVITY_PRED = "activity-pred"
LOCATION_PRED = "location-pred"
JOIN_PRED = "join-pred"
_KIND_INDEX = {ACTIVITY_PRED: 0, LOCATION_PRED: 1, JOIN_PRED: 2}


class DSLError(ValueError):
    pass


class DSLSyntaxError(DSLError):
    def __init__(self, msg: str, pos: int):
        super().__init__(f"{msg} at position {pos}")
        self.pos = pos


class BoundsError(DSLError):
    """Formula exceeds the interest or conjunct bound."""


class DSLTypeError(DSLError, TypeError):
    """Ill-typed predicate, e.g. an order comparison on an id field."""


@dataclass(frozen=True, slots=True)
class ActivityEvent:
    user: int
    activity: int
    start: int
    end: int

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"activity event ends before it starts: {self}")


@dataclass(frozen=True, slots=True)
class LocationEvent:
    user: int
    location: int
    start: int
    end: int

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError(f"location event ends before it starts: {self}")


@dataclass(frozen=True, slots=True)
class CompositeEvent:
    activity: ActivityEvent
    location: LocationEvent
    id: int = 0

    @property
    def content(self) -> tuple:
        """Identity of the event ignoring its id."""
        a, l = self.activity, self.location
        return (a.user, a.activity, a.start, a.end, l.user, l.location, l.start, l.end)


def field_value(e: CompositeEvent, field: str) -> int:
    a, l = e.activity, e.location
    if field == "actUser":
        return a.user
    if field == "activity":
        return a.activity
    if field == "actStart":
        return a.start
    if field == "actEnd":
        return a.end
    if field == "actDuration":
        return a.end - a.start
    if field == "locUser":
        return l.user
    if field == "location":
        return l.location
    if field == "locStart":
        return l.start
    if field == "locEnd":
        return l.end
    if field == "locDuration":
        return l.end - l.start
    raise KeyError(field)


def columns(events: Sequence[CompositeEvent]) -> dict[str, np.ndarray]:
    """Columnar view of events, one int64 array per field."""
    raw = np.array([e.content for e in events], dtype=np.int64).reshape(-1, 8)
    cols = {
        "actUser": raw[:, 0],
        "activity": raw[:, 1],
        "actStart": raw[:, 2],
        "actEnd": raw[:, 3],
        "locUser": raw[:, 4],
        "location": raw[:, 5],
        "locStart": raw[:, 6],
        "locEnd": raw[:, 7],
    }
    cols["actDuration"] = cols["actEnd"] - cols["actStart"]
    cols["locDuration"] = cols["locEnd"] - cols["locStart"]
    return cols


def _side(field: str) -> str:
    return "act" if field in ACT_FIELDS else "loc"


@dataclass(frozen=True, slots=True)
class Predicate:
    """``lhs op rhs``; rhs is an int constant or a field of the other event.

    For numeric joins the comparison is ``lhs - rhs op offset``.
    """

    lhs: str
    op: str
    rhs: int | str
    offset: int = 0

    def __post_init__(self):
        if self.lhs not in FIELD_INDEX:
            raise DSLTypeError(f"unknown field {self.lhs!r}")
        if self.op not in OP_INDEX:
            raise DSLTypeError(f"unknown operator {self.op!r}")
        if self.lhs in CATEGORICAL and self.op not in EQUALITY_OPS:
            raise DSLTypeError(f"order comparison {self.op!r} on categorical field {self.lhs}")
        if isinstance(self.rhs, str):
            lhs, op, rhs, off = self.lhs, self.op, self.rhs, self.offset
            if rhs not in FIELD_INDEX:
                raise DSLTypeError(f"unknown field {rhs!r}")
            if _side(lhs) == "act":
                lhs, rhs, op, off = rhs, lhs, MIRROR[op], -off
            if (lhs, rhs) not in _JOIN_SET:
                raise DSLTypeError(f"{lhs} cannot be joined with {rhs}")
            if lhs in CATEGORICAL and off:
                raise DSLTypeError("offset on a categorical join")
            object.__setattr__(self, "lhs", lhs)
            object.__setattr__(self, "rhs", rhs)
            object.__setattr__(self, "op", op)
            object.__setattr__(self, "offset", int(off))
        else:
            if self.offset:
                raise DSLTypeError("offset is only meaningful for joins")
            if isinstance(self.rhs, (bool, np.bool_)) or not isinstance(self.rhs, (int, np.integer)):
                raise DSLTypeError(f"constant must be an integer, got {self.rhs!r}")
            object.__setattr__(self, "rhs", int(self.rhs))

    @property
    def kind(self) -> str:
        if isinstance(self.rhs, str):
            return JOIN_PRED
        return ACTIVITY_PRED if _side(self.lhs) == "act" else LOCATION_PRED

    @property
    def is_join(self) -> bool:
        return isinstance(self.rhs, str)

    def sort_key(self) -> tuple:
        if self.is_join:
            rhs = (1, FIELD_INDEX[self.rhs])
        else:
            rhs = (0, self.rhs)
        return (_KIND_INDEX[self.kind], FIELD_INDEX[self.lhs], rhs, self.offset, OP_INDEX[self.op])

    def __lt__(self, other: "Predicate") -> bool:
        return self.sort_key() < other.sort_key()

    def __str__(self) -> str:
        if self.is_join and self.offset:
            return f"{self.lhs} - {self.rhs} {self.op} {self.offset}"
        return f"{self.lhs} {self.op} {self.rhs}"

    def evaluate(self, e: CompositeEvent) -> bool:
        left = field_value(e, self.lhs)
        if self.is_join:
            return bool(_CMP[self.op](left - field_value(e, self.rhs), self.offset))
        return bool(_CMP[self.op](left, self.rhs))

    def mask(self, cols: Mapping[str, np.ndarray]) -> np.ndarray:
        left = cols[self.lhs]
        if self.is_join:
            return _CMP[self.op](left - cols[self.rhs], self.offset)
        return _CMP[self.op](left, self.rhs)


@dataclass(frozen=True, slots=True)
class Interest:
    conjuncts: tuple[Predicate, ...]

    def __post_init__(self):
        object.__setattr__(self, "conjuncts", tuple(self.conjuncts))
        if not self.conjuncts:
            raise DSLError("an interest needs at least one predicate")

    def __len__(self):
        return len(self.conjuncts)

    def __str__(self) -> str:
        return "(" + " & ".join(str(p) for p in self.conjuncts) + ")"

    def sort_key(self) -> tuple:
        return tuple(p.sort_key() for p in self.conjuncts)

    def evaluate(self, e: CompositeEvent) -> bool:
        return all(p.evaluate(e) for p in self.conjuncts)

    def mask(self, cols: Mapping[str, np.ndarray]) -> np.ndarray:
        out = self.conjuncts[0].mask(cols)
        for p in self.conjuncts[1:]:
            out = out & p.mask(cols)
        return out


@dataclass(frozen=True, slots=True)
class InterestFunction:
    disjuncts: tuple[Interest, ...]

    def __post_init__(self):
        object.__setattr__(self, "disjuncts", tuple(self.disjuncts))
        if not self.disjuncts:
            raise DSLError("an interest function needs at least one interest")

    def __len__(self):
        return len(self.disjuncts)

    def __str__(self) -> str:
        return format_interest_function(self)

    @property
    def max_conjuncts(self) -> int:
        return max(len(d) for d in self.disjuncts)

    def predicates(self) -> Iterable[Predicate]:
        for d in self.disjuncts:
            yield from d.conjuncts

    def check_bounds(self, max_interests: int | None = None, max_conjuncts: int | None = None):
        if max_interests is not None and len(self.disjuncts) > max_interests:
            raise BoundsError(f"{len(self.disjuncts)} interests exceed bound {max_interests}")
        if max_conjuncts is not None and self.max_conjuncts > max_conjuncts:
            raise BoundsError(f"{self.max_conjuncts} conjuncts exceed bound {max_conjuncts}")

    def evaluate(self, e: CompositeEvent) -> bool:
        return any(d.evaluate(e) for d in self.disjuncts)

    def mask(self, cols: Mapping[str, np.ndarray]) -> np.ndarray:
        out = self.disjuncts[0].mask(cols)
        for d in self.disjuncts[1:]:
            out = out | d.mask(cols)
        return out


def conj(*preds: Predicate) -> Interest:
    return Interest(tuple(preds))


def dnf(*interests: Interest | Sequence[Predicate]) -> InterestFunction:
    return InterestFunction(
        tuple(i if isinstance(i, Interest) else Interest(tuple(i)) for i in interests)
    )


def eval_predicate(p: Predicate, e: CompositeEvent) -> bool:
    return p.evaluate(e)


def eval_interest_function(f: InterestFunction, e: CompositeEvent) -> bool:
    return f.evaluate(e)


def canonicalize(f: InterestFunction) -> InterestFunction:
    """Sort and dedupe predicates and interests.  No subsumption pruning."""
    interests = {}
    for d in f.disjuncts:
        preds = tuple(sorted(set(d.conjuncts), key=Predicate.sort_key))
        interests[preds] = Interest(preds)
    ordered = sorted(interests.values(), key=Interest.sort_key)
    return InterestFunction(tuple(ordered))


def format_interest_function(f: InterestFunction) -> str:
    return " | ".join(str(d) for d in f.disjuncts)


# -- parsing ---------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op><=|>=|!=|=|<|>)|(?P<sym>[()&|\-]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise DSLSyntaxError(f"unexpected character {text[start]!r}", start)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, kind: str, value: str | None = None):
        tok = self.toks[self.i]
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value or kind
            raise DSLSyntaxError(f"expected {want!r}, found {tok[1] or 'end of input'!r}", tok[2])
        self.i += 1
        return tok

    def at(self, kind: str, value: str | None = None) -> bool:
        tok = self.toks[self.i]
        return tok[0] == kind and (value is None or tok[1] == value)

    def function(self) -> InterestFunction:
        interests = [self.interest()]
        while self.at("sym", "|"):
            self.take("sym", "|")
            interests.append(self.interest())
        self.take("eof")
        return InterestFunction(tuple(interests))

    def interest(self) -> Interest:
        if self.at("sym", "("):
            self.take("sym", "(")
            preds = self.conjunction()
            self.take("sym", ")")
        else:
            preds = self.conjunction()
        return Interest(tuple(preds))

    def conjunction(self) -> list[Predicate]:
        preds = [self.predicate()]
        while self.at("sym", "&"):
            self.take("sym", "&")
            preds.append(self.predicate())
        return preds

    def field(self) -> str:
        tok = self.take("name")
        if tok[1] not in FIELD_INDEX:
            raise DSLSyntaxError(f"unknown field {tok[1]!r}", tok[2])
        return tok[1]

    def integer(self) -> int:
        sign = 1
        if self.at("sym", "-"):
            self.take("sym", "-")
            sign = -1
        return sign * int(self.take("num")[1])

    def predicate(self) -> Predicate:
        start = self.peek()[2]
        lhs = self.field()
        minus = None
        if self.at("sym", "-"):
            self.take("sym", "-")
            minus = self.field()
        op = self.take("op")[1]
        try:
            if minus is not None:
                return Predicate(lhs, op, minus, self.integer())
            if self.at("name"):
                return Predicate(lhs, op, self.field())
            if self.at("num") or self.at("sym", "-"):
                return Predicate(lhs, op, self.integer())
        except DSLTypeError as exc:
            raise DSLSyntaxError(str(exc), start) from None
        tok = self.peek()
        raise DSLSyntaxError(f"expected a value or field, found {tok[1] or 'end of input'!r}", tok[2])


def parse_interest_function(
    text: str, max_interests: int | None = None, max_conjuncts: int | None = None
) -> InterestFunction:
    f = _Parser(text).function()
    f.check_bounds(max_interests, max_conjuncts)
    return f


def parse_predicate(text: str) -> Predicate:
    f = parse_interest_function(text)
    if len(f.disjuncts) != 1 or len(f.disjuncts[0]) != 1:
        raise DSLSyntaxError("expected a single predicate", 0)
    return f.disjuncts[0].conjuncts[0]

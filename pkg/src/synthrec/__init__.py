"""Learning user interests from rated composite events.

Interest functions are DNF formulas over activity/location predicates.  They
are synthesized from examples, decomposed into predicate features, and
weighted by a max-margin learner.
"""
from .datagen import DomainConfig, LabeledDataset, builtin_oracle
from .dsl import (
    ActivityEvent,
    CompositeEvent,
    InterestFunction,
    LocationEvent,
    Predicate,
    eval_interest_function,
    parse_interest_function,
)
from .features import PredicateBank, extract_predicates
from .learners import KINDS, LearnerConfig, LearnerState, learn_model
from .synth import Infeasible, SynthBounds, synthesize, synthesize_portfolio, verify_consistent

__version__ = "0.1.0"

__all__ = [
    "ActivityEvent",
    "CompositeEvent",
    "DomainConfig",
    "Infeasible",
    "InterestFunction",
    "KINDS",
    "LabeledDataset",
    "LearnerConfig",
    "LearnerState",
    "LocationEvent",
    "Predicate",
    "PredicateBank",
    "SynthBounds",
    "builtin_oracle",
    "eval_interest_function",
    "extract_predicates",
    "learn_model",
    "parse_interest_function",
    "synthesize",
    "synthesize_portfolio",
    "verify_consistent",
]

"""Command-line entry point.

Exit codes: 0 success, 2 when any cell or call is infeasible or timed out,
1 on usage errors.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import bench
from .datagen import (
    DomainConfig,
    LabeledDataset,
    builtin_oracle,
    inject_label_noise,
    label_events,
    sample_composite_events,
    sample_events,
    simulate_traces,
)
from .dsl import DSLError, parse_interest_function
from .learners import KINDS
from .synth import SynthBounds, SynthError, synthesize

EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _learners(text: str) -> tuple[str, ...]:
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [n for n in names if n not in KINDS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown learner(s) {bad}; choose from {', '.join(KINDS)}")
    return names


def _oracles(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad oracle list {text!r}") from None
    if not vals or any(v not in range(1, 7) for v in vals):
        raise argparse.ArgumentTypeError("oracles must be in 1..6")
    return vals


def _shared(p: argparse.ArgumentParser, learners: bool = True):
    p.add_argument("--oracle", type=_oracles, default=(1, 2, 3, 4, 5, 6), help="comma list of 1..6")
    if learners:
        p.add_argument("--learners", type=_learners, default=("hybrid", "ensemble"))
    p.add_argument("--users", type=int, default=5)
    p.add_argument("--locations", type=int, default=5)
    p.add_argument("--activities", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--budget", type=float, default=600.0, help="seconds per cell")
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="synthrec", description="Interest-function synthesis and hybrid learners.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="sample a labeled dataset as JSONL")
    _shared(g, learners=False)
    g.add_argument("--pos", type=int, default=100)
    g.add_argument("--neg", type=int, default=300)
    g.add_argument("--raw", type=int, default=0, help="draw N unfiltered events instead")

    s = sub.add_parser("synth", help="synthesize an interest function from a JSONL dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--max-interests", type=int, default=14)
    s.add_argument("--max-conjuncts", type=int, default=7)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--budget", type=float, default=60.0)

    for name, helptext in (("crossval", "k-fold cross-validation"), ("active", "active-learning curves")):
        c = sub.add_parser(name, help=helptext)
        _shared(c)
        c.add_argument("--folds", type=int, default=10)
        c.add_argument("--rounds", type=int, default=20)
        c.add_argument("--per-round", type=int, default=5)
        c.add_argument("--runs", type=int, default=10)
        c.add_argument("--test-size", type=int, default=10_000)

    x = sub.add_parser("explain", help="recover DNFs from hybrid support vectors")
    _shared(x, learners=False)
    x.add_argument("--test-size", type=int, default=10_000)

    e = sub.add_parser("eval", help="score an interest function against a dataset or oracle")
    e.add_argument("function")
    e.add_argument("--data", default=None, help="JSONL dataset; default is a fresh oracle sample")
    _shared(e, learners=False)
    e.add_argument("--test-size", type=int, default=10_000)
    return ap


def _domain(a) -> DomainConfig:
    try:
        return DomainConfig(users=a.users, locations=a.locations, activities=a.activities)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _emit(a, name: str, text: str):
    if a.out:
        os.makedirs(a.out, exist_ok=True)
        with open(os.path.join(a.out, name), "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _read(path: str) -> LabeledDataset:
    try:
        with open(path) as fh:
            return LabeledDataset.from_jsonl(fh.read())
    except OSError as exc:
        raise UsageError(str(exc)) from None


def cmd_gen_data(a) -> int:
    if len(a.oracle) != 1:
        raise UsageError("gen-data takes a single --oracle")
    dom = _domain(a)
    orc = builtin_oracle(a.oracle[0])
    traces = simulate_traces(dom, a.seed)
    if a.raw:
        ds = label_events(orc, sample_events(traces, a.raw, dom.mix, a.seed + 1, cfg=dom), extended=True)
    else:
        ds = sample_composite_events(traces, orc, a.pos, a.neg, dom.mix, a.seed + 1, extended=True, cfg=dom)
    if a.noise:
        ds = inject_label_noise(ds, a.noise, a.seed + 2)
    _emit(a, f"oracle{a.oracle[0]}.jsonl", ds.to_jsonl())
    return EXIT_OK


def cmd_synth(a) -> int:
    ds = _read(a.data)
    try:
        bounds = SynthBounds(a.max_interests, a.max_conjuncts)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        r = synthesize(LabeledDataset(ds.events, ds.labels), bounds, seed=a.seed, budget=a.budget)
    except SynthError as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print(r.function)
    return EXIT_OK


def _experiment(a, kind: str) -> bench.ExperimentConfig:
    dom = _domain(a)
    kw = dict(
        experiment=kind, oracles=a.oracle, domain=dom, noise_rate=a.noise, seed=a.seed, budget=a.budget,
        workers=a.workers, test_size=getattr(a, "test_size", 10_000),
    )
    if kind != "explain":
        kw.update(learners=a.learners, folds=a.folds, rounds=a.rounds, per_round=a.per_round, runs=a.runs)
    try:
        return bench.ExperimentConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_experiment(a, kind: str) -> int:
    rep = bench.run(_experiment(a, kind))
    if a.out:
        for p in rep.write(a.out):
            print(p)
    else:
        sys.stdout.write(rep.to_csv(rep.summary))
    return EXIT_FAILED if rep.failed else EXIT_OK


def cmd_eval(a) -> int:
    try:
        f = parse_interest_function(a.function)
    except DSLError as exc:
        raise UsageError(f"bad interest function: {exc}") from None
    if a.data:
        ds = _read(a.data)
    else:
        if len(a.oracle) != 1:
            raise UsageError("eval without --data needs a single --oracle")
        dom = _domain(a)
        traces = simulate_traces(dom, a.seed)
        ds = label_events(builtin_oracle(a.oracle[0]), sample_events(traces, a.test_size, dom.mix, a.seed + 1, cfg=dom))
    pred = np.where(f.mask(ds.cols), 1, -1)
    m = bench.compute_metrics(pred, ds.labels).as_dict()
    print(" ".join(f"{k}={v:.4f}" for k, v in m.items() if k in ("accuracy", "positive_accuracy", "negative_accuracy")))
    return EXIT_OK


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        if a.cmd == "gen-data":
            return cmd_gen_data(a)
        if a.cmd == "synth":
            return cmd_synth(a)
        if a.cmd == "eval":
            return cmd_eval(a)
        return cmd_experiment(a, a.cmd)
    except UsageError as exc:
        print(f"synthrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``mpt <subcommand> ...``."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .checkpoint import Checkpoint, average_checkpoints
from .checks import model_gradcheck, tiny_config
from .errors import ConfigurationError, MptError
from .experiment import (
    ExperimentConfig,
    ablation_csv,
    evaluate_model,
    load_experiment,
    model_from_checkpoint,
    run_ablation,
    soft_weights_csv,
    train_experiment,
)
from .multipass import ConnectionSpec, check_permutation, format_perm, parse_perm
from .search import (
    HammingSurrogate,
    SearchLedger,
    SearchPolicy,
    SearchSpace,
    ToyTaskEvaluator,
    enumerate_search,
    run_search,
)

logger = logging.getLogger("mpt")


def _out_dir(args, exp):
    return Path(args.out) if args.out else Path(exp.output_dir)


def cmd_train(args):
    exp = load_experiment(args.config)
    if args.seed is not None:
        exp = replace(exp, train=replace(exp.train, seed=args.seed))
    out = _out_dir(args, exp)
    model, results = train_experiment(exp, out_dir=out, max_steps=args.steps)
    last = f"{results[-1].loss:.6f}" if results else "n/a"
    print(f"trained {len(results)} steps, final loss {last}; wrote {out / 'loss.csv'}")
    return 0


def cmd_eval(args):
    ck = Checkpoint.load(args.checkpoint)
    model, exp = model_from_checkpoint(ck)
    if args.config:
        exp = load_experiment(args.config)
    if exp is None:
        raise ConfigurationError("checkpoint carries no task description; pass --config")
    beam = exp.decode.beam if args.beam is None else args.beam
    alpha = exp.decode.length_penalty if args.length_penalty is None else args.length_penalty
    regimes = ("first", "final") if args.regime == "both" else (args.regime,)
    report = {}
    for regime in regimes:
        report[regime] = evaluate_model(model, exp.task, regime, beam, alpha)
    print(json.dumps({"step": ck.step, "beam": beam, "length_penalty": alpha, **report}, indent=2))
    return 0


def cmd_gradcheck(args):
    if args.config:
        model_cfg = load_experiment(args.config).model
    else:
        model_cfg = tiny_config(args.connection, args.routing)
    report = model_gradcheck(model_cfg, seed=args.seed, h=args.h, tol=args.tol)
    if args.verbose:
        for line in report.lines():
            print(line)
    status = "PASS" if report.passed else "FAIL"
    print(f"max rel err {report.max_error:.3e} (tol {args.tol:.0e}, {len(report.errors)} tensors) {status}")
    return 0 if report.passed else 1


def _search_evaluator(args):
    if args.evaluator == "hamming":
        if args.target is None:
            raise ConfigurationError("--evaluator hamming needs --target")
        return HammingSurrogate(check_permutation(parse_perm(args.target), args.layers))
    exp = load_experiment(args.config) if args.config else ExperimentConfig()
    model = exp.model.replace(layers=args.layers, connection=ConnectionSpec.hard(tuple(range(args.layers))))
    train_cfg = exp.train if args.eval_steps is None else replace(exp.train, max_steps=args.eval_steps)
    return ToyTaskEvaluator(replace(exp, model=model, train=train_cfg))


def cmd_search(args):
    evaluator = _search_evaluator(args)
    ledger = SearchLedger(args.ledger)
    executor = ProcessPoolExecutor(args.workers) if args.workers > 1 else None
    try:
        if args.enumerate:
            ranked = enumerate_search(args.layers, evaluator, ledger, seed=args.seed, executor=executor)
        else:
            policy = SearchPolicy(args.coarse, args.fine, args.top_m, args.neighbors, args.seed)
            ranked = run_search(SearchSpace(args.layers), policy, evaluator, ledger, executor=executor)
    finally:
        if executor is not None:
            executor.shutdown()
    for entry in ranked[: args.show]:
        print(f"{format_perm(entry.perm)}\t{entry.score:.6g}\t{entry.phase}")
    print(f"{len(ledger)} permutations in ledger {args.ledger}")
    return 0


def cmd_ablate(args):
    exp = load_experiment(args.config)
    if args.steps is not None:
        exp = replace(exp, train=replace(exp.train, max_steps=args.steps))
    out = _out_dir(args, exp)
    rows = run_ablation(exp, out_dir=out / "runs" if args.keep_runs else None)
    text = ablation_csv(rows, exp)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_export_soft_weights(args):
    ck = Checkpoint.load(args.checkpoint)
    if "connection.logits" not in ck.params:
        raise ConfigurationError(f"{args.checkpoint}: model has no soft connection")
    text = soft_weights_csv(ck.params["connection.logits"])
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_average(args):
    paths = []
    for pattern in args.checkpoints:
        hits = sorted(glob.glob(pattern))
        if not hits:
            raise FileNotFoundError(f"no checkpoint matches {pattern}")
        paths.extend(hits)
    cks = sorted((Checkpoint.load(p) for p in dict.fromkeys(paths)), key=lambda c: c.step)[-args.k:]
    avg = average_checkpoints(cks)
    avg.save(args.out)
    print(f"averaged steps {[c.step for c in cks]} -> {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mpt", description="Multi-pass transformer workbench")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train from an experiment config")
    s.add_argument("config")
    s.add_argument("--steps", type=int, help="override train.max_steps")
    s.add_argument("--seed", type=int, help="override train.seed")
    s.add_argument("--out", help="output directory (default: config output_dir)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on its task's test split")
    s.add_argument("checkpoint")
    s.add_argument("--config", help="experiment config (default: the one stored in the checkpoint)")
    s.add_argument("--regime", choices=("first", "final", "both"), default="final")
    s.add_argument("--beam", type=int)
    s.add_argument("--length-penalty", type=float)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    s.add_argument("config", nargs="?", help="experiment config (default: built-in tiny model)")
    s.add_argument("--connection", choices=("none", "chained", "hard", "soft"), default="hard")
    s.add_argument("--routing", choices=("a", "b", "c", "d"), default="a")
    s.add_argument("--h", type=float, default=1e-6)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("search", help="coarse-to-fine search over hard permutations")
    s.add_argument("--layers", type=int, required=True)
    s.add_argument("--coarse", type=int, default=20)
    s.add_argument("--fine", type=int, default=20)
    s.add_argument("--top-m", type=int, default=2)
    s.add_argument("--neighbors", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ledger", default="search.jsonl")
    s.add_argument("--evaluator", choices=("toy", "hamming"), default="toy")
    s.add_argument("--target", help="hidden permutation for the hamming evaluator, e.g. 0,4,1,5,2,3")
    s.add_argument("--config", help="experiment config for the toy evaluator")
    s.add_argument("--eval-steps", type=int, help="training steps per toy evaluation")
    s.add_argument("--enumerate", action="store_true", help="score every permutation instead")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--show", type=int, default=5, help="print this many top entries")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("ablate", help="train and evaluate the standard variant set")
    s.add_argument("config")
    s.add_argument("--steps", type=int)
    s.add_argument("--out")
    s.add_argument("--keep-runs", action="store_true", help="keep per-variant checkpoints")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("export-soft-weights", help="write softmaxed soft-connection weights as CSV")
    s.add_argument("checkpoint")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export_soft_weights)

    s = sub.add_parser("average", help="average the last k checkpoints")
    s.add_argument("checkpoints", nargs="+", help="paths or glob patterns")
    s.add_argument("-k", type=int, default=5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_average)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MptError, OSError, FloatingPointError) as exc:
        print(f"mpt {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

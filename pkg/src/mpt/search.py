"""Coarse-to-fine random search over hard-connection permutations.

The space is the set of bijections on ``{0..N-1}`` (N! members rather than
N^N). A coarse phase scores uniformly sampled, never-repeated permutations;
the fine phase then scores single-swap neighbours of the best coarse
candidates only, leaving the neighbourhoods of poor candidates unexplored.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, DivergedError
from .experiment import evaluate_model, train_experiment
from .multipass import ConnectionSpec, check_permutation, format_perm, parse_perm

logger = logging.getLogger(__name__)

FAILED = float("-inf")


@dataclass(frozen=True)
class SearchSpace:
    n: int
    constrained: bool = True

    def size(self):
        return math.factorial(self.n) if self.constrained else self.n ** self.n

    def __iter__(self):
        if self.constrained:
            return itertools.permutations(range(self.n))
        return itertools.product(range(self.n), repeat=self.n)


@dataclass(frozen=True)
class SearchPolicy:
    coarse_budget: int = 20
    fine_budget: int = 20
    top_m: int = 2
    neighbors_per_candidate: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.coarse_budget < 0 or self.fine_budget < 0:
            raise ConfigurationError("search budgets must be >= 0")
        if self.fine_budget > 0 and self.top_m < 1:
            raise ConfigurationError("top_m must be >= 1 when fine_budget > 0")
        if self.neighbors_per_candidate < 0:
            raise ConfigurationError("neighbors_per_candidate must be >= 0")


@dataclass
class LedgerEntry:
    perm: tuple
    seed: int
    score: float
    phase: str
    timestamp: str = ""
    wall_time: float = 0.0
    status: str = "ok"
    parent: tuple | None = None

    def to_json(self):
        return json.dumps({
            "perm": format_perm(self.perm),
            "seed": self.seed,
            "score": self.score,
            "phase": self.phase,
            "status": self.status,
            "parent": None if self.parent is None else format_perm(self.parent),
            "wall_time": round(self.wall_time, 6),
            "timestamp": self.timestamp,
        })

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        parent = d.get("parent")
        return cls(
            perm=parse_perm(d["perm"]),
            seed=int(d["seed"]),
            score=float(d["score"]),
            phase=d["phase"],
            timestamp=d.get("timestamp", ""),
            wall_time=float(d.get("wall_time", 0.0)),
            status=d.get("status", "ok"),
            parent=None if parent is None else parse_perm(parent),
        )


def rank_key(entry):
    """Higher score first; equal scores resolve to the lexicographically smaller permutation."""
    return (-entry.score, entry.perm)


class SearchLedger:
    """Append-only record of evaluated permutations, optionally mirrored to a JSONL file."""

    def __init__(self, path=None):
        self.entries = []
        self._seen = set()
        self.path = None if path is None else Path(path)
        if self.path is not None and self.path.exists():
            for line in self.path.read_text().splitlines():
                if line.strip():
                    self._add(LedgerEntry.from_json(line))

    def _add(self, entry):
        check_permutation(entry.perm)
        if entry.perm in self._seen:
            raise ContractError(f"permutation {format_perm(entry.perm)} already evaluated")
        self._seen.add(entry.perm)
        self.entries.append(entry)

    def append(self, entry: LedgerEntry):
        self._add(entry)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(entry.to_json() + "\n")

    def __contains__(self, perm):
        return tuple(perm) in self._seen

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def phase(self, name):
        return [e for e in self.entries if e.phase == name]

    def ranked(self):
        return sorted(self.entries, key=rank_key)

    def best(self):
        ranked = self.ranked()
        return ranked[0] if ranked else None


def sample_permutation(rng, n, ledger=()):
    """Uniform draw among bijections on ``0..n-1`` not yet in ``ledger``; ``None`` when exhausted."""
    evaluated = ledger if isinstance(ledger, (set, frozenset, SearchLedger)) else set(map(tuple, ledger))
    total = math.factorial(n)
    if len(evaluated) >= total:
        return None
    # rejection is uniform over the remainder; fall back to enumeration once it gets crowded
    if len(evaluated) < total // 2:
        while True:
            perm = tuple(int(i) for i in rng.permutation(n))
            if perm not in evaluated:
                return perm
    remaining = [p for p in itertools.permutations(range(n)) if p not in evaluated]
    return remaining[int(rng.integers(len(remaining)))]


def swap_neighbors(perm):
    """All permutations one transposition away, in (i, j) position order."""
    perm = check_permutation(perm)
    out = []
    for i, j in itertools.combinations(range(len(perm)), 2):
        p = list(perm)
        p[i], p[j] = p[j], p[i]
        out.append(tuple(p))
    return out


def _evaluate(evaluator, perm, seed):
    start = time.perf_counter()
    try:
        score = float(evaluator(perm, seed))
        status = "ok" if math.isfinite(score) else "failed"
    except (DivergedError, FloatingPointError, ArithmeticError, ValueError, RuntimeError) as exc:
        logger.warning("evaluation of %s failed: %s", format_perm(perm), exc)
        score, status = FAILED, "failed"
    if status == "failed":
        score = FAILED
    return score, status, time.perf_counter() - start


def _run_batch(perms, evaluator, seed, executor):
    if executor is None:
        return [_evaluate(evaluator, p, seed) for p in perms]
    futures = [executor.submit(_evaluate, evaluator, p, seed) for p in perms]
    return [f.result() for f in futures]


def _record(ledger, perm, seed, result, phase, parent=None):
    score, status, wall = result
    ledger.append(LedgerEntry(
        perm=perm, seed=seed, score=score, phase=phase, status=status, wall_time=wall, parent=parent,
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    ))


def fine_candidates(ledger, policy, budget):
    """Unevaluated swap-neighbours of the ``top_m`` coarse entries, best parent first."""
    parents = sorted(ledger.phase("coarse"), key=rank_key)[: policy.top_m]
    picked, scheduled = [], set()
    for parent in parents:
        taken = 0
        for nb in sorted(swap_neighbors(parent.perm)):
            if len(picked) >= budget or taken >= policy.neighbors_per_candidate:
                break
            if nb in ledger or nb in scheduled:
                continue
            picked.append((nb, parent.perm))
            scheduled.add(nb)
            taken += 1
    return picked


def run_search(space: SearchSpace, policy: SearchPolicy, evaluator, ledger=None, eval_seed=None, executor=None):
    """Coarse random sampling followed by swap-neighbour refinement; returns the ranked entries.

    ``evaluator(perm, seed) -> score`` must be deterministic in its arguments;
    exceptions and non-finite scores are recorded as failures and still use
    budget. Entries already in ``ledger`` (for example loaded from a JSONL
    file) count against their phase budget and are never re-evaluated.
    ``executor`` (a ``concurrent.futures`` executor) evaluates each phase in
    parallel; the ledger is written only from this thread.
    """
    if not space.constrained:
        raise ConfigurationError("run_search explores the constrained (bijection) space only")
    ledger = SearchLedger() if ledger is None else ledger
    seed = policy.seed if eval_seed is None else eval_seed
    rng = np.random.default_rng(policy.seed)

    n_coarse = max(policy.coarse_budget - len(ledger.phase("coarse")), 0)
    todo, pending = [], set(ledger._seen)
    for _ in range(n_coarse):
        perm = sample_permutation(rng, space.n, pending)
        if perm is None:
            break
        pending.add(perm)
        todo.append(perm)
    for perm, result in zip(todo, _run_batch(todo, evaluator, seed, executor)):
        _record(ledger, perm, seed, result, "coarse")

    n_fine = max(policy.fine_budget - len(ledger.phase("fine")), 0)
    if n_fine:
        picked = fine_candidates(ledger, policy, n_fine)
        results = _run_batch([p for p, _ in picked], evaluator, seed, executor)
        for (perm, parent), result in zip(picked, results):
            _record(ledger, perm, seed, result, "fine", parent=parent)
    return ledger.ranked()


def enumerate_search(n, evaluator, ledger=None, seed=0, executor=None):
    """Score every bijection on ``0..n-1`` (lexicographic order); returns the ranked entries."""
    ledger = SearchLedger() if ledger is None else ledger
    todo = [p for p in itertools.permutations(range(n)) if p not in ledger]
    for perm, result in zip(todo, _run_batch(todo, evaluator, seed, executor)):
        _record(ledger, perm, seed, result, "enumerate")
    return ledger.ranked()


@dataclass(frozen=True)
class HammingSurrogate:
    """Score = minus the number of positions where a permutation differs from ``target``."""

    target: tuple

    def __call__(self, perm, seed=0):
        return float(-sum(a != b for a, b in zip(perm, self.target)))


@dataclass(frozen=True)
class ConstantEvaluator:
    value: float = 0.0

    def __call__(self, perm, seed=0):
        return self.value


@dataclass
class ToyTaskEvaluator:
    """Train a small hard-connection model for a fixed budget; score = held-out token accuracy.

    ``base`` is an :class:`~mpt.experiment.ExperimentConfig` whose connection is
    replaced by the candidate permutation.
    """

    base: object
    regime: str = "final"
    stats: dict = field(default_factory=dict)

    def __call__(self, perm, seed=0):
        model_cfg = self.base.model.replace(connection=ConnectionSpec.hard(perm))
        train_cfg = replace(self.base.train, seed=seed)
        exp = replace(self.base, model=model_cfg, train=train_cfg)
        model, _ = train_experiment(exp)
        metrics = evaluate_model(model, exp.task, self.regime, beam=1)
        return metrics["token_acc"]


def evaluate_candidate(perm, eval_config, seed=0, regime="final"):
    """Default candidate score: toy-task training under ``eval_config``, returns accuracy in [0, 1]."""
    check_permutation(perm, eval_config.model.layers)
    return ToyTaskEvaluator(eval_config, regime)(tuple(perm), seed)

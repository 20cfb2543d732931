"""Experiment configuration, train/evaluate helpers and the ablation report."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .decoding import DecodeConfig, beam_decode, greedy_decode_batch
from .errors import MptError, SchemaError
from .metrics import corpus_bleu, token_and_sequence_accuracy
from .model import MultiPassTransformer, count_params
from .multipass import ConnectionSpec, MptConfig, RoutingPattern
from .tasks import ToyTask
from .training import TrainConfig, train

logger = logging.getLogger(__name__)

BEST_SEARCHED_PERM = (0, 4, 1, 5, 2, 3)


@dataclass(frozen=True)
class ExperimentConfig:
    model: MptConfig = field(default_factory=MptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: ToyTask = field(default_factory=ToyTask)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    output_dir: str = "runs/default"

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "task": self.task.to_dict(),
            "decode": self.decode.to_dict(),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d):
        return parse_experiment(d)


# ---------------------------------------------------------------------------
# schema validation
# ---------------------------------------------------------------------------

def _check_value(path, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int) and not isinstance(default, bool):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise SchemaError(path, f"expected {type(default).__name__}, got {type(value).__name__} {value!r}")


def _section(cls, data, path, special=()):
    if not isinstance(data, dict):
        raise SchemaError(path, f"expected an object, got {type(data).__name__}")
    defaults = cls()
    names = {f.name for f in fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise SchemaError(f"{path}.{key}", "unknown key")
        if key not in special:
            default = getattr(defaults, key)
            if default is not None:
                _check_value(f"{path}.{key}", value, default)
    return data


def _build(factory, data, path):
    try:
        return factory(**data) if isinstance(factory, type) else factory(data)
    except (MptError, TypeError) as exc:
        raise SchemaError(path, str(exc)) from None


def parse_experiment(d) -> ExperimentConfig:
    """Validate a JSON-like dict into an :class:`ExperimentConfig`; unknown keys are errors."""
    if not isinstance(d, dict):
        raise SchemaError("<root>", "expected an object")
    allowed = {"model", "train", "task", "decode", "output_dir"}
    for key in d:
        if key not in allowed:
            raise SchemaError(key, "unknown key")
    task = _build(ToyTask, _section(ToyTask, d.get("task", {}), "task"), "task")
    train_cfg = _build(TrainConfig, _section(TrainConfig, d.get("train", {}), "train"), "train")
    decode = _build(DecodeConfig, _section(DecodeConfig, d.get("decode", {}), "decode"), "decode")
    model_d = dict(_section(MptConfig, d.get("model", {}), "model", special=("connection", "routing", "dec_layers")))
    if model_d.setdefault("vocab_size", task.vocab_size) != task.vocab_size:
        raise SchemaError("model.vocab_size", f"{model_d['vocab_size']} != task.vocab_size {task.vocab_size}")
    if "connection" in model_d and not isinstance(model_d["connection"], (dict, str)):
        raise SchemaError("model.connection", "expected an object or a kind string")
    if "routing" in model_d and model_d["routing"] not in ("a", "b", "c", "d"):
        raise SchemaError("model.routing", f"expected one of a, b, c, d, got {model_d['routing']!r}")
    model = _build(MptConfig.from_dict, model_d, "model")
    if model.max_len < task.max_len + 1:
        raise SchemaError("model.max_len", f"{model.max_len} is too short for targets of length {task.max_len} + EOS")
    output_dir = d.get("output_dir", "runs/default")
    if not isinstance(output_dir, str):
        raise SchemaError("output_dir", "expected a string")
    return ExperimentConfig(model=model, train=train_cfg, task=task, decode=decode, output_dir=output_dir)


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(str(path), f"invalid JSON: {exc}") from None
    return parse_experiment(data)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def train_experiment(exp: ExperimentConfig, out_dir=None, max_steps=None):
    """Initialise from ``train.seed`` and train; returns ``(model, step results)``."""
    train_cfg = exp.train if max_steps is None else replace(exp.train, max_steps=max_steps)
    model = MultiPassTransformer(exp.model, seed=train_cfg.seed)
    snapshot = replace(exp, train=train_cfg).to_dict()
    results = train(model, exp.task, train_cfg, out_dir=out_dir, extra_config={"experiment": snapshot})
    return model, results


def model_from_checkpoint(ck: Checkpoint):
    exp = parse_experiment(ck.config["experiment"]) if "experiment" in ck.config else None
    model_cfg = exp.model if exp is not None else MptConfig.from_dict(ck.config["model"])
    model = MultiPassTransformer(model_cfg)
    model.load_state_dict(ck.params)
    return model, exp


def evaluate_model(model, task: ToyTask, regime="final", beam=1, length_penalty=0.2, pairs=None):
    """Decode the held-out test split; returns token accuracy, sequence accuracy and BLEU."""
    pairs = task.heldout("test") if pairs is None else pairs
    srcs = [s for s, _ in pairs]
    refs = [t for _, t in pairs]
    max_len = task.max_len + 1
    if beam == 1:
        hyps = greedy_decode_batch(model, srcs, regime, max_len)
    else:
        cfg = DecodeConfig(beam=beam, length_penalty=length_penalty, max_len=max_len)
        hyps = [beam_decode(model, s, cfg, regime).output() for s in srcs]
    token_acc, seq_acc = token_and_sequence_accuracy(hyps, refs)
    return {"token_acc": token_acc, "seq_acc": seq_acc, "bleu": corpus_bleu(hyps, refs)}


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    model: MptConfig


def default_variants(base: MptConfig):
    """Baseline, chained, identity hard under routings a-d, the best searched permutation (N=6), soft."""
    n = base.layers
    passes = max(base.passes, 2)
    identity = tuple(range(n))
    out = [
        Variant("baseline", base.replace(connection=ConnectionSpec.none(), passes=1)),
        Variant("chained", base.replace(connection=ConnectionSpec.chained(), passes=passes)),
    ]
    for letter in "abcd":
        out.append(Variant(f"hard-identity({letter})", base.replace(
            connection=ConnectionSpec.hard(identity), passes=passes, routing=RoutingPattern.from_letter(letter))))
    if n == len(BEST_SEARCHED_PERM):
        out.append(Variant("hard-best", base.replace(
            connection=ConnectionSpec.hard(BEST_SEARCHED_PERM), passes=passes, routing=RoutingPattern.from_letter("a"))))
    out.append(Variant("soft", base.replace(
        connection=ConnectionSpec.soft(), passes=passes, routing=RoutingPattern.from_letter("a"))))
    return out


ABLATION_COLUMNS = [
    "variant", "connection", "routing", "passes", "params", "steps",
    "first_token_acc", "first_seq_acc", "first_bleu",
    "final_token_acc", "final_seq_acc", "final_bleu", "status",
]


def run_ablation(exp: ExperimentConfig, variants=None, out_dir=None):
    """Train and evaluate every variant under identical task, budget and seed.

    Each row reports parameter count and metrics for decoding from the first
    and from the final pass. A failing run is recorded in ``status`` and the
    table is still produced.
    """
    variants = default_variants(exp.model) if variants is None else variants
    rows = []
    for v in variants:
        row = {
            "variant": v.name,
            "connection": v.model.connection.label(),
            "routing": v.model.routing.letter if v.model.connection.connected else "-",
            "passes": v.model.passes,
            "params": count_params(v.model),
            "steps": exp.train.max_steps,
        }
        try:
            run_dir = None if out_dir is None else Path(out_dir) / v.name
            model, _ = train_experiment(replace(exp, model=v.model), out_dir=run_dir)
            for regime in ("first", "final"):
                m = evaluate_model(model, exp.task, regime, exp.decode.beam, exp.decode.length_penalty)
                for key, value in m.items():
                    row[f"{regime}_{key}"] = round(float(value), 6)
            row["status"] = "ok"
        except (MptError, FloatingPointError, ValueError) as exc:
            logger.warning("variant %s failed: %s", v.name, exc)
            row["status"] = f"failed: {exc}"
        rows.append(row)
    return rows


def ablation_csv(rows, exp: ExperimentConfig):
    buf = io.StringIO()
    buf.write(f"# task={exp.task.kind} steps={exp.train.max_steps} seed={exp.train.seed} "
              f"beam={exp.decode.beam} length_penalty={exp.decode.length_penalty} (score = logprob / length**alpha)\n")
    writer = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n", restval="")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def read_ablation_csv(text):
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def soft_weights_csv(logits):
    """Row-softmaxed connection weights as CSV: rows = outer layer k, columns = inner layer j."""
    w = np.asarray(logits, dtype=np.float64)
    w = np.exp(w - w.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["outer"] + [f"inner{j}" for j in range(w.shape[1])])
    for k, row in enumerate(w):
        writer.writerow([k] + [repr(float(x)) for x in row])
    return buf.getvalue()

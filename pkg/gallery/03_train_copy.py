"""Train a small two-pass model on the copy task and decode a few examples.

The default budget is short so the script finishes in under a minute; pass a
step count to train longer (2000 steps reaches near-perfect accuracy).

Run: python3 gallery/03_train_copy.py [steps]
"""
import sys
from dataclasses import replace

from mpt.decoding import greedy_decode_batch
from mpt.experiment import evaluate_model, load_experiment, train_experiment

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
exp = load_experiment("configs/copy.json")
exp = replace(exp, train=replace(exp.train, max_steps=steps))

model, history = train_experiment(exp)
print(f"trained {steps} steps; loss {history[0].loss:.3f} -> {history[-1].loss:.3f}")

metrics = evaluate_model(model, exp.task, "final", beam=1)
print(f"held-out token acc {metrics['token_acc']:.3f}, sequence acc {metrics['seq_acc']:.3f}, "
      f"BLEU {metrics['bleu']:.1f}")

pairs = exp.task.heldout()[:4]
for (src, tgt), out in zip(pairs, greedy_decode_batch(model, [s for s, _ in pairs])):
    print(f"  src {src}\n  out {out}  {'ok' if out == tgt else 'MISS'}")

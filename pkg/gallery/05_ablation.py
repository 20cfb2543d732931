"""Compare connection variants under one budget and print the ablation table.

Every variant shares task, seed and step count. Metrics are reported for
decoding from the first pass and from the final pass.

Run: python3 gallery/05_ablation.py
"""
from dataclasses import replace

from mpt.experiment import ablation_csv, load_experiment, run_ablation

exp = load_experiment("configs/tiny.json")
exp = replace(exp, train=replace(exp.train, max_steps=40))
rows = run_ablation(exp)
print(ablation_csv(rows, exp))

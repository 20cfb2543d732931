"""Greedy versus beam search on a hand-built step function.

The first token A looks best (0.5), but B (0.4) leads into confident
continuations. Greedy commits to A; a beam of two keeps B alive and wins.

Run: python3 gallery/06_decoding.py
"""
import math

import numpy as np

from mpt.decoding import beam_search, greedy_search
from mpt.tasks import EOS

V, A, B, C = 6, 3, 4, 5


def step(prefixes):
    rows = []
    for p in prefixes:
        row = np.full(V, -math.inf)
        gen = p[1:]
        if len(gen) == 3:
            row[EOS] = 0.0
        elif not gen:
            row[[A, B, C]] = np.log([0.5, 0.4, 0.1])
        elif gen[-1] == B:
            row[[A, B, C]] = np.log([0.05, 0.9, 0.05])
        else:
            row[[A, B, C]] = np.log([1 / 3] * 3)
        rows.append(row)
    return np.array(rows)


g = greedy_search(step, max_len=5)
print(f"greedy: {g.tokens} logprob {g.logprob:.3f}")
for k in (1, 2, 3):
    h = beam_search(step, beam=k, alpha=0.2, max_len=5)
    print(f"beam={k}: {h.tokens} logprob {h.logprob:.3f} score {h.score:.3f}")

"""Corpus BLEU and token / sequence accuracy over integer token sequences."""

from __future__ import annotations

import math
from collections import Counter

from .errors import ContractError


def ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references, max_n=4):
    """Corpus-level BLEU in [0, 100], single reference per hypothesis, no smoothing.

    Clipped n-gram matches and candidate n-gram totals are pooled over the
    corpus before taking the geometric mean; a zero precision at any order
    gives 0. Brevity penalty ``exp(1 - r / c)`` applies when ``c < r``.
    """
    hypotheses, references = list(hypotheses), list(references)
    if not hypotheses:
        raise ContractError("corpus_bleu needs at least one hypothesis")
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = ngrams(hyp, n), ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if ref_len == 0:
        raise ContractError("references are empty")
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def token_and_sequence_accuracy(hypotheses, references):
    """Position-wise token accuracy over reference tokens, and exact-match rate."""
    hypotheses, references = list(hypotheses), list(references)
    if not references:
        return 0.0, 0.0
    correct = total = exact = 0
    for hyp, ref in zip(hypotheses, references):
        total += len(ref)
        correct += sum(1 for i, t in enumerate(ref) if i < len(hyp) and hyp[i] == t)
        exact += list(hyp) == list(ref)
    token_acc = correct / total if total else 0.0
    return token_acc, exact / len(references)

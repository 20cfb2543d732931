"""Beam search with length-normalised scores, plus batched greedy decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .multipass import encoder_output_for_decode
from .tasks import BOS, EOS, PAD, collate
from .tensor import Tensor


@dataclass(frozen=True)
class DecodeConfig:
    beam: int = 4
    length_penalty: float = 0.2
    max_len: int = 32

    def __post_init__(self):
        if self.beam < 1:
            raise ConfigurationError(f"beam must be >= 1, got {self.beam}")
        if self.length_penalty < 0:
            raise ConfigurationError(f"length_penalty must be >= 0, got {self.length_penalty}")
        if self.max_len < 1:
            raise ConfigurationError("max_len must be >= 1")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Hypothesis:
    tokens: list  # generated ids, without BOS, including EOS when finished
    logprob: float
    score: float
    finished: bool

    @property
    def truncated(self):
        return not self.finished

    def output(self, eos=EOS):
        """Generated tokens with the trailing EOS stripped."""
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == eos else list(self.tokens)


def normalized_score(logprob, length, alpha):
    return logprob / (max(length, 1) ** alpha)


def beam_search(step_fn, beam=4, alpha=0.2, max_len=32, bos=BOS, eos=EOS):
    """Beam search over ``step_fn(prefixes) -> log-probs [len(prefixes), V]``.

    Each prefix starts with ``bos``. Candidates are ranked by cumulative
    log-probability (ties: lexicographically smaller sequence first); a
    candidate ending in ``eos`` leaves the beam as finished. Search stops once
    ``beam`` hypotheses have finished or ``max_len`` tokens were generated.
    The answer maximises ``logprob / length**alpha`` over finished hypotheses,
    falling back to live ones (flagged unfinished) if none finished.
    """
    if beam < 1:
        raise ConfigurationError("beam must be >= 1")
    live = [((bos,), 0.0)]
    finished = []
    for _ in range(max_len):
        logp = np.asarray(step_fn([list(p) for p, _ in live]), dtype=np.float64)
        cands = []
        for (prefix, base), row in zip(live, logp):
            for tok, lp in enumerate(row):
                if np.isfinite(lp):
                    cands.append((base + float(lp), prefix + (tok,)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for total, seq in cands[: max(beam - len(finished), 0)]:
            if seq[-1] == eos:
                finished.append((seq, total))
            else:
                live.append((seq, total))
        if not live or len(finished) >= beam:
            break
    pool = [(s, lp, True) for s, lp in finished] or [(s, lp, False) for s, lp in live]
    best = None
    for seq, lp, done in pool:
        gen = list(seq[1:])
        hyp = Hypothesis(gen, lp, normalized_score(lp, len(gen), alpha), done)
        if best is None or hyp.score > best.score or (hyp.score == best.score and hyp.tokens < best.tokens):
            best = hyp
    return best


def greedy_search(step_fn, max_len=32, bos=BOS, eos=EOS):
    """Argmax decoding; the reference for ``beam_search(..., beam=1)``."""
    seq, total = [bos], 0.0
    for _ in range(max_len):
        row = np.asarray(step_fn([seq]))[0]
        tok = int(np.argmax(row))
        total += float(row[tok])
        seq.append(tok)
        if tok == eos:
            return Hypothesis(seq[1:], total, total, True)
    return Hypothesis(seq[1:], total, total, False)


def _forbid_specials(logits):
    # padding and BOS are never valid outputs
    logits = logits.copy()
    logits[..., PAD] = -np.inf
    logits[..., BOS] = -np.inf
    return logits


def model_step_fn(model, src, regime="final"):
    """Step function for one source sentence: encodes once, re-runs the decoder on each prefix."""
    src = np.asarray(src, dtype=np.int64)[None, :]
    memory = encoder_output_for_decode(model.encode(src), regime)

    def step(prefixes):
        ids = np.asarray(prefixes, dtype=np.int64)
        mem = memory.data if ids.shape[0] == 1 else np.repeat(memory.data, ids.shape[0], axis=0)
        logits = _forbid_specials(model.decode(ids, Tensor(mem), np.repeat(src, ids.shape[0], axis=0)).data[:, -1, :])
        shifted = logits - logits.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    return step


def beam_decode(model, src, cfg: DecodeConfig = DecodeConfig(), regime="final"):
    max_len = min(cfg.max_len, model.config.max_len)
    return beam_search(model_step_fn(model, src, regime), cfg.beam, cfg.length_penalty, max_len)


def greedy_decode_batch(model, srcs, regime="final", max_len=32):
    """Batched greedy decoding of a list of source sequences; returns outputs without EOS."""
    batch = collate([(s, s) for s in srcs])
    memory = Tensor(encoder_output_for_decode(model.encode(batch.src), regime).data)
    n = len(srcs)
    max_len = min(max_len, model.config.max_len)
    seqs = np.full((n, 1), BOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for _ in range(max_len):
        logits = _forbid_specials(model.decode(seqs, memory, batch.src).data[:, -1, :])
        nxt = logits.argmax(axis=-1)
        nxt = np.where(done, PAD, nxt)
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    outs = []
    for row in seqs[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS, PAD):
                break
            toks.append(int(t))
        outs.append(toks)
    return outs

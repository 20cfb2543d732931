"""Synthetic sequence-to-sequence tasks standing in for translation data.

Token ids 0, 1 and 2 are reserved for padding, beginning and end of sequence;
content symbols are drawn from ``[3, vocab_size)``. Generation uses only
integer draws from numpy's PCG64 stream, so a seed yields the same data on
every platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3
TASK_KINDS = ("copy", "reverse", "sort")


@dataclass(frozen=True)
class ToyTask:
    kind: str = "copy"
    vocab_size: int = 16
    min_len: int = 3
    max_len: int = 12
    seed: int = 0
    test_size: int = 200
    valid_size: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.vocab_size <= N_SPECIAL:
            raise ConfigurationError(f"vocab_size must exceed {N_SPECIAL} reserved ids")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigurationError(f"bad length range [{self.min_len}, {self.max_len}]")

    def target(self, src):
        src = list(src)
        if self.kind == "copy":
            return src
        if self.kind == "reverse":
            return src[::-1]
        return sorted(src)

    def sample(self, rng, length):
        return [int(t) for t in rng.integers(N_SPECIAL, self.vocab_size, size=length)]

    def _stream(self, split):
        offsets = {"train": 0, "valid": 1, "test": 2}
        return np.random.default_rng([self.seed, offsets[split]])

    def heldout(self, split="test"):
        """Deterministic held-out ``(src, tgt)`` pairs; test excludes anything in valid."""
        size = self.test_size if split == "test" else self.valid_size
        rng = self._stream(split)
        taken = self.valid_keys() if split == "test" else set()
        pairs, seen = [], set()
        attempts = 0
        while len(pairs) < size:
            attempts += 1
            if attempts > 100 * size + 1000:
                raise ConfigurationError(f"could not draw {size} distinct {split} sequences")
            length = int(rng.integers(self.min_len, self.max_len + 1))
            src = tuple(self.sample(rng, length))
            if src in seen or src in taken:
                continue
            seen.add(src)
            pairs.append((list(src), self.target(src)))
        return pairs

    def valid_keys(self):
        return {tuple(s) for s, _ in self.heldout("valid")} if self.valid_size else set()

    def excluded(self):
        """Source sequences that training batches must never contain."""
        return self.valid_keys() | {tuple(s) for s, _ in self.heldout("test")}

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Batch:
    src: np.ndarray  # [B, Ls]
    tgt_in: np.ndarray  # [B, Lt], BOS-shifted decoder input
    tgt_out: np.ndarray  # [B, Lt], target followed by EOS
    src_pad: np.ndarray  # bool [B, Ls], True at padding
    tgt_pad: np.ndarray

    @property
    def n_tokens(self):
        return int((~self.tgt_pad).sum())

    def __len__(self):
        return self.src.shape[0]


def collate(pairs):
    """Pad ``(src, tgt)`` pairs into a :class:`Batch`."""
    b = len(pairs)
    ls = max(len(s) for s, _ in pairs)
    lt = max(len(t) for _, t in pairs) + 1
    src = np.full((b, ls), PAD, dtype=np.int64)
    tgt_in = np.full((b, lt), PAD, dtype=np.int64)
    tgt_out = np.full((b, lt), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = s
        tgt_in[i, : len(t) + 1] = [BOS, *t]
        tgt_out[i, : len(t) + 1] = [*t, EOS]
    return Batch(src, tgt_in, tgt_out, src == PAD, tgt_out == PAD)


def generate_batch(task: ToyTask, rng, tokens_per_batch, exclude=frozenset(), bucket_width=2):
    """Draw a length-bucketed training batch of roughly ``tokens_per_batch`` source tokens.

    One bucket ``[lo, lo + bucket_width)`` is chosen per batch so sequences of
    similar length travel together; sources in ``exclude`` are rejected.
    """
    lo = int(rng.integers(task.min_len, task.max_len + 1))
    hi = min(lo + bucket_width - 1, task.max_len)
    n = max(1, tokens_per_batch // hi)
    pairs = []
    while len(pairs) < n:
        length = int(rng.integers(lo, hi + 1))
        src = task.sample(rng, length)
        if tuple(src) in exclude:
            continue
        pairs.append((src, task.target(src)))
    return collate(pairs)


def batches(pairs, batch_size):
    for i in range(0, len(pairs), batch_size):
        yield pairs[i : i + batch_size]

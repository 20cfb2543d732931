"""Multi-pass encoder: the tied encoder stack evaluated several times with inter-pass connections.

Pass 0 is an ordinary encoder stack. Every later pass starts again from the
embedded source and runs the *same* layer parameters, except that layer ``k``
also receives an infusion built from the previous pass:

* hard connection ``perm``: the tapped feature of inner layer ``perm[k]``;
* soft connection: ``sum_j alpha[k, j] * tapped_j`` with ``alpha = softmax(w, axis=1)``.

The routing pattern picks the tap (module output or post-attention feature)
and where the infusion enters the outer layer (before or after the first
residual structure). A chained stack instead feeds each pass the previous
pass's final output and uses no infusions.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, LengthError
from .layers import embed_and_position, encoder_module_forward
from .tensor import Tensor

CONNECTION_KINDS = ("none", "chained", "hard", "soft")
LOSS_MODES = ("final", "sum", "random")
REGIMES = ("first", "final")


def format_perm(perm):
    return "[" + ",".join(str(int(i)) for i in perm) + "]"


def parse_perm(text):
    """Parse ``"[0,4,1]"`` or ``"0,4,1"`` into a tuple of ints."""
    if isinstance(text, (list, tuple)):
        return tuple(int(i) for i in text)
    body = text.strip().strip("[]").strip()
    if not body:
        return ()
    if not re.fullmatch(r"\s*-?\d+(\s*,\s*-?\d+)*\s*", body):
        raise ConfigurationError(f"cannot parse permutation {text!r}")
    return tuple(int(tok) for tok in body.split(","))


def check_permutation(perm, n=None):
    perm = tuple(int(i) for i in perm)
    n = len(perm) if n is None else n
    if len(perm) != n:
        raise ConfigurationError(f"permutation {format_perm(perm)} has length {len(perm)}, expected {n}")
    dupes = sorted(v for v, c in Counter(perm).items() if c > 1)
    out_of_range = sorted(v for v in perm if not 0 <= v < n)
    if dupes or out_of_range:
        parts = []
        if dupes:
            parts.append(f"duplicates {dupes}")
        if out_of_range:
            parts.append(f"out of range {out_of_range}")
        raise ConfigurationError(f"permutation {format_perm(perm)} is not a bijection on 0..{n - 1}: " + ", ".join(parts))
    return perm


@dataclass(frozen=True)
class ConnectionSpec:
    kind: str = "none"
    perm: tuple | None = None
    logits: tuple | None = None  # optional soft initial logits, rows = outer layer

    def __post_init__(self):
        if self.kind not in CONNECTION_KINDS:
            raise ConfigurationError(f"unknown connection kind {self.kind!r}")
        if self.kind == "hard":
            if self.perm is None:
                raise ConfigurationError("hard connection needs a permutation")
            object.__setattr__(self, "perm", check_permutation(self.perm))
        elif self.perm is not None:
            raise ConfigurationError(f"{self.kind} connection does not take a permutation")
        if self.logits is not None:
            if self.kind != "soft":
                raise ConfigurationError("only soft connections take logits")
            rows = tuple(tuple(float(v) for v in row) for row in self.logits)
            object.__setattr__(self, "logits", rows)

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def chained(cls):
        return cls("chained")

    @classmethod
    def hard(cls, perm):
        return cls("hard", perm=parse_perm(perm))

    @classmethod
    def soft(cls, logits=None):
        return cls("soft", logits=None if logits is None else np.asarray(logits).tolist())

    @property
    def connected(self):
        return self.kind in ("hard", "soft")

    def label(self):
        if self.kind == "hard":
            return f"hard{format_perm(self.perm)}"
        return self.kind

    def to_dict(self):
        d = {"kind": self.kind}
        if self.perm is not None:
            d["perm"] = list(self.perm)
        if self.logits is not None:
            d["logits"] = [list(r) for r in self.logits]
        return d

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, str):
            return cls(d)
        unknown = set(d) - {"kind", "perm", "logits"}
        if unknown:
            raise ConfigurationError(f"unknown connection keys {sorted(unknown)}")
        perm = d.get("perm")
        return cls(d.get("kind", "none"), perm=None if perm is None else parse_perm(perm), logits=d.get("logits"))


@dataclass(frozen=True)
class RoutingPattern:
    tap: str = "out"  # "out": module output; "mid": post-attention feature
    inject: str = "pre"  # "pre": before the residual split; "post": after attention add&norm

    _LETTERS = {("out", "pre"): "a", ("out", "post"): "b", ("mid", "pre"): "c", ("mid", "post"): "d"}

    def __post_init__(self):
        if (self.tap, self.inject) not in self._LETTERS:
            raise ConfigurationError(f"invalid routing tap={self.tap!r} inject={self.inject!r}")

    @classmethod
    def from_letter(cls, letter):
        for key, value in cls._LETTERS.items():
            if value == letter:
                return cls(*key)
        raise ConfigurationError(f"unknown routing pattern {letter!r}; expected one of a, b, c, d")

    @property
    def letter(self):
        return self._LETTERS[(self.tap, self.inject)]


@dataclass(frozen=True)
class MptConfig:
    d_model: int = 32
    heads: int = 4
    d_ff: int = 64
    layers: int = 2
    passes: int = 2
    vocab_size: int = 16
    max_len: int = 32
    dropout: float = 0.1
    connection: ConnectionSpec | None = None  # None: identity hard connection (the default MPT)
    routing: RoutingPattern = field(default_factory=RoutingPattern)
    loss_mode: str = "final"
    dec_layers: int | None = None

    def __post_init__(self):
        if self.connection is None:
            object.__setattr__(self, "connection", ConnectionSpec.hard(tuple(range(self.layers))))
        for name in ("d_model", "heads", "d_ff", "layers", "passes", "vocab_size", "max_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        conn = self.connection
        if conn.kind == "none" and self.passes != 1:
            raise ConfigurationError("connection 'none' is the plain single-pass encoder; set passes=1")
        if conn.kind != "none" and self.passes < 2:
            raise ConfigurationError(f"connection {conn.kind!r} needs passes >= 2, got {self.passes}")
        if conn.kind == "hard" and len(conn.perm) != self.layers:
            raise ConfigurationError(f"permutation length {len(conn.perm)} != layers {self.layers}")
        if conn.logits is not None and np.shape(conn.logits) != (self.layers, self.layers):
            raise ConfigurationError(f"soft logits shape {np.shape(conn.logits)} != ({self.layers}, {self.layers})")
        if self.dec_layers is not None and self.dec_layers < 1:
            raise ConfigurationError("dec_layers must be positive")

    @property
    def n_dec_layers(self):
        return self.layers if self.dec_layers is None else self.dec_layers

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {
            "d_model": self.d_model,
            "heads": self.heads,
            "d_ff": self.d_ff,
            "layers": self.layers,
            "passes": self.passes,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "dropout": self.dropout,
            "connection": self.connection.to_dict(),
            "routing": self.routing.letter,
            "loss_mode": self.loss_mode,
            "dec_layers": self.dec_layers,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "connection" in d:
            d["connection"] = ConnectionSpec.from_dict(d["connection"])
        if "routing" in d:
            r = d["routing"]
            d["routing"] = RoutingPattern.from_letter(r) if isinstance(r, str) else RoutingPattern(**r)
        return cls(**d)


@dataclass
class PassTrace:
    """Per-pass lists of post-attention (``mids``) and module-output (``outs``) features."""

    mids: list = field(default_factory=list)
    outs: list = field(default_factory=list)

    @property
    def passes(self):
        return len(self.outs)

    def final(self, p=-1):
        return self.outs[p][-1]


def soft_weights(logits):
    """Row-wise softmax of the connection logits; ``alpha[k, j]`` weights inner j into outer k."""
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise DimensionError(f"connection logits must be square, got shape {logits.shape}")
    return T.softmax(logits, axis=1)


def saturated_logits(perm, magnitude=1e4):
    """Logits whose softmax is numerically one-hot at ``(k, perm[k])``."""
    n = len(perm)
    w = np.zeros((n, n))
    w[np.arange(n), list(perm)] = magnitude
    return w


def harden(logits):
    """Nearest hard connection: the row-wise argmax, which must form a bijection."""
    w = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    return check_permutation(tuple(int(i) for i in w.argmax(axis=1)))


def _infusions(prev_taps, config, alpha):
    kind = config.connection.kind
    if kind == "hard":
        return [prev_taps[j] for j in config.connection.perm]
    n = len(prev_taps)
    stacked = T.stack(prev_taps, axis=0)
    flat = T.reshape(stacked, (n, -1))
    mixed = T.matmul(alpha, flat)
    shape = prev_taps[0].shape
    return [T.reshape(mixed[k], shape) for k in range(n)]


def run_passes(x0, layers_by_pass, config: MptConfig, mask=None, training=False, rng=None,
               connection_logits=None, passes=None):
    """Run ``passes`` encoder passes starting from the embedded source ``x0``.

    ``layers_by_pass[p]`` is the list of layer parameters for pass ``p``; a
    tied model hands the same list for every pass. Dropout masks are drawn
    from ``rng`` in execution order: pass by pass, layer by layer.
    """
    passes = config.passes if passes is None else passes
    kind = config.connection.kind
    routing = config.routing
    alpha = None
    if kind == "soft":
        if connection_logits is None:
            raise ConfigurationError("soft connection requires connection logits")
        alpha = soft_weights(connection_logits)
    trace = PassTrace()
    prev_taps = None
    for p in range(passes):
        layers = layers_by_pass[p]
        if len(layers) != config.layers:
            raise ConfigurationError(f"pass {p} has {len(layers)} layers, expected {config.layers}")
        x = trace.final(p - 1) if (kind == "chained" and p > 0) else x0
        infusions = [None] * config.layers
        if p > 0 and config.connection.connected:
            infusions = _infusions(prev_taps, config, alpha)
        mids, outs = [], []
        for k, layer in enumerate(layers):
            f = infusions[k]
            mid, x = encoder_module_forward(
                x,
                layer,
                config.heads,
                pre_infusion=f if routing.inject == "pre" else None,
                post_infusion=f if routing.inject == "post" else None,
                mask=mask,
                dropout_p=config.dropout,
                training=training,
                rng=rng,
                layer_index=k,
            )
            mids.append(mid)
            outs.append(x)
        trace.mids.append(mids)
        trace.outs.append(outs)
        prev_taps = outs if routing.tap == "out" else mids
    return trace


def padding_mask(src_ids, pad_id=0):
    """Key mask ``[..., 1, L]`` marking padded source positions."""
    ids = np.asarray(src_ids)
    return (ids == pad_id)[..., None, :]


def multipass_forward(src_ids, params, config: MptConfig, rng=None, training=False, pad_id=0, passes=None):
    """Embed ``src_ids`` and run the tied encoder for every pass; returns a :class:`PassTrace`."""
    src_ids = np.asarray(src_ids)
    if src_ids.shape[-1] > config.max_len:
        raise LengthError(f"source length {src_ids.shape[-1]} exceeds max_len {config.max_len}")
    mask = padding_mask(src_ids, pad_id) if (src_ids == pad_id).any() else None
    x0 = embed_and_position(src_ids, params.embedding, config.dropout, training, rng)
    n = config.passes if passes is None else passes
    return run_passes(x0, [params.encoder] * n, config, mask=mask, training=training, rng=rng,
                      connection_logits=params.connection_logits, passes=n)


def encoder_output_for_decode(trace: PassTrace, regime="final"):
    """Decoder memory: last layer of pass 0 (``"first"``) or of the last pass (``"final"``)."""
    if regime not in REGIMES:
        raise ConfigurationError(f"regime must be one of {REGIMES}, got {regime!r}")
    return trace.final(0) if regime == "first" else trace.final(-1)


def hard_equivalence_gap(params, perm, src_ids, config: MptConfig, magnitude=1e4, logits=None):
    """Max abs difference between hard ``perm`` and soft connections with saturated logits.

    Both runs use dropout off and the same parameters; a gap near zero shows
    that a hard connection is the one-hot limit of the soft family. Passing
    explicit ``logits`` measures the gap for any other soft setting.
    """
    perm = check_permutation(perm, config.layers)
    hard_cfg = config.replace(connection=ConnectionSpec.hard(perm), dropout=0.0)
    soft_cfg = config.replace(connection=ConnectionSpec.soft(), dropout=0.0)
    ids = np.asarray(src_ids)
    mask = padding_mask(ids) if (ids == 0).any() else None
    x0 = embed_and_position(ids, params.embedding)
    layers = [params.encoder] * config.passes
    hard = run_passes(x0, layers, hard_cfg, mask=mask)
    logits = Tensor(saturated_logits(perm, magnitude) if logits is None else logits)
    soft = run_passes(x0, layers, soft_cfg, mask=mask, connection_logits=logits)
    return float(np.max(np.abs(hard.final().data - soft.final().data)))

"""Objective variants, Adam with inverse-square-root schedule, and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .errors import ConfigurationError, ContractError, DivergedError
from .model import MultiPassTransformer
from .multipass import LOSS_MODES
from .tasks import PAD, ToyTask, generate_batch
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.0008
    warmup_steps: int = 200
    betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-9
    weight_decay: float = 0.0
    label_smoothing: float = 0.1
    tokens_per_batch: int = 512
    max_steps: int = 1000
    checkpoint_every: int = 100
    keep_checkpoints: int = 5
    accum_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.warmup_steps < 1:
            raise ConfigurationError("warmup_steps must be >= 1")
        if self.accum_steps < 1:
            raise ConfigurationError("accum_steps must be >= 1")
        if self.max_steps < 0 or self.tokens_per_batch < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("max_steps must be >= 0; tokens_per_batch and checkpoint_every >= 1")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigurationError(f"betas must be two values in [0, 1), got {self.betas}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_schedule(step, cfg: TrainConfig):
    """Linear warmup to ``base_lr`` at ``warmup_steps``, then decay as 1/sqrt(step)."""
    if step < 1:
        raise ContractError(f"learning-rate schedule is defined for step >= 1, got {step}")
    w = cfg.warmup_steps
    return cfg.base_lr * min(step / w, math.sqrt(w / step))


def smoothed_targets(targets, vocab_size, eps, pad_id=PAD):
    """Target distribution: 1 - eps on the true class, eps / (V - 1) elsewhere, zero rows at padding."""
    targets = np.asarray(targets)
    if vocab_size == 1:
        dist = np.ones(targets.shape + (1,))
    else:
        dist = np.full(targets.shape + (vocab_size,), eps / (vocab_size - 1))
        np.put_along_axis(dist, targets[..., None], 1.0 - eps, axis=-1)
    dist[targets == pad_id] = 0.0
    return dist


def label_smoothed_ce(logits, targets, eps=0.1, pad_id=PAD):
    """Mean smoothed cross-entropy over non-pad target positions."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape} do not align with targets {targets.shape}")
    n = int((targets != pad_id).sum())
    if n == 0:
        raise ContractError("every target position is padding")
    vocab = logits.shape[-1]
    if ((targets < 0) | (targets >= vocab)).any():
        raise ContractError(f"target ids outside [0, {vocab})")
    dist = Tensor(smoothed_targets(targets, vocab, eps, pad_id).astype(logits.dtype))
    logp = T.log_softmax(logits, axis=-1)
    return T.scale(T.tsum(T.mul(logp, dist)), -1.0 / n)


def pass_losses(model: MultiPassTransformer, batch, loss_mode, eps, rng=None, training=True):
    """Objective tensor plus the float loss of each pass that contributed to it.

    ``final`` decodes from the last pass, ``sum`` adds every pass's loss,
    ``random`` picks one pass per call from ``rng`` (drawn before dropout).
    """
    if loss_mode not in LOSS_MODES:
        raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}")
    passes = model.config.passes
    if loss_mode == "final":
        chosen = [passes - 1]
    elif loss_mode == "sum":
        chosen = list(range(passes))
    else:
        if rng is None:
            raise ConfigurationError("loss_mode 'random' needs a seeded generator")
        chosen = [int(rng.integers(passes))]
    trace = model.encode(batch.src, training=training, rng=rng)
    total, per_pass = None, {}
    for p in chosen:
        logits = model.decode(batch.tgt_in, trace.final(p), batch.src, training=training, rng=rng)
        loss = label_smoothed_ce(logits, batch.tgt_out, eps)
        per_pass[p] = loss.item()
        total = loss if total is None else T.add(total, loss)
    return total, per_pass


class Adam:
    """Adam with bias correction; updates arrays in place."""

    def __init__(self, named, betas=(0.9, 0.98), eps=1e-9, weight_decay=0.0):
        self.named = named
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in named.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in named.items()}

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.named.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}


@dataclass
class StepResult:
    step: int
    lr: float
    loss: float
    per_pass: dict = field(default_factory=dict)


def train_step(model, batches, optimizer: Adam, cfg: TrainConfig, step, loss_mode="final", rng=None):
    """One optimizer update over ``batches`` (a list of ``accum_steps`` micro-batches).

    Gradients of the tied encoder accumulate across passes through the tape
    and across micro-batches; each micro-batch loss is scaled by 1/len(batches).
    """
    if not isinstance(batches, (list, tuple)):
        batches = [batches]
    model.zero_grad()
    losses, per_pass = [], {}
    for batch in batches:
        total, pp = pass_losses(model, batch, loss_mode, cfg.label_smoothing, rng=rng, training=True)
        value = total.item()
        if not math.isfinite(value):
            raise DivergedError(step, value)
        T.scale(total, 1.0 / len(batches)).backward()
        losses.append(value)
        for p, v in pp.items():
            per_pass.setdefault(p, []).append(v)
    lr = lr_schedule(step, cfg)
    optimizer.step(lr)
    return StepResult(step, lr, float(np.mean(losses)), {p: float(np.mean(v)) for p, v in per_pass.items()})


def checkpoint_of(model, step, extra_config=None):
    config = {"model": model.config.to_dict()}
    if extra_config:
        config.update(extra_config)
    return Checkpoint(step=step, params=model.state_dict(), config=config)


def loss_csv_header(passes):
    return ["step", "lr", "loss"] + [f"loss_pass{p}" for p in range(passes)]


def loss_csv_row(result: StepResult, passes):
    row = [str(result.step), repr(result.lr), repr(result.loss)]
    row += [repr(result.per_pass[p]) if p in result.per_pass else "" for p in range(passes)]
    return row


def train(model: MultiPassTransformer, task: ToyTask, cfg: TrainConfig, out_dir=None, loss_mode=None,
          extra_config=None, callback=None):
    """Train on freshly generated batches of ``task`` for ``cfg.max_steps`` updates.

    Held-out sequences are excluded from training batches. With ``out_dir``
    set, writes ``loss.csv`` and ``ckpt_<step>.bin`` every ``checkpoint_every``
    steps (and at the end, including step 0 when ``max_steps == 0``). Returns
    the list of :class:`StepResult`.
    """
    loss_mode = model.config.loss_mode if loss_mode is None else loss_mode
    data_rng = np.random.default_rng([cfg.seed, 0])
    drop_rng = np.random.default_rng([cfg.seed, 1])
    exclude = task.excluded()
    optimizer = Adam(model.named_parameters(), cfg.betas, cfg.adam_eps, cfg.weight_decay)
    passes = model.config.passes
    out = Path(out_dir) if out_dir is not None else None
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(loss_csv_header(passes))
    results = []
    saved = []

    def save(step):
        if out is None:
            return
        path = out / f"ckpt_{step:06d}.bin"
        checkpoint_of(model, step, extra_config).save(path)
        saved.append(path)

    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        for step in range(1, cfg.max_steps + 1):
            micro = [generate_batch(task, data_rng, cfg.tokens_per_batch, exclude) for _ in range(cfg.accum_steps)]
            result = train_step(model, micro, optimizer, cfg, step, loss_mode, drop_rng)
            results.append(result)
            writer.writerow(loss_csv_row(result, passes))
            if callback is not None:
                callback(result)
            if step % 100 == 0:
                logger.info("step %d lr %.2e loss %.4f", step, result.lr, result.loss)
            if step % cfg.checkpoint_every == 0:
                save(step)
        if cfg.max_steps == 0 or cfg.max_steps % cfg.checkpoint_every:
            save(cfg.max_steps)
    finally:
        if out is not None:
            (out / "loss.csv").write_text(buf.getvalue())
    return results

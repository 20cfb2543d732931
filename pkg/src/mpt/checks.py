"""Whole-model verification routines: gradient checks, tying and DAG checks."""

from __future__ import annotations

import copy

import numpy as np

from .layers import embed_and_position, named_tensors
from .model import MultiPassTransformer, decoder_forward
from .multipass import ConnectionSpec, MptConfig, RoutingPattern, padding_mask, run_passes
from .tasks import collate
from .tensor import gradcheck, relative_error
from .training import label_smoothed_ce, pass_losses

TINY = dict(d_model=8, heads=2, d_ff=16, layers=3, passes=2, vocab_size=11, max_len=8, dropout=0.0)


def tiny_config(connection="hard", routing="a", **overrides):
    """The small model used for gradient checks; ``connection`` is 'none', 'chained', 'hard' or 'soft'."""
    params = {**TINY, **overrides}
    n = params["layers"]
    if connection == "hard":
        conn = ConnectionSpec.hard(tuple(np.random.default_rng(n).permutation(n)))
    elif connection == "soft":
        conn = ConnectionSpec.soft()
    elif connection == "none":
        conn = ConnectionSpec.none()
        params["passes"] = 1
    else:
        conn = ConnectionSpec.chained()
    return MptConfig(connection=conn, routing=RoutingPattern.from_letter(routing), **params)


def tiny_batch(config: MptConfig, length=5, batch=2, seed=0):
    """Random source/target pairs of ``length`` content tokens (the second source is one token shorter)."""
    rng = np.random.default_rng(seed)
    pairs = []
    for b in range(batch):
        n = max(length - b, 1)
        src = [int(t) for t in rng.integers(3, config.vocab_size, size=n)]
        tgt = [int(t) for t in rng.integers(3, config.vocab_size, size=n)]
        pairs.append((src, tgt))
    return collate(pairs)


def _randomize(model, seed):
    # off-default values so gains, biases and soft logits have informative gradients
    rng = np.random.default_rng(seed)
    for name, t in model.named_parameters().items():
        if name.endswith(("gain", "bias", "b1", "b2")) or name == "connection.logits":
            t.data[...] = t.data + rng.normal(0.0, 0.3, size=t.shape)


def model_gradcheck(config: MptConfig, seed=0, h=1e-6, tol=1e-4, loss_mode="final", batch=None):
    """Central-difference check of the full model loss w.r.t. every trainable parameter."""
    config = config.replace(dropout=0.0)
    model = MultiPassTransformer(config, seed=seed)
    _randomize(model, seed + 1)
    batch = tiny_batch(config, seed=seed) if batch is None else batch

    def f():
        total, _ = pass_losses(model, batch, loss_mode, eps=0.1, training=False)
        return total

    return gradcheck(f, model.named_parameters(), h=h, tol=tol)


def _loss_with_layers(model, layers_by_pass, batch):
    cfg = model.config
    x0 = embed_and_position(batch.src, model.params.embedding)
    mask = padding_mask(batch.src) if batch.src_pad.any() else None
    trace = run_passes(x0, layers_by_pass, cfg, mask=mask, connection_logits=model.params.connection_logits)
    logits = decoder_forward(batch.tgt_in, trace.final(), model.params, cfg, mask)
    return label_smoothed_ce(logits, batch.tgt_out, 0.1)


def tied_vs_untied_error(config: MptConfig, seed=0, batch=None):
    """Max relative error between tied encoder gradients and the sum over per-pass untied clones."""
    config = config.replace(dropout=0.0)
    model = MultiPassTransformer(config, seed=seed)
    batch = tiny_batch(config, seed=seed) if batch is None else batch

    model.zero_grad()
    _loss_with_layers(model, [model.params.encoder] * config.passes, batch).backward()
    tied = {n: t.grad.copy() for n, t in named_tensors(model.params.encoder, "encoder")}

    clones = [copy.deepcopy(model.params.encoder) for _ in range(config.passes)]
    for clone in clones:
        for _, t in named_tensors(clone):
            t.grad = None
    _loss_with_layers(model, clones, batch).backward()
    worst = 0.0
    for name, g in tied.items():
        # a clone whose copy of a tensor is unreachable from the loss contributes zero
        grads = [dict(named_tensors(c, "encoder"))[name].grad for c in clones]
        summed = sum(np.zeros_like(g) if cg is None else cg for cg in grads)
        worst = max(worst, relative_error(g, summed))
    return worst


def first_pass_unchanged(config: MptConfig, seed=0, batch=None):
    """True when pass 0 is bit-identical with and without the later passes."""
    model = MultiPassTransformer(config.replace(dropout=0.0), seed=seed)
    batch = tiny_batch(config, seed=seed) if batch is None else batch
    single = model.encode(batch.src, passes=1)
    full = model.encode(batch.src)
    return all(np.array_equal(a.data, b.data) for a, b in zip(single.outs[0], full.outs[0])) and all(
        np.array_equal(a.data, b.data) for a, b in zip(single.mids[0], full.mids[0])
    )

"""Parameter container and end-to-end forward passes for the multi-pass transformer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as Lyr
from .errors import CheckpointError
from .multipass import MptConfig, PassTrace, encoder_output_for_decode, multipass_forward, padding_mask
from .tensor import Tensor


@dataclass
class MptParams:
    embedding: Lyr.EmbeddingParams
    encoder: list
    decoder: list
    connection_logits: Tensor | None = None


def init_params(config: MptConfig, seed=0, dtype=np.float64) -> MptParams:
    """Initialise a fresh parameter set from ``seed`` (xavier-uniform projections, zero soft logits)."""
    rng = np.random.default_rng(seed)
    emb = Lyr.init_embedding(rng, config.vocab_size, config.d_model, config.max_len, dtype)
    enc = [Lyr.init_encoder_layer(rng, config.d_model, config.d_ff, dtype) for _ in range(config.layers)]
    dec = [Lyr.init_decoder_layer(rng, config.d_model, config.d_ff, dtype) for _ in range(config.n_dec_layers)]
    logits = None
    if config.connection.kind == "soft":
        init = np.zeros((config.layers, config.layers)) if config.connection.logits is None else config.connection.logits
        logits = Tensor(np.asarray(init, dtype=dtype), requires_grad=True)
    return MptParams(embedding=emb, encoder=enc, decoder=dec, connection_logits=logits)


def named_parameters(params: MptParams) -> dict:
    """Trainable tensors keyed by dotted name; the positional table is a constant and excluded."""
    named = {"embedding.tokens": params.embedding.tokens}
    named.update(Lyr.named_tensors(params.encoder, "encoder"))
    named.update(Lyr.named_tensors(params.decoder, "decoder"))
    if params.connection_logits is not None:
        named["connection.logits"] = params.connection_logits
    return named


def count_params(config: MptConfig) -> int:
    """Distinct trainable scalars implied by ``config``.

    Passes share one encoder stack, so hard and chained variants cost nothing
    extra; soft connections add one N x N logit matrix.
    """
    d, f = config.d_model, config.d_ff
    attention = 4 * d * d
    ffn = d * f + f + f * d + d
    norm = 2 * d
    enc_layer = attention + ffn + 2 * norm
    dec_layer = 2 * attention + ffn + 3 * norm
    total = config.vocab_size * d + config.layers * enc_layer + config.n_dec_layers * dec_layer
    if config.connection.kind == "soft":
        total += config.layers ** 2
    return total


def decoder_forward(tgt_in, memory, params: MptParams, config: MptConfig, memory_mask=None,
                    training=False, rng=None, pad_id=0):
    """Logits ``[..., L_t, V]`` for shifted target ids ``tgt_in`` attending to ``memory``."""
    tgt_in = np.asarray(tgt_in)
    x = Lyr.embed_and_position(tgt_in, params.embedding, config.dropout, training, rng)
    self_mask = Lyr.causal_mask(tgt_in.shape[-1])
    if (tgt_in == pad_id).any():
        self_mask = self_mask | (tgt_in == pad_id)[..., None, :]
    for layer in params.decoder:
        x = Lyr.decoder_layer_forward(x, memory, layer, config.heads, self_mask, memory_mask,
                                      config.dropout, training, rng)
    return Lyr.output_logits(x, params.embedding)


class MultiPassTransformer:
    """Convenience wrapper bundling a config with its parameters."""

    def __init__(self, config: MptConfig, params: MptParams | None = None, seed=0, dtype=np.float64):
        self.config = config
        self.params = init_params(config, seed, dtype) if params is None else params

    def named_parameters(self):
        return named_parameters(self.params)

    def num_parameters(self):
        return sum(t.size for t in self.named_parameters().values())

    def zero_grad(self):
        for t in self.named_parameters().values():
            t.grad = None

    def encode(self, src_ids, training=False, rng=None, passes=None) -> PassTrace:
        return multipass_forward(src_ids, self.params, self.config, rng=rng, training=training, passes=passes)

    def decode(self, tgt_in, memory, src_ids=None, training=False, rng=None):
        mask = None
        if src_ids is not None and (np.asarray(src_ids) == 0).any():
            mask = padding_mask(src_ids)
        return decoder_forward(tgt_in, memory, self.params, self.config, mask, training, rng)

    def logits(self, src_ids, tgt_in, regime="final"):
        """Dropout-free logits decoding from the chosen pass."""
        trace = self.encode(src_ids)
        return self.decode(tgt_in, encoder_output_for_decode(trace, regime), src_ids)

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def load_state_dict(self, state):
        named = self.named_parameters()
        missing = sorted(set(named) - set(state))
        extra = sorted(set(state) - set(named))
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, t in named.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise CheckpointError(f"parameter {name}: shape {arr.shape} != expected {t.shape}")
            t.data[...] = arr

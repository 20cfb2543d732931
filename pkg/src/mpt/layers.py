"""Transformer building blocks: attention, encoder modules, decoder layers, embeddings.

Every block is a plain function of its inputs and a parameter dataclass, so the
same parameter object can be evaluated any number of times (the multi-pass
encoder relies on this for weight tying). Sublayers are post-norm:
``out = LN(x + Dropout(Sublayer(x)))``.

Shapes are ``[L, d_model]`` or batched ``[B, L, d_model]``; masks are boolean
with ``True`` marking a disallowed key position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError, LengthError
from .tensor import Tensor

MASK_VALUE = -1e9


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class AttentionModuleParams:
    """One encoder layer: self-attention and FFN sublayers, each with its own norm."""

    attn: AttentionParams
    ffn: FeedForwardParams
    norm1: NormParams
    norm2: NormParams


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    src_attn: AttentionParams
    ffn: FeedForwardParams
    norm1: NormParams
    norm2: NormParams
    norm3: NormParams


@dataclass
class EmbeddingParams:
    """Shared token table plus a fixed (non-trainable) positional table."""

    tokens: Tensor
    positions: np.ndarray


def named_tensors(obj, prefix=""):
    """Yield ``(dotted_name, tensor)`` for every Tensor reachable through dataclass fields and lists."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_tensors(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def _xavier(rng, n_in, n_out, dtype):
    bound = math.sqrt(6.0 / (n_in + n_out))
    return Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_attention(rng, d_model, dtype=np.float64):
    return AttentionParams(*(_xavier(rng, d_model, d_model, dtype) for _ in range(4)))


def init_ffn(rng, d_model, d_ff, dtype=np.float64):
    return FeedForwardParams(
        w1=_xavier(rng, d_model, d_ff, dtype),
        b1=_zeros(d_ff, dtype),
        w2=_xavier(rng, d_ff, d_model, dtype),
        b2=_zeros(d_model, dtype),
    )


def init_norm(d_model, dtype=np.float64):
    return NormParams(gain=_ones(d_model, dtype), bias=_zeros(d_model, dtype))


def init_encoder_layer(rng, d_model, d_ff, dtype=np.float64):
    return AttentionModuleParams(
        attn=init_attention(rng, d_model, dtype),
        ffn=init_ffn(rng, d_model, d_ff, dtype),
        norm1=init_norm(d_model, dtype),
        norm2=init_norm(d_model, dtype),
    )


def init_decoder_layer(rng, d_model, d_ff, dtype=np.float64):
    return DecoderLayerParams(
        self_attn=init_attention(rng, d_model, dtype),
        src_attn=init_attention(rng, d_model, dtype),
        ffn=init_ffn(rng, d_model, d_ff, dtype),
        norm1=init_norm(d_model, dtype),
        norm2=init_norm(d_model, dtype),
        norm3=init_norm(d_model, dtype),
    )


def sinusoidal_table(max_len, d_model, dtype=np.float64):
    """Fixed positional table: even columns sin, odd columns cos, so row 0 is [0, 1, 0, 1, ...]."""
    pos = np.arange(max_len)[:, None]
    i = np.arange(0, d_model, 2)[None, :]
    angle = pos / np.power(10000.0, i / d_model)
    table = np.zeros((max_len, d_model), dtype=dtype)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


def init_embedding(rng, vocab_size, d_model, max_len, dtype=np.float64):
    tokens = Tensor(rng.normal(0.0, d_model ** -0.5, size=(vocab_size, d_model)).astype(dtype), requires_grad=True)
    return EmbeddingParams(tokens=tokens, positions=sinusoidal_table(max_len, d_model, dtype))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def causal_mask(length):
    """``True`` above the diagonal: position t may not look at positions > t."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def scaled_attention(q, k, v, mask=None):
    """softmax(Q Kᵀ / sqrt(d_K)) V with disallowed logits pushed to a large negative value."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key feature extents differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value lengths differ: {k.shape} vs {v.shape}")
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.all(axis=-1).any():
            raise ContractError("attention row with no allowed key positions")
        scores = T.add(scores, Tensor(np.where(mask, MASK_VALUE, 0.0).astype(scores.dtype)))
    return T.matmul(T.softmax(scores, axis=-1), v)


def _split_heads(x, heads):
    *lead, length, d_model = x.shape
    d_k = d_model // heads
    x = T.reshape(x, (*lead, length, heads, d_k))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.transpose(x, axes)


def _merge_heads(x):
    *lead, heads, length, d_k = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    x = T.transpose(x, axes)
    return T.reshape(x, (*lead, length, heads * d_k))


def multi_head_attention(x_q, x_kv, params: AttentionParams, heads, mask=None):
    d_model = x_q.shape[-1]
    if d_model % heads:
        raise ConfigurationError(f"d_model={d_model} is not divisible by heads={heads}")
    if x_kv.shape[-1] != d_model:
        raise DimensionError(f"query width {d_model} != key/value width {x_kv.shape[-1]}")
    q = _split_heads(T.matmul(x_q, params.wq), heads)
    k = _split_heads(T.matmul(x_kv, params.wk), heads)
    v = _split_heads(T.matmul(x_kv, params.wv), heads)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)[..., None, :, :]
    return T.matmul(_merge_heads(scaled_attention(q, k, v, mask)), params.wo)


def feed_forward(x, params: FeedForwardParams):
    hidden = T.relu(T.add(T.matmul(x, params.w1), params.b1))
    return T.add(T.matmul(hidden, params.w2), params.b2)


def _sublayer(x, y, norm: NormParams, p, training, rng):
    return T.layernorm(T.add(x, T.dropout(y, p, training, rng)), norm.gain, norm.bias)


# ---------------------------------------------------------------------------
# encoder and decoder layers
# ---------------------------------------------------------------------------

def encoder_module_forward(
    s_in,
    params: AttentionModuleParams,
    heads,
    pre_infusion=None,
    post_infusion=None,
    mask=None,
    dropout_p=0.0,
    training=False,
    rng=None,
    layer_index=None,
):
    """Run one encoder layer and return ``(S_mid, S_out)``.

    ``pre_infusion`` is added to the layer input before the self-attention
    residual split, so it also rides the identity path. ``post_infusion`` is
    added to ``S_mid`` (after the attention sublayer's add-and-norm) and only
    feeds the FFN sublayer. The returned ``S_mid`` excludes the post infusion.
    """
    for tag, inf in (("pre", pre_infusion), ("post", post_infusion)):
        if inf is not None and inf.shape != s_in.shape:
            where = f"layer {layer_index}" if layer_index is not None else "encoder layer"
            raise ConfigurationError(f"{where}: {tag} infusion shape {inf.shape} != input shape {s_in.shape}")
    x = s_in if pre_infusion is None else T.add(s_in, pre_infusion)
    attn = multi_head_attention(x, x, params.attn, heads, mask)
    mid = _sublayer(x, attn, params.norm1, dropout_p, training, rng)
    ffn_in = mid if post_infusion is None else T.add(mid, post_infusion)
    out = _sublayer(ffn_in, feed_forward(ffn_in, params.ffn), params.norm2, dropout_p, training, rng)
    return mid, out


def decoder_layer_forward(
    t_in,
    memory,
    params: DecoderLayerParams,
    heads,
    self_mask=None,
    memory_mask=None,
    dropout_p=0.0,
    training=False,
    rng=None,
):
    """Masked self-attention, attention over the encoder memory, then FFN."""
    if memory.shape[-1] != t_in.shape[-1]:
        raise ConfigurationError(f"memory width {memory.shape[-1]} != target width {t_in.shape[-1]}")
    if self_mask is None:
        self_mask = causal_mask(t_in.shape[-2])
    x = _sublayer(t_in, multi_head_attention(t_in, t_in, params.self_attn, heads, self_mask),
                  params.norm1, dropout_p, training, rng)
    x = _sublayer(x, multi_head_attention(x, memory, params.src_attn, heads, memory_mask),
                  params.norm2, dropout_p, training, rng)
    return _sublayer(x, feed_forward(x, params.ffn), params.norm3, dropout_p, training, rng)


# ---------------------------------------------------------------------------
# embeddings and output projection
# ---------------------------------------------------------------------------

def embed_and_position(ids, params: EmbeddingParams, dropout_p=0.0, training=False, rng=None):
    """sqrt(d_model) * token embedding + positional row, then dropout.

    The token table is shared with the output projection, hence the
    sqrt(d_model) factor to bring unit-scale rows in line with the positions.
    """
    ids = np.asarray(ids)
    length = ids.shape[-1]
    max_len, d_model = params.positions.shape
    if length > max_len:
        raise LengthError(f"sequence length {length} exceeds positional table length {max_len}")
    tok = T.scale(T.embed(ids, params.tokens), math.sqrt(d_model))
    x = T.add(tok, Tensor(params.positions[:length]))
    return T.dropout(x, dropout_p, training, rng)


def output_logits(decoder_out, params: EmbeddingParams):
    """Project onto the vocabulary with the transposed shared token table."""
    return T.matmul(decoder_out, T.swapaxes(params.tokens, 0, 1))

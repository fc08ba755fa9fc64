"""Bidirectional transformer encoder stack.

L identical blocks, each multi-head self-attention followed by a
position-wise feed-forward sublayer, with residual connections and
post-residual layer normalization. Attention is full (no causal mask):
every position sees every other, which is the point for curve data. The
leading output position carries the aggregate representation of the whole
sequence; the remaining positions carry per-token representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .input_layer import (
    ModelConfig,
    SequenceBatch,
    TokenSequence,
    INPUT_PARAM_SHAPES,
)

__all__ = [
    "EncoderOutput",
    "self_attention",
    "encoder_forward",
    "init_encoder_params",
    "count_parameters",
    "count_flops",
    "ENCODER_PARAM_SHAPES",
]

ATTENTION_MASK_BIAS = -1e30  # finite stand-in for -inf; exp() underflows to exactly 0


@dataclass
class EncoderOutput:
    """cls: aggregate H-vector(s); tokens: all positions, input order."""

    cls: Tensor  # [H] or [batch, H]
    tokens: Tensor  # [seq, H] or [batch, seq, H]


def self_attention(
    x: Tensor,
    layer_params: dict[str, Tensor],
    num_heads: int,
    attention_mask: np.ndarray | None = None,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
    training: bool = False,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention over all positions.

    ``x`` is [seq, H] or [batch, seq, H]. ``attention_mask`` is a boolean
    key-visibility vector ([seq] or [batch, seq], True = attend); masked
    keys receive a large negative score bias, excluding them exactly after
    the softmax. Heads are split H/A wide, concatenated, then output
    projected.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    b, s, h = x.shape
    if h % num_heads != 0:
        raise nm.ShapeError(f"H={h} is not divisible by {num_heads} heads")
    dh = h // num_heads

    def project(name):
        out = nm.matmul(x, layer_params[name + ".weight"]) + layer_params[name + ".bias"]
        return out.reshape(b, s, num_heads, dh).transpose((0, 2, 1, 3))  # [b, A, s, dh]

    q = project("attn.q")
    k = project("attn.k")
    v = project("attn.v")
    scores = nm.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if attention_mask is not None:
        mask = np.asarray(attention_mask, dtype=bool)
        bias = np.where(mask, 0.0, ATTENTION_MASK_BIAS)
        bias = bias.reshape((1, 1, 1, s) if mask.ndim == 1 else (b, 1, 1, s))
        scores = scores + nm.tensor(bias)
    weights = nm.softmax(scores, axis=-1)
    if training and dropout_p > 0.0:
        weights_used = nm.dropout(weights, dropout_p, rng, training=True)
    else:
        weights_used = weights
    ctx = nm.matmul(weights_used, v).transpose((0, 2, 1, 3)).reshape(b, s, h)
    out = nm.matmul(ctx, layer_params["attn.out.weight"]) + layer_params["attn.out.bias"]
    if squeeze:
        out = out.reshape(s, h)
    if return_weights:
        return out, weights
    return out


def _layer_slice(params: dict[str, Tensor], layer: int) -> dict[str, Tensor]:
    prefix = f"encoder.layer{layer}."
    return {name[len(prefix):]: p for name, p in params.items() if name.startswith(prefix)}


def encoder_forward(
    inputs: Tensor | TokenSequence | SequenceBatch,
    params: dict[str, Tensor],
    config: ModelConfig,
    attention_mask: np.ndarray | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Run the L-block stack; position 0 of the result is the aggregate vector.

    Dropout (attention weights and both sublayer outputs) is active only
    when ``training`` is set and needs ``rng``; evaluation is deterministic.
    """
    x = inputs if isinstance(inputs, Tensor) else inputs.embeddings
    if training and config.dropout > 0.0 and rng is None:
        raise ValueError("training-mode dropout needs an rng")
    for layer in range(config.L):
        lp = _layer_slice(params, layer)
        attn = self_attention(
            x,
            lp,
            config.A,
            attention_mask=attention_mask,
            dropout_p=config.dropout,
            rng=rng,
            training=training,
        )
        if training and config.dropout > 0.0:
            attn = nm.dropout(attn, config.dropout, rng, training=True)
        x = nm.layer_norm(x + attn, lp["ln1.gain"], lp["ln1.shift"])
        inner = nm.gelu(nm.matmul(x, lp["ffn.w1"]) + lp["ffn.b1"])
        ffn = nm.matmul(inner, lp["ffn.w2"]) + lp["ffn.b2"]
        if training and config.dropout > 0.0:
            ffn = nm.dropout(ffn, config.dropout, rng, training=True)
        x = nm.layer_norm(x + ffn, lp["ln2.gain"], lp["ln2.shift"])
    cls = x[:, 0, :] if x.ndim == 3 else x[0]
    return EncoderOutput(cls=cls, tokens=x)


# -- parameters -----------------------------------------------------------------


def ENCODER_PARAM_SHAPES(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, inner = config.H, config.ffn_inner
    shapes: dict[str, tuple[int, ...]] = {}
    for layer in range(config.L):
        p = f"encoder.layer{layer}."
        for proj in ("attn.q", "attn.k", "attn.v", "attn.out"):
            shapes[p + proj + ".weight"] = (h, h)
            shapes[p + proj + ".bias"] = (h,)
        shapes[p + "ffn.w1"] = (h, inner)
        shapes[p + "ffn.b1"] = (inner,)
        shapes[p + "ffn.w2"] = (inner, h)
        shapes[p + "ffn.b2"] = (h,)
        shapes[p + "ln1.gain"] = (h,)
        shapes[p + "ln1.shift"] = (h,)
        shapes[p + "ln2.gain"] = (h,)
        shapes[p + "ln2.shift"] = (h,)
    return shapes


def init_encoder_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Projections from N(0, 0.02^2), zero biases, identity layer norms."""
    params: dict[str, Tensor] = {}
    for name, shape in ENCODER_PARAM_SHAPES(config).items():
        if name.endswith((".weight", "ffn.w1", "ffn.w2")):
            value = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(("ln1.gain", "ln2.gain")):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = nm.tensor(value, requires_grad=True)
    return params


def count_parameters(config: ModelConfig, phase: str = "pretrain") -> int:
    """Exact trainable scalar count: embedding + encoder + active task heads.

    ``phase='pretrain'`` counts the block-reconstruction decoder plus the
    pair classifier the task variant uses (none for NCP-Null/NCP-OMCM);
    ``phase='finetune'`` counts the curve classifier instead.
    """
    total = sum(int(np.prod(s)) for s in INPUT_PARAM_SHAPES(config).values())
    total += sum(int(np.prod(s)) for s in ENCODER_PARAM_SHAPES(config).values())
    from .tasks import HEAD_PARAM_SHAPES  # local import; tasks depends on encoder types

    total += sum(int(np.prod(s)) for s in HEAD_PARAM_SHAPES(config, phase).values())
    return total


def count_flops(config: ModelConfig, seq_len: int | None = None, batch_size: int = 1) -> int:
    """Rough forward-pass FLOPs (2 per multiply-add), projections and attention only.

    The counting convention is approximate; treat results as order of
    magnitude. Defaults to the single-curve sequence length.
    """
    s = config.single_seq_length if seq_len is None else seq_len
    h, inner = config.H, config.ffn_inner
    per_layer = 2 * s * (4 * h * h) + 2 * s * (2 * h * inner) + 2 * (2 * s * s * h)
    return batch_size * config.L * per_layer

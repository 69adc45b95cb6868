"""Transformer building blocks shared by the encoders and the instance decoder.

Parameters live in flat ``{name: array}`` dicts; block functions look up
their weights by prefix so the same code serves every module.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import layer_norm, matmul, softmax

MASK_FILL = -1e9


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations (by resampling)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_linear(params, rng, name, d_in, d_out, std, bias=True):
    params[f"{name}.w"] = trunc_normal(rng, (d_in, d_out), std)
    if bias:
        params[f"{name}.b"] = np.zeros(d_out)


def init_norm(params, name, d):
    params[f"{name}.g"] = np.ones(d)
    params[f"{name}.b"] = np.zeros(d)


def init_block(params, rng, prefix, width, ffn, std):
    init_norm(params, f"{prefix}.ln1", width)
    for n in ("q", "k", "v", "o"):
        init_linear(params, rng, f"{prefix}.attn.{n}", width, width, std)
    init_norm(params, f"{prefix}.ln2", width)
    init_linear(params, rng, f"{prefix}.ffn.fc1", width, ffn, std)
    init_linear(params, rng, f"{prefix}.ffn.fc2", ffn, width, std)


def linear(x, p, name):
    y = matmul(x, p[f"{name}.w"])
    b = p.get(f"{name}.b")
    return y if b is None else y + b


def norm(x, p, name):
    return layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def multi_head_attention(x, p, prefix, heads: int, key_mask: np.ndarray | None = None):
    """Self-attention over axis 1 of ``x`` (batch, seq, width).

    ``key_mask`` is a boolean (batch, seq) array, True for real tokens.
    """
    b, s, w = x.shape
    dh = w // heads

    def split(t):
        return t.reshape(b, s, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(x, p, f"{prefix}.q"))
    k = split(linear(x, p, f"{prefix}.k"))
    v = split(linear(x, p, f"{prefix}.v"))
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    if key_mask is not None:
        scores = scores + np.where(key_mask, 0.0, MASK_FILL)[:, None, None, :]
    attn = softmax(scores, axis=-1)
    out = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, s, w)
    return linear(out, p, f"{prefix}.o")


def feed_forward(x, p, prefix):
    return linear(linear(x, p, f"{prefix}.fc1").gelu(), p, f"{prefix}.fc2")


def transformer_block(x, p, prefix, heads: int, key_mask=None):
    """Pre-norm block: x + MSA(LN(x)), then + FFN(LN(.))."""
    x = x + multi_head_attention(norm(x, p, f"{prefix}.ln1"), p, f"{prefix}.attn", heads, key_mask)
    return x + feed_forward(norm(x, p, f"{prefix}.ln2"), p, f"{prefix}.ffn")

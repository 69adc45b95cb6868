"""Prompt-conditioned instance queries and the slot-attention instance decoder.

Each block softly assigns visual tokens to queries (softmax over queries,
not tokens), pulls a weighted mean of the assigned token values into every
query's representation, then lets the queries exchange information through
multi-head self-attention and a feed-forward layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .encoders import InputError
from .layers import feed_forward, init_linear, init_norm, multi_head_attention, norm, trunc_normal
from .numerics import Tensor, as_tensor, l2_normalize, matmul, softmax

IMAGE, TEXT = 0, 1
MODALITIES = {"image": IMAGE, "text": TEXT}


@dataclass
class Prompt:
    embedding: np.ndarray
    modality: str = "text"
    is_positive: bool = False


@dataclass
class InstanceQuerySet:
    prompts: list[Prompt] | None
    queries: np.ndarray | Tensor  # (..., T, D)
    h0: np.ndarray  # zeros, same shape as queries


def init_decoder_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, std = cfg.embed_dim, cfg.init_std
    p = {
        "dec.pos": trunc_normal(rng, (cfg.num_queries, d), std),
        "dec.type": trunc_normal(rng, (2, d), std),
    }
    for i in range(cfg.dec_blocks):
        pre = f"dec.blocks.{i}"
        # std 0.02 leaves M uniform and every query row identical (a symmetric
        # saddle); the slot-attention maps start at unit gain instead
        for n in ("W_z", "W_q", "W_v", "W_o"):
            p[f"{pre}.{n}"] = trunc_normal(rng, (d, d), 1.0 / math.sqrt(d))
        if cfg.slot_norm:
            init_norm(p, f"{pre}.ln_z", d)
            init_norm(p, f"{pre}.ln_q", d)
        init_norm(p, f"{pre}.ln1", d)
        for n in ("q", "k", "v", "o"):
            init_linear(p, rng, f"{pre}.attn.{n}", d, d, std)
        init_norm(p, f"{pre}.ln2", d)
        init_linear(p, rng, f"{pre}.ffn.fc1", d, cfg.dec_ffn, std)
        init_linear(p, rng, f"{pre}.ffn.fc2", cfg.dec_ffn, d, std)
    return p


def compose_queries(prompt_emb, modality: np.ndarray, params):
    """q_t = prompt_t + pos_t + type[modality_t] for a (..., T, D) prompt stack."""
    prompt_emb = as_tensor(prompt_emb)
    t = prompt_emb.shape[-2]
    if t > params["dec.pos"].shape[0]:
        raise InputError(f"{t} prompts but only {params['dec.pos'].shape[0]} positional embeddings")
    pos = as_tensor(params["dec.pos"])[:t]
    typ = as_tensor(params["dec.type"])[np.asarray(modality, dtype=np.int64)]
    return prompt_emb + pos + typ


def build_queries(prompts: list[Prompt], params) -> InstanceQuerySet:
    dims = {np.asarray(pr.embedding).shape for pr in prompts}
    if len(dims) != 1:
        raise InputError(f"prompt embeddings have mixed shapes: {sorted(dims)}")
    d = params["dec.pos"].shape[1]
    if dims != {(d,)}:
        raise InputError(f"prompt embeddings must have dimension {d}")
    emb = np.stack([np.asarray(pr.embedding, dtype=np.float64) for pr in prompts])
    mod = np.array([MODALITIES[pr.modality] for pr in prompts])
    q = compose_queries(emb, mod, params)
    return InstanceQuerySet(prompts=list(prompts), queries=q.data, h0=np.zeros_like(q.data))


def slot_attention_step(z, q, h_prev, p, prefix: str):
    """One slot-attention update.

    Returns ``(M, H_mid)`` where M (..., N, T) is softmax over queries of
    (Z W_z)((Q + H) W_q)^T / sqrt(D), and H_mid = H + (weighted-mean of
    Z W_v under each column of M) W_o. When the block carries ``ln_z``/``ln_q``
    norms, Z and Q + H are layer-normalized first.
    """
    d = z.shape[-1]
    slots = as_tensor(q) + h_prev
    if f"{prefix}.ln_z.g" in p:
        z = norm(z, p, f"{prefix}.ln_z")
        slots = norm(slots, p, f"{prefix}.ln_q")
    keys = matmul(z, p[f"{prefix}.W_z"])
    qs = matmul(slots, p[f"{prefix}.W_q"])
    logits = matmul(keys, qs.swapaxes(-1, -2)) * (1.0 / math.sqrt(d))
    m = softmax(logits, axis=-1)
    values = matmul(z, p[f"{prefix}.W_v"])
    col_mass = m.sum(axis=-2)
    delta = matmul(m.swapaxes(-1, -2), values) / col_mass.reshape(*col_mass.shape, 1)
    return m, as_tensor(h_prev) + matmul(delta, p[f"{prefix}.W_o"])


def decoder_block(z, q, h_prev, p, prefix: str, heads: int):
    m, h = slot_attention_step(z, q, h_prev, p, prefix)
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    h = h + multi_head_attention(norm(h, p, f"{prefix}.ln1"), p, f"{prefix}.attn", heads)
    h = h + feed_forward(norm(h, p, f"{prefix}.ln2"), p, f"{prefix}.ffn")
    if squeeze:
        h = h.reshape(*h.shape[1:])
    return m, h


def decode_tensors(z, q, p, cfg: ModelConfig, return_all: bool = False):
    """Run the L decoder blocks from H^0 = 0.

    ``z`` is (B, N, D), ``q`` is (B, T, D). Returns L2-normalized H^L rows and
    the final block's assignment matrix (or every block's, if ``return_all``).
    """
    q = as_tensor(q)
    h = Tensor(np.zeros(q.shape))
    ms = []
    for i in range(cfg.dec_blocks):
        m, h = decoder_block(z, q, h, p, f"dec.blocks.{i}", cfg.dec_heads)
        ms.append(m)
    h = l2_normalize(h)
    return (h, ms) if return_all else (h, ms[-1])


def decode(encoded, queries: InstanceQuerySet, params, cfg: ModelConfig):
    """Single-sample convenience wrapper returning plain arrays (H_final, M_final)."""
    z = np.asarray(encoded.projected_tokens)[None]
    h, m = decode_tensors(z, np.asarray(queries.queries)[None], params, cfg)
    return h.data[0], m.data[0]

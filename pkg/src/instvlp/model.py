"""Parameter set of the full model and its groups."""

from __future__ import annotations

import hashlib

import numpy as np

from .config import ModelConfig
from .decoder import init_decoder_params
from .encoders import init_encoder_params, is_encoder_param
from .objectives import init_objective_params


def init_model(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    cfg.validate()
    enc_rng, dec_rng, head_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    params = init_encoder_params(cfg, enc_rng)
    params.update(init_decoder_params(cfg, dec_rng))
    params.update(init_objective_params(cfg.embed_dim, head_rng, cfg.init_std, cfg.tau_init))
    return params


def encoder_names(params) -> list[str]:
    return [k for k in params if is_encoder_param(k)]


def decoder_names(params) -> list[str]:
    return [k for k in params if k.startswith("dec.")]


def param_hash(params, names=None) -> str:
    h = hashlib.sha256()
    for k in sorted(names if names is not None else params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()

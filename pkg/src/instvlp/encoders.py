"""Image and text transformer encoders with projections into the joint space."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SOURCE_TAGS, ConfigError, ModelConfig
from .layers import init_block, init_linear, init_norm, linear, norm, transformer_block, trunc_normal
from .numerics import Tensor, concat, l2_normalize


class InputError(ValueError):
    pass


@dataclass
class ImageSample:
    grid_h: int
    grid_w: int
    patch_features: np.ndarray  # (grid_h * grid_w, d_in), row-major over the grid
    source_tag: str = "detail_page"
    box: tuple[int, int, int, int] | None = None  # ground truth, grid cells, [x1, y1, x2, y2)

    def __post_init__(self):
        self.patch_features = np.asarray(self.patch_features, dtype=np.float64)
        if self.patch_features.ndim == 3:
            self.patch_features = self.patch_features.reshape(-1, self.patch_features.shape[-1])
        n = self.grid_h * self.grid_w
        if n < 1 or self.patch_features.shape[0] != n:
            raise InputError(f"expected {n} patch vectors, got {self.patch_features.shape[0]}")
        if not np.all(np.isfinite(self.patch_features)):
            raise InputError("patch features must be finite")
        if self.source_tag not in SOURCE_TAGS:
            raise InputError(f"unknown source tag {self.source_tag!r}")

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class TextSample:
    token_ids: list[int]
    vocab_size: int = 256

    def __post_init__(self):
        self.token_ids = [int(t) for t in self.token_ids]
        if not self.token_ids:
            raise InputError("text must contain at least one token")
        bad = [t for t in self.token_ids if not 0 <= t < self.vocab_size]
        if bad:
            raise InputError(f"token ids out of range [0, {self.vocab_size}): {bad}")


@dataclass
class EncodedImage:
    v_cls: np.ndarray
    tokens: np.ndarray
    projected_cls: np.ndarray
    projected_tokens: np.ndarray


@dataclass
class EncodedText:
    w_cls: np.ndarray
    tokens: np.ndarray
    projected_cls: np.ndarray
    extra: dict = field(default_factory=dict)


ENCODER_PREFIXES = ("img.", "txt.")


def is_encoder_param(name: str) -> bool:
    return name.startswith(ENCODER_PREFIXES)


def init_encoder_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    std = cfg.init_std
    init_linear(p, rng, "img.patch", cfg.d_in, cfg.width, std)
    p["img.cls"] = trunc_normal(rng, (cfg.width,), std)
    p["img.pos"] = trunc_normal(rng, (cfg.num_tokens + 1, cfg.width), std)
    for i in range(cfg.enc_blocks):
        init_block(p, rng, f"img.blocks.{i}", cfg.width, cfg.enc_ffn, std)
    init_norm(p, "img.ln_f", cfg.width)
    init_linear(p, rng, "img.proj", cfg.width, cfg.embed_dim, std)

    p["txt.tok"] = trunc_normal(rng, (cfg.vocab_size, cfg.width), std)
    p["txt.pos"] = trunc_normal(rng, (cfg.max_text_len + 1, cfg.width), std)
    for i in range(cfg.enc_blocks):
        init_block(p, rng, f"txt.blocks.{i}", cfg.width, cfg.enc_ffn, std)
    init_norm(p, "txt.ln_f", cfg.width)
    init_linear(p, rng, "txt.proj", cfg.width, cfg.embed_dim, std)
    return p


def image_forward(p, feats, cfg: ModelConfig) -> dict:
    """Encode a batch of patch grids ``feats`` of shape (B, N, d_in).

    Returns Tensors: ``v_cls`` (B, width), ``tokens`` (B, N, width),
    ``cls`` = normalized g_I(v_cls) (B, D) and ``z`` = g_I(v_i) (B, N, D).
    """
    feats = np.asarray(feats, dtype=np.float64) if not isinstance(feats, Tensor) else feats
    b, n, d_in = feats.shape
    if n > cfg.num_tokens:
        raise ConfigError(f"image has {n} tokens, the encoder supports at most {cfg.num_tokens}")
    if d_in != cfg.d_in:
        raise ConfigError(f"patch feature dim {d_in} != configured d_in {cfg.d_in}")
    x = linear(feats, p, "img.patch")
    cls = p["img.cls"] if isinstance(p["img.cls"], Tensor) else Tensor(p["img.cls"])
    x = concat([cls.reshape(1, 1, cfg.width) * np.ones((b, 1, 1)), x], axis=1)
    x = x + p["img.pos"][: n + 1]
    for i in range(cfg.enc_blocks):
        x = transformer_block(x, p, f"img.blocks.{i}", cfg.enc_heads)
    x = norm(x, p, "img.ln_f")
    v_cls = x[:, 0]
    tokens = x[:, 1:]
    return {
        "v_cls": v_cls,
        "tokens": tokens,
        "cls": l2_normalize(linear(v_cls, p, "img.proj")),
        "z": linear(tokens, p, "img.proj"),
    }


def pad_texts(token_lists, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Prepend the reserved CLS id 0 and right-pad; returns (ids, mask)."""
    longest = max(len(t) for t in token_lists)
    if longest > cfg.max_text_len:
        raise InputError(f"text of length {longest} exceeds max_text_len={cfg.max_text_len}")
    ids = np.zeros((len(token_lists), longest + 1), dtype=np.int64)
    mask = np.zeros_like(ids, dtype=bool)
    for row, toks in enumerate(token_lists):
        toks = list(toks)
        if any(not 0 <= t < cfg.vocab_size for t in toks):
            raise InputError(f"token id out of range [0, {cfg.vocab_size})")
        ids[row, 1 : len(toks) + 1] = toks
        mask[row, : len(toks) + 1] = True
    return ids, mask


def text_forward(p, token_lists, cfg: ModelConfig, pos_ids: np.ndarray | None = None) -> dict:
    """Encode a batch of token-id lists. ``pos_ids`` overrides position rows (tests)."""
    ids, mask = pad_texts(token_lists, cfg)
    b, s = ids.shape
    tok = p["txt.tok"]
    tok = tok if isinstance(tok, Tensor) else Tensor(tok)
    x = tok[ids]
    pos = p["txt.pos"]
    pos = pos if isinstance(pos, Tensor) else Tensor(pos)
    x = x + (pos[pos_ids] if pos_ids is not None else pos[:s])
    for i in range(cfg.enc_blocks):
        x = transformer_block(x, p, f"txt.blocks.{i}", cfg.enc_heads, key_mask=mask)
    x = norm(x, p, "txt.ln_f")
    w_cls = x[:, 0]
    return {"w_cls": w_cls, "tokens": x[:, 1:], "mask": mask[:, 1:], "cls": l2_normalize(linear(w_cls, p, "txt.proj"))}


def encode_image(sample: ImageSample, params, cfg: ModelConfig) -> EncodedImage:
    out = image_forward(params, sample.patch_features[None], cfg)
    return EncodedImage(
        v_cls=out["v_cls"].data[0],
        tokens=out["tokens"].data[0],
        projected_cls=out["cls"].data[0],
        projected_tokens=out["z"].data[0],
    )


def encode_text(sample: TextSample, params, cfg: ModelConfig) -> EncodedText:
    if sample.vocab_size > cfg.vocab_size:
        raise InputError(f"text vocabulary {sample.vocab_size} exceeds encoder vocabulary {cfg.vocab_size}")
    out = text_forward(params, [sample.token_ids], cfg)
    return EncodedText(w_cls=out["w_cls"].data[0], tokens=out["tokens"].data[0], projected_cls=out["cls"].data[0])


def pair_similarity(img: EncodedImage, txt: EncodedText) -> float:
    """s(image, text): dot product of the normalized projected CLS vectors."""
    return float(np.dot(img.projected_cls, txt.projected_cls))


def encode_images_batched(params, samples, cfg: ModelConfig, batch: int = 64) -> dict[str, np.ndarray]:
    """Inference-only batched encoding; returns plain arrays ``cls`` and ``z``."""
    cls, z = [], []
    for i in range(0, len(samples), batch):
        feats = np.stack([s.patch_features for s in samples[i : i + batch]])
        out = image_forward(params, feats, cfg)
        cls.append(out["cls"].data)
        z.append(out["z"].data)
    return {"cls": np.concatenate(cls), "z": np.concatenate(z)}


def encode_texts_batched(params, token_lists, cfg: ModelConfig, batch: int = 128) -> np.ndarray:
    out = [text_forward(params, token_lists[i : i + batch], cfg)["cls"].data for i in range(0, len(token_lists), batch)]
    return np.concatenate(out)

"""Configuration records shared by data generation, training and evaluation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


SOURCE_TAGS = ("detail_page", "comment", "video_frame")
LOSS_NAMES = ("itc", "inter", "itm", "intra", "reg")
# the two pretext tasks and the loss terms each one owns
PRETEXT_GROUPS = {"inter": ("inter", "itm"), "intra": ("intra", "reg")}
PRETEXT_CHOICES = ("none", "inter", "intra", "both")


@dataclass
class ModelConfig:
    width: int = 64
    enc_blocks: int = 2
    enc_heads: int = 4
    enc_ffn: int = 128
    embed_dim: int = 64
    grid_h: int = 8
    grid_w: int = 8
    d_in: int = 16
    vocab_size: int = 256
    max_text_len: int = 16
    dec_blocks: int = 2
    num_queries: int = 6
    dec_heads: int = 4
    dec_ffn: int = 128
    slot_norm: bool = True
    init_std: float = 0.02
    tau_init: float = 0.07

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> None:
        for name in ("width", "enc_blocks", "enc_heads", "embed_dim", "grid_h", "grid_w", "d_in",
                     "vocab_size", "max_text_len", "dec_blocks", "num_queries", "dec_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.width % self.enc_heads:
            raise ConfigError("width must be divisible by enc_heads")
        if self.embed_dim % self.dec_heads:
            raise ConfigError("embed_dim must be divisible by dec_heads")

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        """ViT-B/16 and BERT-base sized encoders with a 6-block decoder."""
        return cls(width=768, enc_blocks=12, enc_heads=12, enc_ffn=3072, embed_dim=512, grid_h=14, grid_w=14,
                   d_in=768, vocab_size=30522, max_text_len=55, dec_blocks=6, num_queries=20, dec_heads=8,
                   dec_ffn=2048)


@dataclass
class GenConfig:
    grid_h: int = 8
    grid_w: int = 8
    d_in: int = 16
    num_categories: int = 20
    sources_per_product: int = 3
    noise: float = 0.3
    product_jitter: float = 0.5
    box_min: int = 2
    box_max: int = 4
    vocab_size: int = 256
    min_attr_tokens: int = 2
    max_attr_tokens: int = 5

    def validate(self) -> None:
        if self.box_min < 1 or self.box_max < self.box_min:
            raise ConfigError("box size range must satisfy 1 <= box_min <= box_max")
        if self.box_max > min(self.grid_h, self.grid_w):
            raise ConfigError(f"box_max={self.box_max} does not fit a {self.grid_h}x{self.grid_w} grid")
        if self.sources_per_product < 1:
            raise ConfigError("sources_per_product must be >= 1")
        if self.noise < 0 or self.product_jitter < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.vocab_size <= self.num_categories + 1:
            raise ConfigError("vocab_size must leave room for attribute tokens")
        if not 0 <= self.min_attr_tokens <= self.max_attr_tokens:
            raise ConfigError("attribute token range is empty")


@dataclass
class TrainConfig:
    batch_size: int = 16
    stage1_epochs: int = 10
    stage2_epochs: int = 5
    lr_encoder: float = 1e-3
    lr_rest: float = 3e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    warmup_steps: int = 50
    lr_decay: float = 0.85
    # the entropy term is unbounded below in the joint scale; 1/64 keeps it a regularizer
    loss_weights: dict = field(default_factory=lambda: {**{k: 1.0 for k in LOSS_NAMES}, "reg": 1 / 64})
    momentum: float = 0.99
    queue_size: int = 512
    text_prompt_prob: float = 0.5
    hard_negatives: bool = True
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (contrastive losses need in-batch negatives)")
        if set(self.loss_weights) != set(LOSS_NAMES):
            raise ConfigError(f"loss_weights must name exactly {LOSS_NAMES}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must lie in [0, 1]")
        if self.queue_size < 0:
            raise ConfigError("queue_size must be >= 0")
        self.model.validate()


def with_pretext(cfg: "TrainConfig", pretext: str) -> "TrainConfig":
    """Zero the weights of every pretext task not named by ``pretext``."""
    if pretext not in PRETEXT_CHOICES:
        raise ConfigError(f"pretext must be one of {PRETEXT_CHOICES}")
    keep = set(PRETEXT_GROUPS) if pretext == "both" else ({pretext} & set(PRETEXT_GROUPS))
    weights = dict(cfg.loss_weights)
    for task, terms in PRETEXT_GROUPS.items():
        if task not in keep:
            weights.update({t: 0.0 for t in terms})
    return dataclasses.replace(cfg, loss_weights=weights)


def _build(cls, data: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k == "model":
            v = _build(ModelConfig, v, f"{where}.model")
        elif k == "betas":
            v = tuple(float(b) for b in v)
        elif k == "loss_weights":
            v = {str(n): float(w) for n, w in v.items()}
        kwargs[k] = v
    return cls(**kwargs)


def train_config_from_dict(data: dict) -> TrainConfig:
    cfg = _build(TrainConfig, data, "config")
    cfg.validate()
    return cfg


def load_train_config(path) -> TrainConfig:
    return train_config_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def gen_config_from_dict(data: dict) -> GenConfig:
    cfg = _build(GenConfig, data, "gen config")
    cfg.validate()
    return cfg


def to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    if "betas" in d:
        d["betas"] = list(d["betas"])
    return d

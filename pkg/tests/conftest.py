import numpy as np
import pytest

from instvlp.config import ModelConfig
from instvlp.model import init_model


def small_model_config(**kw) -> ModelConfig:
    base = dict(width=16, enc_blocks=2, enc_heads=2, enc_ffn=24, embed_dim=8, grid_h=3, grid_w=3, d_in=4,
                vocab_size=20, max_text_len=6, dec_blocks=2, num_queries=4, dec_heads=2, dec_ffn=12)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def small_cfg():
    return small_model_config()


@pytest.fixture
def small_params(small_cfg):
    params = init_model(small_cfg, seed=7)
    # break the near-zero init so attention patterns and gradients are non-trivial
    rng = np.random.default_rng(11)
    return {k: v + 0.3 * rng.normal(size=v.shape) if k != "log_tau" else v for k, v in params.items()}


def tiny_gen_config(**kw):
    from instvlp.config import GenConfig

    base = dict(grid_h=3, grid_w=3, d_in=4, num_categories=4, sources_per_product=2, box_min=1, box_max=2,
                vocab_size=20, min_attr_tokens=1, max_attr_tokens=3)
    base.update(kw)
    return GenConfig(**base)


def tiny_train_config(**kw):
    from instvlp.config import TrainConfig

    base = dict(batch_size=4, stage1_epochs=2, stage2_epochs=2, warmup_steps=2, queue_size=8, seed=3,
                model=small_model_config())
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    from instvlp.synthdata import generate_dataset

    root = tmp_path_factory.mktemp("tiny")
    return generate_dataset(np.random.default_rng(0), 12, tiny_gen_config(), root, heldout=4)


def pytest_terminal_summary(terminalreporter):
    import re

    from acceptance_log import LINES, format_line

    if not LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in sorted(LINES, key=lambda r: (int(re.match(r"\d+", r[0]).group()), r[0])):
        terminalreporter.write_line(format_line(criterion, ok, detail))

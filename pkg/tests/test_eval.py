
import numpy as np
import pytest

from instvlp.config import TrainConfig
from instvlp.encoders import ImageSample, InputError, TextSample
from instvlp.eval_transfer import (
    BoxProposal,
    Model,
    bilinear_sample,
    box_mass_contrast,
    box_score,
    grounding_accuracy,
    grounding_score_map,
    image_text_retrieval,
    instance_representation,
    instance_representations,
    iou,
    metrics,
    product_retrieval,
    rank,
    rank_boxes,
    upsample,
    zero_shot_classify,
)
from instvlp.model import init_model

from conftest import small_model_config
from oracles import oracle_box_score, oracle_iou, oracle_metrics


# ---- metrics -------------------------------------------------------------


def test_metrics_trivial_cases():
    res = rank(np.array([[0.9, 0.1, 0.5]]))
    m = metrics(res, [{0}], ks=(1,))
    assert m["R@1"] == m["mAP@1"] == m["mAR@1"] == 1.0
    single = metrics(rank(np.array([[0.3]])), [{0}], ks=(1,))
    assert single["R@1"] == 1.0


def test_metrics_skip_empty_relevance(caplog):
    m = metrics(rank(np.array([[1.0, 0.0], [0.0, 1.0]])), [set(), {1}], ks=(1,))
    assert m["num_queries"] == 1 and m["R@1"] == 1.0
    assert "skipping 1" in caplog.text


def test_metrics_match_brute_force_on_1000_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_q = int(rng.integers(1, 8))
        n_g = int(rng.integers(1, 100 // n_q + 1))
        # coarse score grid so ties are common
        scores = rng.integers(0, 4, size=(n_q, n_g)).astype(float)
        relevance = [set(np.flatnonzero(rng.random(n_g) < rng.random()).tolist()) for _ in range(n_q)]
        ks = (1, int(rng.integers(1, n_g + 2)), 10)
        got = metrics(rank(scores), relevance, ks)
        want = oracle_metrics(scores, relevance, ks)
        for key, v in want.items():
            assert got[key] == v, key


def test_iou_matches_enumeration():
    rng = np.random.default_rng(1)
    assert iou(BoxProposal(0, 0, 2, 2), BoxProposal(0, 0, 2, 2)) == 1.0
    assert iou(BoxProposal(0, 0, 1, 1), BoxProposal(1, 1, 2, 2)) == 0.0
    for _ in range(1000):
        boxes = []
        for _ in range(2):
            x1, y1 = rng.integers(0, 9, size=2)
            boxes.append((int(x1), int(y1), int(x1 + rng.integers(1, 5)), int(y1 + rng.integers(1, 5))))
        assert iou(BoxProposal(*boxes[0]), BoxProposal(*boxes[1])) == float(oracle_iou(*boxes))


def test_grounding_accuracy_thresholds():
    gt = BoxProposal(0, 0, 4, 4)
    preds = [BoxProposal(0, 0, 4, 4), BoxProposal(0, 0, 4, 2), BoxProposal(5, 5, 6, 6)]
    out = grounding_accuracy(preds, [gt] * 3)
    assert out == {"Acc@0.5": 2 / 3, "Acc@0.7": 1 / 3}


# ---- boxes and score maps ------------------------------------------------


def test_box_ranking_closed_forms():
    ones = np.ones((8, 8))
    boxes = [BoxProposal(0, 0, 1, 1), BoxProposal(0, 0, 3, 3), BoxProposal(2, 2, 4, 6)]
    ranked = rank_boxes(ones, boxes)
    assert ranked[0][0] == boxes[1]
    assert ranked[0][1] == pytest.approx(3.0, abs=1e-12)
    patch = np.zeros((8, 8))
    patch[2:4, 2:4] = 1.0
    assert box_score(patch, BoxProposal(2, 2, 4, 4)) == 2.0
    assert box_score(patch, BoxProposal(5, 5, 7, 8)) == 0.0
    nested = [box_score(ones * 0.7, BoxProposal(0, 0, s, s)) for s in range(1, 9)]
    assert all(a < b for a, b in zip(nested, nested[1:]))


def test_box_ranking_matches_loop_oracle_and_scale_invariance():
    rng = np.random.default_rng(2)
    for _ in range(50):
        S = rng.normal(size=(8, 8))
        props = []
        for _ in range(6):
            x, y = rng.integers(0, 7, size=2)
            props.append(BoxProposal(int(x), int(y), int(x + rng.integers(1, 8 - x + 1)), int(y + rng.integers(1, 8 - y + 1))))
        ranked = rank_boxes(S, props)
        scores = [oracle_box_score(S, b) for b in props]
        for box, r in ranked:
            assert r == pytest.approx(scores[props.index(box)], abs=1e-12)
        assert [b for b, _ in ranked] == [props[i] for i in sorted(range(6), key=lambda i: -scores[i])]
        assert [b for b, _ in rank_boxes(S * 3.5, props)] == [b for b, _ in ranked]


def test_box_errors():
    with pytest.raises(InputError):
        BoxProposal(2, 0, 2, 3)
    with pytest.raises(InputError):
        rank_boxes(np.ones((4, 4)), [])
    with pytest.raises(InputError):
        box_score(np.ones((4, 4)), BoxProposal(0, 0, 5, 2))


def test_bilinear_identity_at_token_centers():
    rng = np.random.default_rng(3)
    grid = rng.normal(size=(5, 7))
    yy, xx = np.meshgrid(np.arange(5), np.arange(7), indexing="ij")
    np.testing.assert_array_equal(bilinear_sample(grid, yy, xx), grid)
    assert bilinear_sample(grid, 1.5, 2.0) == pytest.approx(0.5 * (grid[1, 2] + grid[2, 2]), abs=1e-15)
    up = upsample(grid, 4)
    assert up.shape == (20, 28)
    np.testing.assert_allclose(upsample(np.full((3, 3), 2.5), 4), 2.5, atol=0)


def test_box_mass_contrast():
    M = np.zeros((9, 2))
    M[[0, 1], 0] = 1.0
    M[:, 1] = 1.0 - M[:, 0]
    inside, outside = box_mass_contrast(M, (0, 0, 2, 1), grid_w=3)
    assert (inside, outside) == (1.0, 0.0)


# ---- model-driven heads ----------------------------------------------------


@pytest.fixture
def model():
    cfg = small_model_config()
    params = init_model(cfg, seed=5)
    rng = np.random.default_rng(6)
    params = {k: v + 0.2 * rng.normal(size=v.shape) for k, v in params.items()}
    ema = rng.normal(size=(cfg.num_queries, cfg.embed_dim))
    return Model(params, TrainConfig(model=cfg), ema, (1, 2))


def _images(rng, n, cfg):
    return [ImageSample(cfg.grid_h, cfg.grid_w, rng.normal(size=(9, cfg.d_in)), "comment", (0, 0, 2, 2)) for _ in range(n)]


def test_instance_representation_contract(model):
    cfg = model.mcfg
    rng = np.random.default_rng(7)
    (img,) = _images(rng, 1, cfg)
    text = TextSample([3, 4, 5], cfg.vocab_size)
    a = instance_representation(model, img, text, np.random.default_rng(1))
    b = instance_representation(model, img, text, np.random.default_rng(1))
    assert a.tobytes() == b.tobytes()
    assert abs(np.linalg.norm(a) - 1.0) <= 1e-12
    pool = rng.normal(size=(6, cfg.embed_dim))
    reps = {
        mode: instance_representation(model, img, text, np.random.default_rng(1), mode, negative_pool=pool)
        for mode in ("random", "text", "ema")
    }
    assert all(np.all(np.isfinite(v)) for v in reps.values())
    assert not np.allclose(reps["random"], reps["ema"])
    with pytest.raises(ValueError):
        instance_representation(model, img, text, rng, "bogus")
    with pytest.raises(InputError):
        instance_representation(model, img, text, rng, "text")


def test_batched_representations_match_single(model):
    cfg = model.mcfg
    rng = np.random.default_rng(8)
    imgs = _images(rng, 5, cfg)
    texts = [[1, 2], [3], [4, 5, 6], [7], [8, 9]]
    feats = np.stack([im.patch_features for im in imgs])
    batched = instance_representations(model, feats, texts, np.random.default_rng(0), "ema", batch=2)
    for i in range(5):
        single = instance_representation(model, imgs[i], TextSample(texts[i], cfg.vocab_size), None, "ema")
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_zero_shot_classify():
    rep = np.array([0.0, 1.0, 0.0])
    cats = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert zero_shot_classify(rep, cats) == 1
    assert zero_shot_classify(rep, cats * 7.0) == 1
    assert zero_shot_classify(np.zeros(3), cats) == 0
    rng = np.random.default_rng(9)
    reps, cats = rng.normal(size=(20, 4)), rng.normal(size=(6, 4))
    base = zero_shot_classify(reps, cats)
    # a strictly increasing transform of every similarity leaves the argmax unchanged
    np.testing.assert_array_equal(np.argmax(np.exp(2 * (reps @ cats.T)) - 3, axis=1), base)
    with pytest.raises(InputError):
        zero_shot_classify(rep, cats[:1])


def test_image_text_retrieval_matches_full_sort():
    rng = np.random.default_rng(10)
    img, txt = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    res = image_text_retrieval(img, txt)
    sim = img @ txt.T
    for q in range(7):
        assert list(res["i2t"].ranking[q]) == sorted(range(7), key=lambda g: (-sim[q, g], g))
        assert list(res["t2i"].ranking[q]) == sorted(range(7), key=lambda g: (-sim[g, q], g))
        assert np.all(np.diff(res["i2t"].scores[q]) <= 0)
    one = image_text_retrieval(img[:1], txt[:1])
    assert metrics(one["i2t"], [{0}], ks=(1,))["R@1"] == 1.0


def test_product_retrieval_rules():
    rng = np.random.default_rng(11)
    g = rng.normal(size=(6, 5))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    meta = [(0, 0), (1, 0), (2, 1), (3, 1), (4, 2), (5, 2)]
    res, fine = product_retrieval(g[[3]], g, [meta[3]], meta, "same_product")
    assert res.ranking[0][0] == 3
    _, coarse = product_retrieval(g[[3]], g, [meta[3]], meta, "same_category")
    assert fine[0] <= coarse[0] and coarse[0] == {2, 3}
    with pytest.raises(ValueError):
        product_retrieval(g, g, meta, meta, "same_color")


def test_score_map_constant_for_identical_tokens(model):
    cfg = model.mcfg
    params = dict(model.params, **{"img.pos": np.zeros_like(model.params["img.pos"])})
    flat = Model(params, model.config)
    feats = np.tile(np.random.default_rng(12).normal(size=cfg.d_in), (9, 1))
    img = ImageSample(cfg.grid_h, cfg.grid_w, feats, "comment")
    smap = grounding_score_map(flat, img, TextSample([2, 3], cfg.vocab_size), scale=4)
    assert smap.S.shape == (12, 12)
    np.testing.assert_allclose(smap.S, smap.S[0, 0], atol=1e-12)
    by_image = grounding_score_map(flat, img, img, scale=2)
    np.testing.assert_allclose(by_image.S, by_image.S[0, 0], atol=1e-12)

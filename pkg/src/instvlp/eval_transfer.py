"""Zero-shot transfer: classification, retrieval, grounding, and their metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import checkpoint as ckpt
from .config import TrainConfig, train_config_from_dict
from .decoder import TEXT, compose_queries, decode_tensors
from .encoders import InputError, encode_images_batched, encode_texts_batched, image_forward, text_forward
from .synthdata import Dataset, box_token_indices, category_text

log = logging.getLogger(__name__)

NEG_MODES = ("random", "text", "ema")


@dataclass
class Model:
    params: dict
    config: TrainConfig
    query_ema: np.ndarray | None = None
    completed: tuple = ()

    @property
    def mcfg(self):
        return self.config.model

    @property
    def has_decoder_training(self) -> bool:
        return 2 in self.completed


def load_model(path) -> Model:
    header, tensors = ckpt.load_checkpoint(path)
    cfg = train_config_from_dict(header["config"])
    params = {k[5:]: v for k, v in tensors.items() if k.startswith("base/")}
    return Model(params, cfg, tensors.get("query_ema"), tuple(header.get("completed", ())))


# ---- representations -----------------------------------------------------


def instance_representations(model: Model, feats: np.ndarray, texts, rng, neg_mode: str = "random",
                             negative_pool: np.ndarray | None = None, pool_owner=None, owners=None,
                             batch: int = 64, return_m: bool = False):
    """Positive-query representations h_0^L for a batch of image/text pairs.

    Slot 0 holds g_T(w_cls) of the pair's own text; slots 1..T-1 are
    negatives: standard-normal draws (``random``), other products' text
    embeddings from ``negative_pool`` (``text``), or the pretraining EMA of
    negative prompts (``ema``). All slots use the text type embedding.
    """
    if neg_mode not in NEG_MODES:
        raise ValueError(f"neg_mode must be one of {NEG_MODES}")
    m = model.mcfg
    n_q, d = m.num_queries, m.embed_dim
    feats = np.asarray(feats, dtype=np.float64)
    n = len(feats)
    txt = encode_texts_batched(model.params, list(texts), m)
    if neg_mode == "random":
        negs = rng.standard_normal((n, n_q - 1, d))
    elif neg_mode == "text":
        if negative_pool is None or len(negative_pool) < 1:
            raise InputError("neg_mode='text' needs a pool of negative text embeddings")
        negs = np.empty((n, n_q - 1, d))
        for i in range(n):
            allowed = np.arange(len(negative_pool))
            if owners is not None and pool_owner is not None:
                allowed = allowed[np.asarray(pool_owner) != owners[i]]
            negs[i] = negative_pool[rng.choice(allowed, size=n_q - 1, replace=len(allowed) < n_q - 1)]
    else:
        if model.query_ema is None:
            raise InputError("checkpoint carries no negative-query EMA")
        negs = np.broadcast_to(model.query_ema[1:n_q], (n, n_q - 1, d))
    prompts = np.concatenate([txt[:, None, :], negs], axis=1)
    modality = np.full((n, n_q), TEXT)
    hs, ms = [], []
    for i in range(0, n, batch):
        z = image_forward(model.params, feats[i : i + batch], m)["z"].data
        q = compose_queries(prompts[i : i + batch], modality[i : i + batch], model.params)
        h, mm = decode_tensors(z, q, model.params, m)
        hs.append(h.data[:, 0])
        ms.append(mm.data)
    h = np.concatenate(hs)
    return (h, np.concatenate(ms)) if return_m else h


def instance_representation(model: Model, image, text, rng, neg_mode: str = "random", **kw) -> np.ndarray:
    return instance_representations(model, image.patch_features[None], [text.token_ids], rng, neg_mode, **kw)[0]


# ---- classification ------------------------------------------------------


def zero_shot_classify(rep: np.ndarray, category_embs: np.ndarray) -> np.ndarray | int:
    """argmax over categories of rep . g_T(category text); lowest index wins ties."""
    category_embs = np.asarray(category_embs)
    if len(category_embs) < 2:
        raise InputError("zero-shot classification needs at least two categories")
    scores = np.asarray(rep) @ category_embs.T
    return np.argmax(scores, axis=-1) if scores.ndim > 1 else int(np.argmax(scores))


def category_embeddings(model: Model, num_categories: int) -> np.ndarray:
    return encode_texts_batched(model.params, [category_text(c) for c in range(num_categories)], model.mcfg)


# ---- retrieval -----------------------------------------------------------


@dataclass
class RetrievalResult:
    ranking: np.ndarray  # (n_queries, n_gallery) gallery indices, best first
    scores: np.ndarray  # matching scores, non-increasing along each row
    gallery_ids: np.ndarray | None = None

    def ranked_ids(self, q: int) -> list:
        ids = self.ranking[q] if self.gallery_ids is None else np.asarray(self.gallery_ids)[self.ranking[q]]
        return list(ids)


def rank(scores: np.ndarray, gallery_ids=None) -> RetrievalResult:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    order = np.argsort(-scores, axis=1, kind="stable")
    return RetrievalResult(order, np.take_along_axis(scores, order, axis=1), gallery_ids)


def image_text_retrieval(img_emb: np.ndarray, txt_emb: np.ndarray) -> dict[str, RetrievalResult]:
    sim = np.asarray(img_emb) @ np.asarray(txt_emb).T
    return {"i2t": rank(sim), "t2i": rank(sim.T)}


def relevance_sets(query_labels, gallery_labels) -> list[set[int]]:
    g = np.asarray(gallery_labels)
    return [set(np.flatnonzero(g == lab).tolist()) for lab in query_labels]


def product_retrieval(query_reps, gallery_reps, query_meta, gallery_meta, match_rule: str = "same_product"):
    """Cosine ranking of gallery items; ``*_meta`` are (product_id, category_id) pairs."""
    col = {"same_product": 0, "product": 0, "same_category": 1, "category": 1}.get(match_rule)
    if col is None:
        raise ValueError(f"unknown match rule {match_rule!r}")
    result = rank(np.asarray(query_reps) @ np.asarray(gallery_reps).T)
    rel = relevance_sets([mm[col] for mm in query_meta], [mm[col] for mm in gallery_meta])
    return result, rel


def metrics(result: RetrievalResult, relevance: list[set[int]], ks=(1, 5, 10)) -> dict[str, float]:
    """Recall@K, mAP@K and mAR@K, averaged over queries with non-empty relevance.

    AP@K sums precision@k at each relevant hit within the top K and divides by
    min(K, |relevant|); AR@K is the fraction of the relevant set found in the
    top K.
    """
    out: dict[str, float] = {}
    valid = [q for q, rel in enumerate(relevance) if rel]
    skipped = len(relevance) - len(valid)
    if skipped:
        log.warning("skipping %d queries with empty relevance sets", skipped)
    # exact rational accumulation, rounded once at the end
    for k in ks:
        rec = ap = ar = Fraction(0)
        for q in valid:
            rel = relevance[q]
            hits = 0
            prec_sum = Fraction(0)
            for pos, g in enumerate(result.ranking[q][:k], start=1):
                if int(g) in rel:
                    hits += 1
                    prec_sum += Fraction(hits, pos)
            rec += 1 if hits else 0
            ap += prec_sum / min(k, len(rel))
            ar += Fraction(hits, len(rel))
        n = max(len(valid), 1)
        out[f"R@{k}"] = float(rec / n)
        out[f"mAP@{k}"] = float(ap / n)
        out[f"mAR@{k}"] = float(ar / n)
    out["num_queries"] = len(valid)
    return out


# ---- grounding -----------------------------------------------------------


@dataclass(frozen=True)
class BoxProposal:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InputError(f"degenerate box {self.as_list()}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]

    def scaled(self, s: float) -> "BoxProposal":
        return BoxProposal(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)


@dataclass
class ScoreMap:
    S: np.ndarray  # (H, W) at output resolution
    grid_h: int
    grid_w: int

    @property
    def scale(self) -> float:
        return self.S.shape[0] / self.grid_h


def bilinear_sample(grid: np.ndarray, y, x) -> np.ndarray:
    """Sample ``grid`` at continuous token coordinates (token centers are integers).

    Coordinates outside the centers' hull clamp to the border.
    """
    gh, gw = grid.shape
    y = np.clip(np.asarray(y, dtype=np.float64), 0, gh - 1)
    x = np.clip(np.asarray(x, dtype=np.float64), 0, gw - 1)
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    wy = y - y0
    wx = x - x0
    top = grid[y0, x0] * (1 - wx) + grid[y0, x1] * wx
    bot = grid[y1, x0] * (1 - wx) + grid[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def upsample(grid: np.ndarray, scale: int) -> np.ndarray:
    """Bilinear resize; output pixel centers map back to token coordinates."""
    gh, gw = grid.shape
    ys = (np.arange(gh * scale) + 0.5) / scale - 0.5
    xs = (np.arange(gw * scale) + 0.5) / scale - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample(grid, yy, xx)


def token_scores(z: np.ndarray, prompt: np.ndarray) -> np.ndarray:
    return np.asarray(z) @ np.asarray(prompt)


def grounding_score_map(model: Model, image, prompt, scale: int = 4) -> ScoreMap:
    """Score map of a text (TextSample) or image (ImageSample) prompt over ``image``."""
    m = model.mcfg
    z = image_forward(model.params, image.patch_features[None], m)["z"].data[0]
    if hasattr(prompt, "token_ids"):
        emb = text_forward(model.params, [prompt.token_ids], m)["cls"].data[0]
    else:
        emb = image_forward(model.params, prompt.patch_features[None], m)["cls"].data[0]
    grid = token_scores(z, emb).reshape(image.grid_h, image.grid_w)
    return ScoreMap(upsample(grid, scale), image.grid_h, image.grid_w)


def pgm_bytes(S: np.ndarray) -> bytes:
    """Binary 8-bit portable graymap (P5), min-max normalized; a flat map is all zeros."""
    S = np.asarray(S, dtype=np.float64)
    lo, hi = float(S.min()), float(S.max())
    scaled = np.zeros_like(S) if hi <= lo else (S - lo) / (hi - lo) * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    return f"P5\n{S.shape[1]} {S.shape[0]}\n255\n".encode("ascii") + pixels.tobytes()


def box_score(S: np.ndarray, box: BoxProposal) -> float:
    """r(b): sum of S over the box cells divided by sqrt(area)."""
    h, w = S.shape
    if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
        raise InputError(f"box {box.as_list()} lies outside the {w}x{h} map")
    x1, y1, x2, y2 = (int(math.floor(box.x1)), int(math.floor(box.y1)), int(math.ceil(box.x2)), int(math.ceil(box.y2)))
    return float(S[y1:y2, x1:x2].sum() / math.sqrt(box.area))


def rank_boxes(S, proposals) -> list[tuple[BoxProposal, float]]:
    """Proposals sorted by descending r(b); ties keep input order."""
    if not proposals:
        raise InputError("rank_boxes needs at least one proposal")
    S = S.S if isinstance(S, ScoreMap) else np.asarray(S)
    scored = [(b, box_score(S, b)) for b in proposals]
    order = sorted(range(len(scored)), key=lambda i: -scored[i][1])
    return [scored[i] for i in order]


def iou(a: BoxProposal, b: BoxProposal) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def grounding_accuracy(preds, gts, thresholds=(0.5, 0.7)) -> dict[str, float]:
    ious = [iou(p, g) for p, g in zip(preds, gts)]
    return {f"Acc@{t}": float(np.mean([v >= t for v in ious])) if ious else 0.0 for t in thresholds}


def random_proposals(rng, grid_h: int, grid_w: int, n: int, box_min: int = 1, box_max: int | None = None):
    """Grid-aligned candidate boxes in token coordinates."""
    box_max = box_max or min(grid_h, grid_w)
    out = []
    for _ in range(n):
        w = int(rng.integers(box_min, box_max + 1))
        h = int(rng.integers(box_min, box_max + 1))
        x = int(rng.integers(0, grid_w - w + 1))
        y = int(rng.integers(0, grid_h - h + 1))
        out.append(BoxProposal(x, y, x + w, y + h))
    return out


def box_mass_contrast(M: np.ndarray, box, grid_w: int, r: int = 0) -> tuple[float, float]:
    """Mean assignment of query ``r`` over tokens inside vs outside ``box``."""
    inside = box_token_indices(box, grid_w)
    mask = np.zeros(M.shape[0], dtype=bool)
    mask[inside] = True
    col = M[:, r]
    return float(col[mask].mean()), float(col[~mask].mean())


# ---- dataset-level evaluation -------------------------------------------


def _eval_pairs(dataset: Dataset, source: int = 0):
    idx = [i for i in range(len(dataset)) if dataset.num_sources(i) > source]
    images = [dataset.image(i, source) for i in idx]
    texts = [dataset.records[i]["text"] for i in idx]
    return idx, images, texts


def _neg_kwargs(model: Model, dataset: Dataset, neg_mode: str):
    if neg_mode != "text":
        return {}
    texts = [r["text"] for r in dataset.records]
    pool = encode_texts_batched(model.params, texts, model.mcfg)
    return {"negative_pool": pool, "pool_owner": [r["product_id"] for r in dataset.records]}


def evaluate_classification(model: Model, dataset: Dataset, num_categories: int, rng, neg_mode="random") -> dict:
    idx, images, texts = _eval_pairs(dataset)
    feats = np.stack([im.patch_features for im in images])
    owners = [dataset.product_id(i) for i in idx]
    reps = instance_representations(model, feats, texts, rng, neg_mode, owners=owners,
                                    **_neg_kwargs(model, dataset, neg_mode))
    pred = zero_shot_classify(reps, category_embeddings(model, num_categories))
    truth = np.array([dataset.category(i) for i in idx])
    return {"Acc@1": float(np.mean(pred == truth)), "num_samples": len(idx), "chance": 1.0 / num_categories}


def evaluate_itc_retrieval(model: Model, dataset: Dataset, ks=(1, 5, 10)) -> dict:
    idx, images, texts = _eval_pairs(dataset)
    img = encode_images_batched(model.params, images, model.mcfg)["cls"]
    txt = encode_texts_batched(model.params, texts, model.mcfg)
    res = image_text_retrieval(img, txt)
    pids = [dataset.product_id(i) for i in idx]
    rel = relevance_sets(pids, pids)
    return {"i2t": metrics(res["i2t"], rel, ks), "t2i": metrics(res["t2i"], rel, ks)}


def evaluate_product_retrieval(model: Model, dataset: Dataset, rng, match_rule="same_product", neg_mode="random",
                               ks=(1, 5, 10)) -> dict:
    """Queries: source 0 of every product. Gallery: all remaining sources."""
    q_idx, q_images, q_texts = _eval_pairs(dataset, 0)
    g_images, g_texts, g_meta = [], [], []
    for i in range(len(dataset)):
        for s in range(1, dataset.num_sources(i)):
            g_images.append(dataset.image(i, s))
            g_texts.append(dataset.records[i]["text"])
            g_meta.append((dataset.product_id(i), dataset.category(i)))
    if not g_images:
        raise InputError("product retrieval needs products with at least two sources")
    negkw = _neg_kwargs(model, dataset, neg_mode)
    q_meta = [(dataset.product_id(i), dataset.category(i)) for i in q_idx]
    q = instance_representations(model, np.stack([x.patch_features for x in q_images]), q_texts, rng, neg_mode,
                                 owners=[mm[0] for mm in q_meta], **negkw)
    g = instance_representations(model, np.stack([x.patch_features for x in g_images]), g_texts, rng, neg_mode,
                                 owners=[mm[0] for mm in g_meta], **negkw)
    result, rel = product_retrieval(q, g, q_meta, g_meta, match_rule)
    return metrics(result, rel, ks)


def evaluate_grounding(model: Model, dataset: Dataset, rng, scale: int = 4, n_proposals: int = 20,
                       prompt: str = "text") -> dict:
    """Text- (or image-) conditioned grounding on source-0 images.

    Proposals are the ground-truth box plus random grid-aligned boxes; all
    boxes and IoUs are in token-grid coordinates.
    """
    preds, gts, inside_wins = [], [], []
    idx, images, texts = _eval_pairs(dataset)
    feats = np.stack([im.patch_features for im in images])
    reps_h, ms = instance_representations(model, feats, texts, rng, "random", return_m=True)
    for k, (i, image) in enumerate(zip(idx, images)):
        if prompt == "image" and dataset.num_sources(i) > 1:
            pr = dataset.image(i, 1)
        else:
            pr = dataset.text(i)
        smap = grounding_score_map(model, image, pr, scale)
        gt = BoxProposal(*image.box)
        props = [gt] + random_proposals(rng, image.grid_h, image.grid_w, n_proposals - 1)
        props = list(dict.fromkeys(props))
        ranked = rank_boxes(smap.S, [b.scaled(scale) for b in props])
        best = ranked[0][0].scaled(1.0 / scale)
        preds.append(best)
        gts.append(gt)
        a, b = box_mass_contrast(ms[k], image.box, image.grid_w, 0)
        inside_wins.append(a > b)
    out = grounding_accuracy(preds, gts)
    out["mass_inside_rate"] = float(np.mean(inside_wins))
    out["num_samples"] = len(idx)
    return out

"""Batch construction, the two-stage training schedule, and checkpoint I/O."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import LOSS_NAMES, TrainConfig, to_dict, train_config_from_dict
from .decoder import IMAGE, TEXT, compose_queries, decode_tensors
from .encoders import image_forward, is_encoder_param, text_forward
from .model import init_model
from .momentum import RepresentationQueue, copy_params, ema_update
from .numerics import concat, softmax, value_and_grad
from .objectives import (
    LossBreakdown,
    TrainingError,
    clamp_log_tau,
    entropy_reg,
    inter_product_loss,
    intra_product_loss,
    itc_loss,
    itm_loss,
    temperature,
    total_loss,
)
from .optim import AdamW, lr_factor
from .synthdata import Dataset, augment

log = logging.getLogger(__name__)

CSV_HEADER = ["step", "itc", "inter", "itm", "intra", "reg", "total", "tau"]


@dataclass
class PromptPlan:
    """Which in-batch product and modality feeds each query slot."""

    products: np.ndarray  # (B, T) batch row supplying each prompt; products[i, r[i]] == i
    modality: np.ndarray  # (B, T) IMAGE or TEXT
    r: np.ndarray  # (B,) positive slot
    itm_negative: np.ndarray  # (B,) batch row whose text is the ITM negative


@dataclass
class TrainBatch:
    product_idx: np.ndarray
    anchor_sources: list[int]
    partner_sources: list[int]  # -1 means an augmented copy of the anchor
    anchors: list
    partners: list
    texts: list[list[int]]
    plan: PromptPlan | None = None

    @property
    def size(self) -> int:
        return len(self.product_idx)

    def anchor_feats(self) -> np.ndarray:
        return np.stack([s.patch_features for s in self.anchors])

    def partner_feats(self) -> np.ndarray:
        return np.stack([s.patch_features for s in self.partners])


def draw_batch(dataset: Dataset, rng: np.random.Generator, product_idx, anchor_sources=None) -> TrainBatch:
    """Anchor and partner images from two different sources of each product.

    Anchors are drawn at random unless ``anchor_sources`` fixes them; the
    partner is always a random other source.
    """
    anchors, partners, a_src, p_src = [], [], [], []
    for k, i in enumerate(product_idx):
        n_src = dataset.num_sources(int(i))
        if n_src >= 2:
            if anchor_sources is None:
                a, p = rng.choice(n_src, size=2, replace=False)
            else:
                a = int(anchor_sources[k])
                others = [s for s in range(n_src) if s != a]
                p = others[int(rng.integers(len(others)))]
            anchors.append(dataset.image(int(i), int(a)))
            partners.append(dataset.image(int(i), int(p)))
            a_src.append(int(a))
            p_src.append(int(p))
        else:
            anchor = dataset.image(int(i), 0)
            anchors.append(anchor)
            partners.append(augment(rng, anchor))
            a_src.append(0)
            p_src.append(-1)
    texts = [dataset.records[int(i)]["text"] for i in product_idx]
    return TrainBatch(np.asarray(product_idx, dtype=np.int64), a_src, p_src, anchors, partners, texts)


def _rounds(dataset: Dataset) -> int:
    return max(dataset.num_sources(i) for i in range(len(dataset)))


def steps_per_epoch(dataset: Dataset, batch_size: int) -> int:
    return _rounds(dataset) * (len(dataset) // batch_size)


def epoch_schedule(dataset: Dataset, rng: np.random.Generator, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """One epoch = every source image of every product serving once as anchor.

    Returns ``(rows, anchors)``, each (steps, batch_size): one round per
    source index, each round a fresh product permutation cut into batches, so
    a batch never repeats a product. Products with fewer sources cycle.
    """
    n = len(dataset)
    per_round = n // batch_size
    rounds = _rounds(dataset)
    orders = [rng.permutation(dataset.num_sources(i)) for i in range(n)]
    rows, anchors = [], []
    for k in range(rounds):
        perm = rng.permutation(n)[: per_round * batch_size].reshape(per_round, batch_size)
        rows.append(perm)
        anchors.append(np.vectorize(lambda i: orders[i][k % len(orders[i])])(perm))
    return np.concatenate(rows), np.concatenate(anchors).astype(np.int64)


def negative_distribution(b: int, similarity: np.ndarray | None, tau: float) -> np.ndarray:
    """Row i: probabilities over batch rows j != i (zero on the diagonal)."""
    if similarity is None:
        probs = np.ones((b, b))
    else:
        logits = np.asarray(similarity, dtype=np.float64) / tau
        np.fill_diagonal(logits, -np.inf)
        probs = softmax(logits, axis=1).data.copy()
    np.fill_diagonal(probs, 0.0)
    return probs / probs.sum(axis=1, keepdims=True)


def assign_prompts(rng, b: int, n_queries: int, text_prob: float, similarity=None, tau: float = 1.0) -> PromptPlan:
    probs = negative_distribution(b, similarity, tau)
    products = np.zeros((b, n_queries), dtype=np.int64)
    r = rng.integers(0, n_queries, size=b)
    itm_neg = np.zeros(b, dtype=np.int64)
    for i in range(b):
        replace = n_queries - 1 > b - 1
        negs = rng.choice(b, size=n_queries - 1, replace=replace, p=probs[i])
        products[i] = np.insert(negs, r[i], i)
        itm_neg[i] = rng.choice(b, p=probs[i])
    modality = np.where(rng.random((b, n_queries)) < text_prob, TEXT, IMAGE)
    return PromptPlan(products, modality, r, itm_neg)


def build_batch(dataset: Dataset, rng, config: TrainConfig, params=None, product_idx=None) -> TrainBatch:
    """Draw B distinct products and assign prompts.

    Negatives are uniform over the other products unless ``params`` is given,
    in which case they follow the softmax of in-batch image-to-text similarity.
    """
    b = config.batch_size
    if len(dataset) < b:
        raise ValueError(f"dataset has {len(dataset)} products, batch needs {b}")
    if product_idx is None:
        product_idx = rng.choice(len(dataset), size=b, replace=False)
    batch = draw_batch(dataset, rng, product_idx)
    sim, tau = None, 1.0
    if params is not None:
        img = image_forward(params, batch.anchor_feats(), config.model)["cls"].data
        txt = text_forward(params, batch.texts, config.model)["cls"].data
        sim, tau = img @ txt.T, float(np.exp(params["log_tau"]))
    batch.plan = assign_prompts(rng, b, config.model.num_queries, config.text_prompt_prob, sim, tau)
    return batch


def _gather_prompts(pool, plan: PromptPlan, b: int):
    """pool rows: [text_0..text_{B-1}, image_0..image_{B-1}]."""
    idx = plan.products + np.where(plan.modality == TEXT, 0, b)
    return pool[idx]


def stage1_loss(p, batch: TrainBatch, cfg: TrainConfig):
    m = cfg.model
    img = image_forward(p, batch.anchor_feats(), m)
    txt = text_forward(p, batch.texts, m)
    comps = {"itc": itc_loss(img["cls"], txt["cls"], temperature(p))}
    weights = dict(cfg.loss_weights, inter=0.0, itm=0.0, intra=0.0, reg=0.0)
    return total_loss(comps, weights, batch.size)


def momentum_targets(shadow, batch: TrainBatch, cfg: TrainConfig) -> np.ndarray:
    """Momentum-model representation of each partner image under the
    batch's prompt plan, with prompts from the momentum encoders."""
    m = cfg.model
    plan = batch.plan
    b = batch.size
    m_img = image_forward(shadow, batch.partner_feats(), m)
    m_anchor_cls = image_forward(shadow, batch.anchor_feats(), m)["cls"]
    m_txt = text_forward(shadow, batch.texts, m)["cls"]
    m_prompts = _gather_prompts(concat([m_txt, m_anchor_cls], axis=0), plan, b)
    m_q = compose_queries(m_prompts, plan.modality, shadow)
    H_m, _ = decode_tensors(m_img["z"], m_q, shadow, m)
    return H_m.data[np.arange(b), plan.r]


def stage2_loss(p, batch: TrainBatch, cfg: TrainConfig, shadow, queue_entries, rng=None, sever: bool = True,
                frozen=None, h_mom=None):
    """All five terms. ``p`` holds leaves; ``frozen`` plain arrays for anything
    not differentiated. ``h_mom`` may carry precomputed momentum targets.
    Returns (total, aux) with aux carrying the breakdown, momentum
    representations and the plan used."""
    m = cfg.model
    params = {**(frozen or {}), **p}
    b = batch.size
    tau = temperature(params)

    img = image_forward(params, batch.anchor_feats(), m)
    txt = text_forward(params, batch.texts, m)
    comps = {"itc": itc_loss(img["cls"], txt["cls"], tau)}

    if batch.plan is None:
        sim = img["cls"].data @ txt["cls"].data.T if cfg.hard_negatives else None
        batch.plan = assign_prompts(rng, b, m.num_queries, cfg.text_prompt_prob, sim, float(tau.data))
    plan = batch.plan

    def cut(t):
        return t.detach() if sever else t

    partner_cls = cut(image_forward(params, batch.partner_feats(), m)["cls"])
    t_cls = cut(txt["cls"])
    pool = concat([t_cls, partner_cls], axis=0)
    prompts = _gather_prompts(pool, plan, b)
    q = compose_queries(prompts, plan.modality, params)
    H, M = decode_tensors(cut(img["z"]), q, params, m)
    rows = np.arange(b)
    h_pos = H[rows, plan.r]

    if h_mom is None:
        h_mom = momentum_targets(shadow, batch, cfg)

    weights = dict(cfg.loss_weights)
    queue_entries = np.asarray(queue_entries).reshape(-1, m.embed_dim)
    if len(queue_entries) < b:
        weights["inter"] = 0.0
    comps["inter"] = inter_product_loss(h_pos, h_mom, queue_entries, tau)
    itm_h = concat([h_pos, h_pos], axis=0)
    itm_t = concat([t_cls, t_cls[plan.itm_negative]], axis=0)
    labels = np.concatenate([np.ones(b, dtype=np.int64), np.zeros(b, dtype=np.int64)])
    comps["itm"] = itm_loss(itm_h, itm_t, labels, params)
    comps["intra"] = intra_product_loss(H, t_cls, plan.r, tau)
    comps["reg"] = entropy_reg(M, plan.r)
    total, breakdown = total_loss(comps, weights, b)
    aux = {
        "breakdown": breakdown,
        "h_mom": h_mom,
        "prompts": prompts.data,
        "plan": plan,
    }
    return total, aux


@dataclass
class TrainState:
    config: TrainConfig
    params: dict
    shadow: dict | None = None
    queue: RepresentationQueue | None = None
    query_ema: np.ndarray | None = None
    opt: AdamW = None
    rng: np.random.Generator = None
    stage: int = 1
    epoch: int = 0
    cursor: int = 0
    schedule: tuple | None = None  # (rows, anchors) of the current epoch
    step: int = 0
    stage_step: int = 0
    completed: list = field(default_factory=list)
    log_rows: list = field(default_factory=list)


def new_state(config: TrainConfig) -> TrainState:
    config.validate()
    m = config.model
    return TrainState(
        config=config,
        params=init_model(m, config.seed),
        queue=RepresentationQueue(config.queue_size, m.embed_dim),
        query_ema=np.zeros((m.num_queries, m.embed_dim)),
        opt=AdamW(config.betas, config.adam_eps, config.weight_decay),
        rng=np.random.default_rng(np.random.SeedSequence([config.seed, 1])),
    )


def _learning_rates(state: TrainState, names) -> dict[str, float]:
    """Fresh warmup at every stage start. Encoders keep decaying across the
    stage boundary; everything else starts its decay at stage 2."""
    c = state.config
    out = {}
    for n in names:
        enc = is_encoder_param(n)
        epoch = state.epoch + (c.stage1_epochs if enc and state.stage == 2 else 0)
        out[n] = (c.lr_encoder if enc else c.lr_rest) * lr_factor(state.stage_step, epoch, c.warmup_steps, c.lr_decay)
    return out


def stage1_trainable(params) -> list[str]:
    return [k for k in params if is_encoder_param(k) or k == "log_tau"]


def train_step(state: TrainState, batch: TrainBatch, dump_dir=None) -> LossBreakdown:
    cfg = state.config
    try:
        if state.stage == 1:
            names = stage1_trainable(state.params)
            trainable = {k: state.params[k] for k in names}
            frozen = {k: v for k, v in state.params.items() if k not in trainable}

            def f(leaves):
                return stage1_loss({**frozen, **leaves}, batch, cfg)

            _, grads, breakdown = value_and_grad(f, trainable, has_aux=True)
        else:
            entries = state.queue.contents()

            def f(leaves):
                return stage2_loss(leaves, batch, cfg, state.shadow, entries, rng=state.rng)

            _, grads, aux = value_and_grad(f, state.params, has_aux=True)
            breakdown = aux["breakdown"]
    except TrainingError as exc:
        path = _dump_batch(state, batch, str(exc), dump_dir)
        raise TrainingError(f"{exc}; offending batch dumped to {path}") from exc
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            path = _dump_batch(state, batch, f"non-finite gradient for {name}", dump_dir)
            raise TrainingError(f"non-finite gradient for {name!r}; offending batch dumped to {path}")

    state.opt.step(state.params, grads, _learning_rates(state, grads))
    clamp_log_tau(state.params)
    if state.stage == 2:
        ema_update(state.params, state.shadow, cfg.momentum)
        # enqueue only after the loss so the batch never serves as its own negative
        state.queue.enqueue(aux["h_mom"])
        _update_query_ema(state, aux["prompts"], aux["plan"])
    tau = float(np.exp(state.params["log_tau"]))
    state.log_rows.append([state.step, *breakdown.as_row(), tau])
    state.step += 1
    state.stage_step += 1
    return breakdown


def _update_query_ema(state: TrainState, prompts: np.ndarray, plan: PromptPlan) -> None:
    neg = np.ones(plan.modality.shape, dtype=bool)
    neg[np.arange(len(plan.r)), plan.r] = False
    counts = neg.sum(axis=0)
    means = (prompts * neg[..., None]).sum(axis=0) / np.maximum(counts, 1)[:, None]
    seen = counts > 0
    m = state.config.momentum
    # an all-zero row has never been updated: seed it with the first batch mean
    fresh = ~np.any(state.query_ema != 0.0, axis=1)
    upd = np.where(fresh[:, None], means, m * state.query_ema + (1.0 - m) * means)
    state.query_ema = np.where(seen[:, None], upd, state.query_ema)


def _dump_batch(state: TrainState, batch: TrainBatch, reason: str, dump_dir) -> str:
    dump_dir = Path(dump_dir or ".")
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"nan_batch_step{state.step}.json"
    record = {
        "reason": reason,
        "step": state.step,
        "stage": state.stage,
        "product_idx": batch.product_idx.tolist(),
        "anchor_sources": batch.anchor_sources,
        "partner_sources": batch.partner_sources,
        "texts": batch.texts,
        "anchor_feature_absmax": [float(np.abs(s.patch_features).max()) for s in batch.anchors],
    }
    path.write_text(json.dumps(record, indent=2), encoding="utf-8")
    return str(path)


def _stage_epochs(cfg: TrainConfig, stage: int) -> int:
    return cfg.stage1_epochs if stage == 1 else cfg.stage2_epochs


def begin_stage2(state: TrainState) -> None:
    state.stage = 2
    state.epoch = 0
    state.cursor = 0
    state.schedule = None
    state.stage_step = 0
    state.shadow = copy_params(state.params)


def run(state: TrainState, dataset: Dataset, stages=(1, 2), max_steps: int | None = None, dump_dir=None,
        on_epoch=None) -> TrainState:
    """Train through ``stages`` from wherever ``state`` stands.

    Stops early (resumably) once ``max_steps`` further steps have run.
    """
    cfg = state.config
    b = cfg.batch_size
    if len(dataset) < b:
        raise ValueError(f"dataset of {len(dataset)} products cannot fill a batch of {b}")
    budget = math.inf if max_steps is None else max_steps
    for stage in (1, 2):
        if stage not in stages or stage in state.completed:
            continue
        if stage == 2 and state.stage == 1:
            if 1 in stages and 1 not in state.completed:
                raise RuntimeError("stage 1 must complete before stage 2")
            begin_stage2(state)
        while state.epoch < _stage_epochs(cfg, stage):
            if state.schedule is None:
                state.schedule = epoch_schedule(dataset, state.rng, b)
            rows, anchors = state.schedule
            while state.cursor < len(rows):
                if budget <= 0:
                    return state
                batch = draw_batch(dataset, state.rng, rows[state.cursor], anchors[state.cursor])
                if stage == 2 and not cfg.hard_negatives:
                    batch.plan = assign_prompts(state.rng, b, cfg.model.num_queries, cfg.text_prompt_prob)
                train_step(state, batch, dump_dir)
                state.cursor += 1
                budget -= 1
            state.epoch += 1
            state.cursor = 0
            state.schedule = None
            if on_epoch is not None:
                on_epoch(state)
        state.completed.append(stage)
    return state


# ---- persistence ---------------------------------------------------------


def state_to_checkpoint(state: TrainState) -> tuple[dict, dict]:
    tensors = {f"base/{k}": v for k, v in state.params.items()}
    if state.shadow is not None:
        tensors.update({f"momentum/{k}": v for k, v in state.shadow.items()})
    tensors["queue"] = state.queue.buffer
    tensors["query_ema"] = state.query_ema
    for k in state.opt.m:
        tensors[f"opt/m/{k}"] = state.opt.m[k]
        tensors[f"opt/v/{k}"] = state.opt.v[k]
    header = {
        "config": to_dict(state.config),
        "stage": state.stage,
        "epoch": state.epoch,
        "cursor": state.cursor,
        "schedule": None if state.schedule is None else [a.tolist() for a in state.schedule],
        "step": state.step,
        "stage_step": state.stage_step,
        "completed": list(state.completed),
        "queue": state.queue.state(),
        "opt_t": dict(sorted(state.opt.t.items())),
        "rng": state.rng.bit_generator.state,
        "log_rows": state.log_rows,
    }
    return header, tensors


def save_state(state: TrainState, path) -> None:
    header, tensors = state_to_checkpoint(state)
    ckpt.save_checkpoint(header, tensors, path)


def state_from_checkpoint(header: dict, tensors: dict) -> TrainState:
    cfg = train_config_from_dict(header["config"])
    params = {k[5:]: v for k, v in tensors.items() if k.startswith("base/")}
    shadow = {k[9:]: v for k, v in tensors.items() if k.startswith("momentum/")} or None
    opt = AdamW(cfg.betas, cfg.adam_eps, cfg.weight_decay)
    opt.m = {k[6:]: v for k, v in tensors.items() if k.startswith("opt/m/")}
    opt.v = {k[6:]: v for k, v in tensors.items() if k.startswith("opt/v/")}
    opt.t = {k: int(v) for k, v in header["opt_t"].items()}
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = header["rng"]
    return TrainState(
        config=cfg,
        params=params,
        shadow=shadow,
        queue=RepresentationQueue.from_state(header["queue"], tensors["queue"]),
        query_ema=tensors["query_ema"],
        opt=opt,
        rng=rng,
        stage=header["stage"],
        epoch=header["epoch"],
        cursor=header["cursor"],
        schedule=None if header["schedule"] is None else tuple(np.asarray(a, dtype=np.int64) for a in header["schedule"]),
        step=header["step"],
        stage_step=header["stage_step"],
        completed=list(header["completed"]),
        log_rows=[list(r) for r in header["log_rows"]],
    )


def load_state(path) -> TrainState:
    return state_from_checkpoint(*ckpt.load_checkpoint(path))


def loss_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in rows:
        w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
    return buf.getvalue()


def train_stage1(state: TrainState, dataset: Dataset, **kw) -> TrainState:
    return run(state, dataset, stages=(1,), **kw)


def train_stage2(state: TrainState, dataset: Dataset, **kw) -> TrainState:
    if 1 not in state.completed and state.stage == 1:
        state.completed.append(1)
    return run(state, dataset, stages=(2,), **kw)


__all__ = [
    "CSV_HEADER",
    "LOSS_NAMES",
    "PromptPlan",
    "TrainBatch",
    "TrainState",
    "assign_prompts",
    "build_batch",
    "draw_batch",
    "epoch_schedule",
    "steps_per_epoch",
    "load_state",
    "loss_csv",
    "momentum_targets",
    "new_state",
    "run",
    "save_state",
    "stage1_loss",
    "stage2_loss",
    "train_stage1",
    "train_stage2",
    "train_step",
]

"""Pretraining losses: image-text contrast, inter-/intra-product contrast,
instance-text matching, and the assignment entropy regularizer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import LOSS_NAMES
from .encoders import InputError
from .layers import trunc_normal
from .numerics import Tensor, as_tensor, concat, log_softmax, matmul

TAU_MIN, TAU_MAX = 5e-3, 1.0


class TrainingError(RuntimeError):
    pass


@dataclass
class LossBreakdown:
    itc: float = 0.0
    inter: float = 0.0
    itm: float = 0.0
    intra: float = 0.0
    reg: float = 0.0
    total: float = 0.0

    def as_row(self) -> list[float]:
        return [self.itc, self.inter, self.itm, self.intra, self.reg, self.total]


def init_objective_params(embed_dim: int, rng: np.random.Generator, std: float = 0.02, tau: float = 0.07):
    return {
        "itm.w": trunc_normal(rng, (embed_dim, 2), std),
        "itm.b": np.zeros(2),
        "log_tau": np.array(math.log(tau)),
    }


def clamp_log_tau(params) -> None:
    params["log_tau"] = np.clip(params["log_tau"], math.log(TAU_MIN), math.log(TAU_MAX))


def temperature(params):
    return as_tensor(params["log_tau"]).exp()


def _rows(x):
    x = as_tensor(x)
    return x.reshape(1, -1) if x.ndim == 1 else x


def itc_loss(img_cls, txt_cls, tau):
    """Symmetric InfoNCE over the B x B similarity matrix, batch-summed."""
    img, txt = _rows(img_cls), _rows(txt_cls)
    b = img.shape[0]
    if b < 1 or txt.shape[0] != b:
        raise InputError("itc_loss needs B >= 1 matched image/text rows")
    logits = matmul(img, txt.T) / tau
    diag = (np.arange(b), np.arange(b))
    i2t = -log_softmax(logits, axis=1)[diag].sum()
    t2i = -log_softmax(logits.T, axis=1)[diag].sum()
    return 0.5 * (i2t + t2i)


def inter_product_loss(h_base, h_mom_pos, queue, tau):
    """Momentum-contrast loss of each base representation against its
    partner's momentum representation, with queue entries as negatives."""
    h, hp = _rows(h_base), _rows(h_mom_pos)
    if h.shape[0] < 1:
        raise InputError("inter_product_loss needs at least one positive")
    queue = np.asarray(queue, dtype=np.float64).reshape(-1, h.shape[1])
    pos = (h * hp).sum(axis=1, keepdims=True) / tau
    neg = matmul(h, queue.T) / tau
    logits = concat([pos, neg], axis=1)
    return -log_softmax(logits, axis=1)[:, 0].sum()


def itm_loss(h, txt_cls, label, head):
    """Two-way cross entropy of head(h * t); ``label`` 1 = match, 0 = no match."""
    h, t = _rows(h), _rows(txt_cls)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    logits = matmul(h * t, head["itm.w"]) + head["itm.b"]
    return -log_softmax(logits, axis=1)[np.arange(labels.size), labels].sum()


def intra_product_loss(H, txt_cls, r, tau):
    """Contrast the positive query row r against the other T-1 rows, using
    the product text as the anchor. ``H`` is (B, T, D) or (T, D)."""
    H = as_tensor(H)
    if H.ndim == 2:
        H = H.reshape(1, *H.shape)
    t = _rows(txt_cls)
    r = np.atleast_1d(np.asarray(r, dtype=np.int64))
    n_q = H.shape[1]
    if np.any(r < 0) or np.any(r >= n_q):
        raise InputError(f"positive index out of range [0, {n_q})")
    logits = matmul(H, t.reshape(t.shape[0], t.shape[1], 1)).reshape(H.shape[0], n_q) / tau
    return -log_softmax(logits, axis=1)[np.arange(r.size), r].sum()


def entropy_reg(M, r):
    """Column entropy of M for the positive query plus (ln N - entropy) for
    every negative query. M is (B, N, T) or (N, T); raw columns, no
    renormalization."""
    M = as_tensor(M)
    if M.ndim == 2:
        M = M.reshape(1, *M.shape)
    b, n, n_q = M.shape
    r = np.atleast_1d(np.asarray(r, dtype=np.int64))
    if np.any(r < 0) or np.any(r >= n_q):
        raise InputError(f"positive index out of range [0, {n_q})")
    ent = -(M.xlogx().sum(axis=1))  # (B, T)
    pos_mask = np.zeros((b, n_q))
    pos_mask[np.arange(b), r] = 1.0
    neg_mask = 1.0 - pos_mask
    return (ent * pos_mask).sum() + ((math.log(n) - ent) * neg_mask).sum()


def total_loss(components: dict, weights: dict | None = None, batch_size: int = 1):
    """Weighted sum of the named components, each divided by ``batch_size``.

    Returns ``(total, LossBreakdown)``; ``total`` keeps the tape when the
    components are Tensors.
    """
    weights = weights or {}
    total = None
    parts = {}
    for name in LOSS_NAMES:
        comp = components.get(name, 0.0)
        value = float(comp.data) if isinstance(comp, Tensor) else float(comp)
        if not math.isfinite(value):
            raise TrainingError(f"loss component {name!r} is not finite ({value})")
        w = float(weights.get(name, 1.0))
        if w == 0.0:
            parts[name] = 0.0
            continue
        term = comp * (w / batch_size)
        parts[name] = float(term.data) if isinstance(term, Tensor) else float(term)
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)
    breakdown = LossBreakdown(**parts, total=sum(parts[n] for n in LOSS_NAMES))
    return as_tensor(total), breakdown

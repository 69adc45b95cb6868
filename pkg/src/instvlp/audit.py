"""Finite-difference audits of the training gradients.

Two checks live here. ``gradient_audit`` compares reverse-mode gradients of
every loss term (and of a scalar readout of the decoder) with central
differences along random directions. ``severance_audit`` confirms that in
stage 2 the decoder-path losses contribute nothing to encoder gradients even
though, as functions, they do depend on encoder weights.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .config import LOSS_NAMES, ModelConfig, TrainConfig
from .decoder import IMAGE, TEXT, compose_queries, decode_tensors
from .encoders import ImageSample, is_encoder_param
from .model import init_model
from .numerics import directional_fd, relative_error, value_and_grad
from .pretrain import PromptPlan, TrainBatch, momentum_targets, stage2_loss

COMPONENTS = LOSS_NAMES + ("decoder",)
DECODER_LOSSES = ("inter", "itm", "intra", "reg")


@dataclass
class AuditReport:
    tol: float
    seeds: int
    worst: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v <= self.tol for v in self.worst.values())


def _random_problem(rng, cfg: TrainConfig):
    """A batch, plan, momentum shadow and queue with no dataset behind them."""
    m = cfg.model
    b = cfg.batch_size
    params = init_model(m, int(rng.integers(2**31)))
    # move off the init so every term has a non-trivial gradient
    params = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in params.items()}
    params["log_tau"] = np.array(math.log(0.2))
    shadow = {k: v + 0.01 * rng.normal(size=v.shape) for k, v in params.items()}

    def image():
        feats = rng.normal(size=(m.num_tokens, m.d_in))
        return ImageSample(m.grid_h, m.grid_w, feats, "detail_page")

    texts = [[int(t) for t in rng.integers(1, m.vocab_size, size=rng.integers(1, m.max_text_len))] for _ in range(b)]
    batch = TrainBatch(np.arange(b), [0] * b, [1] * b, [image() for _ in range(b)], [image() for _ in range(b)], texts)
    products = np.array([[i] + [int(j) for j in rng.choice([x for x in range(b) if x != i], m.num_queries - 1)]
                         for i in range(b)])
    r = rng.integers(0, m.num_queries, size=b)
    for i in range(b):
        products[i, [0, r[i]]] = products[i, [r[i], 0]]
    modality = np.where(rng.random(products.shape) < 0.5, TEXT, IMAGE)
    itm_neg = (np.arange(b) + 1) % b
    batch.plan = PromptPlan(products, modality, r, itm_neg)
    queue = rng.normal(size=(2 * b, m.embed_dim))
    queue /= np.linalg.norm(queue, axis=1, keepdims=True)
    return params, shadow, batch, queue


def _only(cfg: TrainConfig, name: str) -> TrainConfig:
    return dataclasses.replace(cfg, loss_weights={n: float(n == name) for n in LOSS_NAMES})


def _component_fn(cfg, name, batch, shadow, queue, sever):
    c = _only(cfg, name)
    h_mom = momentum_targets(shadow, batch, cfg)

    def f(p):
        return stage2_loss(p, batch, c, shadow, queue, sever=sever, h_mom=h_mom)

    return f


def _decoder_fn(cfg: TrainConfig, rng):
    m = cfg.model
    b = cfg.batch_size
    z = rng.normal(size=(b, m.num_tokens, m.embed_dim))
    prompts = rng.normal(size=(b, m.num_queries, m.embed_dim))
    modality = rng.integers(0, 2, size=(b, m.num_queries))
    readout = rng.normal(size=(b, m.num_queries, m.embed_dim))

    def f(p):
        H, _ = decode_tensors(z, compose_queries(prompts, modality, p), p, m)
        return (H * readout).sum()

    return f


def richardson_fd(f, leaves, direction, eps: float) -> float:
    """Central differences at ``eps`` and ``eps/2`` combined to cancel the
    O(eps^2) truncation term, which dominates when the derivative is small."""
    coarse = directional_fd(f, leaves, direction, eps)
    fine = directional_fd(f, leaves, direction, eps / 2)
    return (4 * fine - coarse) / 3


def default_audit_config(batch_size: int = 2) -> TrainConfig:
    return TrainConfig(batch_size=batch_size, model=ModelConfig())


def gradient_audit(seed: int = 0, n_seeds: int = 100, tol: float = 1e-4, cfg: TrainConfig | None = None,
                   eps: float = 1e-5, components=COMPONENTS) -> AuditReport:
    """Worst relative error between reverse-mode and central-difference
    directional derivatives, per component, over ``n_seeds`` random problems."""
    cfg = cfg or default_audit_config()
    report = AuditReport(tol=tol, seeds=n_seeds, worst={c: 0.0 for c in components})
    for k in range(n_seeds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        params, shadow, batch, queue = _random_problem(rng, cfg)
        for name in components:
            if name == "decoder":
                f = _decoder_fn(cfg, rng)
                leaves = {n: v for n, v in params.items() if n.startswith("dec.")}
                fn = f
            else:
                fn = _component_fn(cfg, name, batch, shadow, queue, sever=False)
                leaves = params

                def f(p, fn=fn):
                    return fn(p)[0]

            _, grads = value_and_grad(f, leaves)
            direction = {n: rng.normal(size=np.shape(v)) for n, v in leaves.items()}
            analytic = sum(float(np.sum(grads[n] * direction[n])) for n in leaves)
            numeric = richardson_fd(lambda p: f(p).item(), leaves, direction, eps)
            report.worst[name] = max(report.worst[name], relative_error(analytic, numeric))
    return report


def severance_audit(seed: int = 0, cfg: TrainConfig | None = None, eps: float = 1e-5) -> dict[str, dict]:
    """Per decoder-path loss: the finite-difference derivative along a random
    encoder-only direction, and the largest encoder gradient entry actually
    produced in stage 2. The first should be nonzero and the second exactly 0."""
    cfg = cfg or default_audit_config()
    rng = np.random.default_rng(seed)
    params, shadow, batch, queue = _random_problem(rng, cfg)
    enc = [n for n in params if is_encoder_param(n)]
    direction = {n: (rng.normal(size=v.shape) if n in enc else np.zeros_like(v)) for n, v in params.items()}
    out = {}
    for name in DECODER_LOSSES:
        fn = _component_fn(cfg, name, batch, shadow, queue, sever=True)
        _, grads, _ = value_and_grad(fn, params, has_aux=True)
        fd = directional_fd(lambda p: fn(p)[0].item(), params, direction, eps)
        out[name] = {
            "fd_encoder_directional": fd,
            "implemented_encoder_grad_absmax": max(float(np.abs(grads[n]).max()) for n in enc),
        }
    return out

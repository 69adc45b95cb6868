import math

import numpy as np
import pytest

from instvlp.encoders import InputError
from instvlp.numerics import Tensor, finite_diff_grad, relative_error, value_and_grad
from instvlp.objectives import (
    LossBreakdown,
    TrainingError,
    entropy_reg,
    inter_product_loss,
    intra_product_loss,
    itc_loss,
    itm_loss,
    total_loss,
)

LN1PE = math.log(1 + math.exp(-1))


def _val(x):
    return float(x.data) if isinstance(x, Tensor) else float(x)


def _unit(rng, *shape):
    x = rng.normal(size=shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_itc_closed_forms():
    eye = np.eye(2)
    assert abs(_val(itc_loss(eye, eye, 1.0)) - 2 * LN1PE) <= 1e-12
    assert abs(_val(itc_loss(eye, eye, 1.0)) - 0.62652) <= 1e-5
    v = np.array([[0.6, 0.8]])
    assert _val(itc_loss(v, v, 0.07)) == 0.0


def test_itc_rotation_invariant():
    rng = np.random.default_rng(0)
    img, txt = _unit(rng, 5, 6), _unit(rng, 5, 6)
    rot, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    a = _val(itc_loss(img, txt, 0.1))
    b = _val(itc_loss(img @ rot, txt @ rot, 0.1))
    assert abs(a - b) <= 1e-10


def test_itc_rejects_mismatched_batch():
    with pytest.raises(InputError):
        itc_loss(np.eye(2), np.eye(3)[:, :2], 1.0)


def test_inter_closed_forms():
    h = np.array([[1.0, 0.0]])
    assert _val(inter_product_loss(h, h, np.zeros((0, 2)), 1.0)) == 0.0
    got = _val(inter_product_loss(h, h, np.array([[0.0, 1.0]]), 1.0))
    assert abs(got - LN1PE) <= 1e-12


def test_inter_orthogonal_entry_identity():
    rng = np.random.default_rng(1)
    h = np.array([[1.0, 0.0, 0.0]])
    hp = _unit(rng, 1, 3)
    queue = _unit(rng, 4, 3)
    s_pos = float(h[0] @ hp[0])
    mass = float(np.exp(queue @ h.T).sum())
    before = _val(inter_product_loss(h, hp, queue, 1.0))
    after = _val(inter_product_loss(h, hp, np.vstack([queue, [0.0, 1.0, 0.0]]), 1.0))
    expect = math.log((math.exp(s_pos) + mass + 1) / (math.exp(s_pos) + mass))
    assert abs((after - before) - expect) <= 1e-12


def test_itm_cases():
    head = {"itm.w": np.zeros((3, 2)), "itm.b": np.zeros(2)}
    rng = np.random.default_rng(2)
    h, t = rng.normal(size=3), rng.normal(size=3)
    for label in (0, 1):
        assert abs(_val(itm_loss(h, t, label, head)) - math.log(2)) <= 1e-15
    margin = {"itm.w": np.zeros((3, 2)), "itm.b": np.array([0.0, 10.0])}
    assert _val(itm_loss(h, t, 1, margin)) < 1e-4
    head = {"itm.w": rng.normal(size=(3, 2)), "itm.b": rng.normal(size=2)}
    z = np.zeros(3)
    assert _val(itm_loss(z, t, 1, head)) == _val(itm_loss(z, 5 * t + 1, 1, head))


def test_intra_closed_forms():
    t = np.array([1.0, 0.0])
    H = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert abs(_val(intra_product_loss(H, t, 0, 1.0)) - 0.31326) <= 1e-5
    assert _val(intra_product_loss(H[:1], t, 0, 1.0)) == 0.0
    with pytest.raises(InputError):
        intra_product_loss(H, t, 2, 1.0)


def test_intra_negative_permutation_invariant():
    rng = np.random.default_rng(3)
    H, t = _unit(rng, 5, 4), _unit(rng, 4)
    a = _val(intra_product_loss(H, t, 1, 0.2))
    b = _val(intra_product_loss(H[[4, 1, 0, 3, 2]], t, 1, 0.2))
    assert abs(a - b) <= 1e-12


def test_entropy_reg_closed_forms():
    uniform = np.full((4, 2), 0.5)
    assert abs(_val(entropy_reg(uniform, 0)) - 2 * math.log(2)) <= 1e-9
    m = np.zeros((4, 2))
    m[0, 0] = 1.0
    m[1:, 1] = 1.0
    # positive column one-hot: zero entropy; negative column three ones: zero entropy
    assert _val(entropy_reg(m, 0)) == math.log(4)
    with pytest.raises(InputError):
        entropy_reg(uniform, 5)


def test_positive_similarity_monotonicity():
    rng = np.random.default_rng(4)
    others = _unit(rng, 3, 2)
    prev = None
    for s in np.linspace(-1, 1, 9):
        pos = np.array([s, math.sqrt(1 - s * s)])
        anchor = np.array([1.0, 0.0])
        vals = (
            _val(intra_product_loss(np.vstack([pos, others]), anchor, 0, 0.5)),
            _val(inter_product_loss(anchor[None], pos[None], others, 0.5)),
        )
        if prev is not None:
            assert vals[0] < prev[0] and vals[1] < prev[1]
        prev = vals


def test_total_loss_selection_and_breakdown():
    comps = {"itc": Tensor(1.5), "inter": 2.0, "itm": 0.25, "intra": 1.0, "reg": -3.0}
    total, br = total_loss(comps, batch_size=2)
    assert abs(sum(br.as_row()[:5]) - br.total) <= 1e-12
    assert abs(_val(total) - br.total) <= 1e-12
    only = total_loss(comps, {"itc": 1, "inter": 0, "itm": 0, "intra": 0, "reg": 0}, batch_size=2)[1]
    assert only == LossBreakdown(itc=0.75, total=0.75)
    zero_total, _ = total_loss({}, batch_size=1)
    assert _val(zero_total) == 0.0
    with pytest.raises(TrainingError, match="intra"):
        total_loss({"intra": float("nan")})


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    B, T, N, D = 3, 4, 5, 6
    params = {
        "img": rng.normal(size=(B, D)),
        "txt": rng.normal(size=(B, D)),
        "H": rng.normal(size=(B, T, D)),
        "logits": rng.normal(size=(B, N, T)),
        "itm.w": rng.normal(size=(D, 2)),
        "itm.b": rng.normal(size=2),
        "log_tau": np.array(math.log(0.3)),
    }
    queue = _unit(rng, 7, D)
    r = rng.integers(0, T, size=B)

    def f(p):
        from instvlp.numerics import l2_normalize, softmax

        tau = p["log_tau"].exp() if isinstance(p["log_tau"], Tensor) else Tensor(p["log_tau"]).exp()
        img, txt = l2_normalize(p["img"]), l2_normalize(p["txt"])
        H = l2_normalize(p["H"])
        M = softmax(p["logits"], axis=-1)
        return (
            itc_loss(img, txt, tau)
            + inter_product_loss(H[:, 0], H[:, 1], queue, tau)
            + itm_loss(H[:, 0], txt, np.array([1, 0, 1]), p)
            + intra_product_loss(H, txt, r, tau)
            + entropy_reg(M, r)
        )

    _, g = value_and_grad(f, params)
    fd = finite_diff_grad(lambda p: f({k: Tensor(v) for k, v in p.items()}).item(), params)
    for k in params:
        assert relative_error(g[k], fd[k]) <= 1e-4, k

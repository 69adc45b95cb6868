"""Reverse-mode gradients over parameter dicts, plus a finite-difference oracle."""

from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np

from .tensor import Tensor, UnsupportedOperationError

Params = Mapping[str, np.ndarray]


def value_and_grad(f: Callable, params: Params, *args, has_aux: bool = False, **kwargs):
    """Evaluate ``f(leaves, *args)`` and its gradient w.r.t. every entry of ``params``.

    ``f`` receives a dict of leaf Tensors with the same keys as ``params`` and
    must return a scalar Tensor (or ``(scalar, aux)`` when ``has_aux``).
    Parameters the output does not depend on get an all-zero gradient; an
    output that is not a Tensor means some op escaped the tape, which raises.
    """
    leaves = {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
    result = f(leaves, *args, **kwargs)
    out, aux = result if has_aux else (result, None)
    if not isinstance(out, Tensor):
        raise UnsupportedOperationError(
            f"objective returned {type(out).__name__}, not a Tensor: an unsupported primitive broke the tape"
        )
    if out.size != 1:
        raise ValueError(f"objective must be scalar, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
    grads = {
        k: (leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)) for k, leaf in leaves.items()
    }
    value = float(out.data.reshape(()))
    return (value, grads, aux) if has_aux else (value, grads)


def finite_diff_grad(f: Callable, params: Params, eps: float = 1e-5, keys=None) -> dict[str, np.ndarray]:
    """Central differences, one coordinate at a time.

    ``f`` takes a dict of plain arrays and returns a float. Only the entries
    named in ``keys`` (default: all) are differentiated.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    grads = {}
    for k in keys if keys is not None else base:
        x = base[k]
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = float(f(base))
            flat[i] = old - eps
            fm = float(f(base))
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * eps)
        grads[k] = g
    return grads


def directional_fd(f: Callable, params: Params, direction: Params, eps: float = 1e-5) -> float:
    """Central difference of ``f`` along ``direction`` (a dict shaped like ``params``)."""
    plus = {k: np.asarray(v) + eps * direction.get(k, 0.0) for k, v in params.items()}
    minus = {k: np.asarray(v) - eps * direction.get(k, 0.0) for k, v in params.items()}
    return (float(f(plus)) - float(f(minus))) / (2.0 * eps)


def relative_error(a, b, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0

"""Gradient maps and finite-difference verification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, precision


def backward(loss: Tensor, params: Iterable[Parameter]) -> Dict[str, np.ndarray]:
    """Run reverse-mode differentiation and return ``{name: gradient}``.

    Every trainable parameter in ``params`` gets an entry; parameters with no
    path to ``loss`` receive exact zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    params = list(params)
    if not loss.requires_grad:
        raise RuntimeError("backward: loss is detached from the gradient graph")
    for p in params:
        p.grad = None
    loss.backward()
    grads = {}
    for p in params:
        if not p.trainable:
            continue
        grads[p.name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-5,
    tol: float = 1e-5,
    grad_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    atol: float = 1e-12,
) -> GradCheckReport:
    """Compare the tape gradient of scalar ``f`` at ``point`` against central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, atol)``; the check
    passes iff the maximum is at most ``tol``. ``grad_fn`` overrides the tape
    gradient (used to test that corrupted gradients are caught).
    """
    with precision("float64"):
        x0 = np.array(point, dtype=np.float64, copy=True)
        x = Tensor(x0, requires_grad=True)
        out = f(x)
        if out.size != 1:
            raise ShapeError(f"finite_difference_check: f must be scalar-valued, got shape {out.shape}")
        if grad_fn is not None:
            analytic = np.asarray(grad_fn(x0), dtype=np.float64)
        else:
            out.backward()
            analytic = x.grad if x.grad is not None else np.zeros_like(x0)
        numeric = np.zeros_like(x0)
        flat = numeric.reshape(-1)
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xm = x0.copy().reshape(-1)
            xp[i] += h
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            flat[i] = (fp - fm) / (2 * h)
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    rel = float((diff / denom).max()) if diff.size else 0.0
    return GradCheckReport(rel, float(diff.max()) if diff.size else 0.0, rel <= tol, analytic, numeric)

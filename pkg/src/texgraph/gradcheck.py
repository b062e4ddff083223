"""Finite-difference verification of recorded gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import ContractError, OracleError
from .tensor import Parameter, Tape, Tensor, backward, no_grad

__all__ = ["grad_check", "grad_check_report", "grad_check_params"]


def _analytic_gradient(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    x.grad = None
    x.requires_grad = True
    with Tape():
        y = f(x)
        if y.ndim != 0:
            raise ContractError(f"grad_check: f must return a scalar, got shape {y.shape}")
        if not np.isfinite(y.data):
            raise OracleError("grad_check: f(x) is not finite at the base point")
        backward(y)
    return np.zeros_like(x.data) if x.grad is None else np.array(x.grad, copy=True)


def _numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float) -> np.ndarray:
    base = x.data.copy()
    num = np.zeros_like(base)
    flat = base.reshape(-1)
    out = num.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f(Tensor(base)).data)
            flat[i] = orig - h
            lo = float(f(Tensor(base)).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise OracleError(f"grad_check: non-finite evaluation at coordinate {i}")
            out[i] = (hi - lo) / (2.0 * h)
    return num


def grad_check_report(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> tuple[float, int]:
    """Like :func:`grad_check`, also returning the worst flat coordinate."""
    analytic = _analytic_gradient(f, x)
    numeric = _numeric_gradient(f, x, h)
    if not analytic.size:
        return 0.0, 0
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    worst = int(np.argmax(rel))
    return float(rel.reshape(-1)[worst]), worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max relative disagreement between recorded and central-difference gradients.

    Relative error per coordinate is |analytic - numeric| divided by
    (|analytic| + |numeric| + 1e-8).  ``f`` must be finite in an
    ``h``-neighbourhood of ``x``; a non-finite evaluation raises
    :class:`OracleError` naming the coordinate.
    """
    return grad_check_report(f, x, h)[0]


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Parameter],
    h: float = 1e-6,
) -> dict[str, float]:
    """Finite-difference check of every parameter feeding ``loss_fn``.

    One recorded backward pass provides all analytic gradients; each
    parameter is then perturbed coordinate-by-coordinate.  Returns the
    max relative error per parameter name.
    """
    for p in params.values():
        p.zero_grad()
    with Tape():
        loss = loss_fn()
        if loss.ndim != 0:
            raise ContractError("grad_check_params: loss_fn must return a scalar")
        if not np.isfinite(loss.data):
            raise OracleError("grad_check_params: loss is not finite at the base point")
        backward(loss)
    analytic = {name: np.array(p.grad, copy=True) for name, p in params.items()}

    errors: dict[str, float] = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                hi = float(loss_fn().data)
                flat[i] = orig - h
                lo = float(loss_fn().data)
                flat[i] = orig
                if not (np.isfinite(hi) and np.isfinite(lo)):
                    raise OracleError(
                        f"grad_check_params: non-finite evaluation at {name}[{i}]"
                    )
                num = (hi - lo) / (2.0 * h)
                ana = analytic[name].reshape(-1)[i]
                rel = abs(ana - num) / (abs(ana) + abs(num) + 1e-8)
                worst = max(worst, rel)
            errors[name] = worst
    return errors

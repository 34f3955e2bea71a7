"""Finite-difference gradient checking.

The numeric gradient only ever evaluates forward passes, so it is
independent of the reverse-mode implementation it is used to check.
Run checks in float64 (build the inputs with ``dtype=np.float64``) with
the default step; float32 checks need a far coarser step and tolerance.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, zero_grads


def numeric_gradient(f: Callable[[], Tensor], param: Tensor,
                     step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` w.r.t. ``param``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().data.reshape(-1)[0])
            flat[i] = orig - step
            lo = float(f().data.reshape(-1)[0])
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-based relative difference, robust near zero."""
    na = np.linalg.norm(a.reshape(-1))
    nb = np.linalg.norm(b.reshape(-1))
    if na == 0 and nb == 0:
        return 0.0
    return float(np.linalg.norm((a - b).reshape(-1)) / max(na + nb, 1e-12))


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor],
                    step: float = 1e-5) -> dict[str, float]:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    Returns the relative error per parameter (keyed by position).  The
    analytic gradients are computed first, then each is checked against
    the numeric one obtained purely from forward evaluations.
    """
    zero_grads(params)
    loss = f()
    backward(loss)
    analytic = [np.array(p.grad, copy=True) if p.grad is not None
                else np.zeros_like(p.data) for p in params]
    errors = {}
    for k, (p, g) in enumerate(zip(params, analytic)):
        num = numeric_gradient(f, p, step=step)
        errors[f"param{k}"] = relative_error(g, num)
    zero_grads(params)
    return errors

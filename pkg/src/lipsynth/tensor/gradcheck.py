"""Gradient verification by central finite differences.

The numeric side is the independent oracle for every backward rule in
this package: (f(x+eps) - f(x-eps)) / (2 eps) per coordinate, compared
against the analytic gradient with relative error
|a - n| / max(|a|, |n|, 1e-8).  Run at 64-bit with deterministic f
(dropout disabled, batch-norm statistics fixed by the input).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import ShapeError
from .core import Tensor, backward, zero_grads


def gradient_check(f: Callable[[], Tensor], tensors: Sequence[Tensor],
                   eps: float = 1e-5, order: int = 2) -> float:
    """Max relative error between analytic and numeric grads of f wrt tensors.

    order=2 is the plain two-point stencil.  order=4 Richardson-extrapolates
    two stencil widths (eps and eps/2), cancelling the eps^2 truncation
    term; use it with a larger eps for deep compositions, where the
    two-point stencil cannot resolve near-zero gradient coordinates above
    the round-off floor of the loss value.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    tensors = list(tensors)
    zero_grads(tensors)
    loss = f()
    if loss.size != 1:
        raise ShapeError(f"gradient_check needs a scalar objective, got {loss.shape}")
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]

    def central(flat, i, orig, h):
        flat[i] = orig + h
        f_plus = float(f().data)
        flat[i] = orig - h
        f_minus = float(f().data)
        flat[i] = orig
        return (f_plus - f_minus) / (2.0 * h)

    max_err = 0.0
    for t, a_grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            if order == 2:
                numeric = central(flat, i, orig, eps)
            else:
                d1 = central(flat, i, orig, eps)
                d2 = central(flat, i, orig, eps / 2.0)
                numeric = (4.0 * d2 - d1) / 3.0
            a = float(a_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > max_err:
                max_err = err
    return max_err

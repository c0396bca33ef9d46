from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tensor, no_grad


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5, tol: float | None = None) -> float:
    """Compare analytic gradients of a scalar function against central differences.

    Returns max |analytic - numeric| / max(1, |numeric|) over every coordinate of
    every input that requires grad. Inputs must be 64-bit. When ``tol`` is given
    and exceeded, an AssertionError is raised as well.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check needs 64-bit inputs")
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    out.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    if tol is not None and worst > tol:
        raise AssertionError(f"gradient mismatch: max relative error {worst:.3e} > {tol:.1e}")
    return worst

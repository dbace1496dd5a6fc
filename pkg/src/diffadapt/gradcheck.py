"""Central finite-difference gradient checking for small modules.

Works in 64-bit; callers are expected to .double() their modules first.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def max_relative_grad_error(
    fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    epsilon: float = 1e-4,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare autograd gradients of the scalar fn() against central differences.

    tensors are the leaves to differentiate (parameters and/or inputs); each
    must be float64 with requires_grad. When max_coords_per_tensor is given,
    only a random coordinate subset per tensor is probed. Relative error uses
    max(|analytic|, |numeric|, 1e-3) as the denominator so near-zero gradients
    are judged on an absolute scale.
    """
    rng = rng or np.random.default_rng(0)
    out = fn()
    if out.ndim != 0:
        raise ValueError("fn must return a scalar")
    if not torch.isfinite(out):
        raise ValueError("non-finite functional value")
    grads = torch.autograd.grad(out, tensors, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for tensor, grad in zip(tensors, grads):
            flat = tensor.reshape(-1)
            n = flat.numel()
            if max_coords_per_tensor is not None and n > max_coords_per_tensor:
                coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
            else:
                coords = range(n)
            gflat = grad.reshape(-1) if grad is not None else None
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                f_plus = fn().item()
                flat[i] = orig - epsilon
                f_minus = fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * epsilon)
                analytic = gflat[i].item() if gflat is not None else 0.0
                if not np.isfinite(numeric) or not np.isfinite(analytic):
                    raise ValueError("non-finite gradient encountered")
                denom = max(abs(analytic), abs(numeric), 1e-3)
                worst = max(worst, abs(analytic - numeric) / denom)
    return worst

"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ssgen.errors import ContractError, NumericFailure
from ssgen.numcore.tensor import Tensor, backward, clear_tape, no_grad


def gradient_check(
    scalar_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-6,
    max_entries: int = 10_000,
    floor: float = 1e-8,
) -> float:
    """Return the max relative error between backward() and central differences.

    ``scalar_fn`` must be deterministic and read ``params`` afresh on each call.
    The relative error denominator is ``max(|analytic|, |numeric|, floor)``.
    Raise ``floor`` above the finite-difference noise level (about
    ``eps_machine * |f| / epsilon``) when some true gradients are exactly zero.
    """
    total = sum(p.size for p in params)
    if total > max_entries:
        raise ContractError(f"{total} parameter entries exceeds the {max_entries} limit")
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("gradient_check requires 64-bit parameters")

    def value() -> float:
        with no_grad():
            out = scalar_fn().item()
        if not np.isfinite(out):
            raise NumericFailure("function value is not finite")
        return out

    clear_tape()
    for p in params:
        p.grad = None
    loss = scalar_fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            f_plus = value()
            flat[i] = original - epsilon
            f_minus = value()
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            denom = max(abs(a_flat[i]), abs(numeric), floor)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst

"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tape, Tensor


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    coords: Optional[np.ndarray] = None,
) -> float:
    """Return the max relative error between the tape gradient and central differences.

    ``f`` maps a tensor to a scalar tensor.  The error per coordinate is
    ``|a - cd| / (|a| + |cd| + 1e-12)``.  Pass ``coords`` (flat indices) to
    restrict the check to a subset.  Points on a kink (e.g. relu at 0) are the
    caller's responsibility to avoid.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    tape.backward(y)
    analytic = np.zeros_like(x0) if xt.grad is None else xt.grad.reshape(x0.shape)

    def value(arr):
        v = f(Tensor(arr)).data
        if not np.isfinite(v).all():
            raise FloatingPointError("objective is not finite")
        return float(v)

    flat = x0.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    worst = 0.0
    for i in idx:
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        cd = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - cd) / (abs(a) + abs(cd) + 1e-12))
    return worst


def params_finite_diff_check(
    loss_fn: Callable[[dict], Tensor],
    params: dict,
    h: float = 1e-6,
    max_coords_per_tensor: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    zero_tol: float = 1e-8,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn(params)`` against every parameter tensor.

    Returns the worst relative error per parameter name.  Coordinates where
    both the analytic and numeric derivative are below ``zero_tol`` count as
    agreeing: their relative error only compares round-off (the key bias of
    softmax attention, for instance, has an exactly zero gradient).
    """
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn(params)
    tape.backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords_per_tensor, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn(params).data)
            flat[i] = orig - h
            down = float(loss_fn(params).data)
            flat[i] = orig
            cd = (up - down) / (2 * h)
            a = analytic[name].reshape(-1)[i]
            if abs(a) < zero_tol and abs(cd) < zero_tol:
                continue
            worst = max(worst, abs(a - cd) / (abs(a) + abs(cd) + 1e-12))
        errors[name] = worst
    return errors

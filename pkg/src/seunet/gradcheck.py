"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class GradcheckError(ArithmeticError):
    """A function value or gradient was not finite."""


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    h: float = 1e-4,
    coords: Sequence[int] | None = None,
) -> float:
    """Largest relative error between backprop and central differences.

    For every checked flat coordinate ``i`` the error is
    ``|analytic_i - fd_i| / max(|analytic_i|, 1e-8)``. ``coords`` limits the
    check to a subset of coordinates, which keeps big inputs affordable.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x)
    dtype = base.dtype

    leaf = Tensor(base, requires_grad=True, dtype=dtype)
    out = f(leaf)
    if out.data.size != 1:
        raise ValueError(f"gradcheck needs a scalar-valued function, got shape {out.shape}")
    if not np.all(np.isfinite(out.data)):
        raise GradcheckError("function value is not finite")
    out.backward()
    analytic = np.zeros_like(base) if leaf.grad is None else leaf.grad
    if not np.all(np.isfinite(analytic)):
        raise GradcheckError("analytic gradient is not finite")

    flat = base.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        values = []
        for step in (h, -h):
            probe = flat.copy()
            probe[i] += step
            with no_grad():
                val = float(f(Tensor(probe.reshape(base.shape), dtype=dtype)).data)
            if not np.isfinite(val):
                raise GradcheckError(f"function value not finite at coordinate {i}")
            values.append(val)
        numeric = (values[0] - values[1]) / (2 * h)
        a = float(analytic.reshape(-1)[i])
        worst = max(worst, abs(a - numeric) / max(abs(a), 1e-8))
    return worst

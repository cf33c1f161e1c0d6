"""Central finite-difference gradient oracle.

The oracle only calls the forward path (repeatedly, with perturbed values), so
it stays independent of the reverse-mode sweep it is used to check.
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractError, Tensor, backward


def numerical_gradient(loss_fn, tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar loss w.r.t. one tensor's entries."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        hi = float(loss_fn().data)
        flat[i] = original - h
        lo = float(loss_fn().data)
        flat[i] = original
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def check_gradients(
    loss_fn,
    tensors: dict[str, Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    atol: float = 1e-7,
) -> dict[str, float]:
    """Compare reverse-mode gradients of loss_fn() against central differences.

    Returns the worst relative error per tensor; raises AssertionError naming
    the offending tensor when |analytic - numeric| > atol + rtol * |numeric|.
    """
    for t in tensors.values():
        if t.dtype != np.float64:
            raise ContractError("gradient checks must run at float64")
        t.grad = None
        t.requires_grad = True
    loss = loss_fn()
    backward(loss)
    worst: dict[str, float] = {}
    for name, t in tensors.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_gradient(loss_fn, t, h=h)
        diff = np.abs(analytic - numeric)
        bound = atol + rtol * np.abs(numeric)
        if np.any(diff > bound):
            idx = np.unravel_index(np.argmax(diff - bound), diff.shape)
            raise AssertionError(
                f"gradient mismatch for {name!r} at {idx}: "
                f"analytic={analytic[idx]:.8g} numeric={numeric[idx]:.8g}"
            )
        denom = max(float(np.abs(numeric).max()), 1e-8)
        worst[name] = float(diff.max()) / denom
    return worst

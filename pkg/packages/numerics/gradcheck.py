"""Central finite-difference gradient oracle."""

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from packages.numerics.tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - b| / max(1, |a|, |b|), elementwise."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-6,
                       indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Estimate d(loss)/d(param) by central differences.

    Args:
        loss_fn: Rebuilds the scalar loss from the current parameter values
        param: Tensor whose entries are perturbed in place
        h: Step size
        indices: Flat indices to perturb; all entries when None

    Returns:
        np.ndarray: Flat array of estimates, one per perturbed index
    """
    flat = param.data.reshape(-1)
    chosen = range(flat.size) if indices is None else indices
    estimates = []
    with no_grad():
        for i in chosen:
            original = flat[i]
            flat[i] = original + h
            plus = loss_fn().item()
            flat[i] = original - h
            minus = loss_fn().item()
            flat[i] = original
            estimates.append((plus - minus) / (2 * h))
    return np.asarray(estimates)


def check_gradients(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor], h: float = 1e-6,
                    max_entries: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """
    Compare analytic gradients of every tensor in ``params`` with finite differences.

    Args:
        loss_fn: Builds a fresh scalar loss from the current parameter values
        params: Named tensors (float64 for meaningful results)
        h: Finite-difference step
        max_entries: Check at most this many randomly chosen entries per tensor
        seed: Seed for choosing checked entries

    Returns:
        dict: Maximum relative error per tensor name
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, param in params.items():
        analytic = (param.grad if param.grad is not None else np.zeros_like(param.data)).reshape(-1)
        if max_entries is not None and param.size > max_entries:
            indices = np.sort(rng.choice(param.size, size=max_entries, replace=False))
        else:
            indices = np.arange(param.size)
        numeric = numerical_gradient(loss_fn, param, h=h, indices=indices)
        errors[name] = float(relative_error(analytic[indices], numeric).max()) if len(indices) else 0.0
    return errors

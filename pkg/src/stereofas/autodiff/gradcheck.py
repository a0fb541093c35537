"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5,
                   indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """d fn() / d t by central differences; ``t.data`` is perturbed and restored."""
    t.data = np.ascontiguousarray(t.data)
    flat = t.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data)
        flat[i] = orig - eps
        fm = float(fn().data)
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return grad.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Worst relative error over ``inputs`` between backprop and finite differences.

    ``fn`` must rebuild the graph from the current contents of ``inputs``.
    With ``max_entries`` set, only that many randomly chosen coordinates per
    input are compared.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(t.size, size=max_entries, replace=False)
            numeric = numerical_grad(fn, t, eps, picks).ravel()[picks]
            worst = max(worst, relative_error(analytic.ravel()[picks], numeric))
        else:
            worst = max(worst, relative_error(analytic, numerical_grad(fn, t, eps)))
    return worst

"""Central finite-difference gradient checks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    max_elem_rel_err: float = 0.0

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def normwise_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over a whole tensor.

    Entrywise ratios are dominated by finite-difference noise on entries that
    are nearly zero, so this is the headline number.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None,
                    names: Sequence[str] | None = None, floor: float = 1e-8,
                    analytic_hook: Callable[[list[np.ndarray]], None] | None = None,
                    order: int = 2) -> list[GradCheckResult]:
    """Compare reverse-mode gradients of the scalar ``fn()`` against central differences.

    ``params`` are perturbed in place and restored. When ``max_entries`` is set,
    that many entries per parameter are sampled instead of checking all of them.
    ``max_rel_err`` is the normwise error per tensor; the entrywise maximum is
    kept alongside for diagnosis. ``analytic_hook`` may edit the reverse-mode
    gradients in place before comparison (used for negative controls).
    ``order=4`` uses the five-point central stencil, whose O(eps^4) truncation
    error allows a larger step and so less roundoff noise.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    if analytic_hook is not None:
        analytic_hook(analytic)
    results = []
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        num = np.empty(idx.size)
        def at(e, x):
            flat[e] = x
            return fn().item()

        for j, e in enumerate(idx):
            orig = flat[e]
            if order == 2:
                num[j] = (at(e, orig + eps) - at(e, orig - eps)) / (2 * eps)
            else:
                num[j] = (8 * (at(e, orig + eps) - at(e, orig - eps))
                          - (at(e, orig + 2 * eps) - at(e, orig - 2 * eps))) / (12 * eps)
            flat[e] = orig
        ana = analytic[i].reshape(-1)[idx]
        results.append(GradCheckResult(
            name=names[i] if names else (p.name or f"param{i}"),
            max_rel_err=normwise_error(ana, num, floor),
            max_abs_err=float(np.abs(ana - num).max()),
            n_checked=int(idx.size),
            max_elem_rel_err=float(relative_error(ana, num, floor).max()),
        ))
    return results

"""Central finite-difference gradients, independent of the autodiff tape."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Norm-wise relative error; falls back to absolute error when both are ~0."""
    diff = float(np.linalg.norm(analytic - numeric))
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff / denom if denom > floor else diff


def kink_margin(out: Tensor) -> float:
    """Smallest ``|input|`` of any relu on the tape behind ``out`` (inf if none).

    Finite differences are meaningless when this is below the step size.
    """
    best, seen, stack = float("inf"), set(), [out]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node.op == "relu":
            best = min(best, float(np.abs(node.parents[0].data).min()))
        stack.extend(node.parents or ())
    return best


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]],
    step: float = 1e-5,
) -> dict[str, float]:
    """Relative error between tape gradients and finite differences per named tensor.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call.
    """
    params = list(params)
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    errors = {}
    for name, p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = numerical_grad(lambda: loss_fn().item(), p.data, step)
        errors[name] = rel_error(analytic, numeric)
    return errors

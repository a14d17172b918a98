"""Central finite differences for checking hand-written gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from vqar.autograd import Tensor

STEP = 1e-5
RTOL = 1e-4


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = STEP) -> np.ndarray:
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        hi = f()
        arr[i] = old - step
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(a - b))
    den = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)), 1e-7)
    return float(num / den)


def check(build: Callable[[], Tensor], params: Sequence[Tensor], step: float = STEP) -> float:
    """Largest relative error between backward() and finite differences over ``params``."""
    for p in params:
        p.grad = None
    build().backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numeric_grad(lambda: build().item(), p.data, step)
        worst = max(worst, rel_error(a, n))
    return worst

"""Central finite-difference checks against the tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckResult:
    name: str
    rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error <= self.tol)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``max|a-n| / max(max|a|, max|n|)``."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-5,
                 coords: np.ndarray | None = None, refine: int = 2) -> np.ndarray:
    """Central differences; with ``coords`` only those flat entries are filled.

    ReLUs and hinges put kinks in the loss surface. When the forward and
    backward one-sided slopes disagree, a kink lies within ``h`` of the
    point and the step is shrunk by 10x, at most ``refine`` times.
    """
    flat = t.data.reshape(-1)
    g = np.zeros_like(flat)
    base = fn().item() if refine else 0.0
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        step = h
        for attempt in range(refine + 1):
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            g[i] = (up - down) / (2 * step)
            fwd, bwd = (up - base) / step, (base - down) / step
            if attempt == refine or abs(fwd - bwd) <= 1e-3 * (abs(g[i]) + 1e-3):
                break
            step /= 10
    return g.reshape(t.shape)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    name: str = "",
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare backward() against central differences for every input.

    ``fn`` must rebuild the graph from the current ``inputs`` data on each
    call and return a scalar. Inputs must be 64-bit. With ``sample`` set,
    only that many randomly chosen entries (over all inputs) are compared.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks need float64 inputs")
        t.requires_grad = True
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.grad = None
    if sample is None:
        numeric = [numeric_grad(fn, t, h) for t in inputs]
        a_flat = np.concatenate([a.reshape(-1) for a in analytic])
        n_flat = np.concatenate([n.reshape(-1) for n in numeric])
    else:
        rng = rng or np.random.default_rng(0)
        sizes = [t.size for t in inputs]
        offsets = np.cumsum([0] + sizes)
        picks = np.sort(rng.choice(offsets[-1], size=min(sample, offsets[-1]), replace=False))
        a_parts, n_parts = [], []
        for j, t in enumerate(inputs):
            local = picks[(picks >= offsets[j]) & (picks < offsets[j + 1])] - offsets[j]
            if local.size:
                a_parts.append(analytic[j].reshape(-1)[local])
                n_parts.append(numeric_grad(fn, t, h, local).reshape(-1)[local])
        a_flat, n_flat = np.concatenate(a_parts), np.concatenate(n_parts)
    err = max_rel_error(a_flat, n_flat)
    return GradCheckResult(name, err, tol)

"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, record_kinks


def numerical_grad(f: Callable[[], Tensor], t: Tensor, eps: float = 1e-5,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t`` (all, or ``indices``)."""
    out = np.zeros_like(t.data)
    idx = list(np.ndindex(t.shape)) if indices is None else indices
    with no_grad():
        for i in idx:
            orig = t.data[i]
            t.data[i] = orig + eps
            hi = f().item()
            t.data[i] = orig - eps
            lo = f().item()
            t.data[i] = orig
            out[i] = (hi - lo) / (2 * eps)
    return out


def analytic_grads(f: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.grad = None
    f().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """max |a - b| / max(|a|, |b|, floor) over entries.

    The floor keeps finite-difference round-off (about 1e-11 here) on
    near-zero gradients from dominating the ratio.
    """
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest entrywise relative error between tape and finite-difference gradients."""
    analytic = analytic_grads(f, tensors)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        worst = max(worst, relative_error(a, numerical_grad(f, t, eps)))
    return worst


def _eval_with_kinks(f):
    with record_kinks() as log:
        value = f().item()
    return value, log


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def directional_check(f: Callable[[], Tensor], t: Tensor, analytic: np.ndarray,
                      rng: np.random.Generator, eps: float = 1e-5,
                      min_eps: float = 1e-8) -> tuple[float, float]:
    """Compare ``<grad, v>`` with a finite difference along a random unit direction ``v``.

    Returns ``(analytic_value, numerical_value)``; every entry of ``t``
    contributes, so a handful of evaluations covers the whole tensor.
    The stencil must not cross a relu or abs kink: a central difference
    is used when both sides match the base activation pattern, a
    second-order one-sided difference when only one side does, and
    otherwise the step shrinks tenfold down to ``min_eps``.
    """
    v = rng.normal(size=t.shape)
    v /= np.linalg.norm(v)
    orig = t.data.copy()

    def at(step):
        t.data = orig + step * v
        return _eval_with_kinks(f)

    try:
        with no_grad():
            base, base_k = at(0.0)
            while True:
                (p1, k1), (p2, k2) = at(eps), at(2 * eps)
                (m1, j1), (m2, j2) = at(-eps), at(-2 * eps)
                up = _same_pattern(base_k, k1) and _same_pattern(base_k, k2)
                down = _same_pattern(base_k, j1) and _same_pattern(base_k, j2)
                if up and down:
                    numeric = (8 * (p1 - m1) - (p2 - m2)) / (12 * eps)
                    break
                if up:
                    numeric = (-3 * base + 4 * p1 - p2) / (2 * eps)
                    break
                if down:
                    numeric = (3 * base - 4 * m1 + m2) / (2 * eps)
                    break
                if eps / 10 < min_eps:
                    numeric = (p1 - m1) / (2 * eps)
                    break
                eps /= 10
    finally:
        t.data = orig
    return float(np.sum(analytic * v)), numeric

"""Query diversity penalty and the combined training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class LossBreakdown:
    ce: float
    diversity: float
    lam: float
    total: float


def diversity_loss(states) -> Tensor:
    """Sum over windows of all pairwise cosine similarities among that window's queries.

    ``states`` is (W, N, d). The i == j terms are kept, so the value is
    ``W * N`` for mutually orthogonal queries and ``W * N**2`` when all of a
    window's queries point the same way; those diagonal terms carry no
    gradient.
    """
    states = states if isinstance(states, Tensor) else Tensor(states)
    if states.ndim == 2:
        states = states.reshape(1, *states.shape)
    if states.ndim != 3 or states.shape[0] < 1 or states.shape[1] < 1:
        raise ValueError("expected window states of shape (W, N, d)")
    return T.tsum(T.cosine_matrix(states))


def total_loss(ce: float, diversity: float, lam: float) -> LossBreakdown:
    """Combine the two terms as ``ce + lam * diversity``."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return LossBreakdown(float(ce), float(diversity), float(lam), float(ce) + float(lam) * float(diversity))


def objective(ce: Tensor, diversity: Tensor, lam: float) -> Tensor:
    """Differentiable counterpart of :func:`total_loss`."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return ce + diversity * lam


def mean_offdiag_similarity(states: np.ndarray) -> float:
    """Mean cosine similarity over distinct query pairs within each window."""
    states = np.asarray(states)
    if states.ndim == 2:
        states = states[None]
    n = states.shape[1]
    if n < 2:
        raise ValueError("need at least two queries per window")
    xn = states / np.linalg.norm(states, axis=-1, keepdims=True)
    sims = xn @ np.swapaxes(xn, -1, -2)
    off = ~np.eye(n, dtype=bool)
    return float(sims[:, off].mean())

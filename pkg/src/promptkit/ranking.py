"""Rank correlation between text- and visual-prompt query scores.

Exact Kendall tau over all index pairs (ties contribute to neither the
concordant nor the discordant count; the denominator stays N(N-1)/2),
its differentiable tanh surrogate with analytic gradients, and top-K
query selection by a combined text/visual score.

All pairwise routines run in O(N^2) time but O(N) memory via row
blocking, which keeps N up to ~10^4 practical on a desk machine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import as_float_vector

_BLOCK = 256


@dataclass(frozen=True)
class TauResult:
    """Kendall tau with its concordant/discordant pair counts."""

    tau: float
    concordant: int
    discordant: int
    n: int


def _score_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    x = as_float_vector(a, "first score list")
    y = as_float_vector(b, "second score list")
    if x.size != y.size:
        raise ValueError(f"score length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("rank statistics need at least 2 scores")
    return x, y


def kendall_tau(a, b) -> TauResult:
    """Exact Kendall tau: (concordant - discordant) / (N(N-1)/2).

    A pair (i, j) is concordant when both lists order it the same way,
    discordant when they disagree; pairs tied in either list count for
    neither side while the denominator keeps all N(N-1)/2 pairs.
    """
    x, y = _score_pair(a, b)
    n = x.size
    concordant = 0
    discordant = 0
    # Row i against all j < i keeps memory at O(N).
    for i in range(1, n):
        prod = np.sign(x[i] - x[:i]) * np.sign(y[i] - y[:i])
        concordant += int((prod > 0).sum())
        discordant += int((prod < 0).sum())
    pairs = n * (n - 1) // 2
    return TauResult(
        tau=(concordant - discordant) / pairs,
        concordant=concordant,
        discordant=discordant,
        n=n,
    )


@dataclass(frozen=True)
class OrderLossResult:
    loss: float
    grad_text: np.ndarray
    grad_visual: np.ndarray


def order_loss(text_scores, visual_scores) -> OrderLossResult:
    """Differentiable order-alignment loss with analytic gradients.

    loss = -sum_{i>j} tanh(t_i - t_j) * tanh(v_i - v_j) / (N(N-1)/2),
    a smooth surrogate for negated Kendall tau; it lives in [-1, 1].

    With G = (1 - tanh^2(dt)) * tanh(dv) elementwise over the full
    difference matrices, grad_text[k] = -row_sum(G)[k] / (N(N-1)/2)
    (G is antisymmetric, so the two pair orientations collapse into one
    row sum); grad_visual is symmetric with roles swapped.
    """
    t, v = _score_pair(text_scores, visual_scores)
    n = t.size
    pairs = n * (n - 1) / 2.0
    loss_acc = 0.0
    grad_t = np.zeros(n)
    grad_v = np.zeros(n)
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        dt = np.tanh(t[start:stop, None] - t[None, :])
        dv = np.tanh(v[start:stop, None] - v[None, :])
        # Full i != j sum double-counts each pair, halved below.
        loss_acc += float((dt * dv).sum())
        grad_t[start:stop] = -((1.0 - dt * dt) * dv).sum(axis=1) / pairs
        grad_v[start:stop] = -((1.0 - dv * dv) * dt).sum(axis=1) / pairs
    return OrderLossResult(
        loss=-loss_acc / (2.0 * pairs),
        grad_text=grad_t,
        grad_visual=grad_v,
    )


def soft_tau_convergence(a, b, scale: float) -> float:
    """Negated surrogate loss on scaled scores; approaches exact tau as
    the scale grows when both lists are tie-free.

    Raises when either list contains ties, since the saturation argument
    requires strict orderings.
    """
    x, y = _score_pair(a, b)
    for name, arr in (("first", x), ("second", y)):
        if np.unique(arr).size != arr.size:
            raise ValueError(f"{name} score list contains ties")
    return -order_loss(scale * x, scale * y).loss


def select_queries(text_scores, visual_scores, k: int, alpha: float = 0.5) -> np.ndarray:
    """Indices of the top-k queries by combined score.

    combined = alpha * text + (1 - alpha) * visual; ties break toward
    the lower index and the result is sorted by descending combined
    score.  The default alpha weights both prompt types equally.
    """
    t, v = _score_pair(text_scores, visual_scores)
    if not 0 <= k <= t.size:
        raise ValueError(f"k must lie in [0, {t.size}], got {k}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    combined = alpha * t + (1.0 - alpha) * v
    # lexsort: last key is primary, so order by -combined then index.
    order = np.lexsort((np.arange(t.size), -combined))
    return order[:k].copy()

"""Set-matching losses: boxes, masks, Hungarian assignment, and the
composite objective with two-stage gating.

Boxes are corner-form [x1, y1, x2, y2] float arrays; masks are 2-D
grids with predictions in [0, 1] and binary ground truth.  Every loss
returns ``(value, gradient_wrt_prediction)`` and is validated against
central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .alignment import align_loss
from .ranking import order_loss

# DETR-family matching-cost convention; the composite objective also
# supports the flat all-ones form via MatchWeights.flat().
DEFAULT_CLS_WEIGHT = 2.0
DEFAULT_L1_WEIGHT = 5.0
DEFAULT_GIOU_WEIGHT = 2.0

# Decoder query budget used by downstream configs; kept as a named
# constant only.
DEFAULT_QUERY_BUDGET = 900

BCE_CLAMP = 1e-7


def as_box(b, name: str = "box") -> np.ndarray:
    a = np.asarray(b, dtype=np.float64)
    if a.shape != (4,):
        raise ValueError(f"{name} must have 4 coordinates, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite coordinates")
    return a


def validate_box(b, name: str = "box") -> np.ndarray:
    """Strict boundary-form check used at IO boundaries: coordinates in
    [0, 1] with x1 <= x2 and y1 <= y2."""
    a = as_box(b, name)
    if np.any(a < 0.0) or np.any(a > 1.0):
        raise ValueError(f"{name} coordinates must lie in [0, 1], got {a.tolist()}")
    if a[0] > a[2] or a[1] > a[3]:
        raise ValueError(f"{name} must satisfy x1 <= x2 and y1 <= y2, got {a.tolist()}")
    return a


def iou(a, b) -> float:
    """Intersection over union in [0, 1].

    Zero-area boxes give 0 against anything except an identical
    degenerate box, which gives 1.
    """
    pa = as_box(a, "first box")
    pb = as_box(b, "second box")
    iw = min(pa[2], pb[2]) - max(pa[0], pb[0])
    ih = min(pa[3], pb[3]) - max(pa[1], pb[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    area_a = (pa[2] - pa[0]) * (pa[3] - pa[1])
    area_b = (pb[2] - pb[0]) * (pb[3] - pb[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 1.0 if np.array_equal(pa, pb) else 0.0
    return float(inter / union)


def giou_loss(pred, gt) -> tuple[float, np.ndarray]:
    """1 - GIoU with the analytic gradient w.r.t. the predicted box.

    GIoU = IoU - (enclosing_area - union) / enclosing_area; the loss
    lies in [0, 2).  Max/min corner choices use subgradients, so the
    gradient is exact away from coordinate ties.
    """
    p = as_box(pred, "pred box")
    g = as_box(gt, "gt box")

    pw, ph = p[2] - p[0], p[3] - p[1]
    area_p = pw * ph
    area_g = (g[2] - g[0]) * (g[3] - g[1])
    # d(area_p)/dp
    d_area = np.array([-ph, -pw, ph, pw])

    iw = min(p[2], g[2]) - max(p[0], g[0])
    ih = min(p[3], g[3]) - max(p[1], g[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    d_iw = np.zeros(4)
    d_ih = np.zeros(4)
    if iw > 0.0 and ih > 0.0:
        if p[0] >= g[0]:
            d_iw[0] = -1.0
        if p[2] <= g[2]:
            d_iw[2] = 1.0
        if p[1] >= g[1]:
            d_ih[1] = -1.0
        if p[3] <= g[3]:
            d_ih[3] = 1.0
    d_inter = ih * d_iw + iw * d_ih if inter > 0.0 else np.zeros(4)

    union = area_p + area_g - inter
    d_union = d_area - d_inter

    cw = max(p[2], g[2]) - min(p[0], g[0])
    ch = max(p[3], g[3]) - min(p[1], g[1])
    enclose = cw * ch
    d_cw = np.zeros(4)
    d_ch = np.zeros(4)
    if p[0] <= g[0]:
        d_cw[0] = -1.0
    if p[2] >= g[2]:
        d_cw[2] = 1.0
    if p[1] <= g[1]:
        d_ch[1] = -1.0
    if p[3] >= g[3]:
        d_ch[3] = 1.0
    d_enclose = ch * d_cw + cw * d_ch

    if union <= 0.0:
        # Both boxes degenerate: identical points count as a perfect hit.
        return (0.0 if np.array_equal(p, g) else 2.0), np.zeros(4)

    iou_val = inter / union
    d_iou = (d_inter * union - inter * d_union) / (union * union)
    if enclose <= 0.0:
        giou = iou_val
        d_giou = d_iou
    else:
        giou = iou_val - (enclose - union) / enclose
        d_giou = d_iou + (d_union * enclose - union * d_enclose) / (enclose * enclose)
    return float(1.0 - giou), -d_giou


def l1_box_loss(pred, gt) -> tuple[float, np.ndarray]:
    """Mean absolute coordinate difference; subgradient 0 at equality."""
    p = as_box(pred, "pred box")
    g = as_box(gt, "gt box")
    diff = p - g
    return float(np.abs(diff).mean()), np.sign(diff) / 4.0


def dice_loss(pred, gt, eps: float = 1.0) -> tuple[float, np.ndarray]:
    """Soft dice loss 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)
    with the analytic gradient w.r.t. the prediction grid."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.ndim != 2 or p.shape != g.shape:
        raise ValueError(f"mask shape mismatch: {p.shape} vs {g.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    num = 2.0 * float((p * g).sum()) + eps
    den = float(p.sum() + g.sum()) + eps
    loss = 1.0 - num / den
    grad = -(2.0 * g * den - num) / (den * den)
    return float(loss), grad


def bce_mask_loss(pred, gt) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy with predictions clamped to
    [1e-7, 1 - 1e-7]; clamped pixels get zero gradient."""
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.ndim != 2 or p.shape != g.shape:
        raise ValueError(f"mask shape mismatch: {p.shape} vs {g.shape}")
    clamped = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(g * np.log(clamped) + (1.0 - g) * np.log(1.0 - clamped)).mean()
    interior = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    grad = np.where(interior, (-g / clamped + (1.0 - g) / (1.0 - clamped)), 0.0) / p.size
    return float(loss), grad


# ---------------------------------------------------------------------------
# Hungarian assignment
# ---------------------------------------------------------------------------


def _min_assignment_cost(costs: np.ndarray) -> float:
    if costs.shape[0] == 0 or costs.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(costs)
    return float(costs[rows, cols].sum())


def hungarian(costs) -> tuple[dict[int, int], float]:
    """Minimum-cost assignment of min(rows, cols) pairs.

    Among all minimum-cost assignments, returns the lexicographically
    smallest one: rows are fixed in index order to the lowest column
    that still admits an optimal completion, with "unassigned" ordering
    after any column.  Raises on non-finite costs.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] == 0 or c.shape[1] == 0:
        raise ValueError(f"cost matrix must be nonempty 2-D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    n_rows, n_cols = c.shape
    need = min(n_rows, n_cols)
    best_total = _min_assignment_cost(c)
    tol = 1e-9 * max(1.0, abs(best_total))
    nonnegative = bool(np.all(c >= 0.0))

    assignment: dict[int, int] = {}
    free_cols = list(range(n_cols))  # kept ascending
    fixed_cost = 0.0
    for row in range(n_rows):
        remaining_rows = n_rows - row - 1
        need_left = need - len(assignment)
        if need_left == 0:
            break
        chosen = None
        for col in free_cols:
            # With nonnegative costs the completion cannot reduce the
            # total, so an over-budget prefix rules the column out.
            if nonnegative and fixed_cost + c[row, col] > best_total + tol:
                continue
            rest_cols = [x for x in free_cols if x != col]
            rest = 0.0
            if need_left > 1:
                sub = c[np.ix_(list(range(row + 1, n_rows)), rest_cols)]
                rest = _min_assignment_cost(sub)
            if fixed_cost + c[row, col] + rest <= best_total + tol:
                chosen = col
                break
        if chosen is None:
            # Leaving this row unassigned is only feasible when enough
            # rows remain to place the outstanding columns.
            if remaining_rows < need_left:
                raise RuntimeError("assignment search failed to reconstruct the optimum")
            continue
        assignment[row] = chosen
        free_cols.remove(chosen)
        fixed_cost += float(c[row, chosen])

    if len(assignment) != need:
        raise RuntimeError("assignment search failed to place all pairs")
    total = float(sum(c[r, col] for r, col in assignment.items()))
    return assignment, total


# ---------------------------------------------------------------------------
# Composite objective
# ---------------------------------------------------------------------------


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


@dataclass(frozen=True)
class MatchWeights:
    """Per-term weights for matching costs and the composite total."""

    cls: float = DEFAULT_CLS_WEIGHT
    l1: float = DEFAULT_L1_WEIGHT
    giou: float = DEFAULT_GIOU_WEIGHT
    bce: float = 1.0
    dice: float = 1.0
    align: float = 1.0
    order: float = 1.0

    @classmethod
    def flat(klass) -> "MatchWeights":
        """All-ones weighting: the composite reduces to a plain sum."""
        return klass(cls=1.0, l1=1.0, giou=1.0, bce=1.0, dice=1.0, align=1.0, order=1.0)


@dataclass(frozen=True)
class Prediction:
    box: np.ndarray
    embed: np.ndarray
    mask: np.ndarray | None = None


@dataclass(frozen=True)
class Target:
    box: np.ndarray
    embed: np.ndarray
    mask: np.ndarray | None = None


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted component values; total is exactly their sum."""

    cls: float
    bbox: float
    mask: float
    align: float
    order: float
    total: float


def match_and_total_loss(
    preds,
    targets,
    weights: MatchWeights | None = None,
    stage: str = "joint",
    align_visual=None,
    align_text=None,
    text_scores=None,
    visual_scores=None,
    temperature: float = 0.07,
):
    """Hungarian-match predictions to targets and sum the objective.

    Matching cost per pair: w_cls * (1 - cos_sim)/2 + w_l1 * L1 +
    w_giou * giou_loss.  Box and mask components are means over matched
    pairs; classification covers every prediction, with unmatched
    predictions pulled toward zero similarity against all target
    prompts (with no targets at all, the breakdown is classification
    only and the component is zero).

    ``stage`` is "joint" or "text_only"; the text-only stage zeroes the
    order term and the alignment gradient w.r.t. visual embeddings,
    keeping visual components fixed.

    Returns ``(breakdown, matches, extras)`` where matches is the list
    of (pred_index, target_index) pairs and extras carries the
    stage-gated alignment/order gradients when those inputs are given.
    """
    if stage not in ("joint", "text_only"):
        raise ValueError(f"stage must be 'joint' or 'text_only', got {stage!r}")
    w = weights or MatchWeights()
    preds = list(preds)
    targets = list(targets)

    sim = np.zeros((len(preds), len(targets)))
    for i, p in enumerate(preds):
        for j, t in enumerate(targets):
            sim[i, j] = _cosine(np.asarray(p.embed, dtype=np.float64),
                                np.asarray(t.embed, dtype=np.float64))

    matches: list[tuple[int, int]] = []
    if preds and targets:
        cost = np.zeros((len(preds), len(targets)))
        for i, p in enumerate(preds):
            for j, t in enumerate(targets):
                cost[i, j] = (
                    w.cls * (1.0 - sim[i, j]) / 2.0
                    + w.l1 * l1_box_loss(p.box, t.box)[0]
                    + w.giou * giou_loss(p.box, t.box)[0]
                )
        assignment, _ = hungarian(cost)
        matches = sorted(assignment.items())

    row_to_col = dict(matches)
    cls_terms = []
    for i in range(len(preds)):
        if i in row_to_col:
            cls_terms.append((1.0 - sim[i, row_to_col[i]]) / 2.0)
        elif targets:
            cls_terms.append(float(np.abs(sim[i]).max()) / 2.0)
        else:
            cls_terms.append(0.0)
    cls_raw = float(np.mean(cls_terms)) if cls_terms else 0.0

    l1_vals, giou_vals, bce_vals, dice_vals = [], [], [], []
    for i, j in matches:
        l1_vals.append(l1_box_loss(preds[i].box, targets[j].box)[0])
        giou_vals.append(giou_loss(preds[i].box, targets[j].box)[0])
        if preds[i].mask is not None and targets[j].mask is not None:
            bce_vals.append(bce_mask_loss(preds[i].mask, targets[j].mask)[0])
            dice_vals.append(dice_loss(preds[i].mask, targets[j].mask)[0])
    bbox = (w.l1 * float(np.mean(l1_vals)) + w.giou * float(np.mean(giou_vals))) if l1_vals else 0.0
    mask = (w.bce * float(np.mean(bce_vals)) + w.dice * float(np.mean(dice_vals))) if bce_vals else 0.0

    extras: dict = {}
    align_val = 0.0
    if align_visual is not None and align_text is not None:
        res = align_loss(align_visual, align_text, temperature=temperature)
        align_val = res.loss
        grad_visual = res.grad_visual
        if stage == "text_only":
            grad_visual = np.zeros_like(grad_visual)
        extras["align_grad_visual"] = grad_visual
        extras["align_grad_text"] = res.grad_text

    order_val = 0.0
    if text_scores is not None and visual_scores is not None and stage == "joint":
        res = order_loss(text_scores, visual_scores)
        order_val = res.loss
        extras["order_grad_text"] = res.grad_text
        extras["order_grad_visual"] = res.grad_visual

    breakdown = LossBreakdown(
        cls=w.cls * cls_raw,
        bbox=bbox,
        mask=mask,
        align=w.align * align_val,
        order=w.order * order_val,
        total=w.cls * cls_raw + bbox + mask + w.align * align_val + w.order * order_val,
    )
    return breakdown, matches, extras

"""One-to-one label assignment and detection losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import RotatedBox, iou_matrix, paired_iou, rotated_iou
from .nn import ops
from .nn.tensor import Tensor, as_tensor, detach, record


class InfeasibleShape(ValueError):
    pass


class ClampRequired(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 2.0
    iou: float = 5.0

    def __post_init__(self):
        if min(self.cls, self.l1, self.iou) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def horizontal(cls) -> "LossWeights":
        return cls(cls=2.0, l1=5.0, iou=2.0)


@dataclass
class MatchResult:
    gt_to_pred: np.ndarray
    total_cost: float

    def __len__(self):
        return len(self.gt_to_pred)


# -- Hungarian -------------------------------------------------------------

def _solve(cost: np.ndarray):
    """Shortest augmenting path with potentials; rows <= cols.

    Returns (row -> col assignment, row potentials u, col potentials v) with
    ``u_i + v_j <= c_ij``, equality on assigned pairs and ``v_j = 0`` on every
    unassigned column.
    """
    n, m = cost.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    c = np.zeros((n + 1, m + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0, 1:] - u[i0] - v[1:]
            free = ~used[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            uj = np.flatnonzero(used)
            u[p[uj]] += delta
            v[uj] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            assign[p[j] - 1] = j - 1
    return assign, u[1:], v[1:]


def _optimum(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    a, _, _ = _solve(cost)
    return float(cost[np.arange(len(a)), a].sum())


def hungarian(cost) -> MatchResult:
    """Minimum-cost injective assignment of rows (ground truths) to columns.

    Among optimal assignments the lexicographically smallest ``gt_to_pred``
    is returned.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    G, N = cost.shape
    if G > N:
        raise InfeasibleShape(f"{G} ground truths but only {N} predictions")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    if G == 0:
        return MatchResult(np.zeros(0, dtype=np.int64), 0.0)
    assign, u, v = _solve(cost)
    best = float(cost[np.arange(G), assign].sum())
    tol = 1e-9 * (1.0 + np.abs(cost).max() * G)
    tight = (cost - u[:, None] - v[None, :]) <= tol
    # columns with negative potential are matched in every optimum
    chosen = np.full(G, -1, dtype=np.int64)
    taken = np.zeros(N, dtype=bool)
    prefix = 0.0
    for r in range(G):
        cands = np.flatnonzero(tight[r] & ~taken)
        pick = -1
        if len(cands) == 1:
            pick = int(cands[0])
        else:
            for j in cands:
                rest_rows = np.arange(r + 1, G)
                free = ~taken
                free[j] = False
                sub = cost[np.ix_(rest_rows, np.flatnonzero(free))]
                if len(rest_rows) > free.sum():
                    continue
                total = prefix + cost[r, j] + _optimum(sub)
                if total <= best + tol:
                    pick = int(j)
                    break
        if pick < 0:  # numerical fallback: keep the solver's answer
            return MatchResult(assign, best)
        chosen[r] = pick
        taken[pick] = True
        prefix += cost[r, pick]
    return MatchResult(chosen, float(cost[np.arange(G), chosen].sum()))


# -- costs and losses ------------------------------------------------------

def normalize_params(boxes, image_size) -> np.ndarray:
    """``(cx/W, cy/H, w/W, h/H, theta/pi)``."""
    H, W = image_size
    return np.asarray(boxes, dtype=float).reshape(-1, 5) / np.array([W, H, W, H, math.pi])


def angle_shift(diff) -> np.ndarray:
    """Multiple of pi bringing an angle difference into ``[-pi/2, pi/2)``."""
    return math.pi * np.floor((np.asarray(diff) + math.pi / 2) / math.pi)


def _l1_matrix(gb, pb, image_size, angle_wrap: bool = False) -> np.ndarray:
    d = gb[:, None, :] - pb[None, :, :]
    if angle_wrap:
        d[..., 4] -= angle_shift(d[..., 4])
    H, W = image_size
    return np.abs(d / np.array([W, H, W, H, math.pi])).sum(axis=2)


def focal_loss(p, target, alpha: float = 0.25, gamma: float = 2.0, clamp: bool = True):
    """Binary focal loss on probabilities; scalar or elementwise."""
    p = np.asarray(p, dtype=float)
    if clamp:
        p = np.clip(p, 1e-7, 1 - 1e-7)
    elif np.any((p <= 0) | (p >= 1)):
        raise ClampRequired("probabilities must lie strictly inside (0, 1)")
    t = np.asarray(target, dtype=float)
    out = t * (-alpha * (1 - p) ** gamma * np.log(p)) \
        + (1 - t) * (-(1 - alpha) * p ** gamma * np.log(1 - p))
    return float(out) if out.ndim == 0 else out


def focal_cost(prob, alpha: float = 0.25, gamma: float = 2.0):
    """Matching-side classification cost of predicting the gt class with ``prob``."""
    p = np.clip(np.asarray(prob, dtype=float), 1e-7, 1 - 1e-7)
    pos = alpha * (1 - p) ** gamma * (-np.log(p))
    neg = (1 - alpha) * p ** gamma * (-np.log(1 - p))
    return pos - neg


def matching_cost(probs, pred_boxes, gt_boxes, gt_labels, weights: LossWeights,
                  image_size, cls_mode: str = "focal", angle_wrap: bool = False) -> np.ndarray:
    """Cost matrix ``(G, N)``: weighted classification, L1 and ``1 - IoU`` terms.

    With ``angle_wrap`` the angle term uses the difference taken modulo pi.
    """
    probs = np.asarray(probs, dtype=float).reshape(len(pred_boxes), -1)
    pb = np.asarray(pred_boxes, dtype=float).reshape(-1, 5)
    gb = np.asarray(gt_boxes, dtype=float).reshape(-1, 5)
    labels = np.asarray(gt_labels, dtype=np.int64)
    G, N = len(gb), len(pb)
    if N == 0:
        raise ValueError("matching needs at least one prediction")
    if G == 0:
        return np.zeros((0, N))
    pg = probs[:, labels].T  # (G, N)
    if cls_mode == "focal":
        c_cls = focal_cost(pg)
    elif cls_mode == "prob":
        c_cls = -pg
    else:
        raise ValueError(f"unknown cls_mode {cls_mode!r}")
    c_l1 = _l1_matrix(gb, pb, image_size, angle_wrap)
    c_iou = 1.0 - iou_matrix(gb, pb)
    return weights.cls * c_cls + weights.l1 * c_l1 + weights.iou * c_iou


def l1_box_loss(pred, gt, image_size, angle_wrap: bool = False) -> float:
    a = pred.to_array() if isinstance(pred, RotatedBox) else pred
    b = gt.to_array() if isinstance(gt, RotatedBox) else gt
    a = np.asarray(a, dtype=float).reshape(-1, 5)
    b = np.asarray(b, dtype=float).reshape(-1, 5)
    return float(np.diag(_l1_matrix(b, a, image_size, angle_wrap)).sum())


def rotated_iou_loss(pred: RotatedBox, gt: RotatedBox) -> float:
    return 1.0 - rotated_iou(pred, gt)


def iou_loss_grad(pred: np.ndarray, gt: np.ndarray, image_size, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``1 - IoU`` w.r.t. raw box params ``(P, 5)``.

    The step is ``h`` in units of the normalised parameter.
    """
    H, W = image_size
    scale = np.array([W, H, W, H, math.pi])
    pred = np.asarray(pred, dtype=float).reshape(-1, 5)
    gt = np.asarray(gt, dtype=float).reshape(-1, 5)
    g = np.zeros_like(pred)
    for k in range(5):
        step = h * scale[k]
        up, dn = pred.copy(), pred.copy()
        up[:, k] += step
        dn[:, k] -= step
        dn[:, 2:4] = np.maximum(dn[:, 2:4], 1e-6)
        g[:, k] = -(paired_iou(up, gt) - paired_iou(dn, gt)) / (up[:, k] - dn[:, k])
    return g


def iou_loss_tensor(pred, gt, image_size, h: float = 1e-5) -> Tensor:
    """Per-pair ``1 - IoU`` as a tensor op with a finite-difference backward."""
    pred = as_tensor(pred)
    gt = np.asarray(gt, dtype=float).reshape(-1, 5)
    out = 1.0 - paired_iou(pred.data, gt)

    def bw(g):
        return (g[:, None] * iou_loss_grad(pred.data, gt, image_size, h),)

    return record(out.astype(pred.data.dtype), (pred,), bw)


def l1_loss_tensor(pred, gt, image_size, angle_wrap: bool = False) -> Tensor:
    """Per-pair L1 over normalised params; optionally with the angle difference wrapped mod pi."""
    H, W = image_size
    inv = 1.0 / np.array([W, H, W, H, math.pi])
    pred = as_tensor(pred)
    gt = np.asarray(gt, dtype=float).reshape(-1, 5)
    target = gt.copy()
    if angle_wrap:
        target[:, 4] += detach(angle_shift(pred.data[:, 4] - gt[:, 4]))
    diff = ops.mul(ops.sub(pred, target), inv)
    return ops.sum(ops.abs(diff), axis=1)


@dataclass
class LossTerms:
    cls: float = 0.0
    l1: float = 0.0
    iou: float = 0.0

    @property
    def total(self):
        return self.cls + self.l1 + self.iou


def layer_loss(logits, boxes, gt_boxes, gt_labels, weights: LossWeights, image_size,
               num_classes: int, cls_mode: str = "focal", alpha=0.25, gamma=2.0,
               angle_wrap: bool = False):
    """Match one layer's predictions and build its weighted loss.

    Focal loss covers every query (matched ones positive at the gt class);
    L1 and IoU cover matched pairs. All terms are divided by ``max(1, G)``.
    Returns ``(loss tensor, MatchResult, LossTerms)``.
    """
    logits, boxes = as_tensor(logits), as_tensor(boxes)
    gb = np.asarray(gt_boxes, dtype=float).reshape(-1, 5)
    gl = np.asarray(gt_labels, dtype=np.int64)
    N, G = boxes.shape[0], len(gb)
    norm = 1.0 / max(1, G)
    probs = ops._sigmoid(logits.data)
    target = np.zeros((N, num_classes))
    if G:
        cost = matching_cost(probs, boxes.data, gb, gl, weights, image_size, cls_mode, angle_wrap)
        match = hungarian(cost)
        match = MatchResult(detach(match.gt_to_pred), match.total_cost)
        target[match.gt_to_pred, gl] = 1.0
    else:
        match = MatchResult(np.zeros(0, dtype=np.int64), 0.0)
    l_cls = ops.mul(ops.sum(ops.sigmoid_focal_loss(logits, target, alpha, gamma)), weights.cls * norm)
    terms = LossTerms(cls=float(l_cls.data))
    loss = l_cls
    if G:
        matched = ops.index(boxes, match.gt_to_pred)
        l_l1 = ops.mul(ops.sum(l1_loss_tensor(matched, gb, image_size, angle_wrap)),
                       weights.l1 * norm)
        l_iou = ops.mul(ops.sum(iou_loss_tensor(matched, gb, image_size)), weights.iou * norm)
        terms.l1, terms.iou = float(l_l1.data), float(l_iou.data)
        loss = ops.add(ops.add(loss, l_l1), l_iou)
    return loss, match, terms


def total_loss(layers, gt_boxes, gt_labels, weights: LossWeights, image_size, num_classes: int,
               cls_mode: str = "focal", angle_wrap: bool = False):
    """Deep supervision: sum of :func:`layer_loss` over ``[(logits, boxes), ...]``.

    Each layer is matched independently. Returns ``(loss, [MatchResult], LossTerms)``.
    """
    total, matches, terms = None, [], LossTerms()
    for logits, boxes in layers:
        loss, m, t = layer_loss(logits, boxes, gt_boxes, gt_labels, weights, image_size,
                                num_classes, cls_mode, angle_wrap=angle_wrap)
        total = loss if total is None else ops.add(total, loss)
        matches.append(m)
        terms.cls += t.cls
        terms.l1 += t.l1
        terms.iou += t.iou
    return total, matches, terms

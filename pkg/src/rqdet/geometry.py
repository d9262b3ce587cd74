"""Rotated-rectangle geometry.

Boxes are ``(cx, cy, w, h, theta)`` in pixels/radians. Corners are produced by
rotating the axis-aligned offsets ``(+-w/2, +-h/2)`` with the matrix
``[[cos, -sin], [sin, cos]]``; in image coordinates (y pointing down) a
positive ``theta`` therefore turns the box clockwise on screen.

The canonical ("long-edge") form has ``w >= h`` and ``theta`` in
``[-pi/2, pi/2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

CLIP_EPS = 1e-9
AREA_EPS = 1e-12
HALF_PI = math.pi / 2


class GeometryError(ValueError):
    pass


class DegenerateQuad(GeometryError):
    pass


class LengthMismatch(GeometryError):
    pass


def wrap_angle(theta):
    """Map an angle (scalar or array) into ``[-pi/2, pi/2)``."""
    return np.mod(np.asarray(theta, dtype=float) + HALF_PI, math.pi) - HALF_PI


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box field in {vals}")
        if self.w <= 0 or self.h <= 0:
            raise GeometryError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_array(cls, a) -> "RotatedBox":
        a = [float(v) for v in a]
        return cls(*a)

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h, self.theta], dtype=float)

    @property
    def area(self) -> float:
        return self.w * self.h

    def normalize(self) -> "RotatedBox":
        w, h, t = self.w, self.h, self.theta
        if w < h:
            w, h, t = h, w, t + HALF_PI
        t = float(wrap_angle(t))
        # float rounding in the modulo can land exactly on +pi/2
        if t >= HALF_PI:
            t -= math.pi
        return RotatedBox(self.cx, self.cy, w, h, t)


@dataclass(frozen=True)
class ConvexPolygon:
    vertices: np.ndarray  # (k, 2), counter-clockwise

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "vertices", v)
        if 0 < len(v) < 3:
            raise GeometryError("a non-empty polygon needs at least 3 vertices")

    def __len__(self):
        return len(self.vertices)

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


def normalize_boxes(boxes: np.ndarray) -> np.ndarray:
    """Vectorised long-edge normalisation of an ``(N, 5)`` array."""
    b = np.array(boxes, dtype=float).reshape(-1, 5)
    swap = b[:, 2] < b[:, 3]
    w = np.where(swap, b[:, 3], b[:, 2])
    h = np.where(swap, b[:, 2], b[:, 3])
    t = wrap_angle(b[:, 4] + swap * HALF_PI)
    t = np.where(t >= HALF_PI, t - math.pi, t)
    return np.stack([b[:, 0], b[:, 1], w, h, t], axis=1)


def polygon_area(vertices) -> float:
    """Signed shoelace area; positive for counter-clockwise order."""
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def corners_array(boxes) -> np.ndarray:
    """``(N, 5)`` boxes -> ``(N, 4, 2)`` counter-clockwise corners."""
    b = np.asarray(boxes, dtype=float).reshape(-1, 5)
    c, s = np.cos(b[:, 4]), np.sin(b[:, 4])
    hw, hh = b[:, 2] / 2, b[:, 3] / 2
    dx = np.stack([-hw, hw, hw, -hw], axis=1)
    dy = np.stack([-hh, -hh, hh, hh], axis=1)
    x = b[:, :1] + c[:, None] * dx - s[:, None] * dy
    y = b[:, 1:2] + s[:, None] * dx + c[:, None] * dy
    return np.stack([x, y], axis=2)


def box_to_corners(b: RotatedBox) -> ConvexPolygon:
    return ConvexPolygon(corners_array(b.to_array())[0])


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise, collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).reshape(-1, 2))))
    if len(pts) <= 2:
        return np.array(pts, dtype=float)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def min_area_rect(points) -> RotatedBox:
    """Minimum-area enclosing rectangle by rotating calipers over hull edges."""
    hull = convex_hull(points)
    if len(hull) < 3:
        raise DegenerateQuad("point set has no interior")
    best = None
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        n = math.hypot(e[0], e[1])
        if n == 0:
            continue
        u = e / n
        v = np.array([-u[1], u[0]])
        pu, pv = hull @ u, hull @ v
        w, h = pu.max() - pu.min(), pv.max() - pv.min()
        area = w * h
        if best is None or area < best[0] - 1e-12 * max(1.0, best[0]):
            mu, mv = (pu.max() + pu.min()) / 2, (pv.max() + pv.min()) / 2
            center = mu * u + mv * v
            best = (area, center, w, h, math.atan2(u[1], u[0]))
    _, center, w, h, theta = best
    return RotatedBox(float(center[0]), float(center[1]), float(w), float(h), theta).normalize()


def corners_to_box(p) -> RotatedBox:
    """Quadrilateral -> min-area enclosing rotated rectangle (normalised)."""
    v = np.asarray(p.vertices if isinstance(p, ConvexPolygon) else p, dtype=float).reshape(-1, 2)
    if len(v) != 4:
        raise DegenerateQuad(f"expected 4 vertices, got {len(v)}")
    for i in range(4):
        for j in range(i + 1, 4):
            for k in range(j + 1, 4):
                a, b = v[j] - v[i], v[k] - v[i]
                scale = math.hypot(*a) * math.hypot(*b)
                if scale == 0 or abs(a[0] * b[1] - a[1] * b[0]) <= CLIP_EPS * scale:
                    raise DegenerateQuad(f"vertices {i}, {j}, {k} are collinear")
    return min_area_rect(v)


def _clip(subject: list, a: np.ndarray, b: np.ndarray) -> list:
    # keep the part of `subject` on the left of the directed edge a->b
    out = []
    if not subject:
        return out
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    prev = subject[-1]
    sp = side(prev)
    for cur in subject:
        sc = side(cur)
        if sc >= -CLIP_EPS:
            if sp < -CLIP_EPS:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            out.append(cur)
        elif sp >= -CLIP_EPS:
            t = sp / (sp - sc)
            out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
        prev, sp = cur, sc
    return out


def intersect_convex(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of convex CCW polygon ``p`` by convex CCW ``q``."""
    poly = [tuple(v) for v in p]
    for i in range(len(q)):
        poly = _clip(poly, q[i], q[(i + 1) % len(q)])
        if not poly:
            break
    return np.array(poly, dtype=float).reshape(-1, 2)


def rotated_iou(a: RotatedBox, b: RotatedBox) -> float:
    if a == b:
        return 1.0
    # fixed argument order keeps the result exactly symmetric
    if (a.cx, a.cy, a.w, a.h, a.theta) > (b.cx, b.cy, b.w, b.h, b.theta):
        a, b = b, a
    pa = corners_array(a.to_array())[0]
    pb = corners_array(b.to_array())[0]
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.w, a.h)
    rb = 0.5 * math.hypot(b.w, b.h)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) >= ra + rb:
        return 0.0
    inter = intersect_convex(pa, pb)
    ia = polygon_area(inter) if len(inter) >= 3 else 0.0
    if ia < AREA_EPS:
        return 0.0
    union = a.area + b.area - ia
    return float(min(1.0, max(0.0, ia / union)))


# -- vectorised path -------------------------------------------------------

def _inside(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    # points (P, k, 2), poly (P, 4, 2) CCW -> (P, k) bool
    a = poly
    e = np.roll(poly, -1, axis=1) - poly
    d = points[:, :, None, :] - a[:, None, :, :]
    cr = e[:, None, :, 0] * d[..., 1] - e[:, None, :, 1] * d[..., 0]
    return np.all(cr >= -CLIP_EPS, axis=2)


def pairwise_intersection_area(ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    """Intersection areas of paired convex quads ``(P, 4, 2)`` x ``(P, 4, 2)``.

    Collects corners of each quad inside the other plus edge/edge crossings,
    orders them by angle about their mean and applies the shoelace formula.
    """
    P = ca.shape[0]
    if P == 0:
        return np.zeros(0)
    in_a = _inside(ca, cb)
    in_b = _inside(cb, ca)
    a0 = ca[:, :, None, :]
    a1 = np.roll(ca, -1, axis=1)[:, :, None, :]
    b0 = cb[:, None, :, :]
    b1 = np.roll(cb, -1, axis=1)[:, None, :, :]
    r = a1 - a0
    s = b1 - b0
    den = r[..., 0] * s[..., 1] - r[..., 1] * s[..., 0]
    qp = b0 - a0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * s[..., 1] - qp[..., 1] * s[..., 0]) / den
        u = (qp[..., 0] * r[..., 1] - qp[..., 1] * r[..., 0]) / den
    ok = (np.abs(den) > 1e-15) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    t = np.where(ok, t, 0.0)
    cross_pts = (a0 + t[..., None] * r).reshape(P, 16, 2)
    pts = np.concatenate([ca, cb, cross_pts], axis=1)
    mask = np.concatenate([in_a, in_b, ok.reshape(P, 16)], axis=1)
    pts = np.where(mask[..., None], pts, 0.0)
    cnt = mask.sum(axis=1)
    center = pts.sum(axis=1) / np.maximum(cnt, 1)[:, None]
    ang = np.arctan2(pts[..., 1] - center[:, None, 1], pts[..., 0] - center[:, None, 0])
    ang = np.where(mask, ang, np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    sp = np.take_along_axis(pts, order[..., None], axis=1)
    sm = np.take_along_axis(mask, order, axis=1)
    sp = np.where(sm[..., None], sp, sp[:, :1, :])
    x, y = sp[..., 0], sp[..., 1]
    area = 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)
    area = np.where(cnt >= 3, np.abs(area), 0.0)
    return np.where(area < AREA_EPS, 0.0, area)


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of row-aligned box arrays ``(P, 5)`` and ``(P, 5)``."""
    a = np.asarray(a, dtype=float).reshape(-1, 5)
    b = np.asarray(b, dtype=float).reshape(-1, 5)
    out = np.zeros(len(a))
    near = np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1]) < 0.5 * (
        np.hypot(a[:, 2], a[:, 3]) + np.hypot(b[:, 2], b[:, 3]))
    if near.any():
        inter = pairwise_intersection_area(corners_array(a[near]), corners_array(b[near]))
        union = a[near, 2] * a[near, 3] + b[near, 2] * b[near, 3] - inter
        out[near] = np.clip(inter / union, 0.0, 1.0)
    same = np.all(a == b, axis=1)
    out[same] = 1.0
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs IoU ``(N, 5) x (M, 5) -> (N, M)``."""
    a = np.asarray(a, dtype=float).reshape(-1, 5)
    b = np.asarray(b, dtype=float).reshape(-1, 5)
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return np.zeros((n, m))
    ia = np.repeat(np.arange(n), m)
    ib = np.tile(np.arange(m), n)
    return paired_iou(a[ia], b[ib]).reshape(n, m)


# -- oracle ----------------------------------------------------------------

def _row_intervals(corners: np.ndarray, ys: np.ndarray):
    # x-interval of a convex CCW quad along each horizontal line y
    lo = np.full(ys.shape, -np.inf)
    hi = np.full(ys.shape, np.inf)
    for i in range(4):
        p, q = corners[i], corners[(i + 1) % 4]
        ex, ey = q[0] - p[0], q[1] - p[1]
        # inside: ex*(y - py) - ey*(x - px) >= 0  ->  ey*x <= ex*(y-py) + ey*px
        rhs = ex * (ys - p[1]) + ey * p[0]
        if ey > 0:
            hi = np.minimum(hi, rhs / ey)
        elif ey < 0:
            lo = np.maximum(lo, rhs / ey)
        else:
            empty = rhs < 0
            lo = np.where(empty, np.inf, lo)
    return lo, hi


def rotated_iou_rasterized(a: RotatedBox, b: RotatedBox, grid: int = 1000) -> float:
    """Pixel-count IoU on a ``grid``-cell raster of the joint bounding region.

    Pixels are square with side ``extent / grid``; a pixel belongs to a box when
    its centre does. Counting is done per row from exact scanline intervals,
    which gives the same count as testing every pixel centre.
    """
    if grid < 100:
        raise ValueError("grid must be >= 100")
    ca = corners_array(a.to_array())[0]
    cb = corners_array(b.to_array())[0]
    allc = np.vstack([ca, cb])
    x0, y0 = allc.min(axis=0)
    x1, y1 = allc.max(axis=0)
    px = max(x1 - x0, y1 - y0) / grid
    nrows = int(math.ceil((y1 - y0) / px))
    ncols = int(math.ceil((x1 - x0) / px))
    ys = y0 + (np.arange(nrows) + 0.5) * px

    def count(lo, hi):
        first = np.maximum(np.ceil((lo - x0) / px - 0.5), 0)
        last = np.minimum(np.floor((hi - x0) / px - 0.5), ncols - 1)
        return np.maximum(last - first + 1, 0).sum()

    la, ha = _row_intervals(ca, ys)
    lb, hb = _row_intervals(cb, ys)
    na, nb = count(la, ha), count(lb, hb)
    nab = count(np.maximum(la, lb), np.minimum(ha, hb))
    union = na + nb - nab
    return float(nab / union) if union > 0 else 0.0


# -- suppression -----------------------------------------------------------

def _overlap_above(arr: np.ndarray, t: float) -> list:
    """For each ``i`` the indices ``j > i`` with IoU(arr[i], arr[j]) > t.

    Pairs are pruned first with a cheap upper bound: the intersection is at
    most the smaller area and at most the overlap of the axis-aligned hulls.
    """
    n = len(arr)
    area = arr[:, 2] * arr[:, 3]
    c = corners_array(arr)
    lo, hi = c.min(axis=1), c.max(axis=1)
    i, j = np.triu_indices(n, k=1)
    ext = np.clip(np.minimum(hi[i], hi[j]) - np.maximum(lo[i], lo[j]), 0.0, None)
    bound = np.minimum(ext[:, 0] * ext[:, 1], np.minimum(area[i], area[j]))
    cand = bound > t * (area[i] + area[j] - bound) - 1e-9
    i, j = i[cand], j[cand]
    hit = paired_iou(arr[i], arr[j]) > t
    out = [[] for _ in range(n)]
    for a, b in zip(i[hit].tolist(), j[hit].tolist()):
        out[a].append(b)
    return [np.asarray(o, dtype=np.int64) for o in out]


def rotated_nms(boxes: Sequence, scores: Sequence, t: float) -> list[int]:
    """Greedy class-agnostic rotated NMS.

    Candidates are visited by descending score, equal scores by ascending
    index. A candidate is dropped when its IoU with an already kept box
    exceeds ``t``. Returns kept indices in visiting order.
    """
    if len(boxes) != len(scores):
        raise LengthMismatch(f"{len(boxes)} boxes vs {len(scores)} scores")
    if not 0 < t <= 1:
        raise ValueError(f"IoU threshold must be in (0, 1], got {t}")
    n = len(boxes)
    if n == 0:
        return []
    arr = np.array([b.to_array() if isinstance(b, RotatedBox) else b for b in boxes],
                   dtype=float).reshape(n, 5)
    sc = np.asarray(scores, dtype=float)
    order = np.lexsort((np.arange(n), -sc))
    over = _overlap_above(arr[order], t)  # in visiting order
    alive = np.ones(n, dtype=bool)
    keep = []
    for pos in range(n):
        if not alive[pos]:
            continue
        keep.append(int(order[pos]))
        alive[over[pos]] = False
    return keep

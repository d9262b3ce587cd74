"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports the code under test except plain data types, so a
shared bug cannot make both sides agree.
"""
from __future__ import annotations

import functools
import itertools
import math

import numpy as np


# -- geometry --------------------------------------------------------------

def corners(b):
    cx, cy, w, h, t = map(float, b)
    c, s = math.cos(t), math.sin(t)
    out = []
    for dx, dy in ((-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)):
        x, y = dx * w, dy * h
        out.append((cx + c * x - s * y, cy + s * x + c * y))
    return out


def inside(b, x, y):
    """Vectorised point-in-box test in the box frame."""
    cx, cy, w, h, t = map(float, b)
    c, s = math.cos(t), math.sin(t)
    dx, dy = x - cx, y - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)


def raster_iou(a, b, grid=300):
    """Pixel-centre IoU on a ``grid`` raster of the joint bounding square side."""
    pts = np.array(corners(a) + corners(b))
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    px = max(x1 - x0, y1 - y0) / grid
    nx = int(math.ceil((x1 - x0) / px))
    ny = int(math.ceil((y1 - y0) / px))
    xs = x0 + (np.arange(nx) + 0.5) * px
    ys = y0 + (np.arange(ny) + 0.5) * px
    X, Y = np.meshgrid(xs, ys)
    ia, ib = inside(a, X, Y), inside(b, X, Y)
    union = np.logical_or(ia, ib).sum()
    return float(np.logical_and(ia, ib).sum() / union) if union else 0.0


def shoelace(poly):
    s = 0.0
    for (x0, y0), (x1, y1) in zip(poly, poly[1:] + poly[:1]):
        s += x0 * y1 - x1 * y0
    return abs(s) / 2


def clip_iou(a, b):
    """Sutherland-Hodgman clip written with plain lists."""
    subject = corners(a)
    clip = corners(b)
    out = subject
    for (ex0, ey0), (ex1, ey1) in zip(clip, clip[1:] + clip[:1]):
        def side(p):
            return (ex1 - ex0) * (p[1] - ey0) - (ey1 - ey0) * (p[0] - ex0)
        src, out = out, []
        for i, p in enumerate(src):
            q = src[i - 1]
            sp, sq = side(p), side(q)
            if sp >= 0:
                if sq < 0:
                    k = sq / (sq - sp)
                    out.append((q[0] + k * (p[0] - q[0]), q[1] + k * (p[1] - q[1])))
                out.append(p)
            elif sq >= 0:
                k = sq / (sq - sp)
                out.append((q[0] + k * (p[0] - q[0]), q[1] + k * (p[1] - q[1])))
        if not out:
            return 0.0
    inter = shoelace(out) if len(out) >= 3 else 0.0
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def nms(boxes, scores, t):
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(clip_iou(boxes[i], boxes[k]) <= t for k in keep):
            keep.append(i)
    return keep


# -- assignment ------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _injections(G, N):
    return np.array(list(itertools.permutations(range(N), G)), dtype=np.int64).reshape(-1, G)


def brute_assignment(cost):
    """Minimum total over all injective row -> column maps."""
    cost = np.asarray(cost, dtype=float)
    G, N = cost.shape
    cols = _injections(G, N)
    totals = np.zeros(len(cols))
    for i in range(G):  # left-to-right like a plain sum
        totals += cost[i, cols[:, i]]
    return float(totals.min()) if len(cols) else 0.0


# -- attention -------------------------------------------------------------

def bilinear(fmap, u, v):
    C, H, W = fmap.shape
    u0, v0 = math.floor(u), math.floor(v)
    out = np.zeros(C)
    for du in (0, 1):
        for dv in (0, 1):
            uu, vv = u0 + du, v0 + dv
            if 0 <= uu < W and 0 <= vv < H:
                wu = (u - u0) if du else (1 - (u - u0))
                wv = (v - v0) if dv else (1 - (v - v0))
                out += wu * wv * fmap[:, vv, uu]
    return out


def pick_level(b, num_levels, base):
    lvl = math.floor(math.log2(math.sqrt(b[2] * b[3]) / base))
    return min(max(lvl, 0), num_levels - 1)


def rroi_values(fmap, b, r, s, image_size):
    """``(C, r*r)`` pooled values; bin ``row*r + col``, col along the width."""
    C, H, W = fmap.shape
    H0, W0 = image_size
    sx, sy = W / W0, H / H0
    q = math.isqrt(s)
    cx, cy, w, h, t = b
    c, sn = math.cos(t), math.sin(t)
    V = np.zeros((C, r * r))
    for row in range(r):
        for col in range(r):
            acc = np.zeros(C)
            for i in range(q):
                for j in range(q):
                    fx = (col + (j + 0.5) / q) / r - 0.5
                    fy = (row + (i + 0.5) / q) / r - 0.5
                    ox, oy = fx * w, fy * h
                    x = cx + c * ox - sn * oy
                    y = cy + sn * ox + c * oy
                    acc += bilinear(fmap, x * sx - 0.5, y * sy - 0.5)
            V[:, row * r + col] = acc / s
    return V


def rroi_attention(q, boxes, levels, image_size, heads, r, s, base, attn_w, attn_b,
                   value_w, out_w):
    """Nested-loop multi-scale rotated RoI attention; returns (out, weights)."""
    N, C = q.shape
    d = C // heads
    K = r * r
    out = np.zeros((N, C))
    A = np.zeros((N, heads, K))
    for n in range(N):
        lvl = pick_level(boxes[n], len(levels), base)
        V = rroi_values(levels[lvl], boxes[n], r, s, image_size)
        logits = q[n] @ attn_w + attn_b
        for m in range(heads):
            z = logits[m * K:(m + 1) * K]
            e = np.exp(z - z.max())
            A[n, m] = e / e.sum()
            pooled = np.zeros(d)
            for k in range(K):
                pooled += A[n, m, k] * (V[:, k] @ value_w[:, m * d:(m + 1) * d])
            out[n] += pooled @ out_w[m * d:(m + 1) * d, :]
    return out, A


def self_attention(q, pe, wq, wk, wv, wo, heads):
    N, C = q.shape
    d = C // heads
    qp = q + pe
    out = np.zeros((N, C))
    for m in range(heads):
        sl = slice(m * d, (m + 1) * d)
        Q, K, V = qp @ wq[:, sl], qp @ wk[:, sl], q @ wv[:, sl]
        for i in range(N):
            z = np.array([Q[i] @ K[j] for j in range(N)]) / math.sqrt(d)
            a = np.exp(z - z.max())
            a /= a.sum()
            out[i, sl] = sum(a[j] * V[j] for j in range(N))
    return out @ wo


# -- evaluation ------------------------------------------------------------

def voc_ap_11(detections, gts, iou_t=0.5):
    """Single-class VOC07 AP.

    ``detections``: list of (image_id, score, box); ``gts``: image_id -> list
    of (box, difficult).
    """
    npos = sum(1 for g in gts.values() for _, diff in g if not diff)
    used = {k: [False] * len(v) for k, v in gts.items()}
    dets = sorted(enumerate(detections), key=lambda e: (-e[1][1], e[0]))
    tp, fp = [], []
    for _, (iid, _, box) in dets:
        g = gts.get(iid, [])
        best, bj = -1.0, -1
        for j, (gb, _) in enumerate(g):
            o = clip_iou(box, gb)
            if o > best:
                best, bj = o, j
        if bj >= 0 and best >= iou_t:
            if g[bj][1]:
                continue
            if not used[iid][bj]:
                used[iid][bj] = True
                tp.append(1)
                fp.append(0)
            else:
                tp.append(0)
                fp.append(1)
        else:
            tp.append(0)
            fp.append(1)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    rec = ctp / max(npos, 1)
    prec = ctp / np.maximum(ctp + cfp, 1e-12)
    ap = 0.0
    for t in np.arange(0, 1.1, 0.1):
        p = prec[rec >= t].max() if np.any(rec >= t) else 0.0
        ap += p / 11
    return ap

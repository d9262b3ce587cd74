"""Multi-scale rotated RoI attention.

Values are features pooled on an ``r x r`` grid inside each oriented box,
taken from the pyramid level chosen by the box scale. Attention weights come
from a linear projection of the content query, softmax-normalised over the
``r*r`` positions separately for every head.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .geometry import RotatedBox
from .nn import ops
from .nn.tensor import ShapeMismatch, Tensor, as_tensor


@dataclass
class AttentionConfig:
    heads: int = 8
    pool: int = 7
    channels: int = 256
    sampling: int = 4
    level_base: float = 56.0
    level_mode: str = "single"  # or "sum": pool every level and add

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"channels={self.channels} not divisible by heads={self.heads}")
        if self.pool < 1 or self.sampling < 1:
            raise ValueError("pool and sampling must be >= 1")
        if math.isqrt(self.sampling) ** 2 != self.sampling:
            raise ValueError(f"sampling={self.sampling} must be a perfect square")
        if self.level_mode not in ("single", "sum"):
            raise ValueError(f"unknown level_mode {self.level_mode!r}")


@dataclass
class FeaturePyramid:
    levels: list
    strides: list
    image_size: tuple  # (H0, W0)

    def __post_init__(self):
        self.levels = [as_tensor(x) for x in self.levels]
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        if len(self.strides) != len(self.levels):
            raise ValueError("one stride per level required")
        C = self.levels[0].shape[0]
        if any(x.ndim != 3 or x.shape[0] != C for x in self.levels):
            raise ShapeMismatch("all levels must be (C, H, W) with equal C")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError("strides must be strictly increasing")
        self._flat_t = [None] * len(self.levels)

    def channels_last(self, lvl: int) -> np.ndarray:
        """Cached ``(H*W, C)`` copy of a level, built on first use.

        Levels are treated as frozen once sampled; build a new pyramid after
        changing their data.
        """
        if self._flat_t[lvl] is None:
            x = self.levels[lvl].data
            self._flat_t[lvl] = np.ascontiguousarray(x.reshape(x.shape[0], -1).T)
        return self._flat_t[lvl]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[0]

    def __len__(self):
        return len(self.levels)


def assign_level(b, num_levels, sigma: float = 56.0) -> int:
    """``clamp(floor(log2(sqrt(w*h) / sigma)), 0, L-1)``."""
    if isinstance(num_levels, FeaturePyramid):
        num_levels = len(num_levels)
    w, h = (b.w, b.h) if isinstance(b, RotatedBox) else (b[2], b[3])
    lvl = math.floor(math.log2(math.sqrt(w * h) / sigma))
    return int(min(max(lvl, 0), num_levels - 1))


def assign_levels(boxes: np.ndarray, num_levels: int, sigma: float = 56.0) -> np.ndarray:
    b = np.asarray(boxes, dtype=float).reshape(-1, 5)
    lvl = np.floor(np.log2(np.sqrt(b[:, 2] * b[:, 3]) / sigma))
    return np.clip(lvl, 0, num_levels - 1).astype(np.int64)


def sample_points(boxes: np.ndarray, r: int, s: int, scale=(1.0, 1.0)) -> np.ndarray:
    """Feature-space sampling coordinates, shape ``(N * r*r * s, 2)``.

    Bin ``k = row * r + col``: ``col`` runs along the box width, ``row`` along
    its height. Each bin holds a ``sqrt(s) x sqrt(s)`` lattice of sub-samples.
    Offsets are rotated about the box centre, then mapped to the level with
    ``u = x * W_l/W_0 - 0.5`` (pixel-centre alignment).
    """
    b = np.asarray(boxes, dtype=float).reshape(-1, 5)
    q = math.isqrt(s)
    cell = (np.arange(r)[:, None] + (np.arange(q)[None, :] + 0.5) / q).reshape(-1) / r - 0.5
    # (r*q,) fractional positions; reorder to (bin, sub) blocks
    fr = cell.reshape(r, q)
    lx = np.broadcast_to(fr[None, :, None, :], (r, r, q, q))  # row, col, sub_row, sub_col
    ly = np.broadcast_to(fr[:, None, :, None], (r, r, q, q))
    lx = lx.reshape(-1)
    ly = ly.reshape(-1)
    ox = lx[None, :] * b[:, 2:3]
    oy = ly[None, :] * b[:, 3:4]
    c, sn = np.cos(b[:, 4:5]), np.sin(b[:, 4:5])
    x = b[:, 0:1] + c * ox - sn * oy
    y = b[:, 1:2] + sn * ox + c * oy
    return np.stack([x * scale[0] - 0.5, y * scale[1] - 0.5], axis=-1).reshape(-1, 2)


def _level_scale(pyramid: FeaturePyramid, lvl: int):
    _, H, W = pyramid.levels[lvl].shape
    H0, W0 = pyramid.image_size
    return (W / W0, H / H0)


def rroi_align(x_l, b, r: int, s: int, image_size) -> Tensor:
    """Pool a ``(C, H_l, W_l)`` level on an ``r x r`` grid inside ``b`` -> ``(C, r*r)``."""
    x_l = as_tensor(x_l)
    _, H, W = x_l.shape
    H0, W0 = image_size
    box = b.to_array() if isinstance(b, RotatedBox) else np.asarray(b, dtype=float)
    pts = sample_points(box, r, s, (W / W0, H / H0))
    return ops.bilinear_sample(x_l, pts, group_size=s)


def build_values(pyramid: FeaturePyramid, boxes, cfg: AttentionConfig) -> Tensor:
    """Aligned values ``V`` of shape ``(N, C, r*r)``; one level per query."""
    b = np.asarray(boxes, dtype=float).reshape(-1, 5)
    N, C, r, s = len(b), pyramid.channels, cfg.pool, cfg.sampling
    if N == 0:
        return Tensor(np.zeros((0, C, r * r)))
    if cfg.level_mode == "sum":
        total = None
        for lvl, x in enumerate(pyramid.levels):
            _, H, W = x.shape
            m = ops.bilinear_matrix(sample_points(b, r, s, _level_scale(pyramid, lvl)), H, W, s)
            v = ops.sample_with(x, m, pyramid.channels_last(lvl))
            total = v if total is None else total + v
        return ops.transpose(ops.reshape(total, (C, N, r * r)), (1, 0, 2))
    levels = assign_levels(b, len(pyramid), cfg.level_base)
    parts, order = [], []
    for lvl in np.unique(levels):
        idx = np.flatnonzero(levels == lvl)
        x = pyramid.levels[lvl]
        _, H, W = x.shape
        m = ops.bilinear_matrix(sample_points(b[idx], r, s, _level_scale(pyramid, lvl)), H, W, s)
        v = ops.sample_with(x, m, pyramid.channels_last(lvl))  # (C, n_l * r*r)
        parts.append(ops.transpose(ops.reshape(v, (C, len(idx), r * r)), (1, 0, 2)))
        order.append(idx)
    V = parts[0] if len(parts) == 1 else ops.concat(parts, axis=0)
    order = np.concatenate(order)
    if np.array_equal(order, np.arange(N)):
        return V
    return ops.index(V, np.argsort(order, kind="stable"))


def init_attention_params(store: nn.ParamStore, cfg: AttentionConfig, prefix: str = "rroi"):
    C, M, k = cfg.channels, cfg.heads, cfg.pool * cfg.pool
    store.zeros(f"{prefix}.attn_w", (C, M * k))
    store.zeros(f"{prefix}.attn_b", (M * k,))
    store.xavier(f"{prefix}.value_w", C, C)
    store.xavier(f"{prefix}.out_w", C, C)


def attention_weights(q, W_A, b_A, cfg: AttentionConfig) -> Tensor:
    """``softmax(linear(q))`` reshaped ``(N, M, r*r)``; sums to 1 over the last axis."""
    q = as_tensor(q)
    k = cfg.pool * cfg.pool
    if as_tensor(W_A).shape != (q.shape[-1], cfg.heads * k):
        raise ShapeMismatch(f"attention projection {as_tensor(W_A).shape}, "
                            f"expected ({q.shape[-1]}, {cfg.heads * k})")
    logits = ops.linear(q, W_A, b_A)
    return ops.softmax(ops.reshape(logits, (q.shape[0], cfg.heads, k)), axis=-1)


def aggregate(A, V, value_w, out_w, cfg: AttentionConfig) -> Tensor:
    """``sum_m W_m [sum_k A_nmk (W'_m V)_nmk]`` for ``A (N,M,K)``, ``V (N,C,K)``."""
    A, V = as_tensor(A), as_tensor(V)
    N, C, K = V.shape
    M = cfg.heads
    d = C // M
    proj = ops.matmul(ops.transpose(V, (0, 2, 1)), value_w)  # (N, K, C)
    heads = ops.transpose(ops.reshape(proj, (N, K, M, d)), (0, 2, 1, 3))  # (N, M, K, d)
    pooled = ops.matmul(ops.reshape(A, (N, M, 1, K)), heads)  # (N, M, 1, d)
    return ops.matmul(ops.reshape(pooled, (N, C)), out_w)


def msrroi_attention(q, boxes, pyramid: FeaturePyramid, cfg: AttentionConfig, params,
                     prefix: str = "rroi") -> Tensor:
    """Rotated RoI cross-attention: ``(N, C)`` content + ``(N, 5)`` boxes -> ``(N, C)``.

    ``boxes`` are used as constant sampling geometry.
    """
    q = as_tensor(q)
    b = np.asarray(boxes, dtype=float).reshape(-1, 5)
    if q.shape[0] != len(b):
        raise ShapeMismatch(f"{q.shape[0]} content queries vs {len(b)} boxes")
    if q.shape[-1] != cfg.channels or pyramid.channels != cfg.channels:
        raise ShapeMismatch(f"channels: queries {q.shape[-1]}, pyramid {pyramid.channels}, "
                            f"config {cfg.channels}")
    if len(b) == 0:
        return Tensor(np.zeros((0, cfg.channels)))
    V = build_values(pyramid, b, cfg)
    A = attention_weights(q, params[f"{prefix}.attn_w"], params[f"{prefix}.attn_b"], cfg)
    return aggregate(A, V, params[f"{prefix}.value_w"], params[f"{prefix}.out_w"], cfg)


# -- benchmark -------------------------------------------------------------

@dataclass
class BenchRow:
    n: int
    mean_us: float
    std_us: float
    heads: int
    pool: int
    channels: int


def _bench_setup(cfg: AttentionConfig, seed: int, image: int = 512, strides=(8, 16, 32, 64)):
    rng = np.random.default_rng(seed)
    levels = [Tensor(rng.normal(size=(cfg.channels, image // s, image // s))) for s in strides]
    pyr = FeaturePyramid(levels, list(strides), (image, image))
    store = nn.ParamStore(seed)
    init_attention_params(store, cfg)
    store["rroi.attn_w"].data = rng.normal(0, 0.02, store["rroi.attn_w"].shape)
    return rng, pyr, store


def bench_attention(n_list, cfg: AttentionConfig | None = None, repeats: int = 20,
                    warmup: int = 2, seed: int = 0) -> list:
    """Forward wall time of the attention operator per query count."""
    cfg = cfg or AttentionConfig()
    rng, pyr, store = _bench_setup(cfg, seed)
    H0, W0 = pyr.image_size
    rows = []
    with nn.no_grad():
        for n in n_list:
            q = Tensor(rng.normal(size=(n, cfg.channels)))
            wh = np.exp(rng.uniform(np.log(16), np.log(200), size=(n, 2)))
            boxes = np.column_stack([rng.uniform(0, W0, n), rng.uniform(0, H0, n), wh,
                                     rng.uniform(-np.pi / 2, np.pi / 2, n)])
            for _ in range(warmup):
                msrroi_attention(q, boxes, pyr, cfg, store)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                msrroi_attention(q, boxes, pyr, cfg, store)
                times.append((time.perf_counter() - t0) * 1e6)
            rows.append(BenchRow(n, float(np.mean(times)), float(np.std(times)),
                                 cfg.heads, cfg.pool, cfg.channels))
    return rows


def bench_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "mean_us", "std_us", "heads", "pool", "channels"])
    for r in rows:
        w.writerow([r.n, f"{r.mean_us:.3f}", f"{r.std_us:.3f}", r.heads, r.pool, r.channels])
    return buf.getvalue()

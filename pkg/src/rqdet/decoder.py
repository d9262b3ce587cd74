"""Backbone, query initialisation, decoder layers and selective distinct queries."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .attention import (AttentionConfig, FeaturePyramid, init_attention_params,
                        msrroi_attention)
from .geometry import normalize_boxes, rotated_nms
from .matching import angle_shift
from .nn import ops
from .nn.tensor import ShapeMismatch, Tensor, as_tensor, detach

PRIOR_PROB = 0.01


class SourceLayerNotRun(RuntimeError):
    pass


@dataclass
class DecoderConfig:
    num_layers: int = 2
    num_queries: int = 50
    num_classes: int = 5
    sdq: bool = True
    sdq_sources: tuple = (1, 2)
    sdq_after: int = 2
    sdq_threshold: float = 0.9
    attention: AttentionConfig = field(default_factory=lambda: AttentionConfig(
        heads=4, pool=7, channels=32, sampling=4, level_base=16.0))
    self_heads: int = 4
    ffn_dim: int = 64
    stem_channels: int = 16
    init_mode: str = "dense"  # or "random"
    init_nms: float = 0.7
    pre_topk: int = 200
    anchor_scale: float = 4.0
    shared_pe: bool = False

    def __post_init__(self):
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        self.sdq_sources = tuple(sorted(set(int(s) for s in self.sdq_sources)))
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.num_queries < 1 or self.num_classes < 1:
            raise ValueError("num_queries and num_classes must be >= 1")
        if not 0.0 < self.sdq_threshold <= 1.0:
            raise ValueError("sdq_threshold must lie in (0, 1]")
        if self.sdq:
            if not 0 <= self.sdq_after <= self.num_layers:
                raise ValueError(f"sdq_after={self.sdq_after} outside 0..{self.num_layers}")
            if not self.sdq_sources or any(s < 0 or s > self.sdq_after for s in self.sdq_sources):
                raise ValueError(f"sdq_sources {self.sdq_sources} must lie in 0..{self.sdq_after}")
        if self.attention.channels % self.self_heads:
            raise ValueError("channels not divisible by self_heads")
        if self.init_mode not in ("dense", "random"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")

    @property
    def channels(self) -> int:
        return self.attention.channels


@dataclass
class QuerySet:
    """Content queries, their boxes and class scores.

    ``boxes``/``scores`` are plain arrays; ``logits``/``box_tensor`` keep the
    differentiable head outputs when they exist.
    """
    content: Tensor
    boxes: np.ndarray
    scores: np.ndarray
    layer_of_origin: np.ndarray
    logits: Tensor | None = None
    box_tensor: Tensor | None = None

    def __post_init__(self):
        self.content = as_tensor(self.content)
        self.boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 5)
        self.scores = np.asarray(self.scores, dtype=float).reshape(len(self.boxes), -1)
        self.layer_of_origin = np.asarray(self.layer_of_origin, dtype=np.int64).reshape(-1)
        n = len(self.boxes)
        if self.content.shape[0] != n or len(self.scores) != n or len(self.layer_of_origin) != n:
            raise ShapeMismatch("query set fields differ in length")

    def __len__(self):
        return len(self.boxes)

    def take(self, idx) -> "QuerySet":
        idx = np.asarray(idx, dtype=np.int64)
        return QuerySet(
            ops.index(self.content, idx), self.boxes[idx], self.scores[idx],
            self.layer_of_origin[idx],
            None if self.logits is None else ops.index(self.logits, idx),
            None if self.box_tensor is None else ops.index(self.box_tensor, idx))

    @staticmethod
    def concat(sets: list) -> "QuerySet":
        def cat(ts):
            return None if any(t is None for t in ts) else ops.concat(ts, axis=0)
        return QuerySet(
            ops.concat([s.content for s in sets], axis=0),
            np.concatenate([s.boxes for s in sets]),
            np.concatenate([s.scores for s in sets]),
            np.concatenate([s.layer_of_origin for s in sets]),
            cat([s.logits for s in sets]), cat([s.box_tensor for s in sets]))


# -- backbone --------------------------------------------------------------

class TinyBackbone:
    """Strided conv stack with top-down fusion; levels at strides 4, 8, 16."""

    strides = (4, 8, 16)

    def __init__(self, store: nn.ParamStore, channels: int, prefix="backbone"):
        self.prefix = prefix
        self.channels = channels
        self.store = store

    @staticmethod
    def init_params(store: nn.ParamStore, channels: int, stem: int = 16, prefix="backbone"):
        C = channels
        spec = [("c1", 3, stem), ("c2", stem, C), ("c2b", C, C), ("c3", C, C), ("c3b", C, C),
                ("c4", C, C)]
        for name, cin, cout in spec:
            store.kaiming(f"{prefix}.{name}.w", cin * 9, (cout, cin, 3, 3))
            store.zeros(f"{prefix}.{name}.b", (cout,))
        for k in range(3):
            store.xavier(f"{prefix}.lat{k}.w", C, C)
            store.zeros(f"{prefix}.lat{k}.b", (C,))

    def _conv(self, x, name, stride):
        p = self.store
        return ops.relu(ops.conv2d(x, p[f"{self.prefix}.{name}.w"], p[f"{self.prefix}.{name}.b"],
                                   stride=stride, padding=1))

    def _lateral(self, x, k):
        C, H, W = x.shape
        p = self.store
        flat = ops.transpose(ops.reshape(x, (C, H * W)), (1, 0))
        y = ops.linear(flat, p[f"{self.prefix}.lat{k}.w"], p[f"{self.prefix}.lat{k}.b"])
        return ops.reshape(ops.transpose(y, (1, 0)), (C, H, W))

    def __call__(self, image) -> FeaturePyramid:
        img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=float)
        H0, W0 = img.shape[:2]
        if H0 % 16 or W0 % 16:
            raise ShapeMismatch(f"image {H0}x{W0} not divisible by the coarsest stride 16")
        x = Tensor((img.transpose(2, 0, 1) - 0.5) / 0.25)
        c1 = self._conv(x, "c1", 2)
        c2 = self._conv(self._conv(c1, "c2", 2), "c2b", 1)
        c3 = self._conv(self._conv(c2, "c3", 2), "c3b", 1)
        c4 = self._conv(c3, "c4", 2)
        p4 = self._lateral(c4, 2)
        p3 = ops.add(self._lateral(c3, 1), ops.repeat2x(p4))
        p2 = ops.add(self._lateral(c2, 0), ops.repeat2x(p3))
        return FeaturePyramid([p2, p3, p4], list(self.strides), (H0, W0))


# -- dense prior head and query initialisation -----------------------------

@dataclass
class DenseOutput:
    logits: Tensor      # (P, K)
    deltas: Tensor      # (P, 5)
    features: Tensor    # (P, C)
    centers: np.ndarray  # (P, 2) cell centres in image pixels
    strides: np.ndarray  # (P,)
    level: np.ndarray    # (P,)
    anchor_scale: float

    @property
    def anchors(self) -> np.ndarray:
        return self.strides * self.anchor_scale

    def decode(self, deltas: np.ndarray | None = None) -> np.ndarray:
        d = self.deltas.data if deltas is None else deltas
        s, a = self.strides, self.anchors
        d = np.clip(d, -8.0, 8.0)
        boxes = np.stack([self.centers[:, 0] + d[:, 0] * s, self.centers[:, 1] + d[:, 1] * s,
                          a * np.exp(d[:, 2]), a * np.exp(d[:, 3]), d[:, 4]], axis=1)
        return normalize_boxes(boxes)


def init_dense_head(store: nn.ParamStore, cfg: DecoderConfig, prefix="dense"):
    C, K = cfg.channels, cfg.num_classes
    store.kaiming(f"{prefix}.tower.w", C * 9, (C, C, 3, 3))
    store.zeros(f"{prefix}.tower.b", (C,))
    store.normal(f"{prefix}.cls.w", (C, K), std=0.01)
    store.add(f"{prefix}.cls.b", np.full(K, -math.log((1 - PRIOR_PROB) / PRIOR_PROB)))
    store.normal(f"{prefix}.reg.w", (C, 5), std=0.01)
    store.zeros(f"{prefix}.reg.b", (5,))


def dense_head(pyramid: FeaturePyramid, store, cfg: DecoderConfig, prefix="dense") -> DenseOutput:
    logits, deltas, feats, centers, strides, levels = [], [], [], [], [], []
    for lvl, (x, s) in enumerate(zip(pyramid.levels, pyramid.strides)):
        C, H, W = x.shape
        t = ops.relu(ops.conv2d(x, store[f"{prefix}.tower.w"], store[f"{prefix}.tower.b"],
                                padding=1))
        tf = ops.transpose(ops.reshape(t, (C, H * W)), (1, 0))
        logits.append(ops.linear(tf, store[f"{prefix}.cls.w"], store[f"{prefix}.cls.b"]))
        deltas.append(ops.linear(tf, store[f"{prefix}.reg.w"], store[f"{prefix}.reg.b"]))
        feats.append(ops.transpose(ops.reshape(x, (C, H * W)), (1, 0)))
        yy, xx = np.mgrid[0:H, 0:W]
        centers.append(np.stack([(xx.reshape(-1) + 0.5) * s, (yy.reshape(-1) + 0.5) * s], axis=1))
        strides.append(np.full(H * W, float(s)))
        levels.append(np.full(H * W, lvl))
    cat = (lambda ts: ts[0] if len(ts) == 1 else ops.concat(ts, axis=0))
    return DenseOutput(cat(logits), cat(deltas), cat(feats), np.concatenate(centers),
                       np.concatenate(strides), np.concatenate(levels), cfg.anchor_scale)


def select_candidates(scores: np.ndarray, boxes: np.ndarray, n: int, pre_topk: int,
                      nms_t: float, seed: int = 0) -> np.ndarray:
    """Pre-top-k by score (seeded random order among ties), NMS, then top-n.

    If fewer than ``n`` candidates survive, suppressed ones are appended in
    score order so exactly ``min(n, P)`` indices come back.
    """
    P = len(scores)
    perm = np.random.default_rng(seed).permutation(P)
    order = perm[np.argsort(-scores[perm], kind="stable")]
    pre = order[:max(pre_topk, n)]
    keep = rotated_nms(boxes[pre], scores[pre], nms_t)
    chosen = list(pre[keep][:n])
    if len(chosen) < n:
        taken = set(chosen)
        chosen += [i for i in order if i not in taken][:n - len(chosen)]
    return np.asarray(chosen, dtype=np.int64)


def init_queries(cfg: DecoderConfig, seed: int = 0, dense: DenseOutput | None = None,
                 store: nn.ParamStore | None = None, image_size=None) -> QuerySet:
    """Initial query set (layer 0).

    ``dense`` mode scores every pyramid cell, suppresses duplicates with a
    class-agnostic NMS and keeps the top ``num_queries``; the content query is
    the pyramid feature of the chosen cell. ``random`` mode uses learned
    content embeddings with boxes on a fixed seeded layout.
    """
    n = cfg.num_queries
    if cfg.init_mode == "random" or dense is None:
        if store is None or image_size is None:
            raise ValueError("random init needs the parameter store and image size")
        H, W = image_size
        rng = np.random.default_rng(seed)
        side = 0.25 * min(H, W)
        boxes = np.stack([rng.uniform(0, W, n), rng.uniform(0, H, n), np.full(n, side),
                          np.full(n, side), np.zeros(n)], axis=1)
        scores = np.full((n, cfg.num_classes), PRIOR_PROB)
        return QuerySet(store["init.content"], boxes, scores, np.zeros(n, dtype=np.int64))
    probs = ops._sigmoid(dense.logits.data)
    boxes = dense.decode()
    idx = detach(select_candidates(probs.max(axis=1), boxes, n, cfg.pre_topk, cfg.init_nms, seed))
    sel_boxes = detach(boxes[idx])
    return QuerySet(ops.index(dense.features, idx), sel_boxes, probs[idx],
                    np.zeros(len(idx), dtype=np.int64), ops.index(dense.logits, idx), None)


def dense_targets(dense: DenseOutput, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                  num_classes: int):
    """Centre-sampling assignment for the dense head.

    Each gt goes to the level whose anchor size is closest in log scale; on
    that level the cells whose centres fall inside the gt, plus the cell
    nearest its centre, become positives (smaller gt wins on conflicts).
    Returns ``(cls_target (P, K), pos_index, reg_target (n_pos, 5))``.
    """
    P = len(dense.strides)
    cls_t = np.zeros((P, num_classes))
    gb = np.asarray(gt_boxes, dtype=float).reshape(-1, 5)
    if len(gb) == 0:
        return cls_t, np.zeros(0, dtype=np.int64), np.zeros((0, 5))
    owner = np.full(P, -1)
    owner_area = np.full(P, np.inf)
    level_anchor = {lvl: dense.anchors[dense.level == lvl][0] for lvl in np.unique(dense.level)}
    lvls = np.array(sorted(level_anchor))
    sizes = np.array([level_anchor[l] for l in lvls])
    for g, b in enumerate(gb):
        lvl = lvls[np.argmin(np.abs(np.log(np.sqrt(b[2] * b[3]) / sizes)))]
        cells = np.flatnonzero(dense.level == lvl)
        d = dense.centers[cells] - b[:2]
        c, s = math.cos(b[4]), math.sin(b[4])
        lx = d[:, 0] * c + d[:, 1] * s
        ly = -d[:, 0] * s + d[:, 1] * c
        inside = (np.abs(lx) <= b[2] / 2) & (np.abs(ly) <= b[3] / 2)
        inside[np.argmin(np.hypot(d[:, 0], d[:, 1]))] = True
        area = b[2] * b[3]
        for i in cells[inside]:
            if area < owner_area[i]:
                owner[i], owner_area[i] = g, area
    pos = np.flatnonzero(owner >= 0)
    cls_t[pos, gt_labels[owner[pos]]] = 1.0
    gp = gb[owner[pos]]
    s, a = dense.strides[pos], dense.anchors[pos]
    reg = np.stack([(gp[:, 0] - dense.centers[pos, 0]) / s, (gp[:, 1] - dense.centers[pos, 1]) / s,
                    np.log(gp[:, 2] / a), np.log(gp[:, 3] / a), gp[:, 4]], axis=1)
    return cls_t, pos, reg


def dense_loss(dense: DenseOutput, gt_boxes, gt_labels, num_classes: int, weight: float = 1.0,
               angle_wrap: bool = False):
    """Focal loss over all cells plus L1 on positive cells, both per positive."""
    cls_t, pos, reg = dense_targets(dense, gt_boxes, gt_labels, num_classes)
    norm = 1.0 / max(1, len(pos))
    loss = ops.mul(ops.sum(ops.sigmoid_focal_loss(dense.logits, cls_t)), weight * norm)
    if len(pos):
        pd = ops.index(dense.deltas, pos)
        target = reg.copy()
        if angle_wrap:
            target[:, 4] += detach(angle_shift(pd.data[:, 4] - reg[:, 4]))
        l1 = ops.sum(ops.abs(ops.sub(pd, target)))
        loss = ops.add(loss, ops.mul(l1, weight * norm))
    return loss


# -- decoder layer ---------------------------------------------------------

def init_pe_params(store: nn.ParamStore, C: int, prefix: str):
    store.xavier(f"{prefix}.pe1.w", 6, C)
    store.zeros(f"{prefix}.pe1.b", (C,))
    store.xavier(f"{prefix}.pe2.w", C, C)
    store.zeros(f"{prefix}.pe2.b", (C,))


def init_layer_params(store: nn.ParamStore, cfg: DecoderConfig, prefix: str):
    C, K, F = cfg.channels, cfg.num_classes, cfg.ffn_dim
    if not cfg.shared_pe:
        init_pe_params(store, C, prefix)
    for n in ("q", "k", "v", "o"):
        store.xavier(f"{prefix}.sa.{n}", C, C)
    for k in range(3):
        store.ones(f"{prefix}.ln{k}.g", (C,))
        store.zeros(f"{prefix}.ln{k}.b", (C,))
    init_attention_params(store, cfg.attention, prefix=f"{prefix}.rroi")
    store.xavier(f"{prefix}.ffn1.w", C, F)
    store.zeros(f"{prefix}.ffn1.b", (F,))
    store.xavier(f"{prefix}.ffn2.w", F, C)
    store.zeros(f"{prefix}.ffn2.b", (C,))
    store.normal(f"{prefix}.cls.w", (C, K), std=0.01)
    store.add(f"{prefix}.cls.b", np.full(K, -math.log((1 - PRIOR_PROB) / PRIOR_PROB)))
    store.xavier(f"{prefix}.reg1.w", C, C)
    store.zeros(f"{prefix}.reg1.b", (C,))
    store.zeros(f"{prefix}.reg2.w", (C, 5))
    store.zeros(f"{prefix}.reg2.b", (5,))


def box_features(boxes: np.ndarray, image_size) -> np.ndarray:
    """``(cx/W, cy/H, log(w/W), log(h/H), cos 2t, sin 2t)`` per box."""
    H, W = image_size
    b = np.asarray(boxes, dtype=float).reshape(-1, 5)
    return np.stack([b[:, 0] / W, b[:, 1] / H, np.log(b[:, 2] / W), np.log(b[:, 3] / H),
                     np.cos(2 * b[:, 4]), np.sin(2 * b[:, 4])], axis=1)


def positional_encoding(boxes, image_size, params, prefix) -> Tensor:
    f = box_features(boxes, image_size)
    h = ops.relu(ops.linear(f, params[f"{prefix}.pe1.w"], params[f"{prefix}.pe1.b"]))
    return ops.linear(h, params[f"{prefix}.pe2.w"], params[f"{prefix}.pe2.b"])


def self_attention_layer(q, pe, params, prefix: str, heads: int) -> Tensor:
    """Multi-head self-attention; queries and keys carry ``pe``, values do not."""
    q, pe = as_tensor(q), as_tensor(pe)
    if q.shape != pe.shape:
        raise ShapeMismatch(f"queries {q.shape} vs positional encoding {pe.shape}")
    N, C = q.shape
    d = C // heads
    qp = ops.add(q, pe)

    def split(x):
        return ops.transpose(ops.reshape(x, (N, heads, d)), (1, 0, 2))  # (M, N, d)

    Q = split(ops.matmul(qp, params[f"{prefix}.sa.q"]))
    K = split(ops.matmul(qp, params[f"{prefix}.sa.k"]))
    V = split(ops.matmul(q, params[f"{prefix}.sa.v"]))
    A = ops.softmax(ops.mul(ops.matmul(Q, ops.transpose(K, (0, 2, 1))), 1.0 / math.sqrt(d)), -1)
    out = ops.reshape(ops.transpose(ops.matmul(A, V), (1, 0, 2)), (N, C))
    return ops.matmul(out, params[f"{prefix}.sa.o"])


def apply_deltas(boxes, deltas, image_size, normalize: bool = True) -> Tensor:
    """Refine ``(N, 5)`` boxes with ``(dcx/W, dcy/H, dlog w, dlog h, dtheta)``.

    ``boxes`` act as constants. With ``normalize`` the result follows the
    long-edge convention (w >= h, theta in [-pi/2, pi/2)).
    """
    H, W = image_size
    b = np.asarray(boxes.data if isinstance(boxes, Tensor) else boxes, dtype=float).reshape(-1, 5)
    d = as_tensor(deltas)
    cols = [ops.index(d, (slice(None), k)) for k in range(5)]
    cx = ops.add(ops.mul(cols[0], W), b[:, 0])
    cy = ops.add(ops.mul(cols[1], H), b[:, 1])
    w = ops.mul(ops.exp(cols[2]), b[:, 2])
    h = ops.mul(ops.exp(cols[3]), b[:, 3])
    t = ops.add(cols[4], b[:, 4])
    if normalize:
        swap = detach(w.data < h.data)
        w, h = ops.where(swap, h, w), ops.where(swap, w, h)
        t = ops.add(t, np.where(swap, math.pi / 2, 0.0))
        t = ops.sub(t, detach(angle_shift(t.data)))
    return ops.stack([cx, cy, w, h, t], axis=1)


def encode_deltas(src, dst, image_size) -> np.ndarray:
    """Inverse of ``apply_deltas(..., normalize=False)``."""
    H, W = image_size
    a = np.asarray(src, dtype=float).reshape(-1, 5)
    b = np.asarray(dst, dtype=float).reshape(-1, 5)
    return np.stack([(b[:, 0] - a[:, 0]) / W, (b[:, 1] - a[:, 1]) / H, np.log(b[:, 2] / a[:, 2]),
                     np.log(b[:, 3] / a[:, 3]), b[:, 4] - a[:, 4]], axis=1)


def predict_heads(content, boxes, params, prefix: str, image_size):
    """Class logits ``(N, K)`` and refined boxes ``(N, 5)`` from content queries."""
    content = as_tensor(content)
    b = np.asarray(boxes, dtype=float).reshape(-1, 5)
    if content.shape[0] != len(b):
        raise ShapeMismatch(f"{content.shape[0]} queries vs {len(b)} boxes")
    logits = ops.linear(content, params[f"{prefix}.cls.w"], params[f"{prefix}.cls.b"])
    h = ops.relu(ops.linear(content, params[f"{prefix}.reg1.w"], params[f"{prefix}.reg1.b"]))
    deltas = ops.linear(h, params[f"{prefix}.reg2.w"], params[f"{prefix}.reg2.b"])
    return logits, apply_deltas(b, deltas, image_size)


def _ln(x, params, name):
    return ops.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def decoder_layer(qs: QuerySet, pyramid: FeaturePyramid, params, cfg: DecoderConfig,
                  prefix: str) -> QuerySet:
    """Self-attention, rotated RoI cross-attention, FFN, then the heads."""
    size = pyramid.image_size
    boxes = detach(qs.boxes)
    q = qs.content
    pe = positional_encoding(boxes, size, params, "shared" if cfg.shared_pe else prefix)
    q = _ln(ops.add(q, self_attention_layer(q, pe, params, prefix, cfg.self_heads)), params,
            f"{prefix}.ln0")
    q = _ln(ops.add(q, msrroi_attention(q, boxes, pyramid, cfg.attention, params,
                                        prefix=f"{prefix}.rroi")), params, f"{prefix}.ln1")
    h = ops.relu(ops.linear(q, params[f"{prefix}.ffn1.w"], params[f"{prefix}.ffn1.b"]))
    q = _ln(ops.add(q, ops.linear(h, params[f"{prefix}.ffn2.w"], params[f"{prefix}.ffn2.b"])),
            params, f"{prefix}.ln2")
    logits, refined = predict_heads(q, boxes, params, prefix, size)
    refined_np = refined.data.copy()
    refined_np[:, 2:4] = np.maximum(refined_np[:, 2:4], 1e-3)
    return QuerySet(q, refined_np, ops._sigmoid(logits.data), qs.layer_of_origin + 1,
                    logits, refined)


# -- selective distinct queries --------------------------------------------

def collect_selective_queries(history: list, sources) -> QuerySet:
    """Concatenate the query sets of ``sources`` (layer 0 = initial queries), later layers first."""
    srcs = sorted(set(int(s) for s in sources), reverse=True)
    for s in srcs:
        if s < 0 or s >= len(history) or history[s] is None:
            raise SourceLayerNotRun(f"layer {s} has not produced queries yet")
    parts = []
    for s in srcs:
        qs = history[s]
        parts.append(QuerySet(qs.content, qs.boxes, qs.scores, np.full(len(qs), s),
                              qs.logits, qs.box_tensor))
    return parts[0] if len(parts) == 1 else QuerySet.concat(parts)


def filter_distinct_queries(q_p: QuerySet, n: int, t_sdq: float) -> QuerySet:
    """Class-agnostic rotated NMS at ``t_sdq`` on max class scores, then top-``n``."""
    if not 0.0 < t_sdq <= 1.0:
        raise ValueError("t_sdq must lie in (0, 1]")
    if len(q_p) == 0:
        return q_p
    score = q_p.scores.max(axis=1)
    keep = rotated_nms(q_p.boxes, score, t_sdq)[:n]
    return q_p.take(detach(np.asarray(keep, dtype=np.int64)))


# -- model -----------------------------------------------------------------

@dataclass
class ForwardResult:
    layers: list            # QuerySet per decoder layer
    initial: QuerySet
    dense: DenseOutput | None
    selective: int = 0      # queries collected before SDQ
    distinct: QuerySet | None = None

    @property
    def final(self) -> QuerySet:
        return self.layers[-1]


class RQModel:
    """Parameters plus the forward pass of the query-based detector."""

    def __init__(self, cfg: DecoderConfig | None = None, seed: int = 0, dtype=None,
                 store: nn.ParamStore | None = None):
        self.cfg = cfg = cfg or DecoderConfig()
        self.seed = seed
        if store is None:
            store = nn.ParamStore(seed=seed, dtype=dtype)
            TinyBackbone.init_params(store, cfg.channels, cfg.stem_channels)
            init_dense_head(store, cfg)
            if cfg.init_mode == "random":
                store.normal("init.content", (cfg.num_queries, cfg.channels), std=1.0)
            if cfg.shared_pe:
                init_pe_params(store, cfg.channels, "shared")
            for i in range(1, cfg.num_layers + 1):
                init_layer_params(store, cfg, f"layer{i}")
        self.store = store
        self.backbone = TinyBackbone(store, cfg.channels)

    @property
    def params(self):
        return self.store

    def forward(self, image, seed: int | None = None) -> ForwardResult:
        cfg = self.cfg
        pyramid = self.backbone(image)
        dense = dense_head(pyramid, self.store, cfg) if cfg.init_mode == "dense" else None
        q0 = init_queries(cfg, self.seed if seed is None else seed, dense, self.store,
                          pyramid.image_size)
        history = [q0]
        layers = []
        qs, selective, distinct = q0, 0, None
        for i in range(1, cfg.num_layers + 1):
            if cfg.sdq and cfg.sdq_after == i - 1:
                sel = collect_selective_queries(history, cfg.sdq_sources)
                selective = len(sel)
                qs = distinct = filter_distinct_queries(sel, cfg.num_queries, cfg.sdq_threshold)
            qs = decoder_layer(qs, pyramid, self.store, cfg, f"layer{i}")
            history.append(qs)
            layers.append(qs)
        if cfg.sdq and cfg.sdq_after == cfg.num_layers:
            sel = collect_selective_queries(history, cfg.sdq_sources)
            selective = len(sel)
            distinct = filter_distinct_queries(sel, cfg.num_queries, cfg.sdq_threshold)
            layers[-1] = distinct
        return ForwardResult(layers, q0, dense, selective, distinct)

    __call__ = forward


def forward(image, cfg: DecoderConfig, params: nn.ParamStore, seed: int = 0) -> list:
    """Per-layer query sets for ``image`` using an existing parameter store."""
    return RQModel(cfg, seed, store=params).forward(image).layers


def top_detections(qs: QuerySet, k: int = 100):
    """Top-``k`` (query, class) pairs by score -> ``(boxes, scores, labels)``."""
    flat = qs.scores.reshape(-1)
    K = qs.scores.shape[1]
    order = np.argsort(-flat, kind="stable")[:k]
    return qs.boxes[order // K], flat[order], order % K

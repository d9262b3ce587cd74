"""Training loop, checkpoints and inference helpers."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .decoder import DecoderConfig, ForwardResult, RQModel, dense_loss, top_detections
from .evaluation import Detections, EvalConfig, GroundTruth, evaluate_map, similar_query_ratio
from .matching import LossWeights, matching_cost, hungarian, total_loss
from .nn import checkpoint, ops


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 4
    warmup: int = 500
    milestones: tuple = (2 / 3, 11 / 12)
    gamma: float = 0.1
    weight_decay: float = 1e-4
    clip: float = 1.0
    dense_weight: float = 1.0
    cls_mode: str = "focal"
    angle_wrap: bool = False
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.milestones = tuple(self.milestones)
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")


@dataclass
class StepLog:
    step: int
    epoch: int
    lr: float
    loss: float
    cls: float
    l1: float
    iou: float
    dense: float


def sample_loss(model: RQModel, sample, tcfg: TrainConfig):
    """Forward one scene and build its full loss -> ``(loss, ForwardResult, terms)``."""
    cfg = model.cfg
    out = model.forward(sample.image)
    size = sample.image.shape[:2]
    boxes, labels = sample.boxes, sample.labels
    layers = [(q.logits, q.box_tensor) for q in out.layers]
    loss, _, terms = total_loss(layers, boxes, labels, tcfg.weights, size, cfg.num_classes,
                                tcfg.cls_mode, tcfg.angle_wrap)
    d = 0.0
    if out.dense is not None and tcfg.dense_weight > 0:
        dl = dense_loss(out.dense, boxes, labels, cfg.num_classes, tcfg.dense_weight,
                        tcfg.angle_wrap)
        d = float(dl.data)
        loss = ops.add(loss, dl)
    return loss, out, (terms, d)


class Trainer:
    """Owns a model, its optimiser and the step counter."""

    def __init__(self, model: RQModel, tcfg: TrainConfig):
        self.model = model
        self.tcfg = tcfg
        self.params = list(model.store)
        self.opt = nn.AdamW(self.params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
        self.step = 0
        self.epoch = 0

    def total_steps(self, n_samples: int) -> int:
        return self.tcfg.epochs * math.ceil(n_samples / self.tcfg.batch_size)

    def epoch_order(self, n: int, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.tcfg.seed, epoch]).permutation(n)

    def train_batch(self, batch, total_steps: int) -> StepLog:
        self.model.store.zero_grad()
        acc = np.zeros(5)
        scale = 1.0 / len(batch)
        for s in batch:
            loss, _, (terms, d) = sample_loss(self.model, s, self.tcfg)
            nn.backward(ops.mul(loss, scale))
            acc += scale * np.array([float(loss.data), terms.cls, terms.l1, terms.iou, d])
        if self.tcfg.clip:
            nn.clip_grad_norm(self.params, self.tcfg.clip)
        lr = nn.lr_at(self.step, self.tcfg.lr, total_steps, self.tcfg.warmup,
                      self.tcfg.milestones, self.tcfg.gamma)
        self.opt.step(lr)
        log = StepLog(self.step, self.epoch, lr, *acc.tolist())
        self.step += 1
        return log

    def train_epoch(self, samples: list, on_step=None) -> list:
        total = self.total_steps(len(samples))
        order = self.epoch_order(len(samples), self.epoch)
        bs = self.tcfg.batch_size
        logs = []
        for k in range(0, len(order), bs):
            log = self.train_batch([samples[i] for i in order[k:k + bs]], total)
            logs.append(log)
            if on_step:
                on_step(log)
        self.epoch += 1
        return logs

    # checkpoints: params, optimiser moments and counters
    def state(self) -> dict:
        out = dict(self.model.store.state())
        out.update(self.opt.state())
        return out

    def meta(self, extra: dict | None = None) -> dict:
        m = {"format": 1, "step": self.step, "epoch": self.epoch,
             "model": config_to_dict(self.model.cfg), "train": train_to_dict(self.tcfg),
             "model_seed": self.model.seed}
        if extra:
            m.update(extra)
        return m

    def save(self, path: str, extra: dict | None = None) -> None:
        checkpoint.save(path, self.state(), self.meta(extra))

    def load_state(self, tensors: dict, meta: dict) -> None:
        names = set(self.model.store.names())
        self.model.store.load_state({k: v for k, v in tensors.items() if k in names})
        self.opt.load_state(tensors, meta["step"])
        self.step = int(meta["step"])
        self.epoch = int(meta["epoch"])


def config_to_dict(cfg: DecoderConfig) -> dict:
    d = asdict(cfg)
    d["sdq_sources"] = list(cfg.sdq_sources)
    return d


def train_to_dict(t: TrainConfig) -> dict:
    d = asdict(t)
    d["milestones"] = list(t.milestones)
    return d


def load_model(path: str) -> tuple:
    """``(model, meta)`` from a checkpoint file."""
    tensors, meta = checkpoint.load(path)
    cfg = DecoderConfig(**meta["model"])
    model = RQModel(cfg, seed=int(meta.get("model_seed", 0)))
    names = set(model.store.names())
    model.store.load_state({k: v for k, v in tensors.items() if k in names})
    return model, meta


# -- inference -------------------------------------------------------------

def predict_image(model: RQModel, image, top_k: int = 100) -> Detections:
    with nn.no_grad():
        out = model.forward(image)
    return Detections(*top_detections(out.final, top_k))


def evaluate_model(model: RQModel, samples, cfg: EvalConfig | None = None) -> dict:
    preds, gts = {}, {}
    for s in samples:
        preds[s.id] = predict_image(model, s.image)
        gts[s.id] = GroundTruth.from_sample(s)
    return evaluate_map(preds, gts, cfg, model.cfg.num_classes)


SDQ_THRESHOLDS = (0.8, 0.85, 0.9, 0.95)


def query_similarity(model: RQModel, sample, weights: LossWeights | None = None,
                     thresholds=SDQ_THRESHOLDS) -> dict:
    """Similar-query ratios of the final layer for one scene.

    Positives are the queries picked by one-to-one matching against the gt;
    every other query is a negative.
    """
    weights = weights or LossWeights()
    with nn.no_grad():
        out = model.forward(sample.image)
    q = out.final
    G = len(sample.annotations)
    res = {"n_gt": G, "n_queries": len(q), "n_selective": out.selective,
           "n_distinct": len(out.distinct) if out.distinct is not None else len(q),
           "distinct_max_iou": 0.0}
    if out.distinct is not None and len(out.distinct) > 1:
        from .geometry import iou_matrix
        m = iou_matrix(out.distinct.boxes, out.distinct.boxes)
        np.fill_diagonal(m, 0.0)
        res["distinct_max_iou"] = float(m.max())
    if G == 0 or G > len(q):
        res.update({t: 0.0 for t in thresholds})
        res["n_pos"] = 0
        return res
    cost = matching_cost(q.scores, q.boxes, sample.boxes, sample.labels, weights,
                         sample.image.shape[:2])
    pos = hungarian(cost).gt_to_pred
    neg = np.setdiff1d(np.arange(len(q)), pos)
    for t in thresholds:
        res[t] = similar_query_ratio(q.boxes[pos], q.boxes[neg], G, t)
    res["n_pos"] = G
    return res


def timed(fn, *a, **kw):
    t = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t

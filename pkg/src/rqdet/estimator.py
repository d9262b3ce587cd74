"""scikit-learn style wrapper around the detector."""
from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .attention import AttentionConfig
from .decoder import DecoderConfig, RQModel
from .diagnostics import RunLog
from .evaluation import EvalConfig, GroundTruth, evaluate_map
from .matching import LossWeights
from .training import Trainer, TrainConfig, predict_image
from .validation import check_images, check_samples


class RotatedQueryDetector(BaseEstimator):
    """Oriented object detector with rotated RoI attention and selective distinct queries.

    ``fit`` takes scene samples (or images plus ``(boxes, labels)`` targets),
    ``predict`` returns one :class:`~rqdet.evaluation.Detections` per image and
    ``score`` reports mAP at IoU 0.5.
    """

    def __init__(self, num_classes=5, num_queries=50, num_layers=2, sdq=True, sdq_threshold=0.9,
                 sdq_after=2, sdq_sources=(1, 2), channels=32, heads=4, pool=7, sampling=4,
                 level_base=16.0, init_mode="dense", epochs=30, lr=1e-3, batch_size=4,
                 warmup=500, weight_decay=1e-4, top_k=100, seed=0, verbose=0):
        self.num_classes = num_classes
        self.num_queries = num_queries
        self.num_layers = num_layers
        self.sdq = sdq
        self.sdq_threshold = sdq_threshold
        self.sdq_after = sdq_after
        self.sdq_sources = sdq_sources
        self.channels = channels
        self.heads = heads
        self.pool = pool
        self.sampling = sampling
        self.level_base = level_base
        self.init_mode = init_mode
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.warmup = warmup
        self.weight_decay = weight_decay
        self.top_k = top_k
        self.seed = seed
        self.verbose = verbose

    def _configs(self):
        att = AttentionConfig(heads=self.heads, pool=self.pool, channels=self.channels,
                              sampling=self.sampling, level_base=self.level_base)
        sdq_after = min(self.sdq_after, self.num_layers)
        sources = tuple(s for s in self.sdq_sources if s <= sdq_after) or (sdq_after,)
        dcfg = DecoderConfig(num_layers=self.num_layers, num_queries=self.num_queries,
                             num_classes=self.num_classes, sdq=self.sdq, sdq_sources=sources,
                             sdq_after=sdq_after, sdq_threshold=self.sdq_threshold,
                             attention=att, self_heads=self.heads, init_mode=self.init_mode)
        tcfg = TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           warmup=self.warmup, weight_decay=self.weight_decay, seed=self.seed,
                           weights=LossWeights())
        return dcfg, tcfg

    def fit(self, X, y=None):
        samples = check_samples(X, y, self.num_classes)
        dcfg, tcfg = self._configs()
        self.model_ = RQModel(dcfg, seed=self.seed)
        self.trainer_ = Trainer(self.model_, tcfg)
        self.history_ = RunLog()
        for _ in range(self.epochs):
            for s in self.trainer_.train_epoch(samples):
                self.history_.add_step(**vars(s))
            if self.verbose:
                last = self.history_.steps[-1]
                print(f"epoch {self.trainer_.epoch} step {last['step']} loss {last['loss']:.4f}")
        self.n_features_in_ = 3
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "model_")
        return [predict_image(self.model_, img, self.top_k) for img in check_images(X)]

    def score(self, X, y=None) -> float:
        samples = check_samples(X, y, self.num_classes)
        preds = self.predict(samples)
        res = evaluate_map({s.id: p for s, p in zip(samples, preds)},
                           {s.id: GroundTruth.from_sample(s) for s in samples},
                           EvalConfig(), self.num_classes)
        return float(res["map"])

    def count_parameters(self) -> int:
        check_is_fitted(self, "model_")
        return int(self.model_.store.count())

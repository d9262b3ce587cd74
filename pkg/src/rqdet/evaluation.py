"""Rotated mAP, the similar-query ratio and detection dump formats."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .geometry import iou_matrix

RESULTS_VERSION = 1


class CountMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    interpolation: str = "11point"  # or "all"
    score_threshold: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError("iou_threshold must lie in (0, 1)")
        if self.interpolation not in ("11point", "all"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")


@dataclass
class Detections:
    boxes: np.ndarray   # (n, 5)
    scores: np.ndarray  # (n,)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 5)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if not (len(self.boxes) == len(self.scores) == len(self.labels)):
            raise ValueError("boxes, scores and labels differ in length")

    def __len__(self):
        return len(self.scores)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 5)), np.zeros(0), np.zeros(0, dtype=np.int64))


@dataclass
class GroundTruth:
    boxes: np.ndarray
    labels: np.ndarray
    difficult: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 5)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.difficult is None:
            self.difficult = np.zeros(len(self.labels), dtype=bool)
        self.difficult = np.asarray(self.difficult, dtype=bool).reshape(-1)

    @classmethod
    def from_sample(cls, sample):
        return cls(sample.boxes, sample.labels, sample.difficult)


def average_precision(recall: np.ndarray, precision: np.ndarray, mode: str = "11point") -> float:
    if mode == "11point":
        tops = [precision[recall >= t].max() if np.any(recall >= t) else 0.0
                for t in np.linspace(0, 1, 11)]
        return float(np.sum(tops) / 11)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def class_pr(predictions: dict, ground_truth: dict, cls: int, cfg: EvalConfig):
    """Greedy VOC matching for one class -> (recall, precision, n_positive)."""
    gts = {}
    npos = 0
    for iid, gt in ground_truth.items():
        m = gt.labels == cls
        gts[iid] = (gt.boxes[m], gt.difficult[m], np.zeros(int(m.sum()), dtype=bool))
        npos += int((~gt.difficult[m]).sum())
    recs = []
    for iid, det in predictions.items():
        m = (det.labels == cls) & (det.scores >= cfg.score_threshold)
        for b, s in zip(det.boxes[m], det.scores[m]):
            recs.append((-s, iid, b))
    # stable: ties keep image order, then within-image order
    recs.sort(key=lambda r: r[0])
    tp = np.zeros(len(recs))
    fp = np.zeros(len(recs))
    for i, (_, iid, b) in enumerate(recs):
        gb, gd, used = gts.get(iid, (np.zeros((0, 5)), np.zeros(0, bool), np.zeros(0, bool)))
        if len(gb) == 0:
            fp[i] = 1
            continue
        ious = iou_matrix(b, gb)[0]
        j = int(np.argmax(ious))
        if ious[j] >= cfg.iou_threshold:
            if gd[j]:
                continue
            if not used[j]:
                used[j] = True
                tp[i] = 1
            else:
                fp[i] = 1
        else:
            fp[i] = 1
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / max(npos, 1)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    return recall, precision, npos


def evaluate_map(predictions: dict, ground_truth: dict, cfg: EvalConfig | None = None,
                 num_classes: int | None = None) -> dict:
    """Per-class AP and mAP.

    ``predictions`` and ``ground_truth`` map image id to :class:`Detections`
    and :class:`GroundTruth`. Classes without a non-difficult gt are left out
    of the mean.
    """
    cfg = cfg or EvalConfig()
    labels = [gt.labels[~gt.difficult] for gt in ground_truth.values()]
    present = sorted(set(np.concatenate(labels).tolist())) if labels else []
    if num_classes is not None:
        present = [c for c in present if c < num_classes]
    ap = {}
    for c in present:
        rec, prec, npos = class_pr(predictions, ground_truth, c, cfg)
        ap[c] = average_precision(rec, prec, cfg.interpolation) if len(rec) else 0.0
    mean = float(np.mean(list(ap.values()))) if ap else 0.0
    return {"ap": ap, "map": mean}


def similar_query_ratio(positives, negatives, gts, t: float) -> float:
    """Share of positives with some negative whose rotated IoU exceeds ``t``.

    ``gts`` may be the gt boxes or their count; it must equal the number of
    positives.
    """
    pos = np.asarray(positives, dtype=np.float64).reshape(-1, 5)
    neg = np.asarray(negatives, dtype=np.float64).reshape(-1, 5)
    n_gt = int(gts) if np.isscalar(gts) else len(np.asarray(gts).reshape(-1, 5))
    if len(pos) != n_gt:
        raise CountMismatch(f"{len(pos)} positives but {n_gt} ground-truth objects")
    if n_gt == 0:
        return 0.0
    if len(neg) == 0:
        return 0.0
    hits = (iou_matrix(pos, neg) > t).any(axis=1)
    return float(hits.sum()) / n_gt


# -- dumps -----------------------------------------------------------------

def format_prediction_dump(predictions: dict) -> str:
    lines = []
    for iid in sorted(predictions):
        d = predictions[iid]
        for b, s, l in zip(d.boxes, d.scores, d.labels):
            lines.append(f"{iid} {s:.6f} {b[0]:.4f} {b[1]:.4f} {b[2]:.4f} {b[3]:.4f} {b[4]:.6f} {int(l)}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_prediction_dump(text: str) -> dict:
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        p = line.split()
        if not p:
            continue
        if len(p) != 8:
            raise ValueError(f"line {lineno}: expected 8 fields, got {len(p)}")
        out.setdefault(p[0], []).append([float(v) for v in p[1:7]] + [int(p[7])])
    res = {}
    for iid, rows in out.items():
        a = np.array(rows, dtype=np.float64)
        res[iid] = Detections(a[:, 1:6], a[:, 0], a[:, 6].astype(np.int64))
    return res


def _atomic_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def write_results(path: str, report: dict, classes=None, extra: dict | None = None) -> None:
    """Versioned, human-readable JSON results file."""
    names = list(classes) if classes is not None else None
    ap = {(names[c] if names else str(c)): round(v, 6) for c, v in report["ap"].items()}
    doc = {"version": RESULTS_VERSION, "map": round(report["map"], 6), "ap": ap}
    if extra:
        doc.update(extra)
    _atomic_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")

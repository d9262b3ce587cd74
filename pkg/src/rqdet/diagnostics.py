"""Run logs, SDQ similarity comparison, parameter counts and curve plots.

CSV schemas
-----------
``logs.csv`` (one row per optimiser step)::

    step,epoch,lr,loss,cls,l1,iou,dense

``epochs.csv`` (one row per epoch)::

    epoch,map,ratio_0.8,ratio_0.85,ratio_0.9,ratio_0.95,queries_selective,queries_distinct,wall_s

``sdq.csv`` (output of :func:`compare_sdq`)::

    threshold,model_a,model_b
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .training import SDQ_THRESHOLDS, query_similarity

STEP_FIELDS = ("step", "epoch", "lr", "loss", "cls", "l1", "iou", "dense")
EPOCH_FIELDS = ("epoch", "map", "ratio_0.8", "ratio_0.85", "ratio_0.9", "ratio_0.95",
                "queries_selective", "queries_distinct", "wall_s")


class EmptyLog(ValueError):
    pass


@dataclass
class RunLog:
    steps: list = field(default_factory=list)   # dicts keyed by STEP_FIELDS
    epochs: list = field(default_factory=list)  # dicts keyed by EPOCH_FIELDS

    def add_step(self, **row):
        if self.steps and row["step"] <= self.steps[-1]["step"]:
            raise ValueError(f"step {row['step']} does not follow {self.steps[-1]['step']}")
        self.steps.append({k: row.get(k, 0.0) for k in STEP_FIELDS})

    def add_epoch(self, **row):
        for k in EPOCH_FIELDS[2:6]:
            v = row.get(k, 0.0)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{k}={v} outside [0, 1]")
        self.epochs.append({k: row.get(k, 0.0) for k in EPOCH_FIELDS})

    def steps_csv(self) -> str:
        return _csv(STEP_FIELDS, self.steps)

    def epochs_csv(self) -> str:
        return _csv(EPOCH_FIELDS, self.epochs)

    @classmethod
    def from_csv(cls, steps_text: str, epochs_text: str = "") -> "RunLog":
        log = cls()
        for r in csv.DictReader(io.StringIO(steps_text)):
            log.steps.append({k: _num(r[k]) for k in STEP_FIELDS})
        if epochs_text:
            for r in csv.DictReader(io.StringIO(epochs_text)):
                log.epochs.append({k: _num(r[k]) for k in EPOCH_FIELDS})
        return log


def _num(v: str):
    f = float(v)
    return int(f) if f.is_integer() and "." not in v and "e" not in v.lower() else f


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


def _csv(fields, rows) -> str:
    lines = [",".join(fields)]
    lines += [",".join(_fmt(r[k]) for k in fields) for r in rows]
    return "\n".join(lines) + "\n"


def count_parameters(model) -> int:
    """Total number of scalar parameters of a model, store or parameter list."""
    store = getattr(model, "store", model)
    return int(sum(p.size for p in store))


def similarity_table(model, samples, thresholds=SDQ_THRESHOLDS) -> dict:
    """Mean similar-query ratio per threshold over ``samples``, plus query counts."""
    rows = [query_similarity(model, s, thresholds=thresholds) for s in samples]
    out = {t: float(np.mean([r[t] for r in rows])) if rows else 0.0 for t in thresholds}
    out["n_selective"] = float(np.mean([r["n_selective"] for r in rows])) if rows else 0.0
    out["n_distinct"] = float(np.mean([r["n_distinct"] for r in rows])) if rows else 0.0
    out["distinct_max_iou"] = max((r["distinct_max_iou"] for r in rows), default=0.0)
    return out


def compare_sdq(model_on, model_off, dataset, thresholds=SDQ_THRESHOLDS) -> tuple:
    """Similar-query ratios of two models on the same scenes.

    Returns ``(rows, csv_text)``; each row is ``(t, ratio_a, ratio_b)``.
    """
    a = similarity_table(model_on, dataset, thresholds)
    b = a if model_off is model_on else similarity_table(model_off, dataset, thresholds)
    rows = [(t, a[t], b[t]) for t in thresholds]
    text = "threshold,model_a,model_b\n" + "".join(
        f"{t:g},{ra:.6f},{rb:.6f}\n" for t, ra, rb in rows)
    return rows, text


# -- plotting --------------------------------------------------------------

def _polyline(xs, ys, box, lo, hi, xlo, xhi):
    x0, y0, w, h = box
    sx = w / (xhi - xlo) if xhi > xlo else 0.0
    sy = h / (hi - lo) if hi > lo else 0.0
    pts = []
    for x, y in zip(xs, ys):
        px = x0 + (x - xlo) * sx if xhi > xlo else x0 + w / 2
        py = y0 + h - (y - lo) * sy if hi > lo else y0 + h / 2
        pts.append(f"{px:.2f},{py:.2f}")
    return " ".join(pts)


def emit_curves(log: RunLog, key: str = "loss", width: int = 640, height: int = 360) -> tuple:
    """``(csv_text, svg_text)`` for ``key`` against step.

    The SVG uses only ``line``, ``polyline`` and ``text`` elements and is
    byte-identical for identical logs.
    """
    if not log.steps:
        raise EmptyLog("run log has no steps")
    xs = [float(r["step"]) for r in log.steps]
    ys = [float(r[key]) for r in log.steps]
    text = "step," + key + "\n" + "".join(f"{int(x)},{_fmt(y)}\n" for x, y in zip(xs, ys))
    m = 48
    box = (m, 16, width - m - 16, height - 16 - m)
    lo, hi = min(ys), max(ys)
    xlo, xhi = min(xs), max(xs)
    x0, y0, w, h = box
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<line x1="{x0}" y1="{y0 + h}" x2="{x0 + w}" y2="{y0 + h}" stroke="black"/>',
        f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y0 + h}" stroke="black"/>',
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" '
        f'points="{_polyline(xs, ys, box, lo, hi, xlo, xhi)}"/>',
        f'<text x="{x0}" y="{height - 12}" font-size="12">step {int(xlo)}..{int(xhi)}</text>',
        f'<text x="4" y="{y0 + 10}" font-size="12">{_fmt(hi)}</text>',
        f'<text x="4" y="{y0 + h}" font-size="12">{_fmt(lo)}</text>',
        f'<text x="{x0 + w}" y="{y0 + 10}" font-size="12" text-anchor="end">{key}</text>',
        "</svg>",
    ]
    return text, "\n".join(parts) + "\n"

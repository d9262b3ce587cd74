"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np

from .data import Annotation, SceneSample
from .geometry import RotatedBox


def check_image(image) -> np.ndarray:
    """``(H, W, 3)`` float array in ``[0, 1]``; uint8 input is rescaled."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("float images must lie in [0, 1]")
    return arr


def check_boxes(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    if b.size == 0:
        return np.zeros((0, 5))
    if b.ndim != 2 or b.shape[1] != 5:
        raise ValueError(f"boxes must be (n, 5), got shape {b.shape}")
    if not np.all(np.isfinite(b)):
        raise ValueError("boxes contain non-finite values")
    if np.any(b[:, 2:4] <= 0):
        raise ValueError("box sides must be positive")
    return b


def check_labels(labels, n: int, num_classes: int | None = None) -> np.ndarray:
    lab = np.asarray(labels).reshape(-1)
    if len(lab) != n:
        raise ValueError(f"{len(lab)} labels for {n} boxes")
    if lab.size and not np.issubdtype(lab.dtype, np.integer):
        if not np.all(lab == np.round(lab)):
            raise ValueError("labels must be integers")
    lab = lab.astype(np.int64)
    if lab.size and (lab.min() < 0 or (num_classes is not None and lab.max() >= num_classes)):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return lab


def check_samples(X, y=None, num_classes: int | None = None) -> list:
    """Normalise estimator input to a list of :class:`SceneSample`.

    ``X`` is either a sequence of scene samples (``y`` ignored) or of images
    with ``y`` holding ``(boxes, labels)`` pairs.
    """
    X = list(X)
    if not X:
        raise ValueError("no samples given")
    if all(isinstance(s, SceneSample) for s in X):
        for s in X:
            check_image(s.image)
            check_labels(s.labels, len(s.annotations), num_classes)
        return X
    if y is None:
        raise ValueError("targets y are required when X holds raw images")
    y = list(y)
    if len(y) != len(X):
        raise ValueError(f"{len(X)} images but {len(y)} targets")
    out = []
    for i, (img, (boxes, labels)) in enumerate(zip(X, y)):
        b = check_boxes(boxes)
        lab = check_labels(labels, len(b), num_classes)
        anns = [Annotation(RotatedBox.from_array(r).normalize(), int(l)) for r, l in zip(b, lab)]
        out.append(SceneSample(check_image(img), anns, f"{i:06d}"))
    return out


def check_images(X) -> list:
    return [check_image(s.image if isinstance(s, SceneSample) else s) for s in X]

"""Scene samples, DOTA-format annotation I/O, patch cropping and the synthetic generator."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import RotatedBox, corners_array, corners_to_box, iou_matrix

MANIFEST_VERSION = 1


class MalformedLine(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class NonNumericCoordinate(MalformedLine):
    pass


class DatasetNotFound(FileNotFoundError):
    pass


@dataclass(frozen=True)
class Annotation:
    box: RotatedBox
    label: int
    difficult: bool = False


@dataclass
class SceneSample:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    annotations: list
    id: str = ""

    @property
    def boxes(self) -> np.ndarray:
        return np.array([a.box.to_array() for a in self.annotations]).reshape(-1, 5)

    @property
    def labels(self) -> np.ndarray:
        return np.array([a.label for a in self.annotations], dtype=np.int64)

    @property
    def difficult(self) -> np.ndarray:
        return np.array([a.difficult for a in self.annotations], dtype=bool)


# -- DOTA text -------------------------------------------------------------

def parse_dota_annotation(text: str) -> list:
    """Parse DOTA ``labelTxt`` content.

    Returns ``[(polygon (8,), category, difficulty), ...]``. Metadata lines
    (``imagesource:...``, ``gsd:...``) before the first object are skipped.
    """
    records = []
    started = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if not started and ":" in line and len(parts) < 9:
            continue
        started = True
        if len(parts) not in (9, 10):
            raise MalformedLine(lineno, f"expected 8 coordinates, category, difficulty; "
                                        f"got {len(parts)} fields")
        try:
            coords = np.array([float(v) for v in parts[:8]])
        except ValueError:
            raise NonNumericCoordinate(lineno, f"non-numeric coordinate in {parts[:8]}") from None
        if not np.all(np.isfinite(coords)):
            raise NonNumericCoordinate(lineno, "non-finite coordinate")
        try:
            difficulty = int(parts[9]) if len(parts) == 10 else 0
        except ValueError:
            raise MalformedLine(lineno, f"difficulty {parts[9]!r} is not an integer") from None
        records.append((coords, parts[8], difficulty))
    return records


def format_dota_annotation(annotations, classes) -> str:
    lines = []
    for a in annotations:
        c = corners_array(a.box.to_array())[0].reshape(-1)
        coords = " ".join(f"{v:.4f}" for v in c)
        lines.append(f"{coords} {classes[a.label]} {int(a.difficult)}")
    return "\n".join(lines) + ("\n" if lines else "")


def annotations_from_dota(text: str, classes) -> list:
    index = {c: i for i, c in enumerate(classes)}
    out = []
    for poly, cat, diff in parse_dota_annotation(text):
        if cat not in index:
            raise KeyError(f"unknown category {cat!r}")
        out.append(Annotation(corners_to_box(poly.reshape(4, 2)), index[cat], bool(diff)))
    return out


# -- cropping --------------------------------------------------------------

def _offsets(length: int, size: int, stride: int) -> list:
    offs = list(range(0, max(length - size, 0) + 1, stride))
    if offs[-1] + size < length:
        offs.append(length - size)
    return offs


def crop_patches(sample: SceneSample, size: int = 1024, overlap: int = 200) -> list:
    """Sliding-window crops with stride ``size - overlap``.

    Images smaller than ``size`` are zero-padded. Every box goes to exactly one
    patch: along each axis, the patch whose centre is nearest to the box
    centre (first one on ties). Boxes are kept whole and rebased.
    """
    if size <= overlap:
        raise ValueError("size must exceed overlap")
    H, W = sample.image.shape[:2]
    stride = size - overlap
    xs, ys = _offsets(W, size, stride), _offsets(H, size, stride)
    cx_cent = np.array(xs) + size / 2
    cy_cent = np.array(ys) + size / 2
    owners = {}
    for k, a in enumerate(sample.annotations):
        ix = int(np.argmin(np.abs(cx_cent - a.box.cx)))
        iy = int(np.argmin(np.abs(cy_cent - a.box.cy)))
        owners.setdefault((iy, ix), []).append(k)
    patches = []
    for iy, oy in enumerate(ys):
        for ix, ox in enumerate(xs):
            img = np.zeros((size, size) + sample.image.shape[2:], dtype=sample.image.dtype)
            part = sample.image[oy:oy + size, ox:ox + size]
            img[:part.shape[0], :part.shape[1]] = part
            anns = []
            for k in owners.get((iy, ix), []):
                a = sample.annotations[k]
                b = a.box
                anns.append(Annotation(RotatedBox(b.cx - ox, b.cy - oy, b.w, b.h, b.theta),
                                       a.label, a.difficult))
            patches.append(SceneSample(img, anns, f"{sample.id}__{ox}__{oy}"))
    return patches


# -- synthetic scenes ------------------------------------------------------

CLASS_NAMES = ("plate", "strip", "ellipse", "triangle", "banded")

# per class: (shape, long side range, aspect range, base colour)
_CLASS_STYLE = {
    "plate": ("rect", (12, 28), (1.5, 2.5), (0.85, 0.25, 0.2)),
    "strip": ("rect", (36, 60), (8.0, 10.0), (0.9, 0.85, 0.2)),
    "ellipse": ("ellipse", (14, 30), (1.3, 2.5), (0.2, 0.4, 0.9)),
    "triangle": ("triangle", (14, 30), (1.0, 1.8), (0.2, 0.8, 0.3)),
    "banded": ("banded", (14, 30), (1.2, 2.0), (0.8, 0.3, 0.8)),
}


@dataclass
class SyntheticSpec:
    image_size: tuple = (128, 128)
    classes: tuple = CLASS_NAMES
    count_range: tuple = (4, 9)
    density: str = "mixed"  # scattered | packed | mixed
    packed_prob: float = 0.5
    row_range: tuple = (3, 6)
    margin: float = 2.0
    noise: float = 0.04

    @classmethod
    def preset(cls, name: str) -> "SyntheticSpec":
        if name in ("standard", "mixed"):
            return cls()
        if name == "scattered":
            return cls(density="scattered")
        if name in ("dense", "packed"):
            return cls(density="packed", packed_prob=1.0)
        if name == "single":
            return cls(count_range=(1, 1), density="scattered")
        raise ValueError(f"unknown synthetic preset {name!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown synthetic spec keys: {sorted(bad)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def __post_init__(self):
        for c in self.classes:
            if c not in _CLASS_STYLE:
                raise ValueError(f"no drawing style for class {c!r}")
        if self.density not in ("scattered", "packed", "mixed"):
            raise ValueError(f"unknown density {self.density!r}")


def _coverage(shape: str, lx, ly, w, h):
    if shape in ("rect", "banded"):
        d = np.maximum(np.abs(lx) - w / 2, np.abs(ly) - h / 2)
    elif shape == "ellipse":
        a, b = w / 2, h / 2
        f = (lx / a) ** 2 + (ly / b) ** 2 - 1
        grad = 2 * np.sqrt((lx / a ** 2) ** 2 + (ly / b ** 2) ** 2) + 1e-9
        d = f / grad
    elif shape == "triangle":
        pts = np.array([[-w / 2, h / 2], [w / 2, h / 2], [0.0, -h / 2]])
        d = np.full(lx.shape, -np.inf)
        for i in range(3):
            p, q = pts[i], pts[(i + 1) % 3]
            e = q - p
            n = np.array([e[1], -e[0]]) / np.hypot(*e)  # outward for this winding
            if np.dot(n, pts[(i + 2) % 3] - p) > 0:
                n = -n
            d = np.maximum(d, (lx - p[0]) * n[0] + (ly - p[1]) * n[1])
    else:
        raise ValueError(shape)
    return np.clip(0.5 - d, 0.0, 1.0)


def render_object(image: np.ndarray, box: RotatedBox, shape: str, color, rng=None) -> None:
    """Alpha-composite one anti-aliased shape into ``image`` in place."""
    H, W = image.shape[:2]
    c = corners_array(box.to_array())[0]
    x0 = max(int(np.floor(c[:, 0].min())) - 1, 0)
    x1 = min(int(np.ceil(c[:, 0].max())) + 2, W)
    y0 = max(int(np.floor(c[:, 1].min())) - 1, 0)
    y1 = min(int(np.ceil(c[:, 1].max())) + 2, H)
    if x0 >= x1 or y0 >= y1:
        return
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    X, Y = np.meshgrid(xs, ys)
    dx, dy = X - box.cx, Y - box.cy
    ct, st = math.cos(box.theta), math.sin(box.theta)
    lx = ct * dx + st * dy
    ly = -st * dx + ct * dy
    alpha = _coverage(shape, lx, ly, box.w, box.h)[..., None]
    col = np.broadcast_to(np.asarray(color, dtype=float), alpha.shape[:2] + (3,)).copy()
    if shape == "banded":
        band = np.clip(0.5 - (np.abs(ly) - box.h / 6), 0, 1)[..., None]
        col = col * (1 - 0.7 * band)
    region = image[y0:y1, x0:x1]
    region[...] = region * (1 - alpha) + col * alpha


def _inside(box: RotatedBox, size, margin) -> bool:
    H, W = size
    c = corners_array(box.to_array())[0]
    return (c[:, 0].min() >= margin and c[:, 1].min() >= margin
            and c[:, 0].max() <= W - margin and c[:, 1].max() <= H - margin)


def _draw_dims(rng, style):
    _, (lo, hi), (alo, ahi), _ = style
    L = rng.uniform(lo, hi)
    a = rng.uniform(alo, ahi)
    return L, max(L / a, 2.0)


def _free(box: RotatedBox, placed: list) -> bool:
    if not placed:
        return True
    others = np.array([b.to_array() for b in placed])
    return not np.any(iou_matrix(box.to_array(), others) > 0)


def generate_synthetic_scene(seed: int, spec: SyntheticSpec | None = None,
                             sample_id: str | None = None) -> SceneSample:
    """Deterministic synthetic oriented-object scene for ``seed``."""
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    H, W = spec.image_size
    # smooth background: bilinear upsampled coarse noise plus fine noise
    coarse = rng.uniform(0.25, 0.55, size=(5, 5, 3))
    gy = np.linspace(0, 4, H)
    gx = np.linspace(0, 4, W)
    y0 = np.minimum(gy.astype(int), 3)
    x0 = np.minimum(gx.astype(int), 3)
    fy = (gy - y0)[:, None, None]
    fx = (gx - x0)[None, :, None]
    img = (coarse[y0][:, x0] * (1 - fy) * (1 - fx) + coarse[y0 + 1][:, x0] * fy * (1 - fx)
           + coarse[y0][:, x0 + 1] * (1 - fy) * fx + coarse[y0 + 1][:, x0 + 1] * fy * fx)
    img = img + rng.normal(0, spec.noise, size=img.shape)

    target = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    placed: list = []
    labels: list = []
    packed = spec.density == "packed" or (spec.density == "mixed" and rng.random() < spec.packed_prob)
    K = len(spec.classes)
    if packed and target > 1:
        rowable = [i for i, c in enumerate(spec.classes) if _CLASS_STYLE[c][0] in ("rect", "banded")]
        for _ in range(20):
            lab = int(rng.choice(rowable)) if rowable else int(rng.integers(K))
            style = _CLASS_STYLE[spec.classes[lab]]
            L, S = _draw_dims(rng, style)
            n = int(rng.integers(spec.row_range[0], spec.row_range[1] + 1))
            n = max(2, min(n, target))
            theta = rng.uniform(-math.pi / 2, math.pi / 2)
            gap = rng.uniform(1.0, 3.0)
            step = S + gap
            nx, ny = -math.sin(theta), math.cos(theta)  # short-axis direction
            cx = rng.uniform(0, W)
            cy = rng.uniform(0, H)
            row = []
            for k in range(n):
                off = (k - (n - 1) / 2) * step
                row.append(RotatedBox(cx + off * nx, cy + off * ny, L, S, theta).normalize())
            if all(_inside(b, (H, W), spec.margin) for b in row):
                for b in row:
                    placed.append(b)
                    labels.append(lab)
                break
    tries = 0
    while len(placed) < target and tries < 200:
        tries += 1
        lab = int(rng.integers(K))
        style = _CLASS_STYLE[spec.classes[lab]]
        L, S = _draw_dims(rng, style)
        box = RotatedBox(rng.uniform(0, W), rng.uniform(0, H), L, S,
                         rng.uniform(-math.pi / 2, math.pi / 2)).normalize()
        if _inside(box, (H, W), spec.margin) and _free(box, placed):
            placed.append(box)
            labels.append(lab)
    for box, lab in zip(placed, labels):
        shape, _, _, base = _CLASS_STYLE[spec.classes[lab]]
        color = np.clip(np.asarray(base) + rng.normal(0, 0.05, 3), 0, 1)
        # triangles are drawn in their own frame; the annotation is the long-edge box
        render_object(img, box, shape, color)
    img = np.clip(img, 0.0, 1.0)
    anns = [Annotation(b, l, False) for b, l in zip(placed, labels)]
    return SceneSample(img, anns, sample_id if sample_id is not None else f"{seed:06d}")


# -- dataset directories ---------------------------------------------------

def _save_png(path: str, image: np.ndarray) -> None:
    from PIL import Image
    arr = np.clip(np.rint(image * 255), 0, 255).astype(np.uint8)
    tmp = path + ".tmp"
    Image.fromarray(arr).save(tmp, format="PNG", optimize=False)
    os.replace(tmp, path)


def load_image(path: str) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_dataset(root: str, samples, classes, extra: dict | None = None) -> None:
    """``images/*.png`` + ``labelTxt/*.txt`` (DOTA) + ``manifest.json``."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labelTxt"), exist_ok=True)
    ids = []
    size = None
    for s in samples:
        _save_png(os.path.join(root, "images", f"{s.id}.png"), s.image)
        txt = os.path.join(root, "labelTxt", f"{s.id}.txt")
        with open(txt + ".tmp", "w", encoding="utf-8") as f:
            f.write(format_dota_annotation(s.annotations, classes))
        os.replace(txt + ".tmp", txt)
        ids.append(s.id)
        size = list(s.image.shape[:2])
    manifest = {"version": MANIFEST_VERSION, "classes": list(classes), "ids": ids,
                "image_size": size}
    if extra:
        manifest.update(extra)
    path = os.path.join(root, "manifest.json")
    with open(path + ".tmp", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(path + ".tmp", path)


def read_manifest(root: str) -> dict:
    path = os.path.join(root, "manifest.json")
    if not os.path.isfile(path):
        raise DatasetNotFound(f"no manifest.json under {root!r}")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def read_dataset(root: str, limit: int | None = None) -> tuple:
    """Load a dataset directory -> ``(samples, classes)``."""
    man = read_manifest(root)
    classes = man["classes"]
    out = []
    for sid in man["ids"][:limit]:
        img = load_image(os.path.join(root, "images", f"{sid}.png"))
        with open(os.path.join(root, "labelTxt", f"{sid}.txt"), encoding="utf-8") as f:
            anns = annotations_from_dota(f.read(), classes)
        out.append(SceneSample(img, anns, sid))
    return out, classes


def synthesize_dataset(root: str, count: int, seed: int, spec: SyntheticSpec,
                       split: str | None = None) -> list:
    samples = [generate_synthetic_scene(seed * 100003 + i, spec, f"{i:06d}") for i in range(count)]
    extra = {"seed": seed, "spec": spec.to_dict()}
    if split:
        extra["split"] = split
    write_dataset(root, samples, spec.classes, extra)
    return samples

"""Target ingestion: image preprocessing, annotation filtering over the
line-delimited manifest format, segmentation-mask extraction, patient
parameter sampling, and a seeded procedural digit generator used for
desk-scale runs (no external corpus required).

Manifest schema (one JSON object per line):
    {"image_id": str, "total_object_count": int,
     "objects": [{"category": str, "area_fraction": float in [0,1],
                  "mean_brightness": float in [0,255],
                  "mask_ref": str}, ...]}
A converter from a richer upstream annotation format only needs to emit
these fields; area fractions and brightness are measured on the original
resolution image, before any resizing.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import config as cfg
from .errors import DataFormatError, DimensionError, ParameterError
from .forward import PatientParams
from .validation import check_range

# Appendix-style filtering thresholds.
MAX_TOTAL_OBJECTS = 15
MIN_AREA_FRACTION = 0.04
MAX_QUALIFYING_OBJECTS = 5
MIN_BRIGHTNESS = 50.0

REMOVAL_KEYS = ("clutter", "category_size", "too_many", "too_dim")


@dataclass(frozen=True)
class AnnotationObject:
    category: str
    area_fraction: float
    mean_brightness: float
    mask_ref: str = ""


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    objects: tuple
    total_object_count: int

    def __post_init__(self):
        for obj in self.objects:
            if not 0.0 <= obj.area_fraction <= 1.0:
                raise ParameterError(
                    f"{self.image_id}: area fraction {obj.area_fraction} outside [0, 1]"
                )
        if self.total_object_count < len(self.objects):
            raise ParameterError(
                f"{self.image_id}: total_object_count smaller than the object list"
            )


@dataclass
class TargetSet:
    """Ordered grayscale targets at percept resolution, pixel values in
    [0, 1], with optional labels and a split tag."""

    images: np.ndarray  # (N, H, W)
    labels: np.ndarray | None = None
    split: str = "train"
    ids: tuple = ()

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3:
            raise DimensionError(f"target images must be (N, H, W), got {self.images.shape}")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ParameterError("target pixels must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return self.images.shape[0]


def resize_bilinear(img, out_shape):
    """Pure bilinear resampling (no antialiasing), pixel-center aligned:
    destination pixel (i, j) samples source ((i+0.5)*H/h2-0.5, ...)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    h2, w2 = int(out_shape[0]), int(out_shape[1])
    if h2 < 1 or w2 < 1:
        raise ParameterError(f"output shape must be positive, got {out_shape}")
    ys = np.clip((np.arange(h2) + 0.5) * h / h2 - 0.5, 0, h - 1)
    xs = np.clip((np.arange(w2) + 0.5) * w / w2 - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def preprocess_image(raw, out_shape=(49, 49)):
    """Grayscale + bilinear resize to the percept shape + scale to [0, 1].

    Accepts (H, W) or (H, W, 3) arrays; uint8 arrays are treated as
    0..255, floats as already normalized (clipped to [0, 1]).
    """
    arr = np.asarray(raw)
    if arr.size == 0:
        raise DataFormatError("empty image")
    if arr.ndim == 3:
        arr = arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
    elif arr.ndim != 2:
        raise DimensionError(f"image must be 2-D or RGB, got shape {arr.shape}")
    arr = arr.astype(np.float64)
    if np.issubdtype(np.asarray(raw).dtype, np.integer):
        arr = arr / 255.0
    return np.clip(resize_bilinear(arr, out_shape), 0.0, 1.0)


def _qualifying(record, categories):
    """Objects that pass the category + size criterion."""
    return [o for o in record.objects
            if o.category in categories and o.area_fraction > MIN_AREA_FRACTION]


def filter_annotations(records, categories):
    """Apply the four filtering criteria in order; returns (kept records,
    per-criterion removal counts).

    1. clutter: more than 15 total objects;
    2. category/size: no selected-category object covering more than 4%;
    3. too many: more than 5 objects meeting criterion 2;
    4. too dim: objects under mean brightness 50 are discarded, and the
       image is removed if no qualifying object remains.
    """
    if not categories:
        raise ParameterError("selected categories must be nonempty")
    categories = set(categories)
    removed = dict.fromkeys(REMOVAL_KEYS, 0)
    kept = []
    for rec in records:
        if rec.total_object_count > MAX_TOTAL_OBJECTS:
            removed["clutter"] += 1
            continue
        qualifying = _qualifying(rec, categories)
        if not qualifying:
            removed["category_size"] += 1
            continue
        if len(qualifying) > MAX_QUALIFYING_OBJECTS:
            removed["too_many"] += 1
            continue
        bright = [o for o in qualifying if o.mean_brightness >= MIN_BRIGHTNESS]
        if not bright:
            removed["too_dim"] += 1
            continue
        kept.append(rec)
    return kept, removed


def selected_objects(record, categories):
    """The objects of a kept record that survive all object-level criteria."""
    return [o for o in _qualifying(record, set(categories))
            if o.mean_brightness >= MIN_BRIGHTNESS]


def segment_targets(records, images, masks, categories, out_shape=(49, 49)):
    """Zero the background outside the surviving objects' masks, then
    preprocess to percept resolution.

    ``images`` maps image_id -> grayscale array (0..255 or [0, 1]);
    ``masks`` maps mask_ref -> boolean array of the image shape. Records
    with a missing mask or image are skipped (counted, not fatal).
    """
    out, ids, skipped = [], [], 0
    for rec in records:
        objs = selected_objects(rec, categories)
        img = images.get(rec.image_id)
        if img is None or any(o.mask_ref not in masks for o in objs):
            skipped += 1
            continue
        if not objs:
            skipped += 1
            continue
        img = np.asarray(img, dtype=np.float64)
        union = np.zeros(img.shape, dtype=bool)
        for o in objs:
            mask = np.asarray(masks[o.mask_ref], dtype=bool)
            if mask.shape != img.shape:
                raise DimensionError(
                    f"{rec.image_id}: mask {o.mask_ref} shape {mask.shape} != image {img.shape}"
                )
            union |= mask
        segmented = np.where(union, img, 0.0)
        if np.issubdtype(np.asarray(images[rec.image_id]).dtype, np.integer):
            segmented = segmented.astype(np.uint8)
        out.append(preprocess_image(segmented, out_shape))
        ids.append(rec.image_id)
    target = TargetSet(np.asarray(out).reshape(len(out), *out_shape), ids=tuple(ids))
    return target, skipped


def save_manifest(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "image_id": rec.image_id,
                "total_object_count": rec.total_object_count,
                "objects": [
                    {"category": o.category, "area_fraction": o.area_fraction,
                     "mean_brightness": o.mean_brightness, "mask_ref": o.mask_ref}
                    for o in rec.objects
                ],
            }, sort_keys=True) + "\n")


def load_manifest(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
                objects = tuple(
                    AnnotationObject(o["category"], float(o["area_fraction"]),
                                     float(o["mean_brightness"]), o.get("mask_ref", ""))
                    for o in data["objects"]
                )
                records.append(AnnotationRecord(data["image_id"], objects,
                                                int(data["total_object_count"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
    return records


@dataclass(frozen=True)
class PhiSampler:
    """Componentwise-uniform patient sampler over named ranges; parameters
    without a range stay at the base patient's value."""

    ranges: dict = field(default_factory=lambda: dict(cfg.SAMPLER_RANGES))
    base: PatientParams = PatientParams()

    def __post_init__(self):
        for name, (lo, hi) in self.ranges.items():
            check_range(lo, hi, name)

    def sample(self, rng, n=None):
        count = 1 if n is None else int(n)
        out = np.tile(self.base.as_vector(), (count, 1))
        index = {"rho": 0, "lam": 1, **{f"a{i}": 2 + i for i in range(10)}}
        for name, (lo, hi) in sorted(self.ranges.items()):
            if name not in index:
                raise ParameterError(f"unknown patient parameter {name!r}")
            out[:, index[name]] = rng.uniform(lo, hi, size=count)
        if n is None:
            return PatientParams.from_vector(out[0])
        return out


def sample_patient(ranges, rng):
    """One uniform draw of PatientParams; inverted ranges raise."""
    return PhiSampler(dict(ranges)).sample(rng)


def fixed_phi(phi):
    """A sampler-compatible wrapper around a fixed PatientParams."""
    vec = phi.as_vector()

    class _Fixed:
        def sample(self, rng, n=None):
            if n is None:
                return phi
            return np.tile(vec, (int(n), 1))

    return _Fixed()


# ---------------------------------------------------------------------------
# Procedural digits: polyline skeletons rasterized with a soft pen, plus a
# small random affine jitter. Good enough to train and classify on without
# shipping an external corpus.
# ---------------------------------------------------------------------------

_DIGIT_STROKES = {
    0: [[(0.5, 0.15), (0.75, 0.3), (0.78, 0.62), (0.55, 0.85), (0.3, 0.75),
         (0.24, 0.4), (0.5, 0.15)]],
    1: [[(0.35, 0.3), (0.55, 0.15), (0.55, 0.85)]],
    2: [[(0.28, 0.3), (0.5, 0.15), (0.72, 0.32), (0.45, 0.6), (0.27, 0.85),
         (0.75, 0.85)]],
    3: [[(0.3, 0.2), (0.65, 0.2), (0.48, 0.48), (0.7, 0.65), (0.5, 0.85), (0.28, 0.78)]],
    4: [[(0.62, 0.85), (0.62, 0.15), (0.28, 0.62), (0.78, 0.62)]],
    5: [[(0.7, 0.15), (0.32, 0.15), (0.3, 0.5), (0.62, 0.45), (0.7, 0.7), (0.45, 0.85),
         (0.28, 0.78)]],
    6: [[(0.65, 0.15), (0.38, 0.4), (0.3, 0.7), (0.5, 0.85), (0.68, 0.68), (0.5, 0.52),
         (0.33, 0.62)]],
    7: [[(0.25, 0.15), (0.75, 0.15), (0.45, 0.85)]],
    8: [[(0.5, 0.5), (0.68, 0.32), (0.5, 0.15), (0.32, 0.32), (0.5, 0.5), (0.7, 0.68),
         (0.5, 0.85), (0.3, 0.68), (0.5, 0.5)]],
    9: [[(0.67, 0.38), (0.48, 0.48), (0.33, 0.32), (0.52, 0.15), (0.67, 0.3), (0.62, 0.6),
         (0.42, 0.85)]],
}


def _rasterize_strokes(strokes, size, pen_sigma):
    grid = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    pts = np.stack(grid, -1).astype(np.float64)  # (size, size, 2) as (row, col)
    dist2 = np.full((size, size), np.inf)
    for stroke in strokes:
        scaled = [(y * size, x * size) for (x, y) in stroke]
        for (y0, x0), (y1, x1) in zip(scaled, scaled[1:]):
            d = np.array([y1 - y0, x1 - x0])
            length2 = float(d @ d)
            rel = pts - np.array([y0, x0])
            t = np.clip((rel @ d) / max(length2, 1e-9), 0.0, 1.0)
            proj = rel - t[..., None] * d
            dist2 = np.minimum(dist2, np.einsum("ijk,ijk->ij", proj, proj))
    return np.exp(-dist2 / (2.0 * pen_sigma**2))


def synth_digits(n, seed=0, size=28):
    """Generate n labeled digit images, shape (n, size, size) in [0, 1].

    Deterministic under the seed; per-sample jitter covers rotation
    (+-12 deg), scale (0.85..1.1), translation (+-2 px) and pen width.
    """
    rng = np.random.default_rng(seed)
    images = np.empty((n, size, size))
    labels = rng.integers(0, 10, size=n)
    base = np.stack(np.meshgrid(np.arange(size), np.arange(size), indexing="ij"), -1)
    center = (size - 1) / 2.0
    for i in range(n):
        digit = int(labels[i])
        angle = rng.uniform(-0.21, 0.21)
        scale = rng.uniform(0.85, 1.1)
        shift = rng.uniform(-2.0, 2.0, size=2)
        sigma = rng.uniform(0.8, 1.25)
        glyph = _rasterize_strokes(_DIGIT_STROKES[digit], size, sigma)
        cos_a, sin_a = np.cos(angle), np.sin(angle)
        rel = base - center
        src_y = (cos_a * rel[..., 0] - sin_a * rel[..., 1]) / scale + center - shift[0]
        src_x = (sin_a * rel[..., 0] + cos_a * rel[..., 1]) / scale + center - shift[1]
        y0 = np.clip(np.floor(src_y).astype(int), 0, size - 1)
        x0 = np.clip(np.floor(src_x).astype(int), 0, size - 1)
        y1 = np.clip(y0 + 1, 0, size - 1)
        x1 = np.clip(x0 + 1, 0, size - 1)
        fy = np.clip(src_y - y0, 0.0, 1.0)
        fx = np.clip(src_x - x0, 0.0, 1.0)
        img = (glyph[y0, x0] * (1 - fy) * (1 - fx) + glyph[y0, x1] * (1 - fy) * fx
               + glyph[y1, x0] * fy * (1 - fx) + glyph[y1, x1] * fy * fx)
        outside = (src_y < 0) | (src_y > size - 1) | (src_x < 0) | (src_x > size - 1)
        img[outside] = 0.0
        peak = img.max()
        images[i] = img / peak if peak > 0 else img
    return images, labels.astype(np.int64)


def digit_targets(n, seed=0, out_shape=(25, 25)):
    """Synthetic digit TargetSet at percept resolution."""
    images, labels = synth_digits(n, seed=seed)
    resized = np.stack([preprocess_image(img, out_shape) for img in images])
    return TargetSet(resized, labels=labels)


def split_target_set(targets, test_frac, seed):
    """Disjoint seeded train/test split of a TargetSet."""
    n = len(targets)
    n_test = int(round(n * test_frac))
    perm = np.random.default_rng(seed).permutation(n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])

    def subset(idx, tag):
        return TargetSet(
            targets.images[idx],
            None if targets.labels is None else targets.labels[idx],
            split=tag,
            ids=tuple(targets.ids[i] for i in idx) if targets.ids else (),
        )

    return subset(train_idx, "train"), subset(test_idx, "test")

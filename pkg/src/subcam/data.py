"""Synthetic multi-label images with planted sub-types, folder I/O, augmentation.

Every category is drawn as a textured body with a small saturated "head"
marker in the category colour; the body itself only carries a faint tint of
that colour. The marker alone is enough to tell categories apart, which is
what makes a parent-only classifier's activation maps concentrate on it.

Each category's latent sub-type controls one visible factor, rotating over
categories through ``shape`` (body outline), ``scale`` (body size band) and
``context`` (background pattern).
"""

from __future__ import annotations

import colorsys
import csv
import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import resize_bilinear, resize_nearest

FACTORS = ("shape", "scale", "context")
SHAPES = ("ellipse", "ring", "cross", "triangle", "rectangle", "diamond")
PATTERNS = ("hstripes", "vstripes", "checker", "dots", "diagonal", "rings")
SPLIT_CODES = {"train": 1, "eval": 2}


class DatasetError(ValueError):
    """Invalid or infeasible dataset request, or unreadable dataset on disk."""

    def __init__(self, message: str, errors: list[str] | None = None):
        self.errors = list(errors or [])
        if self.errors:
            message = message + "\n  " + "\n  ".join(self.errors)
        super().__init__(message)


@dataclass
class DatasetSpec:
    num_categories: int = 3
    subtypes_per_category: int = 4
    n_train: int = 2000
    n_eval: int = 400
    image_size: int = 64
    seed: int = 7
    co_occurrence: float = 0.3
    person_category: int = 0
    object_scale: tuple[float, float] = (0.3, 0.62)
    head_scale: float = 0.07
    body_tint: float = 0.3
    texture_contrast: float = 0.08
    context_contrast: float = 0.1
    noise_std: float = 0.03
    max_distractors: int = 2
    background_range: tuple[float, float] = (0.35, 0.6)
    aspect_range: tuple[float, float] = (0.7, 1.0)
    random_body_shapes: bool = True
    max_rotation: float = float(np.pi)
    size_jitter: float | None = None
    neutral_background: bool = False
    body_shade: tuple[float, float] = (0.45, 0.7)
    context_tint: float = 0.0

    def __post_init__(self):
        self.object_scale = tuple(float(v) for v in self.object_scale)
        self.background_range = tuple(float(v) for v in self.background_range)
        self.aspect_range = tuple(float(v) for v in self.aspect_range)
        self.body_shade = tuple(float(v) for v in self.body_shade)
        errs = []
        if self.num_categories < 2:
            errs.append("num_categories must be >= 2")
        if self.subtypes_per_category < 2:
            errs.append("subtypes_per_category must be >= 2")
        if self.image_size < 32:
            errs.append("image_size must be >= 32")
        if self.n_train < 0 or self.n_eval < 0:
            errs.append("split sizes must be non-negative")
        if not 0.0 <= self.co_occurrence <= 1.0:
            errs.append("co_occurrence must lie in [0, 1]")
        for name in ("body_tint", "texture_contrast", "context_contrast", "context_tint"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errs.append(f"{name} must lie in [0, 1]")
        if not 0 <= self.person_category < max(self.num_categories, 1):
            errs.append("person_category must index a category")
        if errs:
            raise DatasetError("invalid DatasetSpec", errs)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("object_scale", "background_range", "aspect_range", "body_shade"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise DatasetError("unknown DatasetSpec fields", [f"field {k!r}" for k in unknown])
        return cls(**d)


@dataclass
class Sample:
    id: str
    image: np.ndarray  # H x W x 3 in [0, 1]
    parent_labels: np.ndarray  # (C,) of 0/1
    gt_mask: np.ndarray | None = None  # H x W ints in 0..C, 0 = background
    latent_subtypes: dict[int, int] = field(default_factory=dict)

    @property
    def categories(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.parent_labels)]

    @property
    def eval_eligible(self) -> bool:
        return self.gt_mask is not None


def category_factor(c: int) -> str:
    return FACTORS[c % len(FACTORS)]


def expected_label_rates(spec: DatasetSpec) -> np.ndarray:
    """Per-category probability of appearing in an image under ``spec``."""
    C, p = spec.num_categories, spec.co_occurrence
    rates = np.full(C, 1.0 / C + p / (C * (C - 1)))
    rates[spec.person_category] = 1.0 / C + p * (C - 1) / C
    return rates


def check_feasible(spec: DatasetSpec) -> None:
    errs = []
    lo, hi = spec.object_scale
    if not 0 < lo < hi:
        errs.append(f"object_scale must satisfy 0 < min < max, got {spec.object_scale}")
    if hi > 0.8:
        errs.append(f"largest object ({hi:.2f} of the image side) cannot be placed twice without full occlusion")
    if lo * spec.image_size < 8:
        errs.append(f"smallest object is {lo * spec.image_size:.1f} px, below the 8 px needed for a head marker")
    if spec.head_scale * spec.image_size < 2:
        errs.append("head marker smaller than 2 px")
    G = spec.subtypes_per_category
    for c in range(spec.num_categories):
        f = category_factor(c)
        if f == "shape" and G > len(SHAPES):
            errs.append(f"category {c}: {G} shape sub-types requested, only {len(SHAPES)} shape families exist")
        if f == "context" and G > len(PATTERNS):
            errs.append(f"category {c}: {G} context sub-types requested, only {len(PATTERNS)} patterns exist")
        if f == "scale" and (hi - lo) * spec.image_size / G < 2:
            errs.append(f"category {c}: scale bands narrower than 2 px")
    contexts = [c for c in range(spec.num_categories) if category_factor(c) == "context"]
    if len(contexts) > 1 and spec.co_occurrence > 0:
        pairs = [(a, b) for a in contexts for b in contexts if a < b and spec.person_category in (a, b)]
        if pairs:
            errs.append(f"context categories {pairs[0]} can co-occur and would need two backgrounds")
    if errs:
        raise DatasetError("infeasible DatasetSpec", errs)


# ---------------------------------------------------------------------------
# rendering


def _category_color(c: int, C: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(c / C, 0.9, 0.95))


def _shape_mask(kind: str, yy, xx, cy, cx, r, aspect, angle) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dx + sa * dy) / r
    v = (-sa * dx + ca * dy) / (r * aspect)
    if kind == "ellipse":
        return u * u + v * v <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= 0.85) & (np.abs(v) <= 0.85)
    if kind == "triangle":
        return (v <= 0.75) & (v >= 2.0 * np.abs(u) - 1.0)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if kind == "cross":
        return ((np.abs(u) <= 1.0) & (np.abs(v) <= 0.35)) | ((np.abs(u) <= 0.35) & (np.abs(v) <= 1.0))
    if kind == "ring":
        d = u * u + v * v
        return (d <= 1.0) & (d >= 0.3)
    raise ValueError(kind)


def _pattern(kind: str, yy, xx, period: float, phase: float) -> np.ndarray:
    w = 2 * np.pi / period
    if kind == "hstripes":
        p = np.sin(w * yy + phase)
    elif kind == "vstripes":
        p = np.sin(w * xx + phase)
    elif kind == "checker":
        p = np.sign(np.sin(w * yy + phase) * np.sin(w * xx + phase))
    elif kind == "dots":
        p = 2.0 * ((np.sin(w * yy + phase) > 0.6) & (np.sin(w * xx + phase) > 0.6)) - 1.0
    elif kind == "diagonal":
        p = np.sin(w * (xx + yy) / np.sqrt(2) + phase)
    elif kind == "rings":
        n = yy.shape[0]
        p = np.sin(w * np.hypot(yy - n / 2, xx - n / 2) + phase)
    else:
        raise ValueError(kind)
    return p


def _sample_rng(seed: int, split: str, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), SPLIT_CODES.get(split, zlib.crc32(split.encode())), index, stream])


def _primary_assignment(spec: DatasetSpec, split: str, index: int) -> tuple[int, int]:
    """Balanced (category, sub-type) for the first object of sample ``index``."""
    C, G = spec.num_categories, spec.subtypes_per_category
    cells = C * G
    block, pos = divmod(index, cells)
    perm = np.random.default_rng([int(spec.seed), SPLIT_CODES.get(split, 0), 1_000_003, block]).permutation(cells)
    cell = int(perm[pos])
    return cell // G, cell % G


def _object_size(spec: DatasetSpec, c: int, g: int, rng) -> float:
    lo, hi = spec.object_scale
    if category_factor(c) == "scale":
        G = spec.subtypes_per_category
        w = (hi - lo) / G
        lo, hi = lo + g * w, lo + (g + 1) * w
    elif spec.size_jitter is not None:  # size is not this category's factor: keep it near mid-range
        mid = 0.5 * (lo + hi)
        lo, hi = mid * (1 - spec.size_jitter), mid * (1 + spec.size_jitter)
    return rng.uniform(lo, hi) * spec.image_size


def render_sample(spec: DatasetSpec, split: str, index: int) -> Sample:
    """Draw one sample; content depends only on (seed, split, index)."""
    rng = _sample_rng(spec.seed, split, index)
    C, G, S = spec.num_categories, spec.subtypes_per_category, spec.image_size
    c1, g1 = _primary_assignment(spec, split, index)
    present = [(c1, g1)]
    if rng.random() < spec.co_occurrence:
        if c1 != spec.person_category:
            c2 = spec.person_category
        else:
            others = [c for c in range(C) if c != c1]
            c2 = others[rng.integers(len(others))]
        present.append((c2, int(rng.integers(G))))

    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5

    # background
    context = next((g for c, g in present if category_factor(c) == "context"), None)
    if context is not None:
        pat_idx = context
    elif spec.neutral_background and G < len(PATTERNS):
        pat_idx = G  # one pattern no context sub-type uses
    else:
        pat_idx = int(rng.integers(G))
    base = rng.uniform(*spec.background_range)
    pattern = _pattern(PATTERNS[pat_idx], yy, xx, rng.uniform(5.0, 8.0), rng.uniform(0, 2 * np.pi))
    gray = base + spec.context_contrast * 0.5 * pattern
    tone = np.array(colorsys.hsv_to_rgb((pat_idx + 0.5) / len(PATTERNS), 0.5, 1.0))
    img = gray[..., None] * ((1.0 - spec.context_tint) + spec.context_tint * tone)[None, None, :]
    img += rng.normal(0, 0.02, size=3)[None, None, :]

    for _ in range(int(rng.integers(spec.max_distractors + 1))):
        r = rng.uniform(0.05, 0.12) * S
        m = _shape_mask(SHAPES[rng.integers(len(SHAPES))], yy, xx, rng.uniform(0, S), rng.uniform(0, S), r,
                        rng.uniform(0.6, 1.0), rng.uniform(0, np.pi))
        img[m] = rng.uniform(0.2, 0.8)

    # objects
    mask = np.zeros((S, S), dtype=np.int64)
    order = list(present)
    placed: list[tuple[int, np.ndarray]] = []
    for c, g in order:
        if category_factor(c) == "shape":
            kind = SHAPES[g]
        elif spec.random_body_shapes:
            kind = SHAPES[int(rng.integers(len(SHAPES)))]
        else:
            kind = SHAPES[0]
        size = _object_size(spec, c, g, rng)
        r = size / 2
        for _attempt in range(60):
            cy, cx = rng.uniform(r * 0.9, S - r * 0.9, size=2)
            body = _shape_mask(kind, yy, xx, cy, cx, r, rng.uniform(*spec.aspect_range),
                                 rng.uniform(-1.0, 1.0) * spec.max_rotation)
            if body.sum() < 0.5 * (0.25 * np.pi * size * size) * 0.3:
                continue
            ok = all(((m & ~body).sum() >= 0.6 * m.sum()) for _, m in placed)
            if ok:
                break
        else:
            continue  # second object could not be placed: leave it out
        placed.append((c, body))

        color = _category_color(c, C)
        shade = rng.uniform(*spec.body_shade)
        body_rgb = (1 - spec.body_tint) * shade + spec.body_tint * color * (shade / spec.body_shade[1])
        tex = _pattern(("hstripes", "vstripes", "diagonal")[rng.integers(3)], yy, xx, rng.uniform(3.0, 5.0),
                       rng.uniform(0, 2 * np.pi))
        img[body] = body_rgb[None, :] + spec.texture_contrast * 0.5 * tex[body][:, None]

        # head marker: a saturated disc inside the body, off-centre
        ys, xs = np.nonzero(body)
        dist = np.hypot(ys + 0.5 - cy, xs + 0.5 - cx)
        far = dist >= 0.45 * dist.max()
        pick = rng.integers(far.sum())
        hy, hx = ys[far][pick] + 0.5, xs[far][pick] + 0.5
        hr = max(spec.head_scale * S, 2.0)
        head = ((yy - hy) ** 2 + (xx - hx) ** 2 <= hr * hr) & body
        img[head] = color[None, :] * rng.uniform(0.85, 1.0)
        mask[body] = c + 1

    img += rng.normal(0, spec.noise_std, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0

    labels = np.zeros(C, dtype=np.int64)
    visible = {int(v) - 1 for v in np.unique(mask) if v > 0}
    for c in visible:
        labels[c] = 1
    subtypes = {c: g for c, g in present if c in visible}
    return Sample(f"{split}-{index:05d}", img, labels, mask, subtypes)


def generate_dataset(spec: DatasetSpec, split: str = "train") -> list[Sample]:
    """All samples of one split (``train`` or ``eval``)."""
    check_feasible(spec)
    n = {"train": spec.n_train, "eval": spec.n_eval}.get(split)
    if n is None:
        raise DatasetError(f"unknown split {split!r}")
    return [render_sample(spec, split, i) for i in range(n)]


# ---------------------------------------------------------------------------
# on-disk format


def _to_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def save_split(samples: list[Sample], out_dir, num_categories: int) -> None:
    """Write ``images/``, ``masks/``, ``labels.csv`` and ``subtypes.csv`` into ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    with open(out / "labels.csv", "w", newline="") as fh, open(out / "subtypes.csv", "w", newline="") as fs:
        wl, ws = csv.writer(fh), csv.writer(fs)
        wl.writerow(["id"] + [f"c{c}" for c in range(num_categories)])
        ws.writerow(["id", "category", "subtype"])
        for s in samples:
            _to_png(np.round(s.image * 255).astype(np.uint8), out / "images" / f"{s.id}.png")
            if s.gt_mask is not None:
                _to_png(s.gt_mask.astype(np.uint8), out / "masks" / f"{s.id}.png")
            wl.writerow([s.id] + [int(v) for v in s.parent_labels])
            for c, g in sorted(s.latent_subtypes.items()):
                ws.writerow([s.id, c, g])


def write_dataset(spec: DatasetSpec, out_dir) -> dict[str, list[Sample]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {}
    for split in ("train", "eval"):
        splits[split] = generate_dataset(spec, split)
        save_split(splits[split], out / split, spec.num_categories)
    manifest = {"format": "subcam-dataset/1", "spec": spec.to_dict(), "seed": spec.seed,
                "splits": {k: len(v) for k, v in splits.items()}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return splits


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_folder(path, label_file=None) -> list[Sample]:
    """Read images listed in a ``id,c0,c1,...`` CSV.

    Images are looked up as ``<path>/images/<id>.png`` or ``<path>/<id>.png``;
    masks (optional) as ``<path>/masks/<id>.png``. Samples without a mask are
    loaded but are not evaluation-eligible. All problems found are reported
    together in one :class:`DatasetError`.
    """
    root = Path(path)
    label_path = Path(label_file) if label_file is not None else root / "labels.csv"
    if not label_path.is_file():
        raise DatasetError(f"label file not found: {label_path}")
    errors: list[str] = []
    rows: list[tuple[str, list[str], int]] = []
    with open(label_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise DatasetError(f"{label_path}: header must start with 'id'")
        C = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) - 1 != C:
                errors.append(f"row {lineno} (id {row[0]!r}): expected {C} category columns, got {len(row) - 1}")
                continue
            rows.append((row[0], row[1:], lineno))

    subtypes: dict[str, dict[int, int]] = {}
    sub_path = root / "subtypes.csv"
    if sub_path.is_file():
        with open(sub_path, newline="") as fh:
            for r in csv.DictReader(fh):
                subtypes.setdefault(r["id"], {})[int(r["category"])] = int(r["subtype"])

    samples = []
    seen = set()
    for sid, vals, lineno in rows:
        if sid in seen:
            errors.append(f"row {lineno}: duplicate id {sid!r}")
            continue
        seen.add(sid)
        try:
            labels = np.array([int(v) for v in vals], dtype=np.int64)
        except ValueError:
            errors.append(f"row {lineno} (id {sid!r}): labels must be integers 0/1")
            continue
        if not np.all((labels == 0) | (labels == 1)):
            errors.append(f"row {lineno} (id {sid!r}): labels must be 0 or 1")
            continue
        img_path = next((p for p in (root / "images" / f"{sid}.png", root / f"{sid}.png") if p.is_file()), None)
        if img_path is None:
            errors.append(f"id {sid!r}: image file not found")
            continue
        try:
            image = _read_image(img_path)
        except Exception as exc:  # PIL raises several unrelated types
            errors.append(f"id {sid!r}: unreadable image {img_path.name} ({exc})")
            continue
        mask = None
        mask_path = root / "masks" / f"{sid}.png"
        if mask_path.is_file():
            try:
                with Image.open(mask_path) as im:
                    mask = np.asarray(im, dtype=np.int64)
            except Exception as exc:
                errors.append(f"id {sid!r}: unreadable mask ({exc})")
                continue
            if mask.shape != image.shape[:2]:
                errors.append(f"id {sid!r}: mask shape {mask.shape} != image shape {image.shape[:2]}")
                continue
        samples.append(Sample(sid, image, labels, mask, subtypes.get(sid, {})))
    if errors:
        raise DatasetError(f"{len(errors)} problem(s) loading {root}", errors)
    return samples


def load_dataset(root, split: str) -> list[Sample]:
    d = Path(root) / split
    if not d.is_dir():
        raise DatasetError(f"dataset split not found: {d}")
    return load_folder(d, d / "labels.csv")


def read_manifest(root) -> dict:
    p = Path(root) / "manifest.json"
    if not p.is_file():
        raise DatasetError(f"manifest not found: {p}")
    return json.loads(p.read_text())


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentationPolicy:
    flip_prob: float = 0.5
    crop_range: tuple[float, float] = (0.8, 1.0)
    jitter: float = 0.1
    scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_range"] = list(self.crop_range)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls(flip_prob=0.0, crop_range=(1.0, 1.0), jitter=0.0, scale_range=(1.0, 1.0), seed=seed)


def augment(sample: Sample, policy: AugmentationPolicy, epoch: int, keep_mask: bool = False) -> Sample:
    """Flip, crop/rescale back to H x W, and jitter colours.

    Randomness is a pure function of (policy.seed, epoch, sample.id). Labels
    are never touched; the mask is transformed alongside only when
    ``keep_mask`` is set.
    """
    rng = np.random.default_rng([int(policy.seed), int(epoch), zlib.crc32(sample.id.encode())])
    img = sample.image
    mask = sample.gt_mask if keep_mask else None
    H, W = img.shape[:2]

    if rng.random() < policy.flip_prob:
        img = img[:, ::-1]
        mask = mask[:, ::-1] if mask is not None else None

    f = rng.uniform(*sorted(policy.crop_range))
    s = rng.uniform(*sorted(policy.scale_range))
    side = float(np.clip(f / s, 1.0 / min(H, W), 1.0))
    if side < 1.0:
        bh, bw = side * H, side * W
        top = rng.uniform(0.0, H - bh)
        left = rng.uniform(0.0, W - bw)
        img = resize_bilinear(img, H, W, box=(top, left, bh, bw))
        mask = resize_nearest(mask, H, W, box=(top, left, bh, bw)) if mask is not None else None

    if policy.jitter > 0:
        a = policy.jitter
        gain = 1.0 + rng.uniform(-a, a)
        bias = rng.uniform(-a, a) * 0.5
        chan = 1.0 + rng.uniform(-a, a, size=3) * 0.5
        img = np.clip(img * gain * chan[None, None, :] + bias, 0.0, 1.0)
    else:
        img = np.array(img, dtype=np.float64)

    return Sample(sample.id, np.ascontiguousarray(img), sample.parent_labels.copy(),
                  None if mask is None else np.ascontiguousarray(mask), dict(sample.latent_subtypes))

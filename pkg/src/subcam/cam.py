"""Class activation maps, CAM-to-mask conversion and segmentation metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import Sample
from .imaging import resize_bilinear
from .model import NetworkState, extract_features

DEFAULT_THRESHOLD = 0.3


@dataclass
class ActivationMap:
    categories: list[int]
    raw: np.ndarray  # (k, h, w)
    normalized: np.ndarray  # (k, h, w) in [0, 1]
    upsampled: np.ndarray  # (k, H, W) in [0, 1]

    def as_dict(self) -> dict[int, np.ndarray]:
        return {c: self.upsampled[i] for i, c in enumerate(self.categories)}


def normalize_cam(raw: np.ndarray) -> np.ndarray:
    """Clamp at zero and divide each map (last two axes) by its maximum."""
    pos = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    peak = pos.max(axis=(-2, -1), keepdims=True)
    return np.where(peak > 0, pos / np.where(peak > 0, peak, 1.0), 0.0)


def cam_from_features(feature_map: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Raw maps: ``weights[c] . feature_map[y, x]`` at every location -> (k, h, w)."""
    return np.einsum("hwd,kd->khw", feature_map, weights)


def _check_categories(net: NetworkState, categories) -> list[int]:
    cats = sorted(int(c) for c in categories)
    bad = [c for c in cats if not 0 <= c < net.arch.num_classes]
    if bad:
        raise ValueError(f"unknown category index {bad[0]} (network has {net.arch.num_classes} categories)")
    return cats


def compute_cam(net: NetworkState, image, categories) -> ActivationMap:
    cats = _check_categories(net, categories)
    image = np.asarray(image, dtype=np.float64)
    fmap = extract_features(net, image).feature_map
    return _cam_from_fmap(net, fmap, cats, image.shape[:2])


def _cam_from_fmap(net: NetworkState, fmap: np.ndarray, cats: list[int], out_hw) -> ActivationMap:
    w = net.params["head_p.w"].data[cats]
    raw = cam_from_features(fmap, w)
    norm = normalize_cam(raw)
    H, W = out_hw
    if len(cats):
        up = np.clip(resize_bilinear(norm.transpose(1, 2, 0), H, W).transpose(2, 0, 1), 0.0, 1.0)
    else:
        up = np.zeros((0, H, W))
    return ActivationMap(cats, raw, norm, up)


def cam_to_mask(maps, threshold: float = DEFAULT_THRESHOLD, shape=None) -> np.ndarray:
    """Label grid: best category (1-based) where its map reaches ``threshold``, else 0.

    ``maps`` is an :class:`ActivationMap` or a ``{category: H x W}`` dict.
    Ties between categories go to the lowest index.
    """
    if isinstance(maps, ActivationMap):
        maps = maps.as_dict()
    if not maps:
        if shape is None:
            raise ValueError("cam_to_mask: shape is required when no maps are given")
        return np.zeros(shape, dtype=np.int64)
    cats = sorted(maps)
    stack = np.stack([np.asarray(maps[c], dtype=np.float64) for c in cats])
    best = stack.argmax(axis=0)
    val = np.take_along_axis(stack, best[None], axis=0)[0]
    labels = np.asarray(cats)[best] + 1
    return np.where(val >= threshold, labels, 0).astype(np.int64)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class SegmentationMetrics:
    confusion: np.ndarray  # (C+1, C+1), rows = ground truth, cols = prediction
    iou: np.ndarray  # per class incl. background; NaN where undefined
    miou: float
    precision: float
    recall: float
    fscore: float

    def to_dict(self) -> dict:
        return {
            "iou": [None if np.isnan(v) else float(v) for v in self.iou],
            "miou": self.miou,
            "precision": self.precision,
            "recall": self.recall,
            "fscore": self.fscore,
            "confusion": self.confusion.astype(int).tolist(),
        }


def confusion_matrix(gt, pred, num_classes: int) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if gt.shape != pred.shape:
        raise ValueError(f"ground truth and prediction differ in size: {gt.size} vs {pred.size}")
    n = num_classes + 1
    return np.bincount(n * gt + pred, minlength=n * n).reshape(n, n)


def metrics_from_confusion(conf: np.ndarray) -> SegmentationMetrics:
    conf = np.asarray(conf, dtype=np.int64)
    tp = np.diag(conf)
    gt_tot = conf.sum(axis=1)
    pred_tot = conf.sum(axis=0)
    union = gt_tot + pred_tot - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)
    miou = float(np.nanmean(iou)) if np.any(union > 0) else float("nan")
    fg_tp = int(tp[1:].sum())
    fg_pred = int(pred_tot[1:].sum())
    fg_gt = int(gt_tot[1:].sum())
    p = fg_tp / fg_pred if fg_pred else 0.0
    r = fg_tp / fg_gt if fg_gt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return SegmentationMetrics(conf, iou, miou, p, r, f)


def segmentation_metrics(gts, preds, num_classes: int) -> SegmentationMetrics:
    conf = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    for g, p in zip(gts, preds):
        conf += confusion_matrix(g, p, num_classes)
    return metrics_from_confusion(conf)


def predict_masks(net: NetworkState, samples: list[Sample], threshold: float = DEFAULT_THRESHOLD,
                  batch_size: int = 64) -> list[np.ndarray]:
    """CAM masks using each sample's own image-level labels."""
    out = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        fmaps = extract_features(net, np.stack([s.image for s in chunk])).feature_map
        for s, fmap in zip(chunk, fmaps):
            am = _cam_from_fmap(net, fmap, s.categories, s.image.shape[:2])
            out.append(cam_to_mask(am, threshold, shape=s.image.shape[:2]))
    return out


def evaluate_split(net: NetworkState, samples: list[Sample], threshold: float = DEFAULT_THRESHOLD,
                   batch_size: int = 64) -> SegmentationMetrics:
    masked = [s for s in samples if s.gt_mask is not None]
    if not masked:
        raise ValueError("evaluate_split: no samples with ground-truth masks")
    preds = predict_masks(net, masked, threshold, batch_size)
    return segmentation_metrics([s.gt_mask for s in masked], preds, net.arch.num_classes)


def write_metrics(metrics: SegmentationMetrics, path, threshold: float, round_index=None, extra=None) -> dict:
    doc = {"round": round_index, "threshold": threshold, **metrics.to_dict()}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    return doc


# ---------------------------------------------------------------------------
# exports


def export_heatmaps(net: NetworkState, sample: Sample, out_dir, overlay: bool = True,
                    threshold: float = DEFAULT_THRESHOLD) -> list[Path]:
    """Write ``<id>_c<k>.png`` (8-bit map), optional ``<id>_c<k>_overlay.png`` and ``<id>_mask.png``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    am = compute_cam(net, sample.image, sample.categories)
    written = []
    for i, c in enumerate(am.categories):
        heat = am.upsampled[i]
        p = out / f"{sample.id}_c{c}.png"
        Image.fromarray(np.round(255 * heat).astype(np.uint8), mode="L").save(p)
        written.append(p)
        if overlay:
            rgb = sample.image * 0.5
            rgb[..., 0] += 0.5 * heat
            p = out / f"{sample.id}_c{c}_overlay.png"
            Image.fromarray(np.round(255 * np.clip(rgb, 0, 1)).astype(np.uint8)).save(p)
            written.append(p)
    mask = cam_to_mask(am, threshold, shape=sample.image.shape[:2])
    p = out / f"{sample.id}_mask.png"
    Image.fromarray(mask.astype(np.uint8), mode="L").save(p)
    written.append(p)
    return written


def sweep_k(samples: list[Sample], config, k_values, eval_samples: list[Sample] | None = None,
            out_dir=None) -> list[tuple[int, float]]:
    """Run the full alternation once per K (shared seed); rows are (K, final-round mIoU)."""
    from .train import run_algorithm  # deferred: train depends on this module

    ks = sorted(dict.fromkeys(int(k) for k in k_values))
    if len(ks) < 2:
        raise ValueError("sweep_k needs at least two distinct K values")
    rows = []
    cache: dict = {}
    for k in ks:
        cfg = config.replace(k=k)
        run_dir = Path(out_dir) / f"k-{k}" if out_dir is not None else None
        arts = run_algorithm(samples, cfg, eval_samples=eval_samples, out_dir=run_dir, baseline_cache=cache)
        rows.append((k, float(arts[-1].metrics["miou"])))
    if out_dir is not None:
        write_sweep(rows, Path(out_dir) / "sweep.csv")
    return rows


def write_sweep(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["k", "miou"])
        for k, m in rows:
            wr.writerow([k, repr(m)])

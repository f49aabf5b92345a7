"""Confusion-matrix metrics and single-/multi-scale inference."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .tensor import Tensor, bilinear_resize

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


@dataclass
class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns predictions."""

    num_classes: int
    ignore_index: int = 255
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} shapes differ")
        k = self.num_classes
        valid = gt != self.ignore_index
        if np.any((gt[valid] < 0) | (gt[valid] >= k)):
            raise ValueError(f"ground-truth labels outside [0, {k}) that are not ignore_index")
        p, g = pred[valid].astype(np.int64), gt[valid].astype(np.int64)
        if np.any((p < 0) | (p >= k)):
            raise ValueError(f"predicted labels outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.ignore_index, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def update_confusion(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.update(pred, gt)


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; classes absent from both prediction and ground truth are NaN."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    iou = np.full(cm.num_classes, np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    return iou


def mean_iou(cm: ConfusionMatrix) -> float:
    """Mean over present classes; NaN when nothing has been counted."""
    iou = per_class_iou(cm)
    if np.all(np.isnan(iou)):
        return float("nan")
    return float(np.nanmean(iou))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    return float(np.trace(cm.counts) / total) if total else float("nan")


# ---------------------------------------------------------------------------
# inference protocols
# ---------------------------------------------------------------------------

LogitFn = Callable[[np.ndarray], np.ndarray]


def _pad_to_32(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[-2:]
    ph, pw = -h % 32, -w % 32
    if not (ph or pw):
        return image
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode=mode)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _probs_at(model: LogitFn, image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape[-2:]
    logits = model(_pad_to_32(image))[:, :h, :w]
    probs = _softmax(logits.astype(np.float64))
    if (h, w) != (out_h, out_w):
        probs = bilinear_resize(Tensor._wrap(probs), out_h, out_w).data
    return probs


def _resize_image(image: np.ndarray, scale: float) -> np.ndarray:
    h, w = image.shape[-2:]
    nh, nw = max(int(round(h * scale)), 1), max(int(round(w * scale)), 1)
    if (nh, nw) == (h, w):
        return image
    return bilinear_resize(Tensor._wrap(np.ascontiguousarray(image)), nh, nw).data


def single_scale_infer(model: LogitFn, image: np.ndarray) -> np.ndarray:
    """Label map for ``image [3, H, W]``; reflection-padded to a multiple of 32 then cropped back.

    ``model`` maps a ``[3, H, W]`` array to ``[n_cls, H, W]`` logits.  Ties
    go to the lowest class index.
    """
    h, w = image.shape[-2:]
    return np.argmax(_probs_at(model, image, h, w), axis=0)


def multi_scale_infer(
    model: LogitFn,
    image: np.ndarray,
    scales: Sequence[float] = DEFAULT_SCALES,
    flip: bool = True,
) -> np.ndarray:
    """Average softmax probabilities over rescaled (and mirrored) views, then argmax."""
    scales = list(scales)
    if not scales:
        raise ValueError("multi-scale inference needs at least one scale")
    h, w = image.shape[-2:]
    acc = None
    views = 0
    for s in scales:
        scaled = _resize_image(image, s)
        p = _probs_at(model, scaled, h, w)
        acc = p if acc is None else acc + p
        views += 1
        if flip:
            pf = _probs_at(model, np.ascontiguousarray(scaled[:, :, ::-1]), h, w)[:, :, ::-1]
            acc = acc + pf
            views += 1
    if views > 1:
        acc = acc / views
    return np.argmax(acc, axis=0)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_KEYS = ("per_class_iou", "miou_ss", "miou_ms", "pixel_acc", "n_images", "config_digest")

REPORT_SCHEMA = {
    "type": "object",
    "required": list(REPORT_KEYS),
    "properties": {
        "per_class_iou": {"type": "array", "items": {"type": ["number", "null"]}},
        "miou_ss": {"type": ["number", "null"]},
        "miou_ms": {"type": ["number", "null"]},
        "pixel_acc": {"type": ["number", "null"]},
        "n_images": {"type": "integer", "minimum": 0},
        "config_digest": {"type": "string"},
    },
}


def _clean(x):
    return None if x is None or (isinstance(x, float) and np.isnan(x)) else float(x)


def evaluate(
    model: LogitFn,
    samples: Iterable,
    num_classes: int,
    ignore_index: int = 255,
    multi_scale: bool = False,
    scales: Sequence[float] = DEFAULT_SCALES,
    flip: bool = True,
    preprocess: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> dict:
    """Run SS (and optionally MS) inference and accumulate confusion matrices."""
    cm_ss = ConfusionMatrix(num_classes, ignore_index)
    cm_ms = ConfusionMatrix(num_classes, ignore_index) if multi_scale else None
    n = 0
    for s in samples:
        img = s.image if preprocess is None else preprocess(s.image)
        cm_ss.update(single_scale_infer(model, img), s.mask)
        if cm_ms is not None:
            cm_ms.update(multi_scale_infer(model, img, scales, flip), s.mask)
        n += 1
    main = cm_ms if cm_ms is not None else cm_ss
    return {
        "per_class_iou": [_clean(v) for v in per_class_iou(main)],
        "miou_ss": _clean(mean_iou(cm_ss)),
        "miou_ms": _clean(mean_iou(cm_ms)) if cm_ms is not None else None,
        "pixel_acc": _clean(pixel_accuracy(main)),
        "n_images": n,
    }


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_iou_csv(report: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write("class,iou\n")
        for k, v in enumerate(report["per_class_iou"]):
            fh.write(f"{k},{'' if v is None else f'{v:.6f}'}\n")

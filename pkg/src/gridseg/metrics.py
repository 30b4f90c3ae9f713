"""Segmentation quality metrics and multi-scale inference.

The per-class intersection-over-union comes from a single confusion
matrix with truth along rows, so results do not depend on evaluation
order. The instance-weighted variant rescales each ground-truth pixel by
``avg_size_class / size_of_its_instance`` (false positives keep weight
1), which stops large instances from dominating the score; average sizes
are measured over the whole evaluation set first, so this too is order
independent. Classes never observed are excluded from means rather than
scored as zero.

Multi-scale prediction runs the network on rescaled copies of the image,
maps each argmax back to full resolution with nearest-neighbor sampling,
and lets the scales vote per pixel; ties go to the lowest class id.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .data import Scene, resize_bilinear, resize_nearest


class ConfusionMatrix:
    """Accumulated truth-by-prediction counts, ignore-aware."""

    def __init__(self, num_classes: int, ignore_label: int = 255):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), np.int64)

    def update(self, truth: np.ndarray, pred: np.ndarray) -> None:
        if truth.shape != pred.shape:
            raise ValueError(f"shape mismatch: truth {truth.shape} vs pred {pred.shape}")
        valid = truth != self.ignore_label
        t, p = truth[valid].astype(np.int64), pred[valid].astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= self.num_classes):
            raise ValueError("truth labels outside [0, num_classes)")
        if p.size and (p.min() < 0 or p.max() >= self.num_classes):
            raise ValueError("predictions outside [0, num_classes)")
        flat = np.bincount(t * self.num_classes + p,
                           minlength=self.num_classes ** 2)
        self.counts += flat.reshape(self.num_classes, self.num_classes)

    def iou(self) -> np.ndarray:
        """Per-class IoU; classes with no pixels anywhere come out NaN."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(0) - tp
        fn = self.counts.sum(1) - tp
        denom = tp + fp + fn
        with np.errstate(invalid="ignore"):
            out = np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)
        return out

    def mean_iou(self) -> float:
        vals = self.iou()
        present = ~np.isnan(vals)
        return float(vals[present].mean()) if present.any() else float("nan")

    def pixel_accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.diag(self.counts).sum() / total) if total else float("nan")


def instance_average_sizes(scenes: list[Scene], num_classes: int,
                           ignore_label: int = 255) -> np.ndarray:
    """Mean instance pixel count per class over the whole set (NaN if none)."""
    pixels = np.zeros(num_classes, np.int64)
    counts = np.zeros(num_classes, np.int64)
    for scene in scenes:
        for inst in np.unique(scene.instances):
            if inst == 0:
                continue
            where = scene.instances == inst
            labels = scene.labels[where]
            labels = labels[labels != ignore_label]
            if labels.size == 0:
                continue
            cls = int(np.bincount(labels, minlength=num_classes).argmax())
            pixels[cls] += labels.size
            counts[cls] += 1
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, pixels / np.maximum(counts, 1), np.nan)


class InstanceScore:
    """Instance-size-weighted TP/FN with unweighted FP, per class."""

    def __init__(self, num_classes: int, avg_sizes: np.ndarray,
                 ignore_label: int = 255):
        self.num_classes = num_classes
        self.avg_sizes = avg_sizes
        self.ignore_label = ignore_label
        self.tp = np.zeros(num_classes, np.float64)
        self.fn = np.zeros(num_classes, np.float64)
        self.fp = np.zeros(num_classes, np.float64)

    def update(self, truth: np.ndarray, instances: np.ndarray,
               pred: np.ndarray) -> None:
        valid = truth != self.ignore_label
        # false positives are plain pixel counts
        for c in range(self.num_classes):
            self.fp[c] += int(((pred == c) & valid & (truth != c)).sum())
        inside = valid & (instances > 0)
        for inst in np.unique(instances[inside]):
            where = inside & (instances == inst)
            labels = truth[where]
            cls = int(np.bincount(labels, minlength=self.num_classes).argmax())
            if np.isnan(self.avg_sizes[cls]):
                continue
            w = self.avg_sizes[cls] / int(where.sum())
            hits = int((pred[where] == cls).sum())
            self.tp[cls] += w * hits
            self.fn[cls] += w * (int(where.sum()) - hits)

    def iiou(self) -> np.ndarray:
        denom = self.tp + self.fp + self.fn
        has_instances = ~np.isnan(self.avg_sizes)
        with np.errstate(invalid="ignore"):
            vals = np.where(denom > 0, self.tp / np.where(denom > 0, denom, 1), np.nan)
        return np.where(has_instances, vals, np.nan)

    def mean_iiou(self) -> float:
        vals = self.iiou()
        present = ~np.isnan(vals)
        return float(vals[present].mean()) if present.any() else float("nan")


class CategoryMap:
    """Groups class ids into named categories covering every class once."""

    def __init__(self, groups: dict[str, list[int]], num_classes: int):
        self.names = sorted(groups)
        self.remap = np.full(num_classes, -1, np.int64)
        for k, name in enumerate(self.names):
            for cls in groups[name]:
                if not 0 <= cls < num_classes:
                    raise ValueError(f"category {name!r} lists class {cls} "
                                     f"outside [0, {num_classes})")
                if self.remap[cls] != -1:
                    raise ValueError(f"class {cls} appears in two categories")
                self.remap[cls] = k
        missing = np.nonzero(self.remap == -1)[0]
        if missing.size:
            raise ValueError(f"classes {missing.tolist()} belong to no category")

    @property
    def num_categories(self) -> int:
        return len(self.names)

    def apply(self, labels: np.ndarray, ignore_label: int = 255) -> np.ndarray:
        out = np.full_like(labels, ignore_label)
        valid = labels != ignore_label
        out[valid] = self.remap[labels[valid]]
        return out


def predict_logits(model, image: np.ndarray) -> np.ndarray:
    """Eval-mode forward for one (h, w, 3) image; returns (C, h, w) logits."""
    x = image.transpose(2, 0, 1)[None].astype(np.float32)
    return model.forward(x, training=False).data[0]


def multiscale_predict(model, image: np.ndarray, scales=(1.0,)) -> np.ndarray:
    """Argmax over per-scale votes for one (h, w, 3) image."""
    if not scales:
        raise ValueError("need at least one scale")
    h, w = image.shape[:2]
    min_side = 1 << (model.spec.n_streams - 1)
    votes = np.zeros((model.spec.num_classes, h, w), np.int64)
    used = 0
    for s in scales:
        sh, sw = int(round(h * s)), int(round(w * s))
        if min(sh, sw) < min_side:
            warnings.warn(
                f"scale {s} gives {sh}x{sw}, below the {min_side}-pixel "
                f"minimum side; skipping", RuntimeWarning)
            continue
        scaled = image if (sh, sw) == (h, w) else resize_bilinear(image, (sh, sw))
        pred = predict_logits(model, scaled).argmax(0)
        back = pred if (sh, sw) == (h, w) else resize_nearest(pred, (h, w))
        np.add.at(votes, (back, *np.indices((h, w))), 1)
        used += 1
    if used == 0:
        raise ValueError("every scale fell below the minimum input size")
    # argmax takes the first maximum, so vote ties go to the lowest class id
    return votes.argmax(0)


def _nan_to_none(values: np.ndarray) -> list:
    return [None if np.isnan(v) else float(v) for v in values]


def _none_if_nan(x: float):
    return None if np.isnan(x) else float(x)


def evaluate_scenes(model, scenes: list[Scene], scales=(1.0,),
                    categories: dict[str, list[int]] | None = None,
                    ignore_label: int = 255, threads: int = 1) -> dict:
    """Full evaluation over a scene list; returns a JSON-ready report."""
    if not scenes:
        raise ValueError("evaluation needs at least one scene")
    if threads < 1:
        raise ValueError(f"threads must be positive, got {threads}")
    num_classes = model.spec.num_classes

    def predict(scene):
        return multiscale_predict(model, scene.image, scales)

    if threads == 1:
        preds = [predict(s) for s in scenes]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            preds = list(pool.map(predict, scenes))

    conf = ConfusionMatrix(num_classes, ignore_label)
    avg_sizes = instance_average_sizes(scenes, num_classes, ignore_label)
    inst = InstanceScore(num_classes, avg_sizes, ignore_label)
    for scene, pred in zip(scenes, preds):
        conf.update(scene.labels, pred)
        inst.update(scene.labels, scene.instances, pred)
    report = {
        "n_scenes": len(scenes),
        "scales": [float(s) for s in scales],
        "num_classes": num_classes,
        "pixel_accuracy": _none_if_nan(conf.pixel_accuracy()),
        "iou": _nan_to_none(conf.iou()),
        "mean_iou": _none_if_nan(conf.mean_iou()),
        "iiou": _nan_to_none(inst.iiou()),
        "mean_iiou": _none_if_nan(inst.mean_iiou()),
        "categories": None,
    }
    if categories is not None:
        cmap = CategoryMap(categories, num_classes)
        cconf = ConfusionMatrix(cmap.num_categories, ignore_label)
        cat_scenes = [Scene(s.image, cmap.apply(s.labels, ignore_label),
                            s.instances, s.seed) for s in scenes]
        cat_sizes = instance_average_sizes(cat_scenes, cmap.num_categories,
                                           ignore_label)
        cinst = InstanceScore(cmap.num_categories, cat_sizes, ignore_label)
        for scene, pred in zip(cat_scenes, preds):
            cpred = cmap.apply(pred, ignore_label)
            cconf.update(scene.labels, cpred)
            cinst.update(scene.labels, scene.instances, cpred)
        report["categories"] = {
            "names": cmap.names,
            "iou": _nan_to_none(cconf.iou()),
            "mean_iou": _none_if_nan(cconf.mean_iou()),
            "iiou": _nan_to_none(cinst.iiou()),
            "mean_iiou": _none_if_nan(cinst.mean_iiou()),
        }
    return report

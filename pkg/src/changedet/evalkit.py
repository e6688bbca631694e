"""Object-level evaluation: connected components, region matching, P/R/F1,
and precision-recall sweeps over the binarization threshold.

Matching is greedy one-to-one in descending IoU; a predicted region with
IoU >= tau against an unmatched GT region is a TP, unmatched predictions are
FPs and unmatched GT regions are FNs. Counts are micro-averaged across the
dataset before computing metrics.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .core import ChangeMask, ConfigError, LabeledSample, ProbabilityMask


@dataclass(frozen=True, eq=False)
class Region:
    """One connected foreground component: pixel coordinates, area, bbox."""

    pixels: np.ndarray  # (N, 2) array of (row, col)
    area: int
    bbox: Tuple[int, int, int, int]  # (min_row, min_col, max_row, max_col)

    @classmethod
    def from_pixels(cls, pixels: np.ndarray) -> "Region":
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        if len(pixels) == 0:
            raise ConfigError("a region must contain at least one pixel")
        rows, cols = pixels[:, 0], pixels[:, 1]
        return cls(
            pixels=pixels,
            area=int(len(pixels)),
            bbox=(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())),
        )


@dataclass
class RegionMatchResult:
    tp: int
    fp: int
    fn: int
    matches: List[Tuple[int, int, float]] = field(default_factory=list)


@dataclass
class EvalConfig:
    binarize_threshold: float = 0.5
    connectivity: int = 8
    min_area: int = 0  # production default: 0.05% of image area
    match_mode: str = "iou_threshold"  # iou_threshold | any_overlap
    iou_tau: float = 0.5

    def validate(self):
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ConfigError("binarize_threshold must be in (0,1)")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.min_area < 0:
            raise ConfigError(f"min_area must be >= 0, got {self.min_area}")
        if self.match_mode not in ("iou_threshold", "any_overlap"):
            raise ConfigError(f"unknown match_mode {self.match_mode!r}")
        if not 0.0 < self.iou_tau <= 1.0:
            raise ConfigError("iou_tau must be in (0,1]")
        return self


def production_min_area(shape) -> int:
    """Documented production default: 0.05% of the image area."""
    h, w = shape[:2]
    return int(round(h * w * 0.0005))


def binarize(prob, threshold: float) -> ChangeMask:
    """Pixel -> 1 iff probability >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must be in (0,1), got {threshold}")
    p = prob.data if isinstance(prob, ProbabilityMask) else np.asarray(prob)
    return ChangeMask((p >= threshold).astype(np.uint8))


def connected_components(mask, connectivity: int = 8) -> List[Region]:
    """Maximal connected foreground regions, ordered by first pixel in
    row-major scan order."""
    if connectivity not in (4, 8):
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    data = mask.data if isinstance(mask, ChangeMask) else np.asarray(mask)
    structure = np.ones((3, 3), dtype=int) if connectivity == 8 else None
    labels, n = ndimage.label(data, structure=structure)
    if n == 0:
        return []
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    # stable sort groups pixels by label while preserving raster order inside
    # each group, so the first entry per group is the label's first pixel
    grouped = nz[np.argsort(flat[nz], kind="stable")]
    first_idx = np.searchsorted(flat[grouped], np.arange(1, n + 1))
    order = np.argsort(grouped[first_idx], kind="stable") + 1
    slices = ndimage.find_objects(labels)
    regions = []
    for lab in order:
        sl = slices[lab - 1]
        rows, cols = np.nonzero(labels[sl] == lab)
        pixels = np.stack([rows + sl[0].start, cols + sl[1].start], axis=1)
        regions.append(Region.from_pixels(pixels))
    return regions


def filter_min_area(regions: List[Region], min_area: int) -> List[Region]:
    """Keep regions with area >= min_area, preserving order."""
    if min_area < 0:
        raise ConfigError(f"min_area must be >= 0, got {min_area}")
    return [r for r in regions if r.area >= min_area]


def _flat_sets(regions: List[Region], width: int):
    return [set((r.pixels[:, 0] * width + r.pixels[:, 1]).tolist()) for r in regions]


def region_iou(a: Region, b: Region) -> float:
    """IoU of two pixel sets (no shared-image assumption needed beyond coords)."""
    wa = max(a.bbox[3], b.bbox[3]) + 1
    sa = set((a.pixels[:, 0] * wa + a.pixels[:, 1]).tolist())
    sb = set((b.pixels[:, 0] * wa + b.pixels[:, 1]).tolist())
    inter = len(sa & sb)
    union = len(sa | sb)
    return inter / union if union else 0.0


def match_regions(
    pred: List[Region], gt: List[Region], config: EvalConfig
) -> RegionMatchResult:
    """Greedy one-to-one matching in descending IoU order.

    iou_threshold mode accepts a pair iff IoU >= tau; any_overlap accepts any
    pair sharing at least one pixel. Unmatched pred -> FP, unmatched gt -> FN.
    """
    config.validate()
    width = 1 + max(
        [r.bbox[3] for r in pred] + [r.bbox[3] for r in gt], default=0
    )
    pred_sets = _flat_sets(pred, width)
    gt_sets = _flat_sets(gt, width)

    candidates = []
    for i, ps in enumerate(pred_sets):
        for j, gs in enumerate(gt_sets):
            inter = len(ps & gs)
            if inter == 0:
                continue
            iou = inter / len(ps | gs)
            if config.match_mode == "iou_threshold" and iou < config.iou_tau:
                continue
            candidates.append((iou, i, j))
    # descending IoU; index tie-break keeps the order deterministic
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

    matched_pred, matched_gt = set(), set()
    matches = []
    for iou, i, j in candidates:
        if i in matched_pred or j in matched_gt:
            continue
        matched_pred.add(i)
        matched_gt.add(j)
        matches.append((i, j, float(iou)))
    tp = len(matches)
    return RegionMatchResult(tp=tp, fp=len(pred) - tp, fn=len(gt) - tp, matches=matches)


def prf1(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    """Precision, recall, F1 with the nothing-to-find convention:
    P = 1 when TP+FP = 0 and R = 1 when TP+FN = 0 (no NaNs in aggregation)."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ConfigError("counts must be nonnegative")
    precision = tp / (tp + fp) if (tp + fp) > 0 else 1.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 1.0
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
    return precision, recall, f1


def regions_of_mask(mask, config: EvalConfig, apply_min_area: bool = True):
    regions = connected_components(mask, config.connectivity)
    if apply_min_area:
        regions = filter_min_area(regions, config.min_area)
    return regions


def _as_predictor(model_or_fn) -> Callable:
    if callable(model_or_fn) and not hasattr(model_or_fn, "predict"):
        return model_or_fn
    return model_or_fn.predict


@dataclass
class ImageEval:
    index: int
    match: RegionMatchResult
    n_pred_regions: int
    n_gt_regions: int


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    per_image: List[ImageEval] = field(default_factory=list)


def evaluate(
    predictor, dataset: List[LabeledSample], config: Optional[EvalConfig] = None
) -> EvalReport:
    """Forward -> binarize -> components -> min-area filter per image, then
    micro-average TP/FP/FN over the dataset.

    `predictor` is either a callable ImagePair -> ProbabilityMask or an object
    exposing .predict with that signature. min_area filtering applies to
    predictions only; GT regions are taken as labeled.
    """
    config = (config or EvalConfig()).validate()
    predict = _as_predictor(predictor)
    total = {"tp": 0, "fp": 0, "fn": 0}
    per_image = []
    for idx, sample in enumerate(dataset):
        if sample.mask is None:
            raise ConfigError(f"sample {idx} has no GT mask; cannot evaluate")
        prob = predict(sample.pair)
        pred_mask = binarize(prob, config.binarize_threshold)
        pred_regions = regions_of_mask(pred_mask, config, apply_min_area=True)
        gt_regions = regions_of_mask(sample.mask, config, apply_min_area=False)
        match = match_regions(pred_regions, gt_regions, config)
        total["tp"] += match.tp
        total["fp"] += match.fp
        total["fn"] += match.fn
        per_image.append(
            ImageEval(
                index=idx,
                match=match,
                n_pred_regions=len(pred_regions),
                n_gt_regions=len(gt_regions),
            )
        )
    precision, recall, f1 = prf1(total["tp"], total["fp"], total["fn"])
    return EvalReport(
        precision=precision,
        recall=recall,
        f1=f1,
        tp=total["tp"],
        fp=total["fp"],
        fn=total["fn"],
        per_image=per_image,
    )


def pr_curve(
    predictor,
    dataset: List[LabeledSample],
    thresholds,
    config: Optional[EvalConfig] = None,
):
    """Sweep the binarization threshold with all other config fixed.

    Returns (points, auc) where points is a list of (threshold, precision,
    recall). Probabilities are computed once per image and re-thresholded.
    AUC is the trapezoid over recall-sorted points, anchored at recall 0 with
    the precision of the lowest-recall point.
    """
    config = (config or EvalConfig()).validate()
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ConfigError("thresholds must be nonempty")
    if any(not 0.0 < t < 1.0 for t in thresholds):
        raise ConfigError("thresholds must lie strictly inside (0,1)")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError("thresholds must be strictly increasing")

    predict = _as_predictor(predictor)
    probs = []
    gt_regions_per_image = []
    for idx, sample in enumerate(dataset):
        if sample.mask is None:
            raise ConfigError(f"sample {idx} has no GT mask; cannot evaluate")
        probs.append(predict(sample.pair))
        gt_regions_per_image.append(
            regions_of_mask(sample.mask, config, apply_min_area=False)
        )

    points = []
    for thr in thresholds:
        tp = fp = fn = 0
        for prob, gt_regions in zip(probs, gt_regions_per_image):
            pred_mask = binarize(prob, thr)
            pred_regions = regions_of_mask(pred_mask, config, apply_min_area=True)
            match = match_regions(pred_regions, gt_regions, config)
            tp += match.tp
            fp += match.fp
            fn += match.fn
        precision, recall, _ = prf1(tp, fp, fn)
        points.append((thr, precision, recall))

    auc = pr_auc(points)
    return points, auc


def pr_auc(points) -> float:
    """Trapezoid area under (recall, precision) points sorted by recall."""
    by_recall = sorted(points, key=lambda p: p[2])
    recalls = [0.0] + [p[2] for p in by_recall]
    precisions = [by_recall[0][1]] + [p[1] for p in by_recall]
    area = 0.0
    for k in range(1, len(recalls)):
        area += (recalls[k] - recalls[k - 1]) * (precisions[k] + precisions[k - 1]) / 2.0
    return area

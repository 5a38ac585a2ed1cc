"""
Panoptic and sub-task metrics over PanopticMap pairs: PQ (with SQ/RQ and the
thing/stuff split), PQ with relaxed stuff matching, parsing covering, mIoU and
a simplified mask AP.

Pixels that are void in the ground truth never count against a prediction:
they are dropped from IoU unions, and an unmatched prediction lying mostly on
ground-truth void is not a false positive.
"""
from __future__ import annotations
from dataclasses import dataclass, field

import numpy as np

from console import log
from core import ClassCatalog, LabelMap, PanopticMap, ValidationError, VOID_CLASS, VOID_SEGMENT

MATCH_IOU = 0.5
AP_IOU_THRESHOLDS: tuple[float, ...] = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
AP_RECALL_LEVELS = np.arange(101) / 100.0
METRIC_NAMES = ('pq', 'pqd', 'pc', 'miou', 'ap')

def _div(x: float, y: float) -> float:
    return x / y if y else 0.0

def _as_mask(pixels: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """ flat index array -> boolean mask of `shape` """
    if pixels.dtype == bool:
        return pixels
    size = int(np.prod(shape))
    pixels = pixels.reshape(-1)
    if pixels.size and (pixels.min() < 0 or pixels.max() >= size):
        raise ValidationError(f"pixel indices outside a mask of {size} pixels")
    mask = np.zeros(size, dtype=bool)
    mask[pixels.astype(np.intp)] = True
    return mask.reshape(shape)

def mask_iou(a, b) -> float:
    """
    IoU of two pixel sets, given as boolean masks or flat index arrays (mixing is
    fine: indices are read against the mask's shape); 1 when both are empty
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.dtype == bool or b.dtype == bool:
        shape = a.shape if a.dtype == bool else b.shape
        a, b = _as_mask(a, shape), _as_mask(b, shape)
        if a.shape != b.shape:
            raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
        inter = int(np.count_nonzero(a & b))
        union = int(np.count_nonzero(a | b))
    else:
        inter = len(np.intersect1d(a, b))
        union = len(np.union1d(a, b))
    return 1.0 if union == 0 else inter / union


# -------------------------------------------------------------
#  panoptic quality

@dataclass
class ClassPq:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @property
    def valid(self) -> bool:
        return self.tp + self.fp + self.fn > 0
    @property
    def sq(self) -> float:
        return _div(self.iou_sum, self.tp)
    @property
    def rq(self) -> float:
        return _div(self.tp, self.tp + 0.5 * self.fp + 0.5 * self.fn)
    @property
    def pq(self) -> float:
        return _div(self.iou_sum, self.tp + 0.5 * self.fp + 0.5 * self.fn)

@dataclass
class PqResult:
    per_class: dict[int, ClassPq] = field(default_factory=dict)
    pq_all: float = 0.0
    pq_things: float = 0.0
    pq_stuff: float = 0.0
    sq_all: float = 0.0
    rq_all: float = 0.0
    num_classes: int = 0
    """ classes with any TP, FP or FN """

    @property
    def pq(self) -> float:
        return self.pq_all

    def counts(self) -> tuple[int, int, int]:
        return (sum(c.tp for c in self.per_class.values()),
                sum(c.fp for c in self.per_class.values()),
                sum(c.fn for c in self.per_class.values()))

def _areas(ids: np.ndarray) -> dict[int, int]:
    uniq, counts = np.unique(ids, return_counts=True)
    return dict(zip(uniq.tolist(), counts.tolist()))

def _check_shapes(pred, gt):
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")

@dataclass
class _Overlaps:
    gt_areas: dict[int, int]
    pred_areas: dict[int, int]
    intersections: dict[tuple[int, int], int]

    def pred_void_overlap(self, pred_id: int) -> int:
        return self.intersections.get((VOID_SEGMENT, pred_id), 0)

    def iou(self, gt_id: int, pred_id: int) -> float:
        inter = self.intersections.get((gt_id, pred_id), 0)
        union = self.gt_areas[gt_id] + self.pred_areas[pred_id] - inter - self.pred_void_overlap(pred_id)
        return _div(inter, union)

def _overlaps(pred: PanopticMap, gt: PanopticMap) -> _Overlaps:
    _check_shapes(pred, gt)
    offset = int(pred.data.max(initial=0)) + 1
    combined = gt.data.astype(np.int64) * offset + pred.data.astype(np.int64)
    intersections = {divmod(k, offset): v for k, v in _areas(combined).items()}
    return _Overlaps(_areas(gt.data), _areas(pred.data), intersections)

class PanopticQuality:
    """
    Accumulates TP/FP/FN and matched IoU per class over any number of image pairs.
    `stuff_match_iou` relaxes the matching threshold for stuff classes (0.0 gives PQ-dagger);
    below MATCH_IOU, matches are taken greedily by descending IoU so every segment
    matches at most once.
    """
    def __init__(self, catalog: ClassCatalog, stuff_match_iou: float = MATCH_IOU):
        self.catalog = catalog
        self.stuff_match_iou = stuff_match_iou
        self.reset()

    def reset(self):
        self.per_class: dict[int, ClassPq] = {c.class_id: ClassPq() for c in self.catalog.classes}

    def _threshold(self, class_id: int) -> float:
        return MATCH_IOU if self.catalog.is_thing(class_id) else self.stuff_match_iou

    def compare_and_accumulate(self, pred: PanopticMap, gt: PanopticMap):
        ov = _overlaps(pred, gt)
        gt_table = gt.segment_table()
        pred_table = pred.segment_table()
        pairs = []
        for (gt_id, pred_id), inter in ov.intersections.items():
            if gt_id == VOID_SEGMENT or pred_id == VOID_SEGMENT:
                continue
            class_id = gt_table[gt_id].class_id
            if pred_table[pred_id].class_id != class_id:
                continue
            iou = ov.iou(gt_id, pred_id)
            if iou > self._threshold(class_id):
                pairs.append((iou, gt_id, pred_id, class_id))
        pairs.sort(key=lambda x: (-x[0], x[1], x[2]))
        gt_matched: set[int] = set()
        pred_matched: set[int] = set()
        for iou, gt_id, pred_id, class_id in pairs:
            if gt_id in gt_matched or pred_id in pred_matched:
                assert iou <= MATCH_IOU, f"segment matched twice at IoU {iou}"
                continue
            gt_matched.add(gt_id)
            pred_matched.add(pred_id)
            self.per_class[class_id].tp += 1
            self.per_class[class_id].iou_sum += iou
        for gt_id in ov.gt_areas:
            if gt_id != VOID_SEGMENT and gt_id not in gt_matched:
                self.per_class[gt_table[gt_id].class_id].fn += 1
        for pred_id, area in ov.pred_areas.items():
            if pred_id == VOID_SEGMENT or pred_id in pred_matched:
                continue
            if ov.pred_void_overlap(pred_id) / area > 0.5:
                continue
            self.per_class[pred_table[pred_id].class_id].fp += 1

    def result(self) -> PqResult:
        valid = {k: c for k, c in self.per_class.items() if c.valid}
        things = [c.pq for k, c in valid.items() if self.catalog.is_thing(k)]
        stuff = [c.pq for k, c in valid.items() if not self.catalog.is_thing(k)]
        everything = list(valid.values())
        return PqResult(
            per_class=dict(self.per_class),
            pq_all=float(np.mean([c.pq for c in everything])) if everything else 0.0,
            pq_things=float(np.mean(things)) if things else 0.0,
            pq_stuff=float(np.mean(stuff)) if stuff else 0.0,
            sq_all=float(np.mean([c.sq for c in everything])) if everything else 0.0,
            rq_all=float(np.mean([c.rq for c in everything])) if everything else 0.0,
            num_classes=len(everything),
        )

def panoptic_quality(pred: PanopticMap, gt: PanopticMap, catalog: ClassCatalog) -> PqResult:
    pq = PanopticQuality(catalog)
    pq.compare_and_accumulate(pred, gt)
    return pq.result()

def pq_dagger(pred: PanopticMap, gt: PanopticMap, catalog: ClassCatalog) -> float:
    """ PQ with stuff segments matched at any IoU > 0 """
    pq = PanopticQuality(catalog, stuff_match_iou=0.0)
    pq.compare_and_accumulate(pred, gt)
    return pq.result().pq_all


# -------------------------------------------------------------
#  parsing covering, mIoU

@dataclass
class CoveringResult:
    value: float
    undefined: bool = False
    """ no ground-truth regions at all; value is reported as 0 """
    per_class: dict[int, float] = field(default_factory=dict)

def parsing_covering(pred: PanopticMap, gt: PanopticMap, catalog: ClassCatalog) -> CoveringResult:
    """ per class, size-weighted best IoU of each gt region; mean over classes present in gt """
    ov = _overlaps(pred, gt)
    gt_table = gt.segment_table()
    pred_table = pred.segment_table()
    best: dict[int, float] = {}
    for (gt_id, pred_id), _ in ov.intersections.items():
        if gt_id == VOID_SEGMENT or pred_id == VOID_SEGMENT:
            continue
        if gt_table[gt_id].class_id == pred_table[pred_id].class_id:
            best[gt_id] = max(best.get(gt_id, 0.0), ov.iou(gt_id, pred_id))
    covered: dict[int, float] = {}
    sizes: dict[int, int] = {}
    for gt_id, area in ov.gt_areas.items():
        if gt_id == VOID_SEGMENT:
            continue
        class_id = gt_table[gt_id].class_id
        covered[class_id] = covered.get(class_id, 0.0) + area * best.get(gt_id, 0.0)
        sizes[class_id] = sizes.get(class_id, 0) + area
    if not sizes:
        return CoveringResult(0.0, undefined=True)
    per_class = {k: covered[k] / sizes[k] for k in sorted(sizes)}
    return CoveringResult(float(np.mean(list(per_class.values()))), False, per_class)

def mean_iou(pred_sem: LabelMap, gt_sem: LabelMap, catalog: ClassCatalog) -> float:
    """ per-class IoU over non-void gt pixels, mean over classes present in gt """
    _check_shapes(pred_sem, gt_sem)
    known = gt_sem.data != VOID_CLASS
    pred = pred_sem.data[known]
    gt = gt_sem.data[known]
    ious = []
    for class_id in range(catalog.num_classes):
        g = gt == class_id
        if not np.any(g):
            continue
        p = pred == class_id
        ious.append(np.count_nonzero(g & p) / np.count_nonzero(g | p))
    return float(np.mean(ious)) if ious else 0.0


# -------------------------------------------------------------
#  mask AP

@dataclass(frozen=True)
class ScoredMask:
    class_id: int
    pixels: np.ndarray = field(repr=False)
    """ sorted flat pixel indices """
    score: float = 1.0

def instances_from_panoptic(panoptic: PanopticMap) -> list[ScoredMask]:
    """ thing segments as scored masks, in segment id order """
    flat = panoptic.data.reshape(-1)
    return [ScoredMask(s.class_id, np.flatnonzero(flat == s.segment_id), s.score)
            for s in sorted(panoptic.segments, key=lambda s: s.segment_id) if s.is_thing]

def _precision_at_recall(tp_flags: list[bool], num_gt: int) -> float:
    if not tp_flags:
        return 0.0
    tp = np.cumsum(tp_flags)
    precision = tp / np.arange(1, len(tp_flags) + 1)
    recall = tp / num_gt
    interpolated = [float(np.max(precision[recall >= r - 1e-12], initial=0.0)) for r in AP_RECALL_LEVELS]
    return float(np.mean(interpolated))

def _class_ap(preds: list[ScoredMask], gts: list[ScoredMask], threshold: float) -> float:
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    matched: set[int] = set()
    flags = []
    for i in order:
        best, best_iou = -1, threshold
        for j, g in enumerate(gts):
            if j in matched:
                continue
            iou = mask_iou(preds[i].pixels, g.pixels)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            matched.add(best)
        flags.append(best >= 0)
    return _precision_at_recall(flags, len(gts))

def average_precision(predictions: list[ScoredMask], ground_truth: list[ScoredMask],
                      iou_thresholds: tuple[float, ...] = AP_IOU_THRESHOLDS) -> float:
    """ mean over IoU thresholds and gt classes of 101-point interpolated precision """
    classes = sorted({g.class_id for g in ground_truth})
    if not classes or not predictions:
        return 0.0
    per_threshold = []
    for threshold in iou_thresholds:
        per_class = [_class_ap([p for p in predictions if p.class_id == k],
                               [g for g in ground_truth if g.class_id == k], threshold) for k in classes]
        per_threshold.append(np.mean(per_class))
    return float(np.mean(per_threshold))


def evaluate_all(pred: PanopticMap, gt: PanopticMap, catalog: ClassCatalog,
                 metrics: tuple[str, ...] | list[str] = METRIC_NAMES) -> dict[str, float]:
    """ Requested metrics in a fixed order; 'pq' adds its thing/stuff split and SQ/RQ """
    unknown = [m for m in metrics if m not in METRIC_NAMES]
    if unknown:
        raise ValidationError(f"unknown metrics {unknown}, expected some of {METRIC_NAMES}")
    out: dict[str, float] = {}
    if 'pq' in metrics:
        result = panoptic_quality(pred, gt, catalog)
        out.update(pq=result.pq_all, pq_things=result.pq_things, pq_stuff=result.pq_stuff,
                   sq=result.sq_all, rq=result.rq_all)
    if 'pqd' in metrics:
        out['pqd'] = pq_dagger(pred, gt, catalog)
    if 'pc' in metrics:
        covering = parsing_covering(pred, gt, catalog)
        if covering.undefined:
            log.warning("parsing covering is undefined without ground-truth regions, reporting 0")
        out['pc'] = covering.value
    if 'miou' in metrics:
        out['miou'] = mean_iou(pred.semantic(), gt.semantic(), catalog)
    if 'ap' in metrics:
        out['ap'] = average_precision(instances_from_panoptic(pred), instances_from_panoptic(gt))
    return out

"""Lesion detection evaluation: IoU matching, TP/FP/FN counting, reports.

Also houses the reference intensity-blob detector used on synthetic phantoms
and the loader for detections produced by an external model.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

TP, FN, FP, TN = "TP", "FN", "FP", "TN"


class DetectionParseError(ValueError):
    pass


class DetectionValidationError(ValueError):
    pass


class SliceMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Corner box; x runs along columns, y along rows."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) for c in coords):
            raise DetectionValidationError(f"box {coords} has non-finite coordinates")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise DetectionValidationError(f"box {coords} has non-positive area")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


@dataclass(frozen=True)
class Detection:
    slice_index: int
    box: BoundingBox
    confidence: float
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise DetectionValidationError(
                f"confidence {self.confidence} outside [0, 1] on slice {self.slice_index}"
            )


@dataclass(frozen=True)
class GroundTruthAnnotation:
    slice_index: int
    box: BoundingBox
    class_id: int = 0


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass
class SliceOutcome:
    slice_index: int
    tp: int = 0
    fp: int = 0
    fn: int = 0
    matches: List[Tuple[Detection, GroundTruthAnnotation]] = field(default_factory=list)

    @property
    def label(self) -> str:
        if self.tp:
            return TP
        if self.fn:
            return FN
        if self.fp:
            return FP
        return TN


def _detection_order(d: Detection):
    return (-d.confidence, d.box.x0, d.box.y0)


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthAnnotation],
    iou_threshold: float = 0.5,
    slices: Optional[Iterable[int]] = None,
) -> Dict[int, SliceOutcome]:
    """Greedy confidence-ordered matching, per slice and per class.

    Each detection, in descending confidence, claims the still-unmatched ground
    truth with the highest IoU at or above the threshold. Outcomes are returned
    for every slice that has a detection or ground truth, plus any listed in
    ``slices``.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    groups: Dict[Tuple[int, int], Tuple[list, list]] = defaultdict(lambda: ([], []))
    for d in dets:
        groups[(d.slice_index, d.class_id)][0].append(d)
    for g in gts:
        groups[(g.slice_index, g.class_id)][1].append(g)

    outcomes = {int(s): SliceOutcome(int(s)) for s in (slices or ())}
    for (s, _cls), (group_dets, group_gts) in sorted(groups.items()):
        out = outcomes.setdefault(s, SliceOutcome(s))
        taken = [False] * len(group_gts)
        for d in sorted(group_dets, key=_detection_order):
            best, best_iou = -1, iou_threshold
            for j, g in enumerate(group_gts):
                if taken[j]:
                    continue
                v = iou(d.box, g.box)
                if v >= best_iou and (best < 0 or v > best_iou):
                    best, best_iou = j, v
            if best >= 0:
                taken[best] = True
                out.tp += 1
                out.matches.append((d, group_gts[best]))
            else:
                out.fp += 1
        out.fn += taken.count(False)
    return dict(sorted(outcomes.items()))


@dataclass
class EvaluationReport:
    method: str
    rate: Optional[float]
    tp: int
    fp: int
    fn: int
    sensitivity: Optional[float]
    slices: List[dict]
    mean_ssim_tp: Optional[float] = None
    mean_ssim_fn: Optional[float] = None
    iou_threshold: float = 0.5
    data_range: Optional[float] = None
    mask: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "rate": self.rate,
            "iou_threshold": self.iou_threshold,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "sensitivity": self.sensitivity,
            "mean_ssim_tp": self.mean_ssim_tp,
            "mean_ssim_fn": self.mean_ssim_fn,
            "data_range": self.data_range,
            "mask": self.mask,
            "slices": self.slices,
        }

    def to_json(self) -> str:
        """Canonical serialization; identical reports give identical bytes."""
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EvaluationReport":
        return cls(
            method=doc["method"], rate=doc.get("rate"), tp=doc["tp"], fp=doc["fp"], fn=doc["fn"],
            sensitivity=doc.get("sensitivity"), slices=list(doc.get("slices", [])),
            mean_ssim_tp=doc.get("mean_ssim_tp"), mean_ssim_fn=doc.get("mean_ssim_fn"),
            iou_threshold=doc.get("iou_threshold", 0.5), data_range=doc.get("data_range"),
            mask=doc.get("mask"),
        )


def aggregate_report(
    outcomes: Mapping[int, SliceOutcome],
    per_slice_metrics: Optional[Sequence[Mapping]] = None,
    method: str = "unknown",
    rate: Optional[float] = None,
    iou_threshold: float = 0.5,
    data_range: Optional[float] = None,
    mask: Optional[dict] = None,
) -> EvaluationReport:
    metrics_by_slice = {}
    if per_slice_metrics is not None:
        metrics_by_slice = {int(m["slice"]): m for m in per_slice_metrics}
        extra = set(outcomes) - set(metrics_by_slice)
        if extra:
            raise SliceMismatchError(f"outcomes for slices without metrics: {sorted(extra)}")
        slice_ids = sorted(metrics_by_slice)
    else:
        slice_ids = sorted(outcomes)

    records = []
    tp = fp = fn = 0
    for s in slice_ids:
        out = outcomes.get(s, SliceOutcome(s))
        tp, fp, fn = tp + out.tp, fp + out.fp, fn + out.fn
        rec = {"slice": s, "outcome": out.label, "tp": out.tp, "fp": out.fp, "fn": out.fn}
        m = metrics_by_slice.get(s, {})
        rec["ssim"] = m.get("ssim")
        rec["nmse"] = m.get("nmse")
        if "mask" in m:
            rec["mask"] = m["mask"]
        records.append(rec)

    report = EvaluationReport(
        method=method, rate=rate, tp=tp, fp=fp, fn=fn,
        sensitivity=tp / (tp + fn) if tp + fn > 0 else None,
        slices=records, iou_threshold=iou_threshold, data_range=data_range, mask=mask,
    )
    report.mean_ssim_tp, report.mean_ssim_fn = ssim_group_means(report)
    return report


def ssim_group_means(
    report: EvaluationReport, groups: Tuple[str, str] = (TP, FN)
) -> Tuple[Optional[float], Optional[float]]:
    """Average per-slice SSIM within two slice groups (TP and FN by default).

    A slice is TP-group with at least one true positive, FN-group with at least
    one miss and no true positive, FP-group with only false positives.
    """
    means = []
    for label in groups:
        vals = [r["ssim"] for r in report.slices if r["outcome"] == label and r.get("ssim") is not None]
        means.append(math.fsum(vals) / len(vals) if vals else None)
    return means[0], means[1]


def blob_detect(
    img,
    intensity_threshold: float,
    min_area: int = 1,
    max_area: Optional[int] = None,
    slice_index: Optional[int] = None,
) -> List[Detection]:
    """Bright 4-connected components as detections.

    ``img`` is expected in [0, 1]. Each component strictly above the threshold
    with ``min_area <= area <= max_area`` becomes a tight pixel-corner box whose
    confidence is the component's mean intensity.
    """
    pixels = np.asarray(getattr(img, "pixels", img), dtype=np.float32)
    if slice_index is None:
        slice_index = getattr(img, "slice_index", 0)
    labels, n = ndimage.label(pixels > intensity_threshold)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(pixels), labels, idx)
    means = ndimage.mean(pixels, labels, idx)
    dets = []
    for k, sl in enumerate(ndimage.find_objects(labels)):
        area = int(areas[k])
        if area < min_area or (max_area is not None and area > max_area):
            continue
        rows, cols = sl
        box = BoundingBox(float(cols.start), float(rows.start), float(cols.stop), float(rows.stop))
        conf = float(np.float32(min(max(means[k], 0.0), 1.0)))
        dets.append(Detection(int(slice_index), box, conf, 0))
    dets.sort(key=lambda d: (-d.confidence, d.box.x0))
    return dets


# --- JSON documents -------------------------------------------------------

def _record_to_box(rec: Mapping, where: str) -> BoundingBox:
    try:
        coords = [float(rec[k]) for k in ("x0", "y0", "x1", "y1")]
    except KeyError as exc:
        raise DetectionParseError(f"{where}: missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError):
        raise DetectionParseError(f"{where}: box coordinates must be numbers") from None
    try:
        return BoundingBox(*coords)
    except DetectionValidationError as exc:
        raise DetectionValidationError(f"{where}: {exc}") from None


def _parse_records(document, kind: str) -> list:
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise DetectionParseError(f"line {exc.lineno}: {exc.msg}") from None
    if not isinstance(document, list):
        raise DetectionParseError(f"{kind} document must be a JSON list of records")
    for i, rec in enumerate(document):
        if not isinstance(rec, dict):
            raise DetectionParseError(f"record {i}: expected an object")
    return document


def _int_field(rec: Mapping, key: str, where: str, default=None) -> int:
    if key not in rec:
        if default is not None:
            return default
        raise DetectionParseError(f"{where}: missing field {key!r}")
    val = rec[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise DetectionParseError(f"{where}: field {key!r} must be an integer")
    return val


def load_external_detections(document) -> List[Detection]:
    """Parse a detections document (JSON text or already-decoded list)."""
    dets = []
    for i, rec in enumerate(_parse_records(document, "detections")):
        where = f"record {i}"
        s = _int_field(rec, "slice", where)
        box = _record_to_box(rec, where)
        if "confidence" not in rec:
            raise DetectionParseError(f"{where}: missing field 'confidence'")
        try:
            conf = float(rec["confidence"])
        except (TypeError, ValueError):
            raise DetectionParseError(f"{where}: field 'confidence' must be a number") from None
        try:
            dets.append(Detection(s, box, conf, _int_field(rec, "class", where, 0)))
        except DetectionValidationError as exc:
            raise DetectionValidationError(f"{where}: {exc}") from None
    return dets


def load_ground_truth(document) -> List[GroundTruthAnnotation]:
    gts = []
    for i, rec in enumerate(_parse_records(document, "ground-truth")):
        where = f"record {i}"
        s = _int_field(rec, "slice", where)
        gts.append(GroundTruthAnnotation(s, _record_to_box(rec, where), _int_field(rec, "class", where, 0)))
    return gts


def _box_fields(box: BoundingBox) -> dict:
    return {"x0": box.x0, "y0": box.y0, "x1": box.x1, "y1": box.y1}


def detections_to_json(dets: Iterable[Detection]) -> str:
    recs = [
        {"slice": d.slice_index, **_box_fields(d.box), "confidence": d.confidence, "class": d.class_id}
        for d in dets
    ]
    return json.dumps(recs, indent=2) + "\n"


def ground_truth_to_json(gts: Iterable[GroundTruthAnnotation]) -> str:
    recs = [{"slice": g.slice_index, **_box_fields(g.box), "class": g.class_id} for g in gts]
    return json.dumps(recs, indent=2) + "\n"


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthAnnotation],
    metrics_doc: Optional[Mapping] = None,
    iou_threshold: float = 0.5,
    method: Optional[str] = None,
    rate: Optional[float] = None,
) -> EvaluationReport:
    """Match, count and attach per-slice metrics in one step.

    When a metrics document is given its slices define the evaluated set, and
    method, rate, data range and mask settings are taken from it.
    """
    per_slice = None
    mask = None
    data_range = None
    if metrics_doc is not None:
        per_slice = metrics_doc["slices"]
        method = method or metrics_doc.get("method")
        rate = rate if rate is not None else metrics_doc.get("rate")
        data_range = metrics_doc.get("data_range")
        mask = metrics_doc.get("mask")
        universe = {int(m["slice"]) for m in per_slice}
        stray = sorted({x.slice_index for x in (*dets, *gts)} - universe)
        if stray:
            raise SliceMismatchError(f"detections or ground truth on unevaluated slices {stray}")
    outcomes = match_detections(dets, gts, iou_threshold, slices=[m["slice"] for m in per_slice or ()])
    return aggregate_report(
        outcomes, per_slice, method=method or "unknown", rate=rate,
        iou_threshold=iou_threshold, data_range=data_range, mask=mask,
    )

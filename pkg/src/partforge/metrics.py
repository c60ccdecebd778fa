"""Per-part IoU and Chamfer distance, class/instance aggregation, and mAP@25."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .taxonomy import Taxonomy
from .voxelgrid import OccupancyGrid, occupied_centers

EMPTY_CHAMFER = math.sqrt(3.0)
MODES = ("completion", "segmentation", "instance")


def _check(pred: OccupancyGrid, gt: OccupancyGrid, what: str) -> None:
    if pred.resolution != gt.resolution:
        raise ValueError(f"{what}: resolution mismatch {pred.resolution} vs {gt.resolution}")


def part_iou(pred: OccupancyGrid, gt: OccupancyGrid, threshold: float = 0.5) -> float:
    _check(pred, gt, "part_iou")
    p, g = pred.mask(threshold), gt.mask(threshold)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    """Halved symmetric mean nearest-neighbour distance between point sets."""
    if len(a) == 0 and len(b) == 0:
        return 0.0
    if len(a) == 0 or len(b) == 0:
        return EMPTY_CHAMFER
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def chamfer(pred: OccupancyGrid, gt: OccupancyGrid, threshold: float = 0.5) -> float:
    _check(pred, gt, "chamfer")
    return chamfer_points(occupied_centers(pred, threshold), occupied_centers(gt, threshold))


def mask_to_visible(pred: OccupancyGrid, scan: OccupancyGrid, threshold: float = 0.5) -> OccupancyGrid:
    _check(pred, scan, "mask_to_visible")
    return OccupancyGrid.from_mask(pred.mask(threshold) & scan.mask(threshold))


def instance_union(parts: Sequence[OccupancyGrid], threshold: float = 0.5,
                   resolution: int | None = None) -> OccupancyGrid:
    if not parts:
        if resolution is None:
            raise ValueError("instance_union of no parts needs a resolution")
        return OccupancyGrid.zeros(resolution)
    r = parts[0].resolution
    for p in parts[1:]:
        if p.resolution != r:
            raise ValueError(f"instance_union: resolution mismatch {r} vs {p.resolution}")
    top = np.max(np.stack([p.values for p in parts]), axis=0)
    return OccupancyGrid.from_mask(top > threshold)


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class PartScore:
    object_id: str
    class_name: str
    part_type: int
    iou: float
    cd: float

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"IoU {self.iou} outside [0, 1]")
        if self.cd < 0:
            raise ValueError(f"negative Chamfer distance {self.cd}")


@dataclass
class EvalReport:
    classes: list[str]
    per_class: dict[str, dict[str, float]]  # class -> {"iou", "cd"}
    per_type: dict[tuple[str, int], dict[str, float]]  # (class, type) -> {"iou", "cd", "n"}
    class_avg: dict[str, float]
    inst_avg: dict[str, float]
    n_scores: int
    mode: str = "completion"
    map25: dict | None = None
    conventions: dict = field(default_factory=lambda: {
        "chamfer": "halved sum of directional means, unit-box coordinates",
        "chamfer_empty_penalty": EMPTY_CHAMFER,
        "missed_parts": "IoU 0, CD sqrt(3)",
    })

    @property
    def empty(self) -> bool:
        return self.n_scores == 0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "empty": self.empty,
            "n_scores": self.n_scores,
            "classes": self.classes,
            "per_class": self.per_class,
            "per_type": [
                {"class": c, "type": t, **v} for (c, t), v in sorted(self.per_type.items())
            ],
            "class_avg": self.class_avg,
            "inst_avg": self.inst_avg,
            "map25": self.map25,
            "conventions": self.conventions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def aggregate(scores: Iterable[PartScore], taxonomy: Taxonomy | None = None, mode: str = "completion") -> EvalReport:
    """Type means within each class, class means over types, then both averages.

    Classes and types without instances are left out of their means.
    """
    scores = list(scores)
    order = list(taxonomy.classes) if taxonomy is not None else []
    for s in scores:
        if s.class_name not in order:
            order.append(s.class_name)
    groups: dict[tuple[str, int], list[PartScore]] = {}
    for s in scores:
        groups.setdefault((s.class_name, s.part_type), []).append(s)
    per_type = {
        key: {"iou": float(np.mean([s.iou for s in g])), "cd": float(np.mean([s.cd for s in g])), "n": len(g)}
        for key, g in groups.items()
    }
    per_class = {}
    for c in order:
        rows = [v for (cc, _), v in sorted(per_type.items()) if cc == c]
        if rows:
            per_class[c] = {"iou": float(np.mean([r["iou"] for r in rows])),
                            "cd": float(np.mean([r["cd"] for r in rows]))}
    if per_class:
        class_avg = {m: float(np.mean([v[m] for v in per_class.values()])) for m in ("iou", "cd")}
        inst_avg = {"iou": float(np.mean([s.iou for s in scores])), "cd": float(np.mean([s.cd for s in scores]))}
    else:
        class_avg, inst_avg = {}, {}
    return EvalReport(order, per_class, per_type, class_avg, inst_avg, len(scores), mode)


def format_report(report: EvalReport) -> str:
    """Aligned table: one column per class, then class avg and inst avg; IoU in percent."""
    if report.empty:
        return f"[{report.mode}] empty report: no scores\n"
    cols = [c for c in report.classes if c in report.per_class]
    header = ["metric"] + cols + ["class avg", "inst avg"]
    cd = ["CD"] + [f"{report.per_class[c]['cd']:.3f}" for c in cols]
    cd += [f"{report.class_avg['cd']:.3f}", f"{report.inst_avg['cd']:.3f}"]
    iou = ["IoU"] + [f"{100 * report.per_class[c]['iou']:.1f}" for c in cols]
    iou += [f"{100 * report.class_avg['iou']:.1f}", f"{100 * report.inst_avg['iou']:.1f}"]
    rows = [header, cd, iou]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [f"[{report.mode}]"]
    for r in rows:
        lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)))
    if report.map25 is not None:
        lines.append(f"mAP@25 {100 * report.map25['mAP']:.1f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# mAP@25


def average_precision(tp: Sequence[bool], n_targets: int) -> float:
    """Area under the all-point interpolated PR curve; ``tp`` in confidence order."""
    if n_targets == 0:
        return float("nan")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_targets
    precision = ctp / np.arange(1, len(tp) + 1)
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    return float(np.sum((r[1:] - r[:-1]) * p[:-1]))


@dataclass(frozen=True)
class Detection:
    mask: OccupancyGrid
    confidence: float
    class_name: str
    key: Hashable = None  # only targets with the same key can be matched


@dataclass(frozen=True)
class Target:
    mask: OccupancyGrid
    class_name: str
    key: Hashable = None


def map_at_25(predictions: Sequence[Detection], targets: Sequence[Target], iou_threshold: float = 0.25) -> dict:
    """Per-class AP at mask IoU >= 0.25 and their mean over classes with targets."""
    for p in predictions:
        if not math.isfinite(p.confidence):
            raise ValueError("prediction confidences must be finite")
    classes = sorted({t.class_name for t in targets} | {p.class_name for p in predictions})
    per_class = {}
    for c in classes:
        tg = [t for t in targets if t.class_name == c]
        pr = [p for p in predictions if p.class_name == c]
        if not tg:
            continue
        order = sorted(range(len(pr)), key=lambda i: -pr[i].confidence)
        used = [False] * len(tg)
        tp = []
        for i in order:
            p = pr[i]
            best, best_iou = -1, iou_threshold
            for j, t in enumerate(tg):
                if used[j] or t.key != p.key:
                    continue
                v = part_iou(p.mask, t.mask)
                if v >= best_iou and (best < 0 or v > best_iou):
                    best, best_iou = j, v
            if best >= 0:
                used[best] = True
            tp.append(best >= 0)
        per_class[c] = average_precision(tp, len(tg))
    m = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return {"per_class": per_class, "mAP": m}


# ---------------------------------------------------------------------------
# evaluation of predicted part sets against ground truth


@dataclass
class PredictedObject:
    object_id: str
    class_name: str
    parts: list[tuple[int, OccupancyGrid]]  # (part type, mask)
    confidence: float = 1.0


def score_object(pred: PredictedObject, gt_parts: Sequence[tuple[int, OccupancyGrid]],
                 scan: OccupancyGrid | None = None, mode: str = "completion") -> list[PartScore]:
    """Per-type Hungarian matching (max IoU) of predicted parts to ground-truth parts.

    Unmatched ground truth scores IoU 0 and CD sqrt(3); extra predictions are
    not scored. In segmentation mode both sides are restricted to the scan and
    ground-truth parts left empty are skipped.
    """
    if mode not in ("completion", "segmentation"):
        raise ValueError(f"score_object mode must be completion or segmentation, got {mode!r}")
    pred_parts = list(pred.parts)
    gts = list(gt_parts)
    if mode == "segmentation":
        if scan is None:
            raise ValueError("segmentation mode needs the scan")
        pred_parts = [(t, mask_to_visible(m, scan)) for t, m in pred_parts]
        gts = [(t, mask_to_visible(m, scan)) for t, m in gts]
        gts = [(t, m) for t, m in gts if m.count() > 0]
    out = []
    for t in sorted({t for t, _ in gts}):
        g = [m for tt, m in gts if tt == t]
        p = [m for tt, m in pred_parts if tt == t]
        ious = np.array([[part_iou(a, b) for a in p] for b in g]).reshape(len(g), len(p))
        matched = {}
        if p:
            rows, cols = linear_sum_assignment(-ious)
            matched = dict(zip(rows.tolist(), cols.tolist()))
        for i, gm in enumerate(g):
            if i in matched:
                pm = p[matched[i]]
                out.append(PartScore(pred.object_id, pred.class_name, t, float(ious[i, matched[i]]), chamfer(pm, gm)))
            else:
                out.append(PartScore(pred.object_id, pred.class_name, t, 0.0, EMPTY_CHAMFER))
    return out


def evaluate(predictions: Sequence[PredictedObject], ground_truth: dict, taxonomy: Taxonomy | None = None,
             mode: str = "completion") -> EvalReport:
    """``ground_truth`` maps object id to (class, [(type, mask)], scan)."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    by_id = {p.object_id: p for p in predictions}
    scores = []
    dets, tgts = [], []
    for oid in sorted(ground_truth):
        cls, parts, scan = ground_truth[oid]
        r = scan.resolution if scan is not None else parts[0][1].resolution
        pred = by_id.get(oid, PredictedObject(oid, cls, [], 0.0))
        if mode == "instance":
            gt_u = instance_union([m for _, m in parts], resolution=r)
            pr_u = instance_union([m for _, m in pred.parts], resolution=r)
            scores.append(PartScore(oid, cls, -1, part_iou(pr_u, gt_u), chamfer(pr_u, gt_u)))
            tgts.append(Target(gt_u, cls, oid))
            if pred.parts:
                dets.append(Detection(pr_u, pred.confidence, pred.class_name, oid))
        else:
            scores.extend(score_object(pred, parts, scan, mode))
    report = aggregate(scores, taxonomy, mode)
    if mode == "instance":
        report.map25 = map_at_25(dets, tgts)
    return report

"""Miss-rate evaluation: per-image matching, FPPI curves, LAMR and shift sweeps."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .geometry import BoundingBox, ScoredBox, boxes_to_array, enclosing_box, iou_matrix
from .homography import translation_homography, warp_boxes
from .io.records import GtRecord, ModalityDetections, PairedDetections, read_detections, read_gt
from .pairing import PersonGroup

MODALITIES = ("rgb", "thermal")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    fppi_min: float = 1e-2
    fppi_max: float = 1.0
    n_ref_points: int = 9
    mr_floor: float = 1e-4
    min_height: float | None = None

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if not 0.0 < self.fppi_min < self.fppi_max:
            raise ValueError(f"bad FPPI range [{self.fppi_min}, {self.fppi_max}]")
        if self.n_ref_points < 2:
            raise ValueError("need at least 2 reference points")
        if not 0.0 < self.mr_floor <= 1.0:
            raise ValueError(f"mr_floor must be in (0, 1], got {self.mr_floor}")

    def reference_points(self) -> np.ndarray:
        return np.logspace(math.log10(self.fppi_min), math.log10(self.fppi_max), self.n_ref_points)


@dataclass
class MatchResult:
    """One image: detection scores, TP flags in input order, and GT count."""

    scores: np.ndarray
    tp: np.ndarray
    n_gt: int

    @property
    def n_missed(self) -> int:
        return self.n_gt - int(self.tp.sum())


@dataclass
class EvalCurve:
    points: list[tuple[float, float]]
    lamr: float
    mr_floor: float
    n_images: int = 0
    n_gt: int = 0


def match_image(dets: Sequence[ScoredBox], gts: Sequence[BoundingBox],
                iou_threshold: float = 0.5) -> MatchResult:
    """Greedy Caltech-style matching.

    Detections are visited by descending score (ties: lower index first);
    each takes the unmatched GT of highest IoU (ties: lower GT index) if that
    IoU reaches the threshold.
    """
    scores = np.array([d.score for d in dets], dtype=np.float64)
    tp = np.zeros(len(dets), dtype=bool)
    if dets and gts:
        ious = iou_matrix(boxes_to_array([d.box for d in dets]), boxes_to_array(list(gts)))
        free = np.ones(len(gts), dtype=bool)
        for i in sorted(range(len(dets)), key=lambda i: (-scores[i], i)):
            cand = np.where(free, ious[i], -1.0)
            g = int(np.argmax(cand))
            if cand[g] >= iou_threshold:
                tp[i] = True
                free[g] = False
    return MatchResult(scores, tp, len(gts))


def _log_mean(values: Sequence[float]) -> float:
    # anchored on the first value so a constant curve returns that value exactly
    logs = [math.log(v) for v in values]
    return math.exp(logs[0] + math.fsum(x - logs[0] for x in logs) / len(logs))


def build_curve(results: Iterable[MatchResult], n_images: int,
                cfg: EvalConfig = EvalConfig()) -> EvalCurve:
    """Sweep every distinct score as threshold and compute the log-average miss rate.

    At each reference FPPI the miss rate of the largest achieved FPPI not
    exceeding it is used; if the curve starts above the reference, the
    highest miss rate observed is used instead.
    """
    if n_images < 1:
        raise ValueError("need at least one image")
    results = list(results)
    n_gt = sum(r.n_gt for r in results)
    if n_gt == 0:
        raise ValueError("no positives to evaluate")
    scores = np.concatenate([r.scores for r in results]) if results else np.zeros(0)
    tp = np.concatenate([r.tp for r in results]) if results else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True]) if len(scores) else []
    points = [(float(cum_fp[e]) / n_images, float(n_gt - cum_tp[e]) / n_gt) for e in ends]
    if not points:
        points = [(0.0, 1.0)]

    fppi = np.array([p[0] for p in points])
    mr = np.array([p[1] for p in points])
    refs = []
    for ref in cfg.reference_points():
        below = np.flatnonzero(fppi <= ref)
        m = mr[below[-1]] if len(below) else mr.max()
        refs.append(max(float(m), cfg.mr_floor))
    return EvalCurve(points, _log_mean(refs), cfg.mr_floor, n_images, n_gt)


def filter_gt(gts: Sequence[BoundingBox], cfg: EvalConfig) -> list[BoundingBox]:
    if cfg.min_height is None:
        return list(gts)
    return [g for g in gts if g.height >= cfg.min_height]


def _select_gt(groups, modality: str) -> list[BoundingBox]:
    if modality == "enclosing":
        return [enclosing_box(*(b for b in (g.rgb_box, g.t_box) if b is not None))
                if g.paired else (g.rgb_box or g.t_box) for g in groups]
    return [b for b in (g.side(modality) for g in groups) if b is not None]


def _select_dets(record, modality: str) -> list[ScoredBox]:
    if isinstance(record, PairedDetections):
        out = []
        for p in record.pairs:
            if modality == "enclosing":
                score = max(s.score for s in (p.rgb, p.thermal) if s is not None)
                out.append(ScoredBox(record.enclosing.get(p.anchor_id, p.enclosing()), score))
            elif p.side(modality) is not None:
                out.append(p.side(modality))
        return out
    if isinstance(record, ModalityDetections):
        return list(record.boxes) if record.modality == modality else []
    raise TypeError(f"unsupported detection record {type(record).__name__}")


def evaluate_modality(dets, gt, modality: str, cfg: EvalConfig = EvalConfig(),
                      image_ids: Iterable[str] | None = None) -> EvalCurve:
    """Score one modality of paired or per-modality detections against GT groups.

    ``dets`` and ``gt`` are JSONL paths or iterables of parsed records.
    ``modality="enclosing"`` scores the pairs' enclosing boxes against the
    enclosing box of each GT group. ``image_ids`` restricts evaluation to a
    subset such as a day or night split.
    """
    if modality not in MODALITIES + ("enclosing",):
        raise ValueError(f"unknown modality {modality!r}")
    gt_records = read_gt(gt) if _is_path(gt) else list(gt)
    det_records = read_detections(dets) if _is_path(dets) else list(dets)
    keep = None if image_ids is None else set(image_ids)
    gt_by_id = {r.image_id: r for r in gt_records if keep is None or r.image_id in keep}
    unknown = sorted({r.image_id for r in det_records} - {r.image_id for r in gt_records})
    if unknown:
        raise ValueError(f"detections for unknown image_id(s): {', '.join(unknown)}")
    det_by_id: dict[str, list[ScoredBox]] = {i: [] for i in gt_by_id}
    for r in det_records:
        if r.image_id in det_by_id:
            det_by_id[r.image_id].extend(_select_dets(r, modality))
    results = [match_image(det_by_id[i], filter_gt(_select_gt(gt_by_id[i].groups, modality), cfg),
                           cfg.iou_threshold)
               for i in gt_by_id]
    return build_curve(results, len(gt_by_id), cfg)


def _is_path(x) -> bool:
    return isinstance(x, (str, os.PathLike))


@dataclass(frozen=True)
class ShiftSweepConfig:
    directions: tuple[int, ...] = (0, 45, 90, 135)
    levels: tuple[int, ...] = tuple(range(-10, 11))
    exclude_zero: bool = False
    modality: str = "thermal"
    max_level: int = 10

    def __post_init__(self):
        bad = [lv for lv in self.levels if abs(lv) > self.max_level]
        if bad:
            raise ValueError(f"shift levels {bad} exceed the bound {self.max_level}")

    def rho_levels(self) -> list[int]:
        return [lv for lv in self.levels if not (self.exclude_zero and lv == 0)]


@dataclass
class SweepResult:
    mr: dict[tuple[int, int], float] = field(default_factory=dict)
    rho: dict[int, float] = field(default_factory=dict)


def shift_vector(direction: float, level: int) -> tuple[int, int]:
    theta = math.radians(direction)
    return (int(round(level * math.cos(theta))), int(round(level * math.sin(theta))))


def shift_gt(gt_records, dx: int, dy: int, sizes: Mapping[str, tuple[int, int]] | None = None,
             modality: str = "thermal"):
    """Translate one modality's GT; boxes leaving the frame are clipped or dropped.

    ``sizes`` maps image_id to ``(width, height)``; without it boxes are only
    translated. A zero shift returns the records untouched.
    """
    if dx == 0 and dy == 0:
        return list(gt_records)
    lam = translation_homography(dx, dy)
    out = []
    for rec in gt_records:
        if sizes is None:
            w, h = math.inf, math.inf
        elif rec.image_id in sizes:
            w, h = sizes[rec.image_id]
        else:
            raise ValueError(f"no image size for {rec.image_id!r}")
        groups = []
        for g in rec.groups:
            box = g.side(modality)
            if box is not None:
                box = warp_boxes([box], lam, w, h)[0]
            rgb = box if modality == "rgb" else g.rgb_box
            t = box if modality == "thermal" else g.t_box
            if rgb is not None or t is not None:
                groups.append(PersonGroup(g.person_id, rgb, t))
        out.append(GtRecord(rec.image_id, groups))
    return out


def shift_sweep(gt, detections_for: Callable[[int, int], object], sweep: ShiftSweepConfig = ShiftSweepConfig(),
                cfg: EvalConfig = EvalConfig(), sizes: Mapping[str, tuple[int, int]] | None = None) -> SweepResult:
    """Miss rate per (direction, level) on shifted GT, and the per-direction mean.

    ``detections_for(direction, level)`` returns the detections made on the
    correspondingly shifted images (path or records).
    """
    gt_records = read_gt(gt) if _is_path(gt) else list(gt)
    result = SweepResult()
    for d in sweep.directions:
        for lv in sweep.levels:
            dx, dy = shift_vector(d, lv)
            shifted = shift_gt(gt_records, dx, dy, sizes, sweep.modality)
            curve = evaluate_modality(detections_for(d, lv), shifted, sweep.modality, cfg)
            result.mr[(d, lv)] = curve.lamr
        vals = [result.mr[(d, lv)] for lv in sweep.rho_levels()]
        result.rho[d] = math.fsum(vals) / len(vals)
    return result

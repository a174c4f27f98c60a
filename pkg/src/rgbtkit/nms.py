"""Greedy, decoupled and pair-wise non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .geometry import BoundingBox, ScoredBox, boxes_to_array, enclosing_box, iou_matrix


@dataclass(frozen=True)
class DetectionPair:
    """Predictions of one anchor in both modalities; a side may be missing."""

    anchor_id: int
    rgb: ScoredBox | None = None
    thermal: ScoredBox | None = None

    def __post_init__(self):
        if self.rgb is None and self.thermal is None:
            raise ValueError(f"pair {self.anchor_id} has neither an rgb nor a thermal box")

    def side(self, modality: str) -> ScoredBox | None:
        if modality == "rgb":
            return self.rgb
        if modality == "thermal":
            return self.thermal
        raise ValueError(f"unknown modality {modality!r}")

    def enclosing(self) -> BoundingBox:
        present = [s.box for s in (self.rgb, self.thermal) if s is not None]
        return enclosing_box(present[0], present[-1])


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = 0.65
    tau: float = 0.45
    score_floor: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")


def greedy_nms(dets: Sequence[ScoredBox], iou_threshold: float) -> list[int]:
    """Indices of kept boxes, highest score first (ties: lower index first).

    A box survives iff its IoU with every already kept box is below the
    threshold.
    """
    n = len(dets)
    if n == 0:
        return []
    order = sorted(range(n), key=lambda i: (-dets[i].score, i))
    ious = iou_matrix(boxes_to_array([d.box for d in dets]),
                      boxes_to_array([d.box for d in dets]))
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] >= iou_threshold
    return keep


def decoupled_nms(pairs: Sequence[DetectionPair], cfg: NmsConfig = NmsConfig()):
    """Independent greedy NMS per modality; returns ``(rgb_kept, thermal_kept)``."""
    out = []
    for modality in ("rgb", "thermal"):
        dets = [p.side(modality) for p in pairs]
        dets = [d for d in dets if d is not None and d.score >= cfg.score_floor]
        out.append([dets[i] for i in greedy_nms(dets, cfg.iou_threshold)])
    return out[0], out[1]


def gate(x: float, tau: float) -> float:
    return 0.0 if x < tau else x


def fusion_weights(mu_rgb: float, mu_t: float, tau: float) -> tuple[float, float]:
    f_rgb, f_t = gate(mu_rgb, tau), gate(mu_t, tau)
    total = f_rgb + f_t
    if total <= 0.0:
        raise ValueError("ungated empty group")
    return f_rgb / total, f_t / total


def fuse_group(p: DetectionPair, tau: float) -> ScoredBox:
    """Score-weighted group box; a gated-out or missing side gets zero weight."""
    mu_rgb = p.rgb.score if p.rgb is not None else 0.0
    mu_t = p.thermal.score if p.thermal is not None else 0.0
    alpha, beta = fusion_weights(mu_rgb, mu_t, tau)
    if beta == 0.0:
        box = p.rgb.box
    elif alpha == 0.0:
        box = p.thermal.box
    else:
        a, b = p.rgb.box, p.thermal.box
        box = BoundingBox(alpha * a.x1 + beta * b.x1, alpha * a.y1 + beta * b.y1,
                          alpha * a.x2 + beta * b.x2, alpha * a.y2 + beta * b.y2)
    return ScoredBox(box, max(mu_rgb, mu_t))


def pairwise_nms(pairs: Sequence[DetectionPair], cfg: NmsConfig = NmsConfig()) -> list[DetectionPair]:
    """Suppress anchors as rgb/thermal groups so survivors keep one identity.

    Groups with no side passing the ``tau`` gate are dropped, the rest are
    suppressed on their fused box, and inside each survivor a side scoring
    below ``tau`` is removed.
    """
    def gated(s):
        return gate(s.score, cfg.tau) if s is not None else 0.0

    live = [p for p in pairs if gated(p.rgb) + gated(p.thermal) > 0]
    fused = [fuse_group(p, cfg.tau) for p in live]
    out = []
    for i in greedy_nms(fused, cfg.iou_threshold):
        p = live[i]
        rgb = p.rgb if p.rgb is not None and p.rgb.score >= cfg.tau else None
        thermal = p.thermal if p.thermal is not None and p.thermal.score >= cfg.tau else None
        out.append(replace(p, rgb=rgb, thermal=thermal))
    return out

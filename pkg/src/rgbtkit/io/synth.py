"""Deterministic synthetic RGB-T scenes with planted detections.

Pedestrians are rectangles with a 0.41 aspect ratio. The thermal view is the
RGB view moved by a fixed translation or by a per-image corner-jitter
homography. Detections are noisy copies of the GT (true positives) plus
boxes placed away from every pedestrian (false positives), so each
detection's TP/FP status is known by construction and written to a sidecar.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from ..geometry import BoundingBox, ScoredBox, clip, iou, translate
from ..homography import jitter_homography, jitter_rng, sample_jitter, warp_box
from ..nms import DetectionPair
from ..pairing import PersonGroup
from .formats import write_pnm
from .records import GtRecord, ManifestEntry, PairedDetections, canonical, write_jsonl

ASPECT = 0.41


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 100
    n_persons: int = 5
    shift_model: str = "translation"
    shift: tuple[float, float] = (5.0, 0.0)
    alpha: float = 10.0
    miss_rate: float = 0.0
    fp_per_image: float = 0.0
    unpaired_rate: float = 0.0
    box_noise: float = 0.02
    seed: int = 0
    width: int = 640
    height: int = 512
    min_height: int = 40
    max_height: int = 120

    def __post_init__(self):
        if self.n_images < 1 or self.n_persons < 0:
            raise ValueError("counts must be positive")
        if self.shift_model not in ("translation", "homography"):
            raise ValueError(f"unknown shift model {self.shift_model!r}")
        for name in ("miss_rate", "unpaired_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.fp_per_image < 0:
            raise ValueError("fp_per_image must be non-negative")
        if not 0.0 <= self.box_noise <= 0.1:
            raise ValueError("box_noise must be in [0, 0.1]")


@dataclass
class Fixture:
    config: SynthConfig
    manifest: list[ManifestEntry] = field(default_factory=list)
    gt: list[GtRecord] = field(default_factory=list)
    detections: list[PairedDetections] = field(default_factory=list)
    labels: list[dict] = field(default_factory=list)


def _place(rng, existing, cfg: SynthConfig, margin=(0.0, 0.0), tries=200) -> BoundingBox | None:
    """Random non-overlapping pedestrian that stays in frame when moved by ``margin``."""
    dx, dy = margin
    lo_x, lo_y = int(np.ceil(max(0.0, -dx))), int(np.ceil(max(0.0, -dy)))
    for _ in range(tries):
        h = int(rng.integers(cfg.min_height, cfg.max_height + 1))
        w = max(1, int(round(ASPECT * h)))
        hi_x = int(np.floor(cfg.width - w - max(0.0, dx)))
        hi_y = int(np.floor(cfg.height - h - max(0.0, dy)))
        if hi_x < lo_x or hi_y < lo_y:
            continue
        x = int(rng.integers(lo_x, hi_x + 1))
        y = int(rng.integers(lo_y, hi_y + 1))
        box = BoundingBox(x, y, x + w, y + h)
        if all(iou(box, e) == 0.0 for e in existing):
            return box
    return None


def _noisy(rng, box: BoundingBox, sigma: float) -> BoundingBox:
    # bounded noise keeps a planted TP above any IoU threshold <= 0.5
    while True:
        w, h = box.width, box.height
        d = np.clip(rng.normal(0.0, sigma, 4), -2 * sigma, 2 * sigma) * np.array([w, h, w, h])
        out = BoundingBox(box.x1 + d[0], box.y1 + d[1], max(box.x1 + d[0], box.x2 + d[2]),
                          max(box.y1 + d[1], box.y2 + d[3]))
        if iou(out, box) >= 0.6:
            return out


def synth_fixture(cfg: SynthConfig = SynthConfig()) -> Fixture:
    fx = Fixture(cfg)
    total = cfg.n_images * cfg.n_persons
    top = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    missed = set(top.choice(total, size=int(round(cfg.miss_rate * total)), replace=False).tolist()) \
        if total else set()
    n_fp = int(round(cfg.fp_per_image * cfg.n_images))
    fp_counts = np.bincount(top.integers(0, cfg.n_images, size=n_fp), minlength=cfg.n_images)

    for idx in range(cfg.n_images):
        image_id = f"{idx:06d}"
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(idx, 1)))
        if cfg.shift_model == "translation":
            def to_thermal(b, dx=cfg.shift[0], dy=cfg.shift[1]):
                return clip(translate(b, dx, dy), cfg.width, cfg.height)
        else:
            lam = jitter_homography(cfg.width, cfg.height, sample_jitter(cfg.alpha, cfg.seed, idx))

            def to_thermal(b, lam=lam):
                return clip(warp_box(b, lam), cfg.width, cfg.height)

        margin = cfg.shift if cfg.shift_model == "translation" else (0.0, 0.0)
        rgb_boxes: list[BoundingBox] = []
        for _ in range(cfg.n_persons):
            b = _place(rng, rgb_boxes, cfg, margin)
            if b is not None:
                rgb_boxes.append(b)
        groups = []
        for pid, b in enumerate(rgb_boxes):
            rgb, t = b, to_thermal(b)
            if rng.random() < cfg.unpaired_rate:
                if rng.random() < 0.5:
                    rgb = None
                else:
                    t = None
            if rgb is None and t is None:
                rgb = b
            groups.append(PersonGroup(pid, rgb, t))

        pairs, labels, misses = [], [], []
        for g in groups:
            if idx * cfg.n_persons + g.person_id in missed:
                misses.append(g.person_id)
                continue
            score = float(rng.uniform(0.5, 1.0))
            rgb = None if g.rgb_box is None else ScoredBox(_noisy(rng, g.rgb_box, cfg.box_noise), score)
            t = None if g.t_box is None else ScoredBox(
                _noisy(rng, g.t_box, cfg.box_noise), float(np.clip(score + rng.normal(0, 0.02), 0, 1)))
            aid = len(pairs)
            pairs.append(DetectionPair(aid, rgb, t))
            labels.append({"anchor_id": aid, "rgb": None if rgb is None else "tp",
                           "thermal": None if t is None else "tp", "person_id": g.person_id})

        occupied = [b for g in groups for b in (g.rgb_box, g.t_box) if b is not None]
        for _ in range(int(fp_counts[idx])):
            b = _place(rng, occupied, cfg)
            if b is None:
                continue
            t = to_thermal(b)
            if t is not None and any(iou(t, o) > 0 for o in occupied):
                t = None
            score = float(rng.uniform(0.05, 0.6))
            aid = len(pairs)
            pairs.append(DetectionPair(aid, ScoredBox(b, score),
                                       None if t is None else ScoredBox(t, score)))
            labels.append({"anchor_id": aid, "rgb": "fp", "thermal": None if t is None else "fp",
                           "person_id": None})
            occupied += [b] + ([t] if t is not None else [])

        fx.manifest.append(ManifestEntry(image_id, f"rgb/{image_id}.ppm", f"thermal/{image_id}.pgm",
                                         "day" if idx % 2 == 0 else "night", cfg.width, cfg.height))
        fx.gt.append(GtRecord(image_id, groups))
        fx.detections.append(PairedDetections(image_id, pairs))
        fx.labels.append({"image_id": image_id, "labels": labels, "missed_person_ids": misses})
    return fx


def render(fx: Fixture, idx: int) -> tuple[np.ndarray, np.ndarray]:
    """RGB ``(H, W, 3)`` and thermal ``(H, W)`` uint8 images of one scene."""
    cfg = fx.config
    rng = jitter_rng(cfg.seed, idx)
    rgb = np.full((cfg.height, cfg.width, 3), 60, dtype=np.uint8)
    rgb += rng.integers(0, 20, size=rgb.shape, dtype=np.uint8)
    thermal = np.full((cfg.height, cfg.width), 30, dtype=np.uint8)
    for g in fx.gt[idx].groups:
        if g.rgb_box is not None:
            b = g.rgb_box
            rgb[int(b.y1):int(np.ceil(b.y2)), int(b.x1):int(np.ceil(b.x2))] = (180, 140, 120)
        if g.t_box is not None:
            b = g.t_box
            thermal[int(b.y1):int(np.ceil(b.y2)), int(b.x1):int(np.ceil(b.x2))] = 220
    return rgb, thermal


def write_fixture(fx: Fixture, out_dir, images: bool = False):
    """Write manifest, GT, detections and the label sidecar as JSONL."""
    os.makedirs(out_dir, exist_ok=True)
    write_jsonl(os.path.join(out_dir, "manifest.jsonl"), fx.manifest)
    write_jsonl(os.path.join(out_dir, "gt.jsonl"), fx.gt)
    write_jsonl(os.path.join(out_dir, "detections.jsonl"), fx.detections)
    with open(os.path.join(out_dir, "labels.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        for rec in fx.labels:
            fh.write(canonical(rec) + "\n")
    if images:
        os.makedirs(os.path.join(out_dir, "rgb"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "thermal"), exist_ok=True)
        for idx, entry in enumerate(fx.manifest):
            rgb, thermal = render(fx, idx)
            write_pnm(os.path.join(out_dir, entry.rgb_path), rgb)
            write_pnm(os.path.join(out_dir, entry.thermal_path), thermal)

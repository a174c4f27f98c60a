"""Hungarian pairing of per-modality annotations into pedestrian groups."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geometry import BoundingBox, center_distance, iou

COSTS = ("center_distance", "one_minus_iou")


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of ``min(n, m)`` rows/columns.

    Shortest augmenting paths with dual potentials, O(n² m). Returns
    ``(row, col)`` pairs sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    n, m = cost.shape
    if n == 0 or m == 0:
        return []
    if n > m:
        return sorted((r, c) for c, r in hungarian(cost.T))

    # 1-based arrays; column 0 is the virtual start of each augmenting path
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for row in range(1, n + 1):
        owner[0] = row
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    return sorted((int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j])


def assignment_cost(cost, assignment) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[r, c] for r, c in sorted(assignment)))


@dataclass(frozen=True)
class PersonGroup:
    person_id: int
    rgb_box: BoundingBox | None = None
    t_box: BoundingBox | None = None

    def __post_init__(self):
        if self.rgb_box is None and self.t_box is None:
            raise ValueError(f"group {self.person_id} has no boxes")

    @property
    def paired(self) -> bool:
        return self.rgb_box is not None and self.t_box is not None

    def side(self, modality: str) -> BoundingBox | None:
        if modality == "rgb":
            return self.rgb_box
        if modality == "thermal":
            return self.t_box
        raise ValueError(f"unknown modality {modality!r}")


@dataclass(frozen=True)
class PairingConfig:
    cost: str = "center_distance"
    gate_distance: float = 50.0
    gate_iou: float = 0.1

    def __post_init__(self):
        if self.cost not in COSTS:
            raise ValueError(f"cost must be one of {COSTS}, got {self.cost!r}")
        if self.gate_distance < 0 or self.gate_iou < 0:
            raise ValueError("gates must be non-negative")


def pairing_cost(rgb: Sequence[BoundingBox], t: Sequence[BoundingBox],
                 cfg: PairingConfig) -> np.ndarray:
    fn = center_distance if cfg.cost == "center_distance" else (lambda a, b: 1.0 - iou(a, b))
    return np.array([[fn(a, b) for b in t] for a in rgb], dtype=np.float64).reshape(len(rgb), len(t))


def pair_annotations(rgb: Sequence[BoundingBox], t: Sequence[BoundingBox],
                     cfg: PairingConfig = PairingConfig()) -> list[PersonGroup]:
    """Group one image's rgb and thermal boxes; gated-out matches stay unpaired."""
    matches = {}
    for r, c in hungarian(pairing_cost(rgb, t, cfg)):
        a, b = rgb[r], t[c]
        if cfg.cost == "center_distance":
            ok = center_distance(a, b) <= cfg.gate_distance
        else:
            ok = iou(a, b) >= cfg.gate_iou
        if ok:
            matches[r] = c
    groups = []
    for r, box in enumerate(rgb):
        c = matches.get(r)
        groups.append(PersonGroup(len(groups), box, t[c] if c is not None else None))
    taken = set(matches.values())
    for c, box in enumerate(t):
        if c not in taken:
            groups.append(PersonGroup(len(groups), None, box))
    return groups


def mean_pair_shift(groups: Iterable[PersonGroup]) -> float:
    """Mean center distance over paired groups."""
    shifts = [center_distance(g.rgb_box, g.t_box) for g in groups if g.paired]
    if not shifts:
        raise ValueError("no paired groups to measure")
    return math.fsum(shifts) / len(shifts)

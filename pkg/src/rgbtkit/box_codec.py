"""Transforms between head parameterizations and pixel-space boxes.

Three codecs live here:

* the anchor-grid codec used by the proposal branch (normalized center
  offset plus log size relative to a grid cell),
* the residual codec used by the two refinement branches, which moves the
  corners of a proposal by fractions of its size,
* the offset codec that turns sigmoid-normalized deformable offsets into
  sampling offsets confined to the proposal.

Cell indices follow the ``(i, j)`` = (column, row) convention throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import BoundingBox

DEFAULT_STRIDES = {3: 8, 4: 16, 5: 32}


@dataclass(frozen=True)
class GridSpec:
    stride: float
    width: int
    height: int
    stage: int = 3

    def __post_init__(self):
        if not self.stride > 0:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")

    @classmethod
    def for_image(cls, image_width: int, image_height: int, stage: int = 3,
                  strides: dict[int, int] = DEFAULT_STRIDES) -> "GridSpec":
        s = strides[stage]
        return cls(s, math.ceil(image_width / s), math.ceil(image_height / s), stage)

    def check_cell(self, cell: tuple[int, int]):
        i, j = cell
        if not (0 <= i < self.width and 0 <= j < self.height):
            raise ValueError(f"cell {cell} outside {self.width}x{self.height} grid")


@dataclass(frozen=True)
class EncodedBox:
    x: float
    y: float
    w: float
    h: float
    cell: tuple[int, int]

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class ResidualDelta:
    d1: float
    d2: float
    d3: float
    d4: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.d1, self.d2, self.d3, self.d4)


@dataclass(frozen=True)
class KernelGrid:
    """The K x K lattice of primary offsets, row-major (q_y outer, q_x inner)."""

    kernel_size: int = 5
    offsets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        k = self.kernel_size
        if k < 1 or k % 2 == 0:
            raise ValueError(f"kernel size must be a positive odd integer, got {k}")
        r = (k - 1) // 2
        qy, qx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
        object.__setattr__(self, "offsets",
                           np.stack([qx.ravel(), qy.ravel()], axis=1).astype(np.float64))

    @property
    def taps(self) -> int:
        return self.kernel_size ** 2


def _finite(*values):
    if not all(math.isfinite(v) for v in values):
        raise ValueError(f"non-finite input {values}")


def decode_anchor(e: EncodedBox, g: GridSpec) -> BoundingBox:
    _finite(*e.as_tuple())
    g.check_cell(e.cell)
    i, j = e.cell
    s = g.stride
    cx = s * e.x + i * s
    cy = s * e.y + j * s
    w = s * math.exp(e.w)
    h = s * math.exp(e.h)
    return BoundingBox.from_cxcywh(cx, cy, w, h)


def encode_anchor(b: BoundingBox, g: GridSpec, cell: tuple[int, int]) -> EncodedBox:
    cx, cy, w, h = b.to_cxcywh()
    if w <= 0 or h <= 0:
        raise ValueError("degenerate box not encodable")
    g.check_cell(cell)
    i, j = cell
    s = g.stride
    return EncodedBox(cx / s - i, cy / s - j, math.log(w / s), math.log(h / s), tuple(cell))


def decode_residual(proposal: BoundingBox, d: ResidualDelta) -> BoundingBox:
    """Move the proposal corners by fractions of its width and height.

    The output is not validated beyond the corner ordering enforced by
    :class:`BoundingBox`; a residual that inverts the box raises there.
    """
    x, y, w, h = proposal.to_xywh()
    return BoundingBox(x + d.d1 * w, y + d.d2 * h,
                       (x + w) + d.d3 * w, (y + h) + d.d4 * h)


def encode_residual(proposal: BoundingBox, target: BoundingBox) -> ResidualDelta:
    x, y, w, h = proposal.to_xywh()
    if w <= 0 or h <= 0:
        raise ValueError("degenerate proposal not encodable")
    return ResidualDelta((target.x1 - x) / w, (target.y1 - y) / h,
                         (target.x2 - (x + w)) / w, (target.y2 - (y + h)) / h)


def deform_center(cell: tuple[int, int]) -> tuple[float, float]:
    i, j = cell
    return (0.5 + i, 0.5 + j)


def decode_offsets(o, proposal: BoundingBox, g: GridSpec, cell: tuple[int, int],
                   k: KernelGrid = KernelGrid()) -> np.ndarray:
    """Decode one cell's normalized offsets into sampling offsets.

    ``o`` holds ``2 * K**2`` values in [0, 1], interleaved ``(x, y)`` per tap.
    The absolute sampling location of tap ``n`` in feature units is
    ``center + q_n + decoded_n`` and always falls inside the proposal.
    """
    o = np.asarray(o, dtype=np.float64)
    if o.shape != (2 * k.taps,):
        raise ValueError(f"expected {2 * k.taps} offsets, got shape {o.shape}")
    if np.any(o < 0) or np.any(o > 1) or not np.all(np.isfinite(o)):
        raise ValueError("offset not sigmoid-normalized")
    x, y, w, h = proposal.to_xywh()
    s = g.stride
    xc, yc = deform_center(cell)
    out = np.empty_like(o)
    out[0::2] = o[0::2] * (w / s) + (x / s - xc) - k.offsets[:, 0]
    out[1::2] = o[1::2] * (h / s) + (y / s - yc) - k.offsets[:, 1]
    return out


def decode_offset_field(o: np.ndarray, proposals: np.ndarray, stride: float,
                        kernel_size: int) -> np.ndarray:
    """Dense version of :func:`decode_offsets` over a whole feature map.

    ``o`` is ``(N, G * 2K², H, W)`` with values in [0, 1]; ``proposals`` is
    ``(N, 4, H, W)`` holding corner boxes in image pixels. Returns decoded
    offsets of the same shape as ``o``.
    """
    o = np.asarray(o, dtype=np.float64)
    proposals = np.asarray(proposals, dtype=np.float64)
    k = KernelGrid(kernel_size)
    n, ch, hgt, wid = o.shape
    if ch % (2 * k.taps):
        raise ValueError(f"offset channels {ch} not a multiple of {2 * k.taps}")
    if proposals.shape != (n, 4, hgt, wid):
        raise ValueError(f"proposal shape {proposals.shape} does not match offsets {o.shape}")
    if np.any(o < 0) or np.any(o > 1):
        raise ValueError("offset not sigmoid-normalized")
    groups = ch // (2 * k.taps)
    o = o.reshape(n, groups, k.taps, 2, hgt, wid)
    x1, y1, x2, y2 = (proposals[:, c][:, None, None] for c in range(4))
    xc = 0.5 + np.arange(wid)[None, None, None, :]
    yc = 0.5 + np.arange(hgt)[None, None, :, None]
    qx = k.offsets[:, 0][None, None, :, None, None]
    qy = k.offsets[:, 1][None, None, :, None, None]
    out = np.empty_like(o)
    out[:, :, :, 0] = o[:, :, :, 0] * ((x2 - x1) / stride) + (x1 / stride - xc) - qx
    out[:, :, :, 1] = o[:, :, :, 1] * ((y2 - y1) / stride) + (y1 / stride - yc) - qy
    return out.reshape(n, ch, hgt, wid)

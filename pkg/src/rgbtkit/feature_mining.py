"""Proposal-guided deformable feature mining (forward pass only).

Sampling convention: the decoded offset of tap ``(q_x, q_y)`` at output cell
``(i, j)`` is added to the regular convolution grid, so the sample is read at
lattice coordinate ``(i + q_x + dx, j + q_y + dy)``. In continuous feature
units, where cell ``i`` spans ``[i, i + 1)`` and has its center at ``i + 0.5``,
that is the location ``center + q + offset`` produced by the offset codec.
Zero offsets therefore reduce to an ordinary stride-1 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .box_codec import KernelGrid, decode_offset_field


@dataclass
class ConvWeights:
    """Kernel ``(out_channels, in_channels_per_group, K, K)`` plus bias."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"weight must be (O, C/g, K, K), got {self.weight.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.weight.shape[0])
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match "
                             f"{self.weight.shape[0]} output channels")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels_per_group(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


def sigmoid_map(raw):
    raw = np.asarray(raw, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -raw))


def bilinear_sample(f: np.ndarray, n: int, c: int, x: float, y: float) -> float:
    """Bilinear read of ``f[n, c]`` at lattice coordinate ``(x, y)``, zero padded."""
    return float(bilinear_gather(np.asarray(f)[n, c], np.array([x]), np.array([y]))[0])


def bilinear_gather(plane: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear samples of ``plane[..., H, W]`` at broadcastable ``x``, ``y``.

    Leading dimensions of ``plane`` are kept; the sample dimensions of ``x``
    and ``y`` are appended. Neighbors outside the plane contribute zero.
    """
    plane = np.asarray(plane, dtype=np.float64)
    hgt, wid = plane.shape[-2:]
    x, y = np.broadcast_arrays(np.asarray(x, dtype=np.float64),
                               np.asarray(y, dtype=np.float64))
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    lead = plane.shape[:-2]
    flat = plane.reshape(*lead, hgt * wid)
    out = np.zeros(lead + x.shape)
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < wid) & (yi >= 0) & (yi < hgt) & (wgt != 0)
        idx = np.where(valid, yi * wid + xi, 0)
        vals = np.take(flat, idx, axis=-1)
        out += np.where(valid, vals * wgt, 0.0)
    return out


def deform_conv_forward(f, decoded, w: ConvWeights) -> np.ndarray:
    """Deformable convolution over decoded offsets, stride 1, same-size output.

    ``f`` is ``(N, C, H, W)``; ``decoded`` is ``(N, G * 2K², H, W)`` with
    ``(x, y)`` interleaved per tap, taps row-major. Offset group ``g`` owns
    input channels ``[g*C/G, (g+1)*C/G)``. The convolution group count is
    inferred as ``C / in_channels_per_group``.
    """
    f = np.asarray(f, dtype=np.float64)
    decoded = np.asarray(decoded, dtype=np.float64)
    if f.ndim != 4:
        raise ValueError(f"features must be (N, C, H, W), got {f.shape}")
    n, c, hgt, wid = f.shape
    k = KernelGrid(w.kernel_size)
    if decoded.ndim != 4 or decoded.shape[0] != n or decoded.shape[2:] != (hgt, wid) \
            or decoded.shape[1] % (2 * k.taps):
        raise ValueError(f"offset shape {decoded.shape} incompatible with features {f.shape} "
                         f"and kernel {k.kernel_size}")
    groups = decoded.shape[1] // (2 * k.taps)
    if c % groups:
        raise ValueError(f"features {f.shape} channels not divisible by {groups} offset groups "
                         f"(offsets {decoded.shape})")
    cin = w.in_channels_per_group
    if c % cin or w.out_channels % (c // cin):
        raise ValueError(f"weight shape {w.weight.shape} incompatible with features {f.shape}")
    conv_groups = c // cin

    off = decoded.reshape(n, groups, k.taps, 2, hgt, wid)
    base_x = np.arange(wid)[None, None, :] + k.offsets[:, 0][:, None, None]
    base_y = np.arange(hgt)[None, :, None] + k.offsets[:, 1][:, None, None]
    cpg = c // groups
    cols = np.empty((n, c, k.taps, hgt, wid))
    for b in range(n):
        for g in range(groups):
            sx = base_x + off[b, g, :, 0]
            sy = base_y + off[b, g, :, 1]
            cols[b, g * cpg:(g + 1) * cpg] = bilinear_gather(f[b, g * cpg:(g + 1) * cpg], sx, sy)

    opg = w.out_channels // conv_groups
    wt = w.weight.reshape(w.out_channels, cin, k.taps)
    out = np.empty((n, w.out_channels, hgt, wid))
    for g in range(conv_groups):
        out[:, g * opg:(g + 1) * opg] = np.einsum(
            "ock,nckhw->nohw", wt[g * opg:(g + 1) * opg], cols[:, g * cin:(g + 1) * cin])
    out += w.bias[None, :, None, None]
    return out


def mine_features(f, raw_offsets, proposals, w: ConvWeights, stride: float) -> np.ndarray:
    """Sigmoid, offset decode against per-cell proposals, then deformable conv.

    ``raw_offsets`` are logits ``(N, G * 2K², H, W)``; ``proposals`` are corner
    boxes ``(N, 4, H, W)`` in input-image pixels.
    """
    o = sigmoid_map(raw_offsets)
    decoded = decode_offset_field(o, proposals, stride, w.kernel_size)
    return deform_conv_forward(f, decoded, w)

"""Bit-plane fixed-point representation of weight matrices.

A b-bit layer stores one binary plane per significance position (LSB first)
plus a real scale s and an integer zero point z = 2^(b-1). Code c in
[0, 2^b - 1] maps to the real value s / (2^b - 1) * (c - z), so the
representable range is [-s*z/(2^b-1), s*(2^b-1-z)/(2^b-1)].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

logger = logging.getLogger(__name__)

MAX_BITS = 8


class ScalePolicy(str, Enum):
    """Rule used to derive the per-layer scale from the weight range.

    MAX_ABS sets s to the largest absolute weight; the grid then covers
    roughly [-s/2, s/2) and anything larger clips. RANGE_COVERING stretches
    s by (2^b - 1) / 2^(b-1) so the lowest grid point lands exactly on
    -max|W| and no weight clips.
    """

    MAX_ABS = "max-abs"
    RANGE_COVERING = "range-covering"


def scale_for(max_abs: float, bit_width: int, policy: ScalePolicy) -> float:
    """Scale for a layer whose largest absolute weight is ``max_abs``.

    An all-zero layer would give scale 0; it gets the documented degenerate
    scale 1.0 instead.
    """
    if max_abs == 0.0:
        return 1.0
    if policy is ScalePolicy.MAX_ABS:
        return float(max_abs)
    return float(max_abs) * ((1 << bit_width) - 1) / (1 << (bit_width - 1))


def _packed_bytes(num_params: int) -> int:
    return (num_params + 7) // 8


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    """Immutable bit-plane store for one weight matrix.

    ``packed`` holds one row per plane, LSB plane first, each row the
    little-bit-order packing of the plane flattened row-major. This matches
    the checkpoint wire format byte for byte.
    """

    rows: int
    cols: int
    bit_width: int
    scale: float
    zero_point: int
    packed: np.ndarray

    def __post_init__(self):
        if not (1 <= self.bit_width <= MAX_BITS):
            raise ValueError(f"bit_width must be in [1, {MAX_BITS}], got {self.bit_width}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("layer shape must be at least 1x1")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if self.zero_point != 1 << (self.bit_width - 1):
            raise ValueError(
                f"zero_point must equal 2^(bit_width-1): got {self.zero_point} "
                f"for bit_width {self.bit_width}"
            )
        expected = (self.bit_width, _packed_bytes(self.num_params))
        if self.packed.dtype != np.uint8 or self.packed.shape != expected:
            raise ValueError(f"packed planes must be uint8 with shape {expected}")
        pad = 8 * expected[1] - self.num_params
        if pad and (self.packed[:, -1] >> (8 - pad)).any():
            raise ValueError("padding bits in the last packed byte must be zero")
        self.packed.flags.writeable = False

    @property
    def num_params(self) -> int:
        return self.rows * self.cols

    @property
    def step(self) -> float:
        """Width of one grid cell, s / (2^b - 1)."""
        return self.scale / ((1 << self.bit_width) - 1)

    @property
    def min_value(self) -> float:
        return -self.step * self.zero_point

    @property
    def max_value(self) -> float:
        return self.step * ((1 << self.bit_width) - 1 - self.zero_point)

    def planes(self) -> np.ndarray:
        """Unpacked planes, shape (bit_width, rows, cols), entries 0/1."""
        bits = np.unpackbits(self.packed, axis=1, count=self.num_params, bitorder="little")
        return bits.reshape(self.bit_width, self.rows, self.cols)

    def codes(self) -> np.ndarray:
        weights = (1 << np.arange(self.bit_width, dtype=np.int64))
        flat = weights @ self.planes().reshape(self.bit_width, -1).astype(np.int64)
        return flat.reshape(self.rows, self.cols)

    def values(self) -> np.ndarray:
        return self.step * (self.codes() - self.zero_point)

    @classmethod
    def from_planes(cls, planes: np.ndarray, scale: float) -> "QuantizedLayer":
        planes = np.asarray(planes)
        if planes.ndim != 3:
            raise ValueError("planes must have shape (bit_width, rows, cols)")
        if not np.isin(planes, (0, 1)).all():
            raise ValueError("plane entries must be exactly 0 or 1")
        b, rows, cols = planes.shape
        packed = np.packbits(planes.reshape(b, -1).astype(np.uint8), axis=1, bitorder="little")
        return cls(rows, cols, b, float(scale), 1 << (b - 1), packed)

    @classmethod
    def from_codes(cls, codes: np.ndarray, scale: float, bit_width: int) -> "QuantizedLayer":
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim != 2:
            raise ValueError("codes must be a 2-D matrix")
        if codes.min() < 0 or codes.max() > (1 << bit_width) - 1:
            raise ValueError(f"codes out of range for {bit_width}-bit layer")
        shifts = np.arange(bit_width, dtype=np.int64)[:, None, None]
        planes = ((codes[None, :, :] >> shifts) & 1).astype(np.uint8)
        return cls.from_planes(planes, scale)


def dequantize(layer: QuantizedLayer) -> np.ndarray:
    """Real-valued weights, s / (2^b - 1) * (code - z) per entry."""
    return layer.values()


def quantize(
    weights: np.ndarray,
    bit_width: int,
    policy: ScalePolicy = ScalePolicy.RANGE_COVERING,
) -> QuantizedLayer:
    """Map a real matrix onto the nearest codes of a fresh b-bit grid.

    Weights are clipped to the representable range first; rounding is to
    the nearest code with ties going to the larger code, so the round trip
    stays within half a grid step of the clipped input.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("weights must be a 2-D matrix")
    if not (1 <= bit_width <= MAX_BITS):
        raise ValueError(f"bit_width must be in [1, {MAX_BITS}]")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    scale = scale_for(float(np.abs(w).max()), bit_width, policy)
    n_max = (1 << bit_width) - 1
    z = 1 << (bit_width - 1)
    step = scale / n_max
    clipped = np.clip(w, -step * z, step * (n_max - z))
    codes = np.floor(clipped / step + z + 0.5).astype(np.int64)
    np.clip(codes, 0, n_max, out=codes)
    return QuantizedLayer.from_codes(codes, scale, bit_width)


def shift_add_matmul(activations: np.ndarray, layer: QuantizedLayer) -> np.ndarray:
    """Product of the layer's weights with activations, plane by plane.

    ``activations`` is (K, U) with K the layer's column count; the result is
    (C, U) and equals dequantize(layer) @ activations up to float round-off.
    Per-plane integer-weighted products are accumulated first, then the
    zero-point correction and scale are applied once.
    """
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != layer.cols:
        raise ValueError(
            f"activations must be ({layer.cols}, U), got {a.shape}"
        )
    planes = layer.planes().astype(np.float64)
    acc = np.zeros((layer.rows, a.shape[1]))
    for i in range(layer.bit_width):
        acc += float(1 << i) * (planes[i] @ a)
    return layer.step * (acc - layer.zero_point * a.sum(axis=0)[None, :])


@dataclass(frozen=True)
class DensityProfile:
    """Per-plane fraction of ones, kept as exact integer counts."""

    ones: tuple[int, ...]
    size: int

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(c / self.size for c in self.ones)


def plane_density(layer: QuantizedLayer) -> DensityProfile:
    counts = layer.planes().reshape(layer.bit_width, -1).sum(axis=1, dtype=np.int64)
    return DensityProfile(tuple(int(c) for c in counts), layer.num_params)


def prune_msbs(
    layer: QuantizedLayer,
    epsilon: float,
    policy: ScalePolicy = ScalePolicy.RANGE_COVERING,
) -> tuple[QuantizedLayer, int]:
    """Drop top planes whose density is at most ``epsilon``, floor 1 bit.

    The minority entries that carried ones in a dropped plane lose that
    contribution; the surviving values (still on the old grid) are then
    re-quantized onto the reduced grid so the new zero point 2^(b'-1) holds.
    Reinterpreting raw codes under the new zero point instead would shift
    every weight, so it is deliberately avoided.
    """
    if not (0.0 <= epsilon <= 1.0):
        raise ValueError("epsilon must lie in [0, 1]")
    densities = plane_density(layer).values
    width = layer.bit_width
    while width > 1 and densities[width - 1] <= epsilon:
        width -= 1
    if width == layer.bit_width:
        return layer, width
    kept = layer.planes()[:width].reshape(width, -1).astype(np.int64)
    codes = (1 << np.arange(width, dtype=np.int64)) @ kept
    survivors = layer.step * (codes.reshape(layer.rows, layer.cols) - layer.zero_point)
    return quantize(survivors, width, policy), width


def quantize_activations(tensor: np.ndarray, bits: int) -> np.ndarray:
    """Snap a non-negative activation tensor onto a 2^bits-level grid.

    The grid is unsigned, spanning [0, max|tensor|]; an all-zero tensor is
    returned unchanged since its scale would be zero.
    """
    if not (1 <= bits <= MAX_BITS):
        raise ValueError(f"bits must be in [1, {MAX_BITS}]")
    arr = np.asarray(tensor, dtype=np.float64)
    peak = np.abs(arr).max() if arr.size else 0.0
    if peak == 0.0:
        return arr
    levels = (1 << bits) - 1
    step = peak / levels
    return np.clip(np.rint(arr / step), 0, levels) * step

"""Straight-through gradients and fixed-point parameter updates.

The quantized forward pass is not differentiable in the binary planes, so
gradients are propagated as if the dequantization map were linear: plane i
receives s * 2^(i-1) / (2^b - 1) times the weight-space gradient. Updates
are snapped to powers of two so that the applied delta is always an integer
number of grid steps; sub-step remainders are applied stochastically as a
single minimum step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .quant import QuantizedLayer

logger = logging.getLogger(__name__)

# Mantissas from frexp live in [0.5, 1); those below sqrt(1/2) round the
# exponent down, the rest (ties included) round up.
_SQRT_HALF = math.sqrt(0.5)


def power_of_two(x: float) -> float:
    """Nearest power of two to a non-negative x, ties rounding up; 0 -> 0."""
    if x < 0:
        raise ValueError("power_of_two requires x >= 0")
    if x == 0:
        return 0.0
    m, e = math.frexp(x)
    return math.ldexp(1.0, e - (m < _SQRT_HALF))


def _nearest_pow2_exponent(x: np.ndarray) -> np.ndarray:
    """round(log2(x)) for strictly positive x, computed exactly via frexp."""
    m, e = np.frexp(x)
    return e - (m < _SQRT_HALF)


@dataclass
class PlaneGradient:
    """Per-plane real gradients, shape (bit_width, rows, cols)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("plane gradients must have shape (bit_width, rows, cols)")


@dataclass
class UpdateContext:
    """Per-layer optimizer state owned by a single client.

    The momentum buffer lives in full-precision weight space; only the
    snapped delta ever touches the fixed-point weights. The RNG stream is
    private to the owning client and feeds the sub-step Bernoulli draws.
    """

    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    momentum_buffer: np.ndarray | None = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


def ste_backward(grad_w: np.ndarray, layer: QuantizedLayer) -> PlaneGradient:
    """Spread a weight-space gradient over the binary planes.

    Plane i (1-based from the LSB) gets s * 2^(i-1) / (2^b - 1) times the
    incoming gradient, elementwise.
    """
    g = np.asarray(grad_w, dtype=np.float64)
    if g.shape != (layer.rows, layer.cols):
        raise ValueError(
            f"gradient shape {g.shape} does not match layer {(layer.rows, layer.cols)}"
        )
    factors = layer.step * np.exp2(np.arange(layer.bit_width, dtype=np.float64))
    return PlaneGradient(factors[:, None, None] * g[None, :, :])


def group_lasso(layer: QuantizedLayer) -> tuple[float, PlaneGradient]:
    """Sum of per-plane l2 norms and its subgradient.

    For a binary plane the norm is sqrt(popcount); the subgradient of an
    all-zero plane is taken to be zero.
    """
    planes = layer.planes().astype(np.float64)
    counts = planes.reshape(layer.bit_width, -1).sum(axis=1)
    norms = np.sqrt(counts)
    safe = np.where(norms > 0.0, norms, 1.0)
    return float(norms.sum()), PlaneGradient(planes / safe[:, None, None])


def plane_update_powers(plane_grads: PlaneGradient, lr: float) -> np.ndarray:
    """Power q_i of the snapped per-plane step, -inf where the gradient is 0.

    The significance factor 2^(i-1) that ste_backward bakes into plane i is
    divided out before snapping, so planes that share one weight-space
    gradient land on consecutive powers: q_{i+1} = q_i + 1 exactly. The
    exponent arithmetic uses frexp, making that identity hold bit-exactly.
    """
    mag = lr * np.abs(plane_grads.values)
    q = np.full(mag.shape, -np.inf)
    nz = mag > 0
    if nz.any():
        q[nz] = 1.0 + _nearest_pow2_exponent(mag[nz])
    return q


def fixed_point_delta(
    grad_w: np.ndarray,
    plane_grads: PlaneGradient,
    ctx: UpdateContext,
    layer: QuantizedLayer,
) -> np.ndarray:
    """Grid-aligned weight delta from snapped per-plane steps.

    Per entry, with q_i the per-plane powers and step the grid cell width:

    * if max(q) > b the delta saturates at one full range, -sign * s;
    * powers q_i >= 1 contribute 2^(q_i - 1) grid steps outright;
    * powers q_i <= 0 are below one step; their total p < 1 is applied as a
      single extra step with probability p (one Bernoulli draw per entry).

    The sign is taken from the significance-weighted combination of the
    plane gradients, which for pure straight-through gradients equals the
    sign of ``grad_w``; where that combination cancels exactly, ``grad_w``
    breaks the tie. With non-proportional plane gradients (regularizer
    terms added) the sub-step total can reach 1; whole steps are then
    carried into the integer part so the Bernoulli probability stays in
    [0, 1). The magnitude never exceeds s.
    """
    g = plane_grads.values
    b = layer.bit_width
    if g.shape != (b, layer.rows, layer.cols):
        raise ValueError(
            f"plane gradient shape {g.shape} does not match "
            f"{(b, layer.rows, layer.cols)}"
        )
    gw = np.asarray(grad_w, dtype=np.float64)
    if gw.shape != (layer.rows, layer.cols):
        raise ValueError("grad_w shape does not match the layer")

    q = plane_update_powers(plane_grads, ctx.lr)
    finite = np.isfinite(q)
    any_grad = finite.any(axis=0)
    max_q = np.where(finite, q, -np.inf).max(axis=0)
    clip_hit = any_grad & (max_q > b)

    significance = np.exp2(np.arange(b, dtype=np.float64))[:, None, None]
    nu = np.sign((significance * g).sum(axis=0))
    nu = np.where(nu == 0.0, np.sign(gw), nu)

    live = finite & ~clip_hit[None, :, :]
    whole = live & (q >= 1.0)
    frac = live & (q <= 0.0)
    steps = np.where(whole, np.exp2(np.where(whole, q, 1.0) - 1.0), 0.0).sum(axis=0)
    p = np.where(frac, np.exp2(np.where(frac, q, 0.0) - 1.0), 0.0).sum(axis=0)
    carry = np.floor(p)
    p = p - carry
    steps = steps + carry

    draw = ctx.rng.random(p.shape)
    steps = steps + (draw < p)
    cap = float((1 << b) - 1)
    steps = np.minimum(steps, cap)
    steps = np.where(clip_hit, cap, steps)
    return -nu * layer.step * steps


def apply_update(layer: QuantizedLayer, delta: np.ndarray) -> QuantizedLayer:
    """Add a grid-aligned delta, clipping into the representable range.

    ``delta`` must be an integer number of grid steps per entry; anything
    else is a contract violation. Scale and zero point are unchanged, the
    planes are refreshed from the new codes.
    """
    d = np.asarray(delta, dtype=np.float64)
    if d.shape != (layer.rows, layer.cols):
        raise ValueError("delta shape does not match the layer")
    ratio = d / layer.step
    k = np.rint(ratio)
    if np.abs(ratio - k).max() > 1e-6:
        raise ValueError("delta is not an integer number of grid steps")
    codes = layer.codes() + k.astype(np.int64)
    np.clip(codes, 0, (1 << layer.bit_width) - 1, out=codes)
    return QuantizedLayer.from_codes(codes, layer.scale, layer.bit_width)


def sgd_step(
    layer: QuantizedLayer,
    grad_w_task: np.ndarray,
    ctx: UpdateContext,
    lasso_coeff: float = 0.0,
) -> QuantizedLayer:
    """One momentum-SGD step on the fixed-point grid.

    Weight decay is added to the task gradient and momentum accumulated in
    full-precision weight space; the buffered gradient is spread over the
    planes, the (optionally weighted) group-Lasso subgradient is added
    there, and the combined plane gradients drive the snapped update.
    With lasso_coeff 0, momentum 0, and weight decay 0 this reduces to
    fixed_point_delta followed by apply_update on the task gradient alone.
    """
    if lasso_coeff < 0:
        raise ValueError("lasso_coeff must be non-negative")
    g = np.asarray(grad_w_task, dtype=np.float64)
    if ctx.weight_decay:
        g = g + ctx.weight_decay * layer.values()
    if ctx.momentum_buffer is None:
        ctx.momentum_buffer = np.zeros((layer.rows, layer.cols))
    ctx.momentum_buffer = ctx.momentum * ctx.momentum_buffer + g
    combined = ctx.momentum_buffer
    plane_g = ste_backward(combined, layer).values
    if lasso_coeff > 0.0:
        _, lasso = group_lasso(layer)
        plane_g = plane_g + lasso_coeff * lasso.values
    delta = fixed_point_delta(combined, PlaneGradient(plane_g), ctx, layer)
    return apply_update(layer, delta)

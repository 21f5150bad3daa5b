"""Motion models for mask propagation and the elastic flow synthesizer.

Three ways of moving a nucleus between neighbouring frames are supported:
a shift+scale transform fitted from second moments of two pixel sets, a
single translation taken as the mean of a dense flow over a region, and the
dense flow itself.  Elastic flows are produced from a coarse grid of random
control displacements upsampled with cubic convolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DimensionError,
    FlowField,
    _check_same_shape,
    sample_bilinear,
    sample_nearest,
    warp_image_backward,
)

# Peak gain of the cubic upsampler, declared as the flow's max_magnitude factor.
OVERSHOOT_BOUND = 1.5


@dataclass(frozen=True)
class SimilarityTransform:
    tx: float = 0.0
    ty: float = 0.0
    sx: float = 1.0
    sy: float = 1.0
    center: tuple = (0.0, 0.0)

    def __post_init__(self):
        vals = (self.tx, self.ty, self.sx, self.sy, *self.center)
        if not np.all(np.isfinite(vals)):
            raise ValueError("transform fields must be finite")
        if self.sx <= 0 or self.sy <= 0:
            raise ValueError("scale factors must be positive")


@dataclass(frozen=True)
class DeformationSpec:
    control_points: int = 10
    magnitude: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.control_points < 2:
            raise ValueError("need at least 2 control points per axis")
        if self.magnitude < 0:
            raise ValueError("deformation magnitude must be >= 0")


def _second_moments(mask):
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("shift/scale estimation needs non-empty pixel sets")
    cx, cy = xs.mean(), ys.mean()
    return cx, cy, np.sqrt(np.mean((xs - cx) ** 2)), np.sqrt(np.mean((ys - cy) ** 2))


def estimate_shift_scale(src, dst) -> SimilarityTransform:
    """Fit translation and per-axis scale mapping pixel set ``src`` onto ``dst``.

    Scale is the ratio of per-axis standard deviations; an axis with zero
    spread on either side keeps scale 1.
    """
    src = np.asarray(src, dtype=bool)
    dst = np.asarray(dst, dtype=bool)
    scx, scy, ssx, ssy = _second_moments(src)
    dcx, dcy, dsx, dsy = _second_moments(dst)
    sx = dsx / ssx if ssx > 0 and dsx > 0 else 1.0
    sy = dsy / ssy if ssy > 0 and dsy > 0 else 1.0
    return SimilarityTransform(
        tx=float(dcx - scx), ty=float(dcy - scy), sx=float(sx), sy=float(sy),
        center=(float(scx), float(scy)),
    )


def apply_shift_scale(mask, t: SimilarityTransform, shape=None) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    h, w = shape if shape is not None else mask.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = t.center
    # inverse of q = c + s * (p - c) + t
    src_x = cx + (xs - cx - t.tx) / t.sx
    src_y = cy + (ys - cy - t.ty) / t.sy
    return sample_nearest(mask, src_x, src_y)


def mean_flow_translation(flow: FlowField, region) -> tuple:
    region = np.asarray(region, dtype=bool)
    _check_same_shape(region, flow.u)
    if not region.any():
        raise ValueError("mean flow over an empty region")
    return (float(np.mean(flow.u[region], dtype=np.float64)),
            float(np.mean(flow.v[region], dtype=np.float64)))


def _cubic_weights(t):
    # Catmull-Rom (Keys, a = -0.5) taps for offsets -1, 0, 1, 2
    t2, t3 = t * t, t * t * t
    return (
        0.5 * (-t3 + 2 * t2 - t),
        0.5 * (3 * t3 - 5 * t2 + 2),
        0.5 * (-3 * t3 + 4 * t2 + t),
        0.5 * (t3 - t2),
    )


def cubic_upsample_matrix(n_out: int, k: int) -> np.ndarray:
    """``(n_out, k)`` matrix mapping k control values spread over the axis to n_out samples."""
    pos = np.linspace(0.0, k - 1, n_out) if n_out > 1 else np.zeros(1)
    base = np.minimum(np.floor(pos).astype(np.int64), k - 2)
    frac = pos - base
    mat = np.zeros((n_out, k))
    rows = np.arange(n_out)
    for offset, wts in zip((-1, 0, 1, 2), _cubic_weights(frac)):
        idx = np.clip(base + offset, 0, k - 1)
        np.add.at(mat, (rows, idx), wts)
    return mat


def elastic_displacements(spec: DeformationSpec, width: int, height: int):
    """Raw upsampled control displacements ``(u, v)`` before bounding."""
    if width < spec.control_points or height < spec.control_points:
        raise DimensionError(
            f"grid {width}x{height} smaller than {spec.control_points} control points"
        )
    k, m = spec.control_points, float(spec.magnitude)
    rng = np.random.default_rng(spec.seed)
    ctrl = rng.uniform(-m, m, size=(2, k, k))
    ax = cubic_upsample_matrix(width, k)
    ay = cubic_upsample_matrix(height, k)
    return ay @ ctrl[0] @ ax.T, ay @ ctrl[1] @ ax.T


def generate_elastic_flow(spec: DeformationSpec, width: int, height: int,
                          direction=(0, 1)) -> FlowField:
    u, v = elastic_displacements(spec, width, height)
    bound = OVERSHOOT_BOUND * float(spec.magnitude)
    return FlowField(np.clip(u, -bound, bound), np.clip(v, -bound, bound),
                     direction=direction, max_magnitude=bound)


def invert_flow(flow: FlowField, iterations: int = 5) -> FlowField:
    """Approximate the reverse flow by fixed-point iteration ``g <- -f(p + g)``."""
    h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    gu = np.zeros((h, w))
    gv = np.zeros((h, w))
    for _ in range(iterations):
        px, py = xs + gu, ys + gv
        gu, gv = -sample_bilinear(flow.u, px, py), -sample_bilinear(flow.v, px, py)
    a, b = flow.direction
    return FlowField(gu, gv, direction=(b, a), max_magnitude=flow.max_magnitude)


def inversion_residual(flow: FlowField, inverse: FlowField) -> np.ndarray:
    """Per-pixel Euclidean length of ``f(p + g(p)) + g(p)``."""
    h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px, py = xs + inverse.u, ys + inverse.v
    ru = sample_bilinear(flow.u, px, py) + inverse.u
    rv = sample_bilinear(flow.v, px, py) + inverse.v
    return np.hypot(ru, rv)


def synthesize_flow_pair(img, spec: DeformationSpec, frame: int = 0):
    """Make ``(prev_img, gt_flow)`` by warping ``img`` (frame ``frame+1``) back in time."""
    img = np.asarray(img)
    h, w = img.shape
    gt_flow = generate_elastic_flow(spec, w, h, direction=(frame, frame + 1))
    return warp_image_backward(img, gt_flow), gt_flow


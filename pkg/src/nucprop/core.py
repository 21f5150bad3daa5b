"""Grid primitives: label maps, scalar/flow fields, IoU, entropy and backward warps.

Conventions used throughout the package:

* A label map is a 2-D non-negative integer array of shape ``(height, width)``;
  0 is background.
* A scalar field is a 2-D finite float array of the same shape.
* A pixel set is a boolean array of the same shape.
* ``x`` indexes columns, ``y`` indexes rows, pixel centres sit on integer
  coordinates and flows are measured in pixels.
* A flow with direction ``(a, b)`` says that the content at pixel ``p`` of
  frame ``a`` is found at ``p + F(p)`` in frame ``b``.  Backward warping with
  that flow therefore produces an image on frame ``a``'s grid from data that
  lives on frame ``b``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class DimensionError(ValueError):
    """Raised when two grids that must share a shape do not."""


def _check_same_shape(*arrays):
    shape = np.shape(arrays[0])
    for arr in arrays[1:]:
        if np.shape(arr) != shape:
            raise DimensionError(f"grid shapes differ: {shape} vs {np.shape(arr)}")


def as_label_map(labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DimensionError(f"label map must be 2-D, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TypeError(f"label map must hold integers, got {labels.dtype}")
    if labels.size and labels.min() < 0:
        raise ValueError("label map ids must be non-negative")
    return labels


@dataclass(eq=False)
class FlowField:
    """Dense per-pixel displacement ``(u, v)`` between two frames."""

    u: np.ndarray
    v: np.ndarray
    direction: tuple = (0, 1)
    max_magnitude: float = math.inf

    def __post_init__(self):
        self.u = np.asarray(self.u)
        self.v = np.asarray(self.v)
        self.direction = tuple(int(d) for d in self.direction)
        if self.u.ndim != 2:
            raise DimensionError(f"flow must be 2-D, got shape {self.u.shape}")
        _check_same_shape(self.u, self.v)
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise ValueError("flow contains non-finite values")
        bound = float(self.max_magnitude)
        if math.isfinite(bound) and self.u.size:
            peak = max(float(np.abs(self.u).max()), float(np.abs(self.v).max()))
            # float32 storage may round a clipped value one ulp past the bound
            if peak > bound * (1 + 1e-6):
                raise ValueError(f"flow magnitude {peak} exceeds declared bound {bound}")

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, shape, direction=(0, 1)):
        return cls(np.zeros(shape), np.zeros(shape), direction)

    @classmethod
    def constant(cls, shape, du, dv, direction=(0, 1)):
        return cls(np.full(shape, float(du)), np.full(shape, float(dv)), direction)


@dataclass(frozen=True)
class InstanceStats:
    id: int
    area: int
    centroid: tuple  # (x, y)
    bbox: tuple  # (x0, y0, x1, y1), inclusive


def iou(a, b) -> float:
    """Intersection over union of two pixel sets; 0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def entropy_map(p, atol=1e-6) -> np.ndarray:
    """Per-pixel natural-log entropy of a ``(H, W, C)`` probability map."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3 or p.shape[-1] < 2:
        raise DimensionError(f"probability map must be (H, W, C>=2), got {p.shape}")
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, rtol=0.0, atol=atol):
        raise ValueError("probabilities must be non-negative and sum to 1 per pixel")
    plogp = np.zeros_like(p)
    nz = p > 0
    plogp[nz] = p[nz] * np.log(p[nz])
    return -plogp.sum(axis=-1)


def mean_over_instance(field, labels, instance_id) -> float:
    """Mean of ``field`` over pixels labelled ``instance_id``; ``math.inf`` if absent."""
    field = np.asarray(field)
    labels = np.asarray(labels)
    _check_same_shape(field, labels)
    sel = labels == instance_id
    if not sel.any():
        return math.inf
    return float(np.mean(field[sel], dtype=np.float64))


def instance_stats(labels) -> list[InstanceStats]:
    labels = as_label_map(labels)
    ids = np.unique(labels)
    ids = ids[ids != 0]
    out = []
    for i in ids:
        ys, xs = np.nonzero(labels == i)
        out.append(
            InstanceStats(
                id=int(i),
                area=int(xs.size),
                centroid=(float(xs.mean()), float(ys.mean())),
                bbox=(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())),
            )
        )
    return out


def pixel_centroid(mask) -> tuple:
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("centroid of an empty pixel set")
    return float(xs.mean()), float(ys.mean())


def _sample_positions(flow: FlowField):
    h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + flow.u.astype(np.float64), ys + flow.v.astype(np.float64)


def sample_nearest(mask, x, y) -> np.ndarray:
    """Nearest-neighbour lookup of a boolean grid; out-of-bounds reads are False."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    xi = np.floor(np.asarray(x) + 0.5).astype(np.int64)
    yi = np.floor(np.asarray(y) + 0.5).astype(np.int64)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = np.zeros(xi.shape, dtype=bool)
    out[inside] = mask[yi[inside], xi[inside]]
    return out


def sample_bilinear(img, x, y) -> np.ndarray:
    """Bilinear lookup with coordinates clamped to the grid (edge replication).

    Written in lerp form so a constant image samples back to exactly that
    constant, and integer coordinates (including the last row and column)
    return the stored value exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    x = np.clip(np.asarray(x, dtype=np.float64), 0, w - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] + fx * (img[y0, x1] - img[y0, x0])
    bottom = img[y1, x0] + fx * (img[y1, x1] - img[y1, x0])
    return top + fy * (bottom - top)


def warp_mask_backward(mask, flow: FlowField) -> np.ndarray:
    """Resample a pixel set living on frame ``b`` onto frame ``a`` (flow ``a -> b``)."""
    mask = np.asarray(mask, dtype=bool)
    _check_same_shape(mask, flow.u)
    x, y = _sample_positions(flow)
    return sample_nearest(mask, x, y)


def warp_image_backward(img, flow: FlowField) -> np.ndarray:
    img = np.asarray(img)
    _check_same_shape(img, flow.u)
    x, y = _sample_positions(flow)
    return sample_bilinear(img, x, y)


def largest_component(mask) -> np.ndarray:
    """Keep the largest 4-connected component; ties go to the one seen first in raster order."""
    mask = np.asarray(mask, dtype=bool)
    comp, n = ndimage.label(mask)
    if n <= 1:
        return mask.copy()
    sizes = np.bincount(comp.ravel())[1:]
    # ndimage.label numbers components in raster order of their first pixel,
    # so argmax's first-hit rule picks the lowest-coordinate component on ties.
    return comp == (int(np.argmax(sizes)) + 1)

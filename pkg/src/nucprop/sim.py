"""Synthetic oscillating-nucleus videos and a segmentation degrader.

Cells are non-overlapping ellipses with an elliptical nucleus inside.  The
nucleus brightness above the cytosol follows a periodic contrast signal; when
the contrast drops below the degrader's visibility threshold the "segmenter"
misses, erodes, dilates or splits the nucleus and flags the region with a
high uncertainty.  Cell masks are always predicted correctly.

Geometry moves with one random elastic flow per frame pair.  Labels of frame
``t`` are obtained by nearest-neighbour lookup of frame 0 through the
composed backward map, which keeps outlines crisp over long videos.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .core import FlowField, mean_over_instance, sample_bilinear, sample_nearest
from .dataset import Dataset
from .motion import DeformationSpec, generate_elastic_flow, invert_flow

MAX_PLACEMENT_ATTEMPTS = 1000
_CROSS = ndimage.generate_binary_structure(2, 1)


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    width: int = 128
    height: int = 128
    frames: int = 30
    cells: int = 8
    seed: int = 0
    cytosol_intensity: float = 1000.0
    nucleus_contrast_amplitude: float = 1500.0
    oscillation_period: int = 6
    oscillation_waveform: str = "square"
    noise_sigma: float = 40.0
    motion: DeformationSpec = field(default_factory=lambda: DeformationSpec(3, 2.0, 0))
    cell_radius: tuple = (9.0, 14.0)
    nucleus_scale: tuple = (0.45, 0.6)
    border_margin: int = 6

    def __post_init__(self):
        if self.cells < 1:
            raise ValueError("need at least one cell")
        if self.frames < 2:
            raise ValueError("need at least two frames")
        if self.oscillation_period < 2:
            raise ValueError("oscillation period must be >= 2 frames")
        if min(self.cytosol_intensity, self.nucleus_contrast_amplitude, self.noise_sigma) < 0:
            raise ValueError("intensities must be non-negative")
        if self.oscillation_waveform not in ("square", "sine"):
            raise ValueError(f"unknown waveform {self.oscillation_waveform!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["motion"] = DeformationSpec(**d["motion"])
        d["cell_radius"] = tuple(d["cell_radius"])
        d["nucleus_scale"] = tuple(d["nucleus_scale"])
        return cls(**d)


@dataclass(frozen=True)
class DegradeConfig:
    seed: int = 0
    visibility_threshold: float = 0.5
    miss_probability: float = 0.3
    erode_dilate_px: int = 3
    min_erode_dilate_px: int = 1
    split_probability: float = 0.3
    base_uncertainty: float = 0.1
    error_uncertainty: float = 0.9
    uncertainty_jitter: float = 0.0

    def __post_init__(self):
        for name in ("miss_probability", "split_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.error_uncertainty > self.base_uncertainty >= 0:
            raise ValueError("need error_uncertainty > base_uncertainty >= 0")
        if self.erode_dilate_px < 0 or self.min_erode_dilate_px < 0:
            raise ValueError("erode/dilate radius must be >= 0")

    def to_dict(self):
        return asdict(self)


def benchmark_configs(seed: int = 0, motion_magnitude: float = 8.0):
    """The 128x128, 8-cell, 30-frame square-wave benchmark used by the evaluation suite."""
    sim = SimConfig(seed=seed, motion=DeformationSpec(3, motion_magnitude, seed + 1))
    deg = DegradeConfig(seed=seed + 2)
    return sim, deg


def contrast_at(t: int, period: int, waveform: str = "square") -> float:
    if waveform == "square":
        return 1.0 if (t % period) < period / 2 else 0.0
    return 0.5 * (1.0 + math.cos(2.0 * math.pi * t / period))


def _derived_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, np.uint32)[0])


def _ellipse(shape, cx, cy, a, b, angle):
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = xs - cx, ys - cy
    return ((dx * c + dy * s) / a) ** 2 + ((-dx * s + dy * c) / b) ** 2 <= 1.0


def _place_cells(cfg: SimConfig, rng):
    shape = (cfg.height, cfg.width)
    cells = np.zeros(shape, dtype=np.uint16)
    nuclei = np.zeros(shape, dtype=np.uint16)
    occupied = np.zeros(shape, dtype=bool)
    lo, hi = cfg.cell_radius
    m = cfg.border_margin
    for cid in range(1, cfg.cells + 1):
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            a, b = rng.uniform(lo, hi, size=2)
            angle = rng.uniform(0, math.pi)
            r = max(a, b)
            if min(cfg.width, cfg.height) - 1 - 2 * (m + r) < 0:
                continue
            cx = rng.uniform(m + r, cfg.width - 1 - m - r)
            cy = rng.uniform(m + r, cfg.height - 1 - m - r)
            cell = _ellipse(shape, cx, cy, a, b, angle)
            if (ndimage.binary_dilation(cell, iterations=2) & occupied).any():
                continue
            f = rng.uniform(*cfg.nucleus_scale)
            off = rng.uniform(-0.25, 0.25, size=2) * (1.0 - f) * min(a, b)
            nuc = _ellipse(shape, cx + off[0], cy + off[1], f * a, f * b, angle)
            nuc &= ndimage.binary_erosion(cell, _CROSS, iterations=2)
            if not nuc.any():
                continue
            cells[cell] = cid
            nuclei[nuc] = cid
            occupied |= cell
            break
        else:
            raise SimulationError(
                f"could not place cell {cid} after {MAX_PLACEMENT_ATTEMPTS} attempts")
    return cells, nuclei


def _advect_labels(cells0, nuclei0, map_x, map_y):
    """Look up frame-0 labels at ``(map_x, map_y)``; close small holes; keep nuclei inside cells."""
    cells = np.zeros_like(cells0)
    nuclei = np.zeros_like(nuclei0)
    for cid in np.unique(cells0[cells0 > 0]):
        cell = sample_nearest(cells0 == cid, map_x, map_y)
        cell |= ndimage.binary_closing(cell, _CROSS) & (cells == 0)
        cells[cell & (cells == 0)] = cid
    for cid in np.unique(nuclei0[nuclei0 > 0]):
        nuc = sample_nearest(nuclei0 == cid, map_x, map_y)
        nuc = ndimage.binary_closing(nuc, _CROSS) | nuc
        inner = ndimage.binary_erosion(cells == cid, _CROSS)
        nuclei[nuc & inner] = cid
    return cells, nuclei


def render_frame(cells, nuclei, contrast, cfg: SimConfig, rng) -> np.ndarray:
    img = cfg.cytosol_intensity * (cells > 0) + (
        contrast * cfg.nucleus_contrast_amplitude) * (nuclei > 0)
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(np.rint(img), 0, 65535).astype(np.uint16)


def generate_video(cfg: SimConfig) -> Dataset:
    shape = (cfg.height, cfg.width)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    cells0, nuclei0 = _place_cells(cfg, rng)

    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    disp_x = np.zeros(shape)
    disp_y = np.zeros(shape)
    gt_cells, gt_nuclei, fwd, bwd = [cells0], [nuclei0], [], []
    spec = cfg.motion
    for t in range(cfg.frames - 1):
        pair_spec = replace(spec, seed=_derived_seed(spec.seed, t))
        back = generate_elastic_flow(pair_spec, cfg.width, cfg.height, direction=(t + 1, t))
        forward = invert_flow(back)
        # composed map from frame t+1 back to frame 0
        px, py = xs + back.u, ys + back.v
        disp_x, disp_y = (back.u + sample_bilinear(disp_x, px, py),
                          back.v + sample_bilinear(disp_y, px, py))
        c, n = _advect_labels(cells0, nuclei0, xs + disp_x, ys + disp_y)
        gt_cells.append(c)
        gt_nuclei.append(n)
        bwd.append(_as_f32_flow(back))
        fwd.append(_as_f32_flow(forward))

    contrast = [contrast_at(t, cfg.oscillation_period, cfg.oscillation_waveform)
                for t in range(cfg.frames)]
    images = []
    for t in range(cfg.frames):
        noise_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, t)))
        images.append(render_frame(gt_cells[t], gt_nuclei[t], contrast[t], cfg, noise_rng))

    return Dataset(cfg.width, cfg.height, cfg.frames, images=images, gt_cells=gt_cells,
                   gt_nuclei=gt_nuclei, contrast=contrast, flows_fwd=fwd, flows_bwd=bwd,
                   meta={"sim": cfg.to_dict()})


def _as_f32_flow(flow: FlowField) -> FlowField:
    return FlowField(flow.u.astype(np.float32), flow.v.astype(np.float32),
                     direction=flow.direction, max_magnitude=flow.max_magnitude)


def _disk(radius: int) -> np.ndarray:
    r = int(radius)
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1]
    return xs * xs + ys * ys <= r * r


def _split(mask, angle):
    ys, xs = np.nonzero(mask)
    cx, cy = xs.mean(), ys.mean()
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dist = -(xx - cx) * math.sin(angle) + (yy - cy) * math.cos(angle)
    return mask & (np.abs(dist) >= 1.0)


# normaliser turning mean entropy into a [0, 1] score: 3-class maximum entropy
SCORE_SCALE = math.log(3.0)


def degrade_predictions(ds: Dataset, cfg: DegradeConfig) -> Dataset:
    """Emulate an unreliable nucleus segmenter on a ground-truth dataset.

    Returns a copy of ``ds`` with ``pred_cells``, ``pred_nuclei``,
    ``uncertainty`` and ``scores`` filled in.
    """
    out = ds.copy()
    out.pred_cells, out.pred_nuclei, out.uncertainty, out.scores = [], [], [], []
    lo = max(1, min(cfg.min_erode_dilate_px, cfg.erode_dilate_px))
    for t in range(ds.frames):
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(t,)))
        cells = np.asarray(ds.gt_cells[t])
        gt = np.asarray(ds.gt_nuclei[t])
        pred = gt.copy()
        unc = np.full(gt.shape, cfg.base_uncertainty, dtype=np.float64)
        visible = ds.contrast[t] >= cfg.visibility_threshold
        for cid in np.unique(gt[gt > 0]):
            u_miss, u_sign, u_split, angle = rng.random(4)
            radius = int(rng.integers(lo, max(lo, cfg.erode_dilate_px) + 1))
            if visible:
                continue
            truth = gt == cid
            if u_miss < cfg.miss_probability:
                mask = np.zeros_like(truth)
            else:
                mask = truth
                if cfg.erode_dilate_px > 0:
                    if u_sign < 0.5:
                        mask = ndimage.binary_erosion(truth, _disk(radius))
                    else:
                        grown = ndimage.binary_dilation(truth, _disk(radius))
                        mask = grown & (cells == cid)
                if mask.any() and u_split < cfg.split_probability:
                    mask = _split(mask, angle * math.pi)
            if np.array_equal(mask, truth):
                continue
            pred[truth] = 0
            pred[mask] = cid
            unc[truth | mask] = cfg.error_uncertainty
        if cfg.uncertainty_jitter > 0:
            unc = np.maximum(unc + rng.normal(0.0, cfg.uncertainty_jitter, unc.shape), 0.0)
        unc = unc.astype(np.float32)
        scores = {}
        for cid in np.unique(pred[pred > 0]):
            u_mean = mean_over_instance(unc, pred, cid)
            scores[int(cid)] = float(1.0 - min(u_mean / SCORE_SCALE, 1.0))
        out.pred_cells.append(cells.copy())
        out.pred_nuclei.append(pred)
        out.uncertainty.append(unc)
        out.scores.append(scores)
    out.meta["degrade"] = cfg.to_dict()
    return out

"""Uncertainty-ranked propagation of nucleus masks along cell tracks.

For each track the frames are visited in ascending order of mean nucleus
uncertainty.  A frame whose nucleus is uncertain (mean >= theta) is replaced
by motion-corrected copies of neighbouring nuclei that are sufficiently more
certain: both neighbours when ``beta * u_f`` dominates both of them, otherwise
the previous or the next one alone when ``alpha * u_f`` dominates it.  A frame
without a nucleus has uncertainty ``inf`` and therefore accepts any finite
neighbour.  After an update the frame inherits the smallest uncertainty of its
sources, so a run of missing nuclei is filled in a single pass.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    DimensionError,
    FlowField,
    largest_component,
    mean_over_instance,
    warp_mask_backward,
)
from .motion import apply_shift_scale, estimate_shift_scale, mean_flow_translation
from .tracker import ABSENT, LinkConfig, Track, build_tracks


class WarpMode(str, enum.Enum):
    SHIFT_SCALE = "shift-scale"
    MEAN_FLOW = "mean-flow"
    PIXEL_FLOW = "pixel-flow"


class Scope(str, enum.Enum):
    UNCERTAIN_ONLY = "uncertain"
    ALL = "all"


class Action(str, enum.Enum):
    NONE = "none"
    ONE_SIDED_PREV = "one-sided-prev"
    ONE_SIDED_NEXT = "one-sided-next"
    TWO_SIDED = "two-sided"
    INTERPOLATED = "interpolated"


class MissingFlowError(RuntimeError):
    pass


@dataclass(frozen=True)
class PropagationConfig:
    theta: float = 0.5
    alpha: float = 0.7
    beta: float = 0.85
    warp_mode: WarpMode = WarpMode.MEAN_FLOW
    fuse: bool = False
    update_scope: Scope = Scope.UNCERTAIN_ONLY

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if self.theta < 0:
            raise ValueError("theta must be >= 0")
        object.__setattr__(self, "warp_mode", WarpMode(self.warp_mode))
        object.__setattr__(self, "update_scope", Scope(self.update_scope))

    def to_dict(self):
        return {"theta": self.theta, "alpha": self.alpha, "beta": self.beta,
                "warp_mode": self.warp_mode.value, "fuse": self.fuse,
                "update_scope": self.update_scope.value}


@dataclass
class LogEntry:
    track_id: int
    frame: int
    cell_id: object
    action: Action = Action.NONE
    # which branch fired; differs from ``action`` only for INTERPOLATED entries
    branch: Action = Action.NONE
    sources: tuple = ()
    u_before: float = math.inf
    u_sources: tuple = ()
    u_after: float = math.inf

    def to_dict(self):
        enc = _encode_float
        return {"track_id": self.track_id, "frame": self.frame, "cell_id": self.cell_id,
                "action": self.action.value, "branch": self.branch.value,
                "sources": list(self.sources), "u_before": enc(self.u_before),
                "u_sources": [enc(u) for u in self.u_sources], "u_after": enc(self.u_after)}

    @classmethod
    def from_dict(cls, d):
        dec = _decode_float
        return cls(int(d["track_id"]), int(d["frame"]), d["cell_id"], Action(d["action"]),
                   Action(d["branch"]), tuple(d["sources"]), dec(d["u_before"]),
                   tuple(dec(u) for u in d["u_sources"]), dec(d["u_after"]))


def _encode_float(x):
    return "inf" if math.isinf(x) else float(x)


def _decode_float(x):
    return math.inf if x == "inf" else float(x)


def summarize_uncertainty(tracks, nucleus_labels, uncertainty) -> dict:
    """Mean nucleus uncertainty per ``(track_id) -> {frame: value}``; ``inf`` when no nucleus."""
    summary = {}
    for tr in tracks:
        per_frame = {}
        for f, cid in tr.items():
            if cid is ABSENT:
                per_frame[f] = math.inf
                continue
            labels = np.asarray(nucleus_labels[f])
            unc = np.asarray(uncertainty[f])
            if labels.shape != unc.shape:
                raise DimensionError(
                    f"frame {f}: labels {labels.shape} vs uncertainty {unc.shape}")
            per_frame[f] = mean_over_instance(unc, labels, cid)
        summary[tr.track_id] = per_frame
    return summary


def warp_neighbor_mask(current_cell, neighbor_cell, neighbor_nucleus,
                       flow_to_neighbor: FlowField | None, mode,
                       current_nucleus=None) -> np.ndarray:
    """Bring a neighbouring frame's nucleus onto the current frame's grid.

    Shift+scale is fitted between the current (not yet updated) nucleus and
    the neighbour nucleus; when the current nucleus is empty the two cell
    masks are used instead, and with no current cell the nucleus is copied
    in place.  The result keeps only its largest connected component.
    """
    mode = WarpMode(mode)
    neighbor_nucleus = np.asarray(neighbor_nucleus, dtype=bool)
    if not neighbor_nucleus.any():
        raise ValueError("cannot propagate from an empty neighbour nucleus")
    current_cell = np.zeros_like(neighbor_nucleus) if current_cell is None else \
        np.asarray(current_cell, dtype=bool)

    if mode is WarpMode.SHIFT_SCALE:
        current = None if current_nucleus is None else np.asarray(current_nucleus, dtype=bool)
        if current is not None and current.any():
            tf = estimate_shift_scale(neighbor_nucleus, current)
            out = apply_shift_scale(neighbor_nucleus, tf)
        elif current_cell.any() and neighbor_cell is not None and np.any(neighbor_cell):
            tf = estimate_shift_scale(np.asarray(neighbor_cell, dtype=bool), current_cell)
            out = apply_shift_scale(neighbor_nucleus, tf)
        else:
            out = neighbor_nucleus.copy()
    else:
        if flow_to_neighbor is None:
            raise MissingFlowError(f"{mode.value} propagation needs a flow field")
        if mode is WarpMode.MEAN_FLOW:
            region = current_cell if current_cell.any() else neighbor_nucleus
            du, dv = mean_flow_translation(flow_to_neighbor, region)
            flow = FlowField.constant(neighbor_nucleus.shape, du, dv,
                                      direction=flow_to_neighbor.direction)
        else:
            flow = flow_to_neighbor
        out = warp_mask_backward(neighbor_nucleus, flow)
    return largest_component(out)


def fuse_masks(candidates) -> np.ndarray:
    """Certainty-weighted vote: weights ``exp(-u)`` normalised, keep pixels scoring >= 0.5."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("fuse_masks needs at least one candidate")
    us = np.array([u for _, u in candidates], dtype=np.float64)
    if not np.all(np.isfinite(us)):
        raise ValueError("candidate uncertainties must be finite")
    w = np.exp(-(us - us.min()))
    w /= w.sum()
    acc = np.zeros(np.shape(candidates[0][0]))
    for (mask, _), wi in zip(candidates, w):
        acc += wi * np.asarray(mask, dtype=bool)
    return acc >= 0.5


def _decide(u_f, u_prev, u_next, cfg: PropagationConfig):
    """Branch selection for one frame; returns the Action to take (NONE if nothing fires)."""
    prev_ok = u_prev is not None and math.isfinite(u_prev)
    next_ok = u_next is not None and math.isfinite(u_next)
    if cfg.update_scope is Scope.ALL:
        if prev_ok and next_ok:
            return Action.TWO_SIDED
        if prev_ok:
            return Action.ONE_SIDED_PREV
        if next_ok:
            return Action.ONE_SIDED_NEXT
        return Action.NONE
    if not u_f >= cfg.theta:
        return Action.NONE
    if prev_ok and next_ok and cfg.beta * u_f >= u_prev and cfg.beta * u_f >= u_next:
        return Action.TWO_SIDED
    if prev_ok and cfg.alpha * u_f >= u_prev:
        return Action.ONE_SIDED_PREV
    if next_ok and cfg.alpha * u_f >= u_next:
        return Action.ONE_SIDED_NEXT
    return Action.NONE


def propagate_track(track: Track, summary, nuclei, cells, flows, cfg: PropagationConfig,
                    forbidden=None):
    """Run the propagation loop over one track.

    ``nuclei`` and ``cells`` map frame -> boolean mask of this track's
    nucleus / cell (cells may be missing for absent frames); ``flows`` maps
    ``(frame, neighbour_frame)`` -> FlowField.  ``forbidden`` optionally maps
    frame -> pixels owned by other nuclei, which an update never claims.
    Returns ``(updated nuclei, log entries in frame order)``.
    """
    nuclei = {f: np.asarray(m, dtype=bool) for f, m in nuclei.items()}
    u = {f: summary[f] for f in track.frames}
    log = {f: LogEntry(track.track_id, f, track.cell_id(f), u_before=u[f], u_after=u[f])
           for f in track.frames}
    order = sorted(track.frames, key=lambda f: (u[f], f))

    for f in order:
        if track.cell_id(f) is ABSENT:
            continue
        prev_f, next_f = f - 1, f + 1
        u_prev = u[prev_f] if prev_f in u and track.cell_id(prev_f) is not ABSENT else None
        u_next = u[next_f] if next_f in u and track.cell_id(next_f) is not ABSENT else None
        branch = _decide(u[f], u_prev, u_next, cfg)
        if branch is Action.NONE:
            continue
        sources = {Action.TWO_SIDED: (prev_f, next_f), Action.ONE_SIDED_PREV: (prev_f,),
                   Action.ONE_SIDED_NEXT: (next_f,)}[branch]

        warped = []
        for s in sources:
            key = (f, s)
            flow = flows.get(key) if flows is not None else None
            if cfg.warp_mode is not WarpMode.SHIFT_SCALE and flow is None:
                raise MissingFlowError(f"missing flow for frame pair {f}->{s}")
            warped.append(warp_neighbor_mask(cells.get(f), cells.get(s), nuclei[s], flow,
                                             cfg.warp_mode, current_nucleus=nuclei[f]))
        if len(warped) == 2 and cfg.fuse:
            new = fuse_masks([(warped[0], u[sources[0]]), (warped[1], u[sources[1]])])
        else:
            new = np.logical_or.reduce(warped)
        if forbidden is not None and f in forbidden:
            new &= ~forbidden[f]
        new = largest_component(new)
        if not new.any():
            continue

        entry = log[f]
        was_empty = not nuclei[f].any()
        entry.branch = branch
        entry.action = Action.INTERPOLATED if was_empty else branch
        entry.sources = sources
        entry.u_sources = tuple(u[s] for s in sources)
        nuclei[f] = new
        u[f] = min(entry.u_sources)
        entry.u_after = u[f]

    return nuclei, [log[f] for f in track.frames]


def run_propagation(cell_labels, nucleus_labels, uncertainty, flows_fwd, flows_bwd,
                    cfg: PropagationConfig = PropagationConfig(),
                    link_cfg: LinkConfig = LinkConfig(), tracks=None):
    """Track cells, summarise uncertainty and propagate every track.

    ``flows_fwd[f]`` carries frame ``f`` to ``f+1`` and ``flows_bwd[f]`` frame
    ``f+1`` to ``f``.  Returns ``(updated nucleus label maps, update log, tracks)``.
    Cell label maps are read only.
    """
    n = len(cell_labels)
    if len(nucleus_labels) != n or len(uncertainty) != n:
        raise ValueError("cells, nuclei and uncertainty must cover the same frames")
    flows = {}
    if cfg.warp_mode is not WarpMode.SHIFT_SCALE:
        for f in range(n - 1):
            fwd = flows_fwd[f] if flows_fwd is not None and f < len(flows_fwd) else None
            bwd = flows_bwd[f] if flows_bwd is not None and f < len(flows_bwd) else None
            if fwd is None:
                raise MissingFlowError(f"missing flow for frame pair {f}->{f + 1}")
            if bwd is None:
                raise MissingFlowError(f"missing flow for frame pair {f + 1}->{f}")
            flows[(f, f + 1)] = fwd
            flows[(f + 1, f)] = bwd

    if tracks is None:
        tracks = build_tracks(cell_labels, link_cfg)
    summary = summarize_uncertainty(tracks, nucleus_labels, uncertainty)
    original = [np.asarray(lab) for lab in nucleus_labels]
    out = [lab.copy() for lab in original]
    log: list[LogEntry] = []

    for tr in tracks:
        present = [(f, cid) for f, cid in tr.items() if cid is not ABSENT]
        nuclei = {f: original[f] == cid for f, cid in present}
        cells = {f: np.asarray(cell_labels[f]) == cid for f, cid in present}
        forbidden = {f: (original[f] != 0) & (original[f] != cid) for f, cid in present}
        updated, entries = propagate_track(tr, summary[tr.track_id], nuclei, cells, flows,
                                           cfg, forbidden)
        for e in entries:
            if e.action is Action.NONE:
                continue
            f, cid = e.frame, e.cell_id
            lab = out[f]
            lab[lab == cid] = 0
            # first writer wins where two updated nuclei collide
            lab[updated[f] & (lab == 0)] = cid
        log.extend(entries)

    log.sort(key=lambda e: (e.track_id, e.frame))
    return out, log, tracks


def log_to_json(log):
    return [e.to_dict() for e in log]


def log_from_json(items):
    return [LogEntry.from_dict(d) for d in items]

"""Overlap-based cell tracking.

Consecutive frames are linked by a maximum-weight bipartite matching on mask
IoU.  Tracks survive short detection dropouts: a track that finds no partner
records an absent entry and stays linkable for up to ``gap`` consecutive
missing frames.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import DimensionError, as_label_map

ABSENT = None
GAP_TOLERANCE = 2


@dataclass(frozen=True)
class LinkConfig:
    min_link_iou: float = 0.2
    gap: int = GAP_TOLERANCE

    def __post_init__(self):
        if not 0.0 <= self.min_link_iou <= 1.0:
            raise ValueError("min_link_iou must lie in [0, 1]")
        if self.gap < 0:
            raise ValueError("gap tolerance must be >= 0")


@dataclass
class Track:
    """One cell followed through time; ``entries[i]`` is its id in frame ``start + i``."""

    track_id: int
    start: int
    entries: list = field(default_factory=list)

    @property
    def end(self) -> int:
        return self.start + len(self.entries) - 1

    @property
    def span(self):
        return self.start, self.end

    @property
    def frames(self):
        return range(self.start, self.end + 1)

    def cell_id(self, frame):
        if self.start <= frame <= self.end:
            return self.entries[frame - self.start]
        return ABSENT

    def items(self):
        return zip(self.frames, self.entries)

    def to_dict(self):
        return {"track_id": self.track_id, "start": self.start, "entries": list(self.entries)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["track_id"]), int(d["start"]),
                   [ABSENT if e is None else int(e) for e in d["entries"]])


def iou_table(labels_a, labels_b):
    """IoU between every nonzero id of ``labels_a`` and of ``labels_b``.

    Returns ``(ids_a, ids_b, matrix)`` with ``matrix[i, j]`` the IoU of
    ``ids_a[i]`` and ``ids_b[j]``.
    """
    a = as_label_map(labels_a)
    b = as_label_map(labels_b)
    if a.shape != b.shape:
        raise DimensionError(f"label maps differ in shape: {a.shape} vs {b.shape}")
    ids_a, area_a = np.unique(a[a > 0], return_counts=True)
    ids_b, area_b = np.unique(b[b > 0], return_counts=True)
    inter = np.zeros((ids_a.size, ids_b.size))
    both = (a > 0) & (b > 0)
    if both.any():
        pairs, counts = np.unique(
            np.stack([a[both], b[both]]).astype(np.int64), axis=1, return_counts=True
        )
        inter[np.searchsorted(ids_a, pairs[0]), np.searchsorted(ids_b, pairs[1])] = counts
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        table = np.where(union > 0, inter / union, 0.0)
    return ids_a, ids_b, table


def _assign(weights: np.ndarray, min_iou: float):
    """Max-weight matching keeping only overlapping edges with IoU >= min_iou."""
    if weights.size == 0:
        return []
    kept = np.where((weights >= min_iou) & (weights > 0), weights, 0.0)
    rows, cols = linear_sum_assignment(kept, maximize=True)
    return [(r, c) for r, c in zip(rows, cols) if kept[r, c] > 0]


def link_frames(labels_a, labels_b, cfg: LinkConfig = LinkConfig()):
    ids_a, ids_b, table = iou_table(labels_a, labels_b)
    pairs = [(int(ids_a[r]), int(ids_b[c])) for r, c in _assign(table, cfg.min_link_iou)]
    return sorted(pairs)


def build_tracks(cell_labels, cfg: LinkConfig = LinkConfig()) -> list[Track]:
    frames = [as_label_map(f) for f in cell_labels]
    if not frames:
        raise ValueError("no frames to track")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise DimensionError(f"frame {i} has shape {f.shape}, expected {shape}")

    tracks: list[Track] = []
    # open track index -> (frame of last detection, id there, consecutive misses)
    open_tracks: dict[int, list] = {}

    for t, labels in enumerate(frames):
        ids_now = np.unique(labels[labels > 0])
        matched_now = set()
        if open_tracks and ids_now.size:
            order = sorted(open_tracks)
            weights = np.zeros((len(order), ids_now.size))
            by_frame: dict[int, list] = {}
            for row, ti in enumerate(order):
                by_frame.setdefault(open_tracks[ti][0], []).append(row)
            for src_frame, rows in by_frame.items():
                src_ids, dst_ids, table = iou_table(frames[src_frame], labels)
                cols = np.searchsorted(ids_now, dst_ids)
                for row in rows:
                    r = int(np.searchsorted(src_ids, open_tracks[order[row]][1]))
                    weights[row, cols] = table[r]
            for row, col in _assign(weights, cfg.min_link_iou):
                ti = order[row]
                cid = int(ids_now[col])
                tracks[ti].entries.append(cid)
                open_tracks[ti] = [t, cid, 0]
                matched_now.add(ti)

        for ti in sorted(set(open_tracks) - matched_now):
            state = open_tracks[ti]
            state[2] += 1
            if state[2] > cfg.gap:
                del open_tracks[ti]
            else:
                tracks[ti].entries.append(ABSENT)

        taken = {tracks[ti].entries[-1] for ti in matched_now}
        for cid in ids_now:
            cid = int(cid)
            if cid in taken:
                continue
            tracks.append(Track(len(tracks), t, [cid]))
            open_tracks[len(tracks) - 1] = [t, cid, 0]

    for tr in tracks:
        while tr.entries and tr.entries[-1] is ABSENT:
            tr.entries.pop()
    return tracks

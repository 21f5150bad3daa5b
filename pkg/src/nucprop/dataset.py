"""In-memory time-lapse dataset shared by the simulator, the pipeline and the on-disk format."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(eq=False)
class Dataset:
    width: int
    height: int
    frames: int
    images: list = None  # uint16 (H, W) per frame
    gt_cells: list = None  # label maps
    gt_nuclei: list = None
    contrast: list = None  # per-frame nucleus contrast in [0, 1]
    flows_fwd: list = None  # FlowField f -> f+1, length frames-1
    flows_bwd: list = None  # FlowField f+1 -> f
    pred_cells: list = None
    pred_nuclei: list = None
    uncertainty: list = None  # float32 (H, W) per frame
    scores: list = None  # per-frame {instance id: score}
    tracks: list = None
    update_log: list = None
    meta: dict = field(default_factory=dict)  # seeds and config echoes

    @property
    def shape(self):
        return self.height, self.width

    def copy(self) -> "Dataset":
        def dup(seq):
            if seq is None:
                return None
            return [x.copy() if isinstance(x, (np.ndarray, dict)) else x for x in seq]

        return Dataset(
            self.width, self.height, self.frames,
            images=dup(self.images), gt_cells=dup(self.gt_cells),
            gt_nuclei=dup(self.gt_nuclei),
            contrast=None if self.contrast is None else list(self.contrast),
            flows_fwd=None if self.flows_fwd is None else list(self.flows_fwd),
            flows_bwd=None if self.flows_bwd is None else list(self.flows_bwd),
            pred_cells=dup(self.pred_cells), pred_nuclei=dup(self.pred_nuclei),
            uncertainty=dup(self.uncertainty), scores=dup(self.scores),
            tracks=None if self.tracks is None else list(self.tracks),
            update_log=None if self.update_log is None else list(self.update_log),
            meta=dict(self.meta),
        )

"""Uncertainty-gated nucleus mask propagation for time-lapse segmentation."""
from .core import DimensionError, FlowField, entropy_map, iou, mean_over_instance
from .dataset import Dataset
from .propagate import (Action, LogEntry, PropagationConfig, Scope, WarpMode,
                        propagate_track, run_propagation)
from .tracker import LinkConfig, Track, build_tracks, link_frames

__version__ = "0.1.0"

"""On-disk dataset layout.

::

    manifest.json
    images/frame_0000.pgm        16-bit P5, big-endian
    gt/cells/frame_0000.pgm      label maps, same format
    gt/nuclei/frame_0000.pgm
    pred/cells/... pred/nuclei/...
    unc/frame_0000.f32           little-endian float32, row-major
    unc/frame_0000.json          {"width": W, "height": H}
    flow/fwd_0000.f32            interleaved (u, v) float32, frame f -> f+1
    flow/bwd_0000.f32            frame f+1 -> f; each with a .json sidecar
    scores/frame_0000.json       {instance id: score}
    tracks.json, update_log.json

Whole datasets are written into a scratch directory next to the target and
renamed into place, so readers never see a partially written dataset.
"""
from __future__ import annotations

import json
import math
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .core import DimensionError, FlowField
from .dataset import Dataset
from .propagate import log_from_json, log_to_json
from .tracker import Track

FORMAT_VERSION = 1

PATHS = {
    "images": "images",
    "gt_cells": "gt/cells",
    "gt_nuclei": "gt/nuclei",
    "pred_cells": "pred/cells",
    "pred_nuclei": "pred/nuclei",
    "uncertainty": "unc",
    "flow": "flow",
    "scores": "scores",
}
_PGM_FIELDS = ("images", "gt_cells", "gt_nuclei", "pred_cells", "pred_nuclei")


class DatasetError(RuntimeError):
    pass


def worker_count() -> int:
    raw = os.environ.get("NUCPROP_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise DatasetError(f"NUCPROP_THREADS must be an integer, got {raw!r}") from None
    return n if n > 0 else min(8, os.cpu_count() or 1)


def _parallel_map(fn, items):
    items = list(items)
    workers = worker_count()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- primitive formats ----------------------------------------------------

def write_pgm(path, arr):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise DimensionError(f"PGM needs a 2-D array, got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 65535):
        raise ValueError(f"{path}: values outside the 16-bit range")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(arr.astype(">u2").tobytes())


def _pgm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError("truncated PGM header")
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (P5) file")
    try:
        (w, h, maxval), offset = _pgm_tokens(data, 3)
    except (ValueError, IndexError):
        raise DatasetError(f"{path}: malformed PGM header") from None
    dtype = ">u2" if maxval > 255 else "u1"
    expected = w * h * np.dtype(dtype).itemsize
    body = data[offset:offset + expected]
    if len(body) != expected:
        raise DatasetError(
            f"{path}: expected {expected} bytes of pixel data for {w}x{h}, got {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.uint16)


def write_f32(path, arr):
    arr = np.asarray(arr)
    path = Path(path)
    path.write_bytes(arr.astype("<f4").tobytes())
    h, w = arr.shape[:2]
    _write_json(path.with_suffix(".json"), {"width": w, "height": h})


def read_f32(path, shape, channels=1) -> np.ndarray:
    path = Path(path)
    h, w = shape
    expected = h * w * channels * 4
    if not path.exists():
        raise DatasetError(f"missing file {path} (expected {w}x{h} float32)")
    data = path.read_bytes()
    if len(data) != expected:
        raise DatasetError(
            f"{path}: expected {expected} bytes for {w}x{h}x{channels} float32, got {len(data)}")
    side = path.with_suffix(".json")
    if side.exists():
        meta = _read_json(side)
        if (meta.get("width"), meta.get("height")) != (w, h):
            raise DimensionError(
                f"{side}: declares {meta.get('width')}x{meta.get('height')}, expected {w}x{h}")
    arr = np.frombuffer(data, dtype="<f4").astype(np.float32)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def write_flow(path, flow: FlowField):
    path = Path(path)
    uv = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
    path.write_bytes(uv.tobytes())
    h, w = flow.shape
    bound = flow.max_magnitude
    _write_json(path.with_suffix(".json"), {
        "width": w, "height": h, "direction": list(flow.direction),
        "max_magnitude": "inf" if math.isinf(bound) else float(bound)})


def read_flow(path, shape=None) -> FlowField:
    path = Path(path)
    side = path.with_suffix(".json")
    if not side.exists():
        raise DatasetError(f"missing flow sidecar {side}")
    meta = _read_json(side)
    if shape is None:
        shape = (meta["height"], meta["width"])
    elif (meta["height"], meta["width"]) != tuple(shape):
        raise DimensionError(
            f"{side}: declares {meta['width']}x{meta['height']}, expected {shape[1]}x{shape[0]}")
    uv = read_f32(path, shape, channels=2)
    bound = meta.get("max_magnitude", "inf")
    return FlowField(uv[..., 0].copy(), uv[..., 1].copy(), tuple(meta["direction"]),
                     math.inf if bound == "inf" else float(bound))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON ({exc})") from None


def read_update_log(path):
    return log_from_json(_read_json(path))


# -- datasets -------------------------------------------------------------

def _frame_name(i):
    return f"frame_{i:04d}"


def _write_into(ds: Dataset, root: Path):
    present = []
    for name in _PGM_FIELDS:
        frames = getattr(ds, name)
        if frames is None:
            continue
        present.append(name)
        d = root / PATHS[name]
        d.mkdir(parents=True, exist_ok=True)
        for i, arr in enumerate(frames):
            write_pgm(d / f"{_frame_name(i)}.pgm", arr)
    if ds.uncertainty is not None:
        present.append("uncertainty")
        d = root / PATHS["uncertainty"]
        d.mkdir(parents=True, exist_ok=True)
        for i, arr in enumerate(ds.uncertainty):
            write_f32(d / f"{_frame_name(i)}.f32", arr)
    if ds.flows_fwd is not None or ds.flows_bwd is not None:
        present.append("flow")
        d = root / PATHS["flow"]
        d.mkdir(parents=True, exist_ok=True)
        for prefix, flows in (("fwd", ds.flows_fwd), ("bwd", ds.flows_bwd)):
            for i, fl in enumerate(flows or ()):
                write_flow(d / f"{prefix}_{i:04d}.f32", fl)
    if ds.scores is not None:
        present.append("scores")
        d = root / PATHS["scores"]
        d.mkdir(parents=True, exist_ok=True)
        for i, sc in enumerate(ds.scores):
            _write_json(d / f"{_frame_name(i)}.json", {str(k): v for k, v in sorted(sc.items())})
    if ds.tracks is not None:
        _write_json(root / "tracks.json", [t.to_dict() for t in ds.tracks])
    if ds.update_log is not None:
        _write_json(root / "update_log.json", log_to_json(ds.update_log))

    manifest = {
        "version": FORMAT_VERSION,
        "width": ds.width,
        "height": ds.height,
        "frames": ds.frames,
        "paths": {k: v for k, v in PATHS.items() if k in present},
        "contrast": ds.contrast,
        "seeds": {k: v.get("seed") for k, v in ds.meta.items() if isinstance(v, dict)},
        "config": ds.meta,
    }
    _write_json(root / "manifest.json", manifest)


def write_dataset(ds: Dataset, path):
    """Write ``ds`` to ``path``, replacing any existing dataset there atomically."""
    path = Path(path).resolve()
    path.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{path.name}.tmp-", dir=path.parent))
    try:
        _write_into(ds, scratch)
        if path.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{path.name}.old-", dir=path.parent))
            os.rename(path, old / "data")
            os.rename(scratch, path)
            shutil.rmtree(old)
        else:
            os.rename(scratch, path)
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise


def _read_pgm_checked(path, shape):
    if not path.exists():
        raise DatasetError(f"missing file {path} (expected {shape[1]}x{shape[0]} PGM)")
    arr = read_pgm(path)
    if arr.shape != shape:
        raise DimensionError(
            f"{path}: image is {arr.shape[1]}x{arr.shape[0]}, manifest says {shape[1]}x{shape[0]}")
    return arr


def read_dataset(path) -> Dataset:
    root = Path(path)
    manifest = _read_json(root / "manifest.json")
    if manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(f"{root}: unsupported dataset version {manifest.get('version')!r}")
    w, h, n = int(manifest["width"]), int(manifest["height"]), int(manifest["frames"])
    shape = (h, w)
    paths = manifest.get("paths", {})
    ds = Dataset(w, h, n, contrast=manifest.get("contrast"), meta=manifest.get("config", {}))

    for name in _PGM_FIELDS:
        if name in paths:
            d = root / paths[name]
            setattr(ds, name, _parallel_map(
                lambda i, d=d: _read_pgm_checked(d / f"{_frame_name(i)}.pgm", shape), range(n)))
    if "uncertainty" in paths:
        d = root / paths["uncertainty"]
        ds.uncertainty = _parallel_map(
            lambda i: read_f32(d / f"{_frame_name(i)}.f32", shape), range(n))
    if "flow" in paths:
        d = root / paths["flow"]
        ds.flows_fwd = _parallel_map(lambda i: read_flow(d / f"fwd_{i:04d}.f32", shape),
                                     range(n - 1))
        ds.flows_bwd = _parallel_map(lambda i: read_flow(d / f"bwd_{i:04d}.f32", shape),
                                     range(n - 1))
    if "scores" in paths:
        d = root / paths["scores"]
        ds.scores = [{int(k): float(v) for k, v in _read_json(d / f"{_frame_name(i)}.json").items()}
                     for i in range(n)]
    if (root / "tracks.json").exists():
        ds.tracks = [Track.from_dict(t) for t in _read_json(root / "tracks.json")]
    if (root / "update_log.json").exists():
        ds.update_log = read_update_log(root / "update_log.json")
    return ds

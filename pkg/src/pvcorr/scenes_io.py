"""On-disk scene pairs.

A scene directory holds ``meta.json`` with the point counts and three
little-endian float32 files, row-major N x 3::

    scene_0000/
        meta.json   {"n1": 256, "n2": 256, "version": 1}
        pc1.bin     n1 * 12 bytes
        pc2.bin     n2 * 12 bytes
        flow.bin    n1 * 12 bytes
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .synthetic import SceneSample

FORMAT_VERSION = 1
_F32 = np.dtype("<f4")


class SceneFormatError(ValueError):
    pass


def _write_bin(path, arr):
    path.write_bytes(np.ascontiguousarray(arr, dtype=_F32).tobytes())


def _read_bin(path, n):
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise SceneFormatError(f"{path}: {e.strerror or e}") from e
    if len(raw) != 12 * n:
        raise SceneFormatError(f"{path}: expected {12 * n} bytes for {n} points, found {len(raw)}")
    return np.frombuffer(raw, dtype=_F32).reshape(n, 3).astype(np.float32)


def save_scene(directory, sample):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"n1": int(len(sample.p1)), "n2": int(len(sample.p2)), "version": FORMAT_VERSION}
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    _write_bin(d / "pc1.bin", sample.p1)
    _write_bin(d / "pc2.bin", sample.p2)
    _write_bin(d / "flow.bin", sample.gt_flow)
    return d


def load_scene(directory):
    d = Path(directory)
    meta_path = d / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as e:
        raise SceneFormatError(f"{meta_path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"{meta_path}: invalid JSON ({e.msg})") from e
    if not isinstance(meta, dict) or meta.get("version") != FORMAT_VERSION:
        raise SceneFormatError(f"{meta_path}: unsupported or missing version")
    try:
        n1, n2 = int(meta["n1"]), int(meta["n2"])
    except (KeyError, TypeError, ValueError) as e:
        raise SceneFormatError(f"{meta_path}: n1/n2 missing or not integers") from e
    if n1 < 1 or n2 < 1:
        raise SceneFormatError(f"{meta_path}: point counts must be positive")
    p1 = _read_bin(d / "pc1.bin", n1)
    p2 = _read_bin(d / "pc2.bin", n2)
    flow = _read_bin(d / "flow.bin", n1)
    try:
        return SceneSample(p1, p2, flow)
    except ValueError as e:
        raise SceneFormatError(f"{d}: {e}") from e


def scene_dirs(root):
    """Scene directories under ``root`` in sorted order (or ``root`` itself if it is one)."""
    root = Path(root)
    if (root / "meta.json").is_file():
        return [root]
    if not root.is_dir():
        raise SceneFormatError(f"{root}: no such data directory")
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").is_file())
    if not dirs:
        raise SceneFormatError(f"{root}: contains no scene directories")
    return dirs


def load_dataset(root):
    return [load_scene(d) for d in scene_dirs(root)]


def save_dataset(root, samples):
    root = Path(root)
    return [save_scene(root / f"scene_{i:04d}", s) for i, s in enumerate(samples)]

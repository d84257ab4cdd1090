"""Input validation helpers shared by the estimator, the library and the CLI."""

from __future__ import annotations

import numpy as np


def check_points(points, name="points", min_points=1):
    """Return ``points`` as a finite float array of shape (N, 3)."""
    arr = np.asarray(points)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if arr.shape[0] < min_points:
        raise ValueError(f"{name} needs at least {min_points} points, got {arr.shape[0]}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite coordinates")
    return arr


def check_flow(flow, cloud, name="flow"):
    """Validate a displacement field against the cloud it moves."""
    arr = check_points(flow, name=name)
    if arr.shape[0] != np.shape(cloud)[0]:
        raise ValueError(f"{name} has {arr.shape[0]} vectors but the cloud has {np.shape(cloud)[0]} points")
    return arr


def check_scene_pairs(X, y=None):
    """Validate a sequence of (p1, p2) pairs and optional per-pair flows."""
    pairs = []
    for i, pair in enumerate(X):
        if len(pair) != 2:
            raise ValueError(f"scene {i}: expected a (p1, p2) pair")
        p1 = check_points(pair[0], name=f"scene {i} p1")
        p2 = check_points(pair[1], name=f"scene {i} p2")
        pairs.append((p1, p2))
    if not pairs:
        raise ValueError("no scenes given")
    if y is None:
        return pairs, None
    flows = list(y)
    if len(flows) != len(pairs):
        raise ValueError(f"{len(pairs)} scenes but {len(flows)} flows")
    flows = [check_flow(f, p[0], name=f"scene {i} flow") for i, (f, p) in enumerate(zip(flows, pairs))]
    return pairs, flows


def check_positive_int(value, name):
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)

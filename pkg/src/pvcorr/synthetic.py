"""Synthetic scene pairs made of a few rigidly moving clusters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import check_flow, check_points

MIN_POINTS = 64


@dataclass
class SceneSample:
    """Two frames and the ground-truth flow of the first (float32, meters)."""

    p1: np.ndarray
    p2: np.ndarray
    gt_flow: np.ndarray

    def __post_init__(self):
        self.p1 = check_points(self.p1, name="p1")
        self.p2 = check_points(self.p2, name="p2")
        self.gt_flow = check_flow(self.gt_flow, self.p1, name="gt_flow")


def random_rotation(rng, max_angle):
    """Rotation matrix about a uniformly random axis by an angle in [0, max_angle] radians."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def gen_synthetic(n_points, motion_scale=0.3, noise=0.0, seed=0, n_clusters=None,
                  max_rotation_deg=15.0, return_labels=False):
    """Generate one scene pair.

    Points are drawn uniformly inside 2-4 random boxes; each box moves
    rigidly (rotation about its center of at most ``max_rotation_deg``
    degrees, translation of length at most ``motion_scale``). The second frame
    is the moved first frame plus isotropic Gaussian jitter of std ``noise``,
    randomly permuted so correspondences are not positional.

    Args:
        n_points: points per frame, at least 64.
        motion_scale: largest translation length in meters.
        noise: jitter standard deviation in meters.
        seed: seed of the generator; equal seeds give identical samples.
        n_clusters: number of rigid clusters, random in 2..4 when None.
        return_labels: also return the cluster label of every p1 point.

    Returns:
        A :class:`SceneSample` (and the label array if requested).
    """
    if int(n_points) != n_points or n_points < MIN_POINTS:
        raise ValueError(f"n_points must be an integer >= {MIN_POINTS}, got {n_points}")
    if motion_scale < 0 or noise < 0 or max_rotation_deg < 0:
        raise ValueError("motion scale, noise and rotation bound must be non-negative")
    n_points = int(n_points)
    rng = np.random.default_rng(seed)
    if n_clusters is None:
        n_clusters = int(rng.integers(2, 5))
    if not 1 <= n_clusters <= n_points:
        raise ValueError(f"invalid cluster count {n_clusters}")

    sizes = rng.multinomial(n_points - n_clusters, np.full(n_clusters, 1 / n_clusters)) + 1
    labels = np.repeat(np.arange(n_clusters), sizes)
    centers = rng.uniform([-1.5, -1.5, -0.5], [1.5, 1.5, 0.5], size=(n_clusters, 3))
    extents = rng.uniform(0.4, 1.0, size=(n_clusters, 3))
    p1 = centers[labels] + (rng.random((n_points, 3)) - 0.5) * extents[labels]

    flow = np.empty_like(p1)
    max_angle = np.deg2rad(max_rotation_deg)
    for c in range(n_clusters):
        rot = random_rotation(rng, max_angle)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        shift = direction * rng.uniform(0.0, motion_scale)
        sel = labels == c
        local = p1[sel] - centers[c]
        flow[sel] = local @ rot.T + centers[c] + shift - p1[sel]

    p1 = p1.astype(np.float32)
    flow = flow.astype(np.float32)
    moved = p1 + flow
    if noise > 0:
        moved = moved + rng.normal(scale=noise, size=moved.shape).astype(np.float32)
    p2 = moved[rng.permutation(n_points)]
    sample = SceneSample(p1, p2, flow)
    if return_labels:
        return sample, labels
    return sample


def gen_dataset(n_scenes, n_points=256, motion_scale=0.3, noise=0.0, seed=0):
    """``n_scenes`` samples with per-scene seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(n_scenes)
    return [gen_synthetic(n_points, motion_scale, noise, int(s)) for s in seeds]

"""All-pairs correlation, top-M truncation, and the point / voxel lookups.

Both lookups only ever look at the M targets each source point retained
after truncation, so lookup cost is bounded by ``N1 * M`` regardless of N2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import CubeSpec, knn_among, subcube_ids

POINT_OUT = 64
VOXEL_HIDDEN = 128
GN_GROUPS = 8


@dataclass
class TruncatedCorrelation:
    """Top-M targets per source point.

    ``indices`` is an (N1, M) int array of target indices and ``scores`` the
    matching (N1, M) tensor of correlation values, both sorted by descending
    score with ties broken by the lower target index.
    """

    indices: np.ndarray
    scores: ad.Tensor

    @property
    def m(self):
        return self.indices.shape[1]

    def __len__(self):
        return self.indices.shape[0]


def build_correlation(f1, f2, scaled=False):
    """Dot product of every source feature with every target feature, ``f1 @ f2.T``.

    With ``scaled`` the products are divided by ``sqrt(D)``.
    """
    f1, f2 = ad._as_tensor(f1), ad._as_tensor(f2)
    if f1.data.ndim != 2 or f2.data.ndim != 2:
        raise ValueError("features must be 2-D (points x channels)")
    if f1.shape[1] != f2.shape[1]:
        raise ValueError(f"feature dimensions differ: {f1.shape[1]} vs {f2.shape[1]}")
    c = ad.matmul(f1, ad.transpose(f2))
    return ad.scale(c, 1.0 / np.sqrt(f1.shape[1])) if scaled else c


def truncate(corr, m):
    """Keep the ``m`` highest scores of each row."""
    corr = ad._as_tensor(corr)
    n2 = corr.shape[1]
    if not 1 <= m <= n2:
        raise ValueError(f"truncation number must be in 1..{n2}, got {m}")
    # stable sort of the negated scores: descending, ties keep the lower index first
    idx = np.argsort(-corr.data, axis=1, kind="stable")[:, :m]
    return TruncatedCorrelation(idx, ad.take_along_rows(corr, idx))


def point_lookup(q, target, tc, k):
    """Per-neighbor inputs of the point branch.

    For every translated point, take its ``k`` nearest retained targets and
    build (score, dx, dy, dz) with the offset measured from the query.

    Returns
    -------
    feats : Tensor (N1, k, 4)
    target_idx : int array (N1, k)
    """
    q = ad._as_tensor(q)
    target = np.asarray(target)
    if k > tc.m:
        raise ValueError(f"k={k} nearest neighbors requested but only M={tc.m} targets retained")
    cols = knn_among(target, tc.indices, q.data, k)
    tidx = np.take_along_axis(tc.indices, cols, axis=1)
    n = len(tc)
    score = ad.reshape(ad.take_along_rows(tc.scores, cols), (n, k, 1))
    nb = ad.Tensor(target[tidx].astype(q.data.dtype))
    offset = ad.sub(nb, ad.repeat_rows(q, k))
    return ad.concat([score, offset], axis=-1), tidx


def point_mlp(feats, w):
    h = ad.pointwise_linear(feats, w["fc1.w"], w["fc1.b"])
    h = ad.group_norm(h, GN_GROUPS, w["gn.gamma"], w["gn.beta"])
    h = ad.prelu(h, w["prelu"])
    h = ad.max_pool_neighbors(h)
    return ad.pointwise_linear(h, w["fc2.w"], w["fc2.b"])


def point_branch(q, target, tc, k, w):
    """Fine-grained correlation feature from the k nearest retained targets, (N1, 64)."""
    feats, _ = point_lookup(q, target, tc, k)
    return point_mlp(feats, w)


def voxel_lookup(q, target, tc, spec):
    """Mean retained score inside every sub-cube of every pyramid level.

    Returns a (N1, a^3 * levels) tensor, levels outermost, sub-cubes in
    lexicographic order. Empty sub-cubes are exactly zero.
    """
    qd = np.asarray(getattr(q, "data", q), dtype=np.float64)
    rel = np.asarray(target, dtype=np.float64)[tc.indices] - qd[:, None]
    levels = [ad.segment_mean(tc.scores, subcube_ids(rel, spec, lvl), spec.n_subcubes)
              for lvl in range(spec.levels)]
    return ad.concat(levels, axis=1)


def voxel_mlp(feats, w):
    h = ad.pointwise_linear(feats, w["fc1.w"], w["fc1.b"])
    h = ad.group_norm(h, GN_GROUPS, w["gn.gamma"], w["gn.beta"])
    h = ad.prelu(h, w["prelu"])
    return ad.pointwise_linear(h, w["fc2.w"], w["fc2.b"])


def voxel_branch(q, target, tc, spec, w):
    """Long-range correlation feature from the cube pyramid, (N1, 64)."""
    return voxel_mlp(voxel_lookup(q, target, tc, spec), w)


def combine(cp, cv):
    cp, cv = ad._as_tensor(cp), ad._as_tensor(cv)
    if cp.shape != cv.shape:
        raise ValueError(f"cannot combine correlation features {cp.shape} and {cv.shape}")
    return ad.add(cp, cv)


def branch_shapes(spec, point_out=POINT_OUT, voxel_hidden=VOXEL_HIDDEN):
    """Parameter shapes of both branch MLPs, keyed ``point.*`` / ``voxel.*``."""
    return {
        "point.fc1.w": (4, point_out),
        "point.fc1.b": (point_out,),
        "point.gn.gamma": (point_out,),
        "point.gn.beta": (point_out,),
        "point.prelu": (1,),
        "point.fc2.w": (point_out, point_out),
        "point.fc2.b": (point_out,),
        "voxel.fc1.w": (spec.feature_dim, voxel_hidden),
        "voxel.fc1.b": (voxel_hidden,),
        "voxel.gn.gamma": (voxel_hidden,),
        "voxel.gn.beta": (voxel_hidden,),
        "voxel.prelu": (1,),
        "voxel.fc2.w": (voxel_hidden, point_out),
        "voxel.fc2.b": (point_out,),
    }


def dump_fields(source_index, q, target, tc, spec, k):
    """Diagnostic record of what both lookups see for one source point.

    The record is JSON-serializable::

        {"source_index", "query", "levels": [{"side_length", "subcube_scores",
         "subcube_counts"}], "knn": [{"target_index", "score", "offset"}],
         "retained_indices", "retained_scores"}
    """
    n = len(tc)
    if not 0 <= source_index < n:
        raise IndexError(f"source index {source_index} outside 0..{n - 1}")
    qd = np.asarray(getattr(q, "data", q), dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    row = slice(source_index, source_index + 1)
    sub = TruncatedCorrelation(tc.indices[row], ad.Tensor(tc.scores.data[row]))
    scores = sub.scores.data[0].astype(np.float64)
    rel = target[sub.indices[0]] - qd[source_index]
    levels = []
    for lvl in range(spec.levels):
        ids = subcube_ids(rel, spec, lvl)
        valid = ids >= 0
        counts = np.bincount(ids[valid], minlength=spec.n_subcubes)
        sums = np.bincount(ids[valid], weights=scores[valid], minlength=spec.n_subcubes)
        means = sums / np.maximum(counts, 1)
        levels.append({
            "side_length": spec.side_length(lvl),
            "subcube_scores": [float(v) for v in means],
            "subcube_counts": [int(c) for c in counts],
        })
    kk = min(k, tc.m)
    cols = knn_among(target, sub.indices, qd[row], kk)[0]
    neighbors = [{
        "target_index": int(sub.indices[0, c]),
        "score": float(scores[c]),
        "offset": [float(v) for v in target[sub.indices[0, c]] - qd[source_index]],
    } for c in cols]
    return {
        "source_index": int(source_index),
        "query": [float(v) for v in qd[source_index]],
        "levels": levels,
        "knn": neighbors,
        "retained_indices": [int(i) for i in sub.indices[0]],
        "retained_scores": [float(s) for s in scores],
    }


__all__ = [
    "CubeSpec",
    "TruncatedCorrelation",
    "branch_shapes",
    "build_correlation",
    "combine",
    "dump_fields",
    "point_branch",
    "point_lookup",
    "point_mlp",
    "truncate",
    "voxel_branch",
    "voxel_lookup",
    "voxel_mlp",
]

"""Point-cloud containers, exact k-nearest-neighbor search and neighbor cubes.

Point clouds and flow fields are plain ``(N, 3)`` float arrays in meters;
:func:`pvcorr.validation.check_points` guards the public entry points.

Neighbor order everywhere is ascending squared distance with ties broken by
the lower target index, so the k-d tree and the exhaustive scan agree exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import check_flow, check_points

LEAF_SIZE = 16


def _sqdist(diff):
    # one fixed evaluation order, shared by the tree and the brute-force scan
    return (diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1]) + diff[..., 2] * diff[..., 2]


def _check_k(k, n):
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} available target points")


class KDTree:
    """Immutable median-split k-d tree over a target cloud.

    Queries are answered for all query points at once: leaves are visited in
    order of their bounding-box distance and a query stops as soon as the next
    box lies strictly farther than its current k-th neighbor.

    Parameters
    ----------
    points : array of shape (N, 3)
    leaf_size : int
        Maximum number of points per leaf.
    """

    def __init__(self, points, leaf_size=LEAF_SIZE):
        self.points = check_points(points, name="target").astype(np.float64)
        self.leaf_size = int(leaf_size)
        leaves = []
        self._split(np.arange(len(self.points)), leaves)
        width = max(len(leaf) for leaf in leaves)
        n = len(self.points)
        self._leaf_idx = np.full((len(leaves), width), n, dtype=np.int64)
        for i, leaf in enumerate(leaves):
            self._leaf_idx[i, :len(leaf)] = leaf
        self._lo = np.stack([self.points[leaf].min(axis=0) for leaf in leaves])
        self._hi = np.stack([self.points[leaf].max(axis=0) for leaf in leaves])
        # padded slots point at a sentinel row that is infinitely far away
        self._padded = np.vstack([self.points, np.full((1, 3), np.inf)])

    def __len__(self):
        return len(self.points)

    def _split(self, idx, leaves):
        if len(idx) <= self.leaf_size:
            leaves.append(np.sort(idx))
            return
        pts = self.points[idx]
        axis = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        order = idx[np.argsort(pts[:, axis], kind="stable")]
        mid = len(order) // 2
        self._split(order[:mid], leaves)
        self._split(order[mid:], leaves)

    @property
    def n_leaves(self):
        return len(self._leaf_idx)

    def query(self, queries, k):
        """Return ``(indices, sqdist)`` arrays of shape (Q, k)."""
        q = check_points(queries, name="queries").astype(np.float64)
        n = len(self.points)
        _check_k(k, n)
        nq = len(q)
        gap = np.maximum(np.maximum(self._lo[None] - q[:, None], q[:, None] - self._hi[None]), 0.0)
        lower = _sqdist(gap)
        visit = np.argsort(lower, axis=1, kind="stable")
        best_d = np.full((nq, k), np.inf)
        best_i = np.full((nq, k), n, dtype=np.int64)
        rows = np.arange(nq)
        for step in range(self.n_leaves):
            leaf = visit[:, step]
            # equal bound may still hold a lower-index tie, so only prune on strict >
            active = rows[lower[rows, leaf] <= best_d[:, -1]]
            if active.size == 0:
                break
            cand = self._leaf_idx[leaf[active]]
            cd = _sqdist(self._padded[cand] - q[active, None])
            all_i = np.concatenate([best_i[active], cand], axis=1)
            all_d = np.concatenate([best_d[active], cd], axis=1)
            order = np.lexsort((all_i, all_d), axis=-1)[:, :k]
            best_i[active] = np.take_along_axis(all_i, order, axis=1)
            best_d[active] = np.take_along_axis(all_d, order, axis=1)
        return best_i, best_d


def build_index(target):
    return KDTree(target)


def knn(index, queries, k):
    """k nearest targets per query through a :class:`KDTree`.

    Returns
    -------
    indices : int array (Q, k)
        Target indices, nearest first, ties by lower index.
    offsets : float array (Q, k, 3)
        ``neighbor - query`` for each returned neighbor.
    """
    if not isinstance(index, KDTree):
        index = KDTree(index)
    idx, _ = index.query(queries, k)
    q = np.asarray(queries, dtype=np.float64)
    return idx, index.points[idx] - q[:, None]


def knn_brute_force(target, queries, k):
    """Exhaustive-scan twin of :func:`knn`, same contract."""
    target = check_points(target, name="target").astype(np.float64)
    q = check_points(queries, name="queries").astype(np.float64)
    n = len(target)
    _check_k(k, n)
    idx = np.empty((len(q), k), dtype=np.int64)
    ids = np.arange(n)
    for i, p in enumerate(q):
        d = _sqdist(target - p)
        idx[i] = np.lexsort((ids, d))[:k]
    return idx, target[idx] - q[:, None]


def knn_among(target, candidates, queries, k):
    """k nearest targets per query, searching only that query's candidate set.

    ``candidates`` is a (Q, M) array of target indices (unique per row).
    Returns the chosen *columns* of ``candidates`` (Q, k), ordered by distance
    and then by target index.
    """
    candidates = np.asarray(candidates)
    if k > candidates.shape[1]:
        raise ValueError(f"k={k} exceeds the {candidates.shape[1]} candidates per query")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    d = _sqdist(np.asarray(target)[candidates] - np.asarray(queries)[:, None])
    order = np.lexsort((candidates, d), axis=-1)
    return order[:, :k]


@dataclass(frozen=True)
class CubeSpec:
    """Pyramid of a x a x a neighbor cubes around a query point.

    ``resolution`` sub-cubes per axis (odd), ``side`` the level-0 sub-cube
    side length in meters, ``levels`` pyramid levels; the side doubles per level.
    """

    resolution: int = 3
    side: float = 0.25
    levels: int = 3

    def __post_init__(self):
        if int(self.resolution) != self.resolution or self.resolution < 1 or self.resolution % 2 == 0:
            raise ValueError(f"cube resolution must be an odd positive integer, got {self.resolution}")
        if not self.side > 0:
            raise ValueError(f"sub-cube side length must be positive, got {self.side}")
        if int(self.levels) != self.levels or self.levels < 1:
            raise ValueError(f"pyramid levels must be a positive integer, got {self.levels}")

    @property
    def half(self):
        return (self.resolution - 1) // 2

    @property
    def n_subcubes(self):
        return self.resolution ** 3

    @property
    def feature_dim(self):
        return self.n_subcubes * self.levels

    def side_length(self, level):
        if not 0 <= level < self.levels:
            raise ValueError(f"level {level} outside 0..{self.levels - 1}")
        return self.side * 2.0 ** level

    def subcube_indices(self):
        """All sub-cube index triples in lexicographic order."""
        r = np.arange(-self.half, self.half + 1)
        return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def subcube_ids(rel, spec, level):
    """Flat sub-cube id for each relative position ``target - query``.

    A point belongs to sub-cube ``i`` iff ``rel - i * side`` lies in the
    half-open box ``[-side/2, side/2)^3``. Ids follow lexicographic (i, j, k)
    order; points outside the outer cube get -1.
    """
    side = spec.side_length(level)
    rel = np.asarray(rel, dtype=np.float64)
    cell = np.floor(rel / side + 0.5)
    d = rel - cell * side
    # floor may land one cell off when rel sits within rounding of a face
    cell -= d < -side / 2
    cell += (rel - cell * side) >= side / 2
    h = spec.half
    inside = (np.abs(cell) <= h).all(axis=-1)
    c = cell.astype(np.int64) + h
    a = spec.resolution
    ids = (c[..., 0] * a + c[..., 1]) * a + c[..., 2]
    return np.where(inside, ids, -1)


def cube_assign(queries, target, spec, level, candidates=None):
    """Map each query's sub-cubes to the target indices they contain.

    Returns a list (one per query) of dicts ``{(i, j, k): [target indices]}``;
    only non-empty sub-cubes appear. ``candidates`` optionally restricts each
    query to a (Q, M) set of target indices.
    """
    q = check_points(queries, name="queries").astype(np.float64)
    t = check_points(target, name="target").astype(np.float64)
    if candidates is None:
        candidates = np.broadcast_to(np.arange(len(t)), (len(q), len(t)))
    candidates = np.asarray(candidates)
    ids = subcube_ids(t[candidates] - q[:, None], spec, level)
    triples = spec.subcube_indices()
    out = []
    for row_ids, row_cand in zip(ids, candidates):
        cubes = {}
        for s, j in zip(row_ids, row_cand):
            if s >= 0:
                cubes.setdefault(tuple(int(v) for v in triples[s]), []).append(int(j))
        out.append(cubes)
    return out


def translate(cloud, flow):
    """Advect ``cloud`` by ``flow``: ``cloud + flow``."""
    cloud = check_points(cloud, name="cloud")
    flow = check_flow(flow, cloud)
    return cloud + flow

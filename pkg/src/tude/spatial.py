"""Exact nearest-neighbour queries and seed-point selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, bounding_box

# Candidates fetched beyond k so ties at the k-th distance can be resolved by index.
_TIE_PAD = 4


def _distances(points: np.ndarray, idx: np.ndarray, queries: np.ndarray) -> np.ndarray:
    diff = points[idx] - queries[:, None, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


class SpatialIndex:
    """Immutable k-d tree over a cloud with exact, deterministically ordered kNN.

    Neighbour lists are sorted by ascending Euclidean distance, ties broken by
    ascending point index. Distances are recomputed from coordinates so the
    ordering does not depend on the tree's internal arithmetic.
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError(f"expected a non-empty (N, 3) array, got {pts.shape}")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(self, queries: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """Batch kNN. Returns ``(indices, distances)``, both of shape (Q, k)."""
        n = len(self)
        if k < 1:
            raise ValueError("k must be positive")
        if k > n:
            raise ValueError(f"k={k} exceeds the number of points ({n})")
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        kk = min(n, k + _TIE_PAD)
        _, idx = self._tree.query(q, k=kk)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(q), kk)
        dist = _distances(self.points, idx, q)
        order = np.lexsort((idx, dist), axis=-1)
        idx = np.take_along_axis(idx, order, axis=-1)
        dist = np.take_along_axis(dist, order, axis=-1)
        if kk > k:
            # a candidate beyond the padding could still tie with the k-th one
            suspect = np.nonzero(dist[:, -1] <= dist[:, k - 1] * (1 + 1e-12))[0]
            for row in suspect:
                all_idx = np.arange(n)
                d = np.sqrt(np.sum((self.points - q[row]) ** 2, axis=1))
                o = np.lexsort((all_idx, d))[:kk]
                idx[row], dist[row] = all_idx[o], d[o]
        return idx[:, :k], dist[:, :k]

    def query_ball(self, point: np.ndarray, radius: float) -> List[int]:
        return self._tree.query_ball_point(point, radius)


def build_index(cloud: PointCloud) -> SpatialIndex:
    return SpatialIndex(cloud.points)


def knn(index: SpatialIndex, query: np.ndarray, k: int) -> List[Tuple[int, float]]:
    """The ``k`` nearest points to ``query`` as ``(index, distance)`` pairs."""
    idx, dist = index.query(np.asarray(query, dtype=np.float64)[None, :], k)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


@dataclass(frozen=True)
class SeedSet:
    """Indices of seed points in ascending order.

    ``voxel_size`` is the voxel edge for ``method="voxel"`` and the suppression
    radius for ``method="radius"``.
    """

    indices: np.ndarray
    voxel_size: float
    method: str = "voxel"

    def __len__(self) -> int:
        return len(self.indices)


def select_seeds(cloud: PointCloud, voxel_size: float) -> SeedSet:
    """Voxel-grid downsampling snapped to cloud points.

    The bounding box is cut into cubes of edge ``voxel_size``. In every
    occupied cube the member point closest to the members' centroid becomes
    a seed (lowest index on ties).
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    pts = cloud.points
    origin = bounding_box(cloud).min
    keys = np.floor((pts - origin) / voxel_size).astype(np.int64)
    _, label = np.unique(keys, axis=0, return_inverse=True)
    label = label.ravel()
    n_vox = label.max() + 1
    counts = np.bincount(label, minlength=n_vox).astype(np.float64)
    centroids = np.stack(
        [np.bincount(label, weights=pts[:, c], minlength=n_vox) for c in range(3)], axis=1
    ) / counts[:, None]
    d = np.sum((pts - centroids[label]) ** 2, axis=1)
    order = np.lexsort((np.arange(len(pts)), d, label))
    first = np.ones(len(order), dtype=bool)
    first[1:] = label[order[1:]] != label[order[:-1]]
    return SeedSet(np.sort(order[first]), float(voxel_size), "voxel")


def select_seeds_radius(
    cloud: PointCloud, radius: float, index: Optional[SpatialIndex] = None
) -> SeedSet:
    """Greedy Poisson-disk selection in index order.

    Point i becomes a seed unless an earlier seed lies within ``radius``.
    Depends on pairwise distances only, so it commutes with rigid motions.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    index = index or build_index(cloud)
    n = len(cloud)
    suppressed = np.zeros(n, dtype=bool)
    seeds = []
    pts = cloud.points
    for i in range(n):
        if suppressed[i]:
            continue
        seeds.append(i)
        suppressed[index.query_ball(pts[i], radius)] = True
    return SeedSet(np.asarray(seeds, dtype=np.int64), float(radius), "radius")


def _bisect_size(
    count: Callable[[float], int], n: int, ratio: float, lo: float, hi: float, iters: int
) -> float:
    """Log-space bisection for the size whose seed count is closest to ``ratio * n``."""
    target = ratio * n
    best_size, best_err = hi, math.inf
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        c = count(mid)
        err = abs(c - target)
        if err < best_err:
            best_size, best_err = mid, err
        if c > target:
            lo = mid
        else:
            hi = mid
    return best_size


def auto_voxel_size(cloud: PointCloud, ratio: float, iters: int = 40) -> float:
    """Voxel edge giving ``|S| / N`` as close to ``ratio`` as bisection finds."""
    if not 0 < ratio <= 1:
        raise ValueError("seed ratio must lie in (0, 1]")
    diag = bounding_box(cloud).diagonal
    if diag == 0:
        return 1.0
    return _bisect_size(
        lambda s: len(select_seeds(cloud, s)), len(cloud), ratio, diag * 1e-7, diag * 2, iters
    )


def auto_seed_radius(
    cloud: PointCloud, ratio: float, index: Optional[SpatialIndex] = None, iters: int = 14
) -> float:
    """Suppression radius giving ``|S| / N`` close to ``ratio``.

    The bracket is derived from the median nearest-neighbour spacing, which is
    invariant under rigid motions.
    """
    if not 0 < ratio <= 1:
        raise ValueError("seed ratio must lie in (0, 1]")
    index = index or build_index(cloud)
    n = len(cloud)
    if n == 1:
        return 1.0
    _, d = index.query(cloud.points, 2)
    spacing = float(np.median(d[:, 1]))
    if spacing == 0:
        spacing = float(d[:, 1].max()) or 1.0
    return _bisect_size(
        lambda r: len(select_seeds_radius(cloud, r, index)),
        n, ratio, spacing * 1e-3, spacing * 30, iters,
    )


def coverage_check(
    cloud: PointCloud, seeds: SeedSet, k: int, index: Optional[SpatialIndex] = None
) -> Tuple[bool, np.ndarray]:
    """Whether the k-neighbourhoods of all seeds cover the cloud.

    Returns ``(covered, uncovered_indices)``.
    """
    index = index or build_index(cloud)
    nbrs, _ = index.query(cloud.points[seeds.indices], k)
    hit = np.zeros(len(cloud), dtype=bool)
    hit[nbrs.ravel()] = True
    missing = np.nonzero(~hit)[0]
    return missing.size == 0, missing

"""Point cloud container, spatial indexing, normals, and density filters."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform


@dataclass(frozen=True)
class PointCloud:
    """3xN point set, optional unit normals, and a frame label."""

    points: np.ndarray
    normals: np.ndarray | None = None
    frame: str = ""

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float).reshape(3, -1))
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point coordinates")
        object.__setattr__(self, "points", pts)
        pts.setflags(write=False)
        if self.normals is not None:
            nrm = np.ascontiguousarray(np.asarray(self.normals, dtype=float).reshape(3, -1))
            if nrm.shape != pts.shape:
                raise ValueError("normals shape does not match points")
            lengths = np.linalg.norm(nrm, axis=0)
            valid = lengths > 0
            if np.any(np.abs(lengths[valid] - 1.0) > 1e-6):
                raise ValueError("normals are not unit length")
            object.__setattr__(self, "normals", nrm)
            nrm.setflags(write=False)

    def __len__(self):
        return self.points.shape[1]

    def select(self, idx):
        """New cloud restricted to the given point indices."""
        normals = self.normals[:, idx] if self.normals is not None else None
        return PointCloud(self.points[:, idx], normals, self.frame)


class NeighborIndex:
    """k-d tree over a point cloud snapshot; ties broken by lowest index."""

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise ValueError("cannot index an empty cloud")
        self.cloud = cloud
        self._tree = cKDTree(cloud.points.T)

    def query(self, points, k=1):
        """k nearest neighbors of each query column; returns (sq_dists, indices).

        Results are sorted by ascending distance; exact ties are reordered
        by ascending point index for determinism.
        """
        points = np.asarray(points, dtype=float)
        single = points.ndim == 1
        q = points.reshape(3, -1).T
        k = min(k, len(self.cloud))
        d, i = self._tree.query(q, k=k)
        d = np.atleast_2d(d.reshape(len(q), k))
        i = np.atleast_2d(i.reshape(len(q), k))
        # stable tie-break: lexsort by (index) within equal distances
        order = np.lexsort((i, d), axis=1)
        d = np.take_along_axis(d, order, axis=1)
        i = np.take_along_axis(i, order, axis=1)
        if single:
            return d[0] ** 2, i[0]
        return d ** 2, i


def build_index(cloud: PointCloud) -> NeighborIndex:
    return NeighborIndex(cloud)


def local_geometry(cloud: PointCloud, k=20, origin=None):
    """Per-point surface normals and local shape statistics.

    Returns (normals (3, n), singular_values (n, 3) descending, valid (n,)).
    Normals come from the smallest eigenvector of the k-neighborhood
    covariance, flipped toward `origin` (default: frame origin). Points whose
    neighborhood is rank-deficient (< 2) are marked invalid.
    """
    n = len(cloud)
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    if k < 3:
        raise ValueError("k must be >= 3")
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=float)
    tree = cKDTree(cloud.points.T)
    _, idx = tree.query(cloud.points.T, k=k)
    neigh = cloud.points.T[idx]                      # (n, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)           # ascending
    normals = eigvecs[:, :, 0].T                     # (3, n)
    svals = np.sqrt(np.maximum(eigvals[:, ::-1], 0.0))  # descending sigma1..3
    valid = svals[:, 1] > 1e-9 * np.maximum(svals[:, 0], 1e-300)
    # orient toward the sensor origin
    to_origin = origin[:, None] - cloud.points
    flip = np.sum(normals * to_origin, axis=0) < 0
    normals[:, flip] *= -1.0
    norms = np.linalg.norm(normals, axis=0)
    normals = normals / np.where(norms > 0, norms, 1.0)
    return normals, svals, valid


def estimate_normals(cloud: PointCloud, k=20, origin=None) -> PointCloud:
    """Cloud with unit normals estimated from k-neighborhood covariances."""
    normals, _, valid = local_geometry(cloud, k=k, origin=origin)
    normals = normals.copy()
    normals[:, ~valid] = 0.0  # invalid normals zeroed, excluded downstream
    return PointCloud(cloud.points, normals, cloud.frame)


def random_subsample(cloud: PointCloud, ratio, rng) -> PointCloud:
    """Keep ceil(ratio * n) points chosen uniformly without replacement."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    n = len(cloud)
    if ratio == 1 or n == 0:
        return cloud
    keep = int(np.ceil(ratio * n))
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return cloud.select(idx)


def max_density_filter(cloud: PointCloud, max_density, k=10) -> PointCloud:
    """Thin regions whose k-NN ball density exceeds max_density (points/m^3).

    Density at a point is k / (4/3 pi r_k^3) with r_k the distance to its
    k-th neighbor. Points are visited in index order; a point is dropped when
    the density of the surviving set at that point is still above threshold.
    """
    if max_density <= 0:
        raise ValueError("max_density must be positive")
    n = len(cloud)
    if n <= k:
        return cloud
    # target radius: a k-ball at max_density; greedy keep in index order,
    # accepting a point only while it has < k already-kept neighbors inside
    # that ball (grid-hashed so dense regions stay cheap)
    r_target = (3.0 * k / (4.0 * np.pi * max_density)) ** (1.0 / 3.0)
    cell = r_target
    pts = cloud.points
    cells = np.floor(pts / cell).astype(np.int64)
    buckets: dict[tuple, list] = {}
    kept = []
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1)
               for dz in (-1, 0, 1)]
    r2 = r_target ** 2
    for i in range(n):
        key = tuple(cells[:, i])
        count = 0
        for off in offsets:
            for j in buckets.get((key[0] + off[0], key[1] + off[1],
                                  key[2] + off[2]), ()):
                if np.sum((pts[:, j] - pts[:, i]) ** 2) <= r2:
                    count += 1
                    if count >= k:
                        break
            if count >= k:
                break
        if count < k:
            kept.append(i)
            buckets.setdefault(key, []).append(i)
    return cloud.select(np.array(kept, dtype=int))


def transform_cloud(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    """Map points by T; normals rotate only."""
    points = T.apply(cloud.points)
    normals = T.rotation @ cloud.normals if cloud.normals is not None else None
    return PointCloud(points, normals, cloud.frame)

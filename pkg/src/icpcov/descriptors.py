"""Voxel-grid descriptors of registered point cloud pairs.

The descriptor of a pair is built from the overlap cloud only: a fixed
4x4x4 grid, and per voxel the mean planarity, mean cylindricality, and a
9-bin histogram of surface normal orientations (11 values per voxel,
704 total).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud, local_geometry, transform_cloud
from .geometry import RigidTransform, adjoint, ensure_covariance, so3_exp

FEATURES_PER_VOXEL = 11

# Fixed hemisphere codebook for the 9-bin normal histogram: the coordinate
# axes, the four upper diagonals, and two horizontal diagonals. Normals are
# assigned to the direction with the largest |dot| (axial symmetry), ties to
# the lowest bin index.
HISTOGRAM_DIRECTIONS = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [1.0, -1.0, 1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, -1.0, 0.0],
])
HISTOGRAM_DIRECTIONS /= np.linalg.norm(HISTOGRAM_DIRECTIONS, axis=1)[:, None]
HISTOGRAM_DIRECTIONS.setflags(write=False)


@dataclass(frozen=True)
class VoxelGridSpec:
    """Fixed grid anchored in the reference frame; 64 cells by default."""

    counts: tuple = (4, 4, 4)
    extent_xy: float = 25.0
    extent_z: float = 10.0
    z_offset: float = -2.5     # grid spans [z_offset, z_offset + extent_z]

    def __post_init__(self):
        if self.extent_xy <= 0 or self.extent_z <= 0:
            raise ValueError("extents must be positive")
        if any(c < 1 for c in self.counts):
            raise ValueError("counts must be >= 1")

    @property
    def n_voxels(self):
        return int(np.prod(self.counts))

    @property
    def descriptor_length(self):
        return self.n_voxels * FEATURES_PER_VOXEL

    def voxel_of(self, points):
        """Flat voxel index per point (x-major, then y, then z); -1 if outside."""
        cx, cy, cz = self.counts
        lo = np.array([-self.extent_xy / 2, -self.extent_xy / 2, self.z_offset])
        size = np.array([self.extent_xy / cx, self.extent_xy / cy,
                         self.extent_z / cz])
        ijk = np.floor((points - lo[:, None]) / size[:, None]).astype(int)
        inside = np.all((ijk >= 0) & (ijk < np.array([cx, cy, cz])[:, None]), axis=0)
        flat = ijk[0] * (cy * cz) + ijk[1] * cz + ijk[2]
        return np.where(inside, flat, -1)

    def to_dict(self):
        return {"counts": list(self.counts), "extent_xy": self.extent_xy,
                "extent_z": self.extent_z, "z_offset": self.z_offset}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["counts"]), d["extent_xy"], d["extent_z"], d["z_offset"])


@dataclass(frozen=True)
class TrainingExample:
    descriptor: np.ndarray        # (704,)
    covariance: np.ndarray        # (6, 6)
    pair_id: str = ""
    augmentation_angle: float = 0.0

    def __post_init__(self):
        ensure_covariance(self.covariance, "training covariance")


def extract_overlap(P: PointCloud, Q: PointCloud, T: RigidTransform,
                    radius=0.5) -> PointCloud:
    """Overlap cloud S in the reference frame: points of T*P with a neighbor
    in Q within radius, union points of Q with a neighbor in T*P."""
    moved = transform_cloud(P, T)
    tree_q = cKDTree(Q.points.T)
    tree_p = cKDTree(moved.points.T)
    d_p, _ = tree_q.query(moved.points.T, k=1)
    d_q, _ = tree_p.query(Q.points.T, k=1)
    keep_p = moved.points[:, d_p <= radius]
    keep_q = Q.points[:, d_q <= radius]
    pts = np.hstack([keep_p, keep_q])
    normals = None
    if moved.normals is not None and Q.normals is not None:
        normals = np.hstack([moved.normals[:, d_p <= radius],
                             Q.normals[:, d_q <= radius]])
    return PointCloud(pts, normals, frame=Q.frame)


def voxelize(S: PointCloud, grid: VoxelGridSpec):
    """Per-voxel point index lists plus the out-of-bounds drop count."""
    flat = grid.voxel_of(S.points)
    lists = [np.nonzero(flat == v)[0] for v in range(grid.n_voxels)]
    return lists, int(np.sum(flat < 0))


def shape_features(svals, valid):
    """(planarity, cylindricality) averaged over points with valid shape.

    Per point, from descending singular values s1 >= s2 >= s3 of the local
    neighborhood: cylindricality (s1 - s2)/s1 and planarity (s2 - s3)/s1.
    """
    svals = np.asarray(svals, dtype=float).reshape(-1, 3)
    valid = np.asarray(valid, dtype=bool) & (svals[:, 0] > 0)
    if not np.any(valid):
        return 0.0, 0.0
    s = svals[valid]
    c = (s[:, 0] - s[:, 1]) / s[:, 0]
    p = (s[:, 1] - s[:, 2]) / s[:, 0]
    return float(p.mean()), float(c.mean())


def normal_histogram9(normals, n_points=None):
    """9-bin orientation histogram normalized by the voxel point count."""
    normals = np.asarray(normals, dtype=float).reshape(3, -1)
    lengths = np.linalg.norm(normals, axis=0)
    normals = normals[:, lengths > 0.5]
    total = normals.shape[1] if n_points is None else n_points
    h = np.zeros(9)
    if normals.shape[1] == 0 or total == 0:
        return h
    scores = np.abs(HISTOGRAM_DIRECTIONS @ normals)      # (9, m)
    bins = np.argmax(scores, axis=0)                     # argmax: lowest index on ties
    np.add.at(h, bins, 1.0)
    return h / total


def describe_pair(P: PointCloud, Q: PointCloud, T: RigidTransform,
                  grid: VoxelGridSpec = VoxelGridSpec(), radius=0.5,
                  shape_k=20):
    """Full descriptor of a registered pair: overlap -> grid -> features.

    Returns (descriptor, empty_overlap_flag). Normals and local shape are
    computed on the overlap cloud with k=20 neighborhoods (origin of the
    reference frame disambiguates normal signs).
    """
    S = extract_overlap(P, Q, T, radius)
    d = np.zeros(grid.descriptor_length)
    if len(S) <= shape_k:
        return d, True
    normals, svals, valid = local_geometry(S, k=shape_k)
    lists, _ = voxelize(S, grid)
    for v, idx in enumerate(lists):
        if len(idx) == 0:
            continue
        p, c = shape_features(svals[idx], valid[idx])
        h = normal_histogram9(normals[:, idx][:, valid[idx]], n_points=len(idx))
        d[v * FEATURES_PER_VOXEL:(v + 1) * FEATURES_PER_VOXEL] = [p, c, *h]
    return d, False


def rotation_about_z(theta) -> RigidTransform:
    return RigidTransform(so3_exp(np.array([0.0, 0.0, float(theta)])), np.zeros(3))


def augment_example(P: PointCloud, Q: PointCloud, T: RigidTransform,
                    covariance, theta, grid: VoxelGridSpec = VoxelGridSpec(),
                    radius=0.5, pair_id="") -> TrainingExample:
    """Training example rotated by theta about the reference z axis.

    The descriptor is recomputed on the rotated clouds; the covariance is
    transported by the adjoint of the rotation.
    """
    Rz = rotation_about_z(theta)
    P_rot = P                      # reading stays in its own frame
    Q_rot = transform_cloud(Q, Rz)
    T_rot = Rz @ T
    d, _ = describe_pair(P_rot, Q_rot, T_rot, grid, radius)
    Ad = adjoint(Rz)
    Y_aug = Ad @ np.asarray(covariance, dtype=float) @ Ad.T
    return TrainingExample(d, (Y_aug + Y_aug.T) / 2.0, pair_id, float(theta))

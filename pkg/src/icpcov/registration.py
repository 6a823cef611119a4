"""Point-to-plane ICP: 3-NN matching, trimmed outlier rejection, minimization.

Pipeline per iteration: match -> trim -> minimize -> update, with an optional
up-front density filter and random subsampling of the reading cloud.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import (NeighborIndex, PointCloud, build_index, estimate_normals,
                    max_density_filter, random_subsample, transform_cloud)
from .geometry import RigidTransform, exp_map, log_map


@dataclass(frozen=True)
class IcpConfig:
    knn: int = 3
    trim_ratio: float = 0.70
    max_iterations: int = 80
    tol_translation: float = 1e-4
    tol_rotation: float = 1e-4
    subsample_ratio: float = 1.0
    max_density: float | None = None
    normal_k: int = 20

    def __post_init__(self):
        if not 0 < self.trim_ratio <= 1:
            raise ValueError("trim_ratio must be in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class AssociationSet:
    """Pooled point associations: parallel arrays over association index."""

    reading_idx: np.ndarray     # (m,) indices into the reading cloud
    reference_idx: np.ndarray   # (m,) indices into the reference cloud
    sq_dist: np.ndarray         # (m,) squared point-to-point distances
    normals: np.ndarray         # (3, m) reference normals

    def __post_init__(self):
        if np.any(self.sq_dist < 0):
            raise ValueError("negative squared distance")

    def __len__(self):
        return len(self.reading_idx)


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    iterations: int
    objective: float
    converged: bool
    degenerate: bool = False


def match_points(reading: PointCloud, reference: PointCloud,
                 index: NeighborIndex, knn=3) -> AssociationSet:
    """Associate each reading point with its knn nearest reference points."""
    if len(reading) == 0 or len(reference) == 0:
        raise ValueError("cannot match empty clouds")
    if knn < 1:
        raise ValueError("knn must be >= 1")
    sq_d, idx = index.query(reading.points, k=knn)
    k = idx.shape[1]
    reading_idx = np.repeat(np.arange(len(reading)), k)
    reference_idx = idx.reshape(-1)
    sq_dist = sq_d.reshape(-1)
    if reference.normals is None:
        raise ValueError("reference cloud has no normals")
    return AssociationSet(reading_idx, reference_idx, sq_dist,
                          reference.normals[:, reference_idx])


def trim_outliers(assoc: AssociationSet, trim_ratio=0.70) -> AssociationSet:
    """Keep the floor(trim_ratio * N) closest associations (stable order)."""
    if not 0 < trim_ratio <= 1:
        raise ValueError("trim_ratio must be in (0, 1]")
    n = len(assoc)
    keep = int(np.floor(trim_ratio * n))
    order = np.argsort(assoc.sq_dist, kind="stable")[:keep]
    order.sort()
    return AssociationSet(assoc.reading_idx[order], assoc.reference_idx[order],
                          assoc.sq_dist[order], assoc.normals[:, order])


def minimize_point_to_plane(assoc: AssociationSet, reading: PointCloud,
                            reference: PointCloud):
    """Small-angle least-squares twist minimizing sum(n . (p + w x p + t - q))^2.

    Returns (twist, degenerate). A rank-deficient 6x6 system falls back to a
    regularized minimum-norm solve with the degeneracy flagged.
    """
    p = reading.points[:, assoc.reading_idx]
    q = reference.points[:, assoc.reference_idx]
    n = assoc.normals
    valid = np.linalg.norm(n, axis=0) > 0.5   # excluded invalid (zeroed) normals
    p, q, n = p[:, valid], q[:, valid], n[:, valid]
    # residual r_i = a_i . x + b_i with a = [n; p x n], x = [t; w]
    a = np.vstack([n, np.cross(p.T, n.T).T])          # (6, m)
    b = np.einsum("im,im->m", n, p - q)
    A = a @ a.T
    rhs = -a @ b
    rank = np.linalg.matrix_rank(A, tol=1e-9 * max(np.trace(A), 1e-300))
    degenerate = rank < 6 or a.shape[1] < 6
    if degenerate:
        A = A + 1e-9 * max(np.trace(A) / 6.0, 1e-12) * np.eye(6)
    x = np.linalg.solve(A, rhs)
    return x, degenerate


def _point_to_plane_cost(assoc, reading, reference):
    p = reading.points[:, assoc.reading_idx]
    q = reference.points[:, assoc.reference_idx]
    n = assoc.normals
    r = np.einsum("im,im->m", n, p - q)
    return float(r @ r)


def _prepare_reading(P: PointCloud, config: IcpConfig, rng=None):
    """Apply the up-front reading-cloud filters (density cap, subsampling)."""
    if config.max_density is not None:
        P = max_density_filter(P, config.max_density)
    if config.subsample_ratio < 1.0:
        if rng is None:
            rng = np.random.default_rng(0)
        P = random_subsample(P, config.subsample_ratio, rng)
    return P


def _prepare(P: PointCloud, Q: PointCloud, config: IcpConfig, rng=None):
    """Apply the up-front filters and make sure the reference has normals."""
    P = _prepare_reading(P, config, rng)
    if config.max_density is not None:
        Q = max_density_filter(Q, config.max_density)
    if Q.normals is None:
        Q = estimate_normals(Q, k=min(config.normal_k, max(3, len(Q) - 1)))
    return P, Q


def icp(P: PointCloud, Q: PointCloud, T_init: RigidTransform,
        config: IcpConfig = IcpConfig(), rng=None,
        index: NeighborIndex | None = None) -> RegistrationResult:
    """Register reading P onto reference Q starting from T_init.

    A prebuilt `index` over Q (with normals) short-circuits the filtering
    stage; this is the fast path for covariance sampling where Q is reused.
    """
    if len(P) == 0 or len(Q) == 0:
        raise ValueError("cannot register empty clouds")
    if index is not None:
        # the reference is prebuilt, but reading-side filters still apply
        Q = index.cloud
        P = _prepare_reading(P, config, rng)
    else:
        P, Q = _prepare(P, Q, config, rng)
        index = build_index(Q)
    T = T_init
    degenerate = False
    converged = False
    iterations = 0
    assoc = None
    moved = None
    for iterations in range(1, config.max_iterations + 1):
        moved = transform_cloud(P, T)
        assoc = match_points(moved, Q, index, config.knn)
        assoc = trim_outliers(assoc, config.trim_ratio)
        xi, degenerate = minimize_point_to_plane(assoc, moved, Q)
        T = exp_map(xi) @ T
        if (np.linalg.norm(xi[:3]) < config.tol_translation
                and np.linalg.norm(xi[3:]) < config.tol_rotation):
            converged = True
            break
    objective = _point_to_plane_cost(assoc, transform_cloud(P, T), Q)
    if degenerate:
        converged = False
    return RegistrationResult(T, iterations, objective, converged, degenerate)


def objective_value(P: PointCloud, Q: PointCloud, T: RigidTransform,
                    config: IcpConfig = IcpConfig(),
                    index: NeighborIndex | None = None) -> float:
    """Trimmed point-to-plane cost after one matching pass at pose T."""
    if index is not None:
        Q = index.cloud
    else:
        P, Q = _prepare(P, Q, config)
        index = build_index(Q)
    moved = transform_cloud(P, T)
    assoc = trim_outliers(match_points(moved, Q, index, config.knn),
                          config.trim_ratio)
    return _point_to_plane_cost(assoc, moved, Q)

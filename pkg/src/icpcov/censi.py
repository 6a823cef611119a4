"""Closed-form covariance of point-to-plane ICP from the objective Hessian
and the implicit-function sensitivity to sensor noise."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud, build_index, estimate_normals
from .geometry import RigidTransform, regularize_spd
from .registration import IcpConfig, icp, match_points, trim_outliers
from .sampling import (PerturbationModel, dbscan_filter, sample_registrations,
                       sampled_covariance)


@dataclass(frozen=True)
class SensorNoiseModel:
    """Isotropic per-point range noise, standard deviation in meters."""

    sigma_z: float
    include_reference: bool = False

    def __post_init__(self):
        if self.sigma_z < 0:
            raise ValueError("sigma_z must be >= 0")


def _plane_constraints(assoc, moved, reference):
    """Rows a_i = [n_i; p_i x n_i] of the linearized point-to-plane system."""
    p = moved.points[:, assoc.reading_idx]
    n = assoc.normals
    valid = np.linalg.norm(n, axis=0) > 0.5
    p, n = p[:, valid], n[:, valid]
    return np.vstack([n, np.cross(p.T, n.T).T]), n


def censi_covariance(P: PointCloud, Q: PointCloud, T_hat: RigidTransform,
                     noise: SensorNoiseModel, config: IcpConfig = IcpConfig(),
                     assoc=None, moved=None):
    """H^-1 G Sigma_z G^T H^-1 on the association set frozen at T_hat.

    H is the (analytic) Hessian of the trimmed point-to-plane cost in the
    small-angle parameterization; G collects its mixed derivatives with
    respect to the reading point noise. A frozen association set may be
    passed directly (`assoc` with the matching `moved` reading cloud).
    """
    from .cloud import transform_cloud
    if assoc is None:
        if Q.normals is None:
            Q = estimate_normals(Q, k=min(config.normal_k, max(3, len(Q) - 1)))
        index = build_index(Q)
        moved = transform_cloud(P, T_hat)
        assoc = trim_outliers(match_points(moved, Q, index, config.knn),
                              config.trim_ratio)
    a, n = _plane_constraints(assoc, moved, Q)
    A = a @ a.T                                   # H = 2 A
    H = 2.0 * A
    rank = np.linalg.matrix_rank(H, tol=1e-9 * max(np.trace(H), 1e-300))
    if rank < 6:
        H = H + 1e-9 * max(np.trace(H) / 6.0, 1e-12) * np.eye(6)
    # G_i = d^2 J / dz_i dx = 2 a_i n_i^T per reading point;
    # sum_i G_i G_i^T = 4 sum a_i (n_i . n_i) a_i^T = 4 A for unit normals.
    noise_quad = 4.0 * A * noise.sigma_z ** 2
    if noise.include_reference:
        noise_quad = noise_quad * 2.0
    Hinv = np.linalg.inv(H)
    Y = Hinv @ noise_quad @ Hinv
    return (Y + Y.T) / 2.0


def noise_sweep(scene_factory, sigma_values, n_samples, a=0.05,
                config: IcpConfig = IcpConfig(), seed=0,
                dbscan_eps=0.1, sensor_sigma=None):
    """Sampled vs Censi covariance traces across sensor noise levels.

    `scene_factory(sigma, seed)` returns (P, Q, T_true) with fresh noisy
    clouds. The same seed is used for every noise level (common random
    numbers), so sampled traces vary smoothly with sigma instead of being
    dominated by independent Monte-Carlo noise between columns.
    Returns a list of dict rows (sigma, trace_sampled, trace_censi).
    """
    rows = []
    for sigma in sigma_values:
        P, Q, T_true = scene_factory(sigma, seed)
        if Q.normals is None:
            Q = estimate_normals(Q, k=min(config.normal_k, max(3, len(Q) - 1)))
        model = PerturbationModel(T_true, a)
        samples = sample_registrations(P, Q, T_true, model, n_samples,
                                       config, seed=seed)
        filtered = dbscan_filter(samples, eps=dbscan_eps)
        if filtered.kept.sum() < 2:
            filtered = samples
        Y_sampled = sampled_covariance(filtered).matrix
        noise = SensorNoiseModel(sigma if sensor_sigma is None else sensor_sigma)
        Y_censi = censi_covariance(P, Q, T_true, noise, config)
        rows.append({"sigma": float(sigma),
                     "trace_sampled": float(np.trace(Y_sampled)),
                     "trace_censi": float(np.trace(Y_censi))})
    return rows

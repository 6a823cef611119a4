"""Monte-Carlo sampling of the ICP result distribution and its covariance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import DBSCAN

from .cloud import PointCloud, build_index, estimate_normals
from .geometry import RigidTransform, ensure_covariance, exp_map, log_map
from .registration import IcpConfig, icp
from .rng import derive_rng


@dataclass(frozen=True)
class PerturbationModel:
    """Isotropic Gaussian over initial transforms: exp(xi) T_mean, xi ~ N(0, aI)."""

    mean: RigidTransform
    a: float = 0.05

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("a must be >= 0")


@dataclass
class SampleSet:
    """Registration perturbations xi_i = log(T_true^-1 T_hat_i) and diagnostics."""

    xis: np.ndarray                     # (n, 6)
    converged: np.ndarray               # (n,) bool
    seeds: np.ndarray                   # (n,) int
    kept: np.ndarray | None = None      # (n,) bool, set by dbscan_filter
    cluster_id: int = -1
    filter_failed: bool = False

    def __len__(self):
        return len(self.xis)

    @property
    def kept_xis(self):
        return self.xis if self.kept is None else self.xis[self.kept]

    def to_csv(self, path):
        kept = np.ones(len(self), dtype=int) if self.kept is None else self.kept.astype(int)
        header = "seed,u_x,u_y,u_z,w_x,w_y,w_z,converged,cluster"
        rows = np.column_stack([self.seeds, self.xis, self.converged.astype(int),
                                np.where(kept, self.cluster_id, -1)])
        fmt = ["%d"] + ["%.17g"] * 6 + ["%d", "%d"]
        np.savetxt(path, rows, fmt=fmt, delimiter=",", header=header, comments="")


@dataclass(frozen=True)
class SampledCovariance:
    matrix: np.ndarray                  # (6, 6)
    n_total: int
    n_kept: int
    cluster_id: int
    mean_xi: np.ndarray                 # diagnostic: sample mean of kept xi

    def __post_init__(self):
        ensure_covariance(self.matrix, "sampled covariance")
        if self.n_kept > self.n_total:
            raise ValueError("n_kept > n_total")


def draw_initial_transform(model: PerturbationModel, rng) -> RigidTransform:
    """One draw exp(xi) T_mean with xi ~ N(0, a I)."""
    xi = rng.normal(scale=np.sqrt(model.a), size=6) if model.a > 0 else np.zeros(6)
    return exp_map(xi) @ model.mean


def sample_registrations(P: PointCloud, Q: PointCloud, T_true: RigidTransform,
                         model: PerturbationModel, n, config: IcpConfig = IcpConfig(),
                         seed=0, registrar=None) -> SampleSet:
    """Run n seeded registrations from perturbed priors.

    `registrar(P, Q, T_init, config, index)` defaults to ICP; an injectable
    stub supports oracle testing. Per-sample seeds are derived from the batch
    seed and sample index, so results do not depend on execution order.
    Failures are recorded as non-converged entries, never raised.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    if Q.normals is None:
        Q = estimate_normals(Q, k=min(config.normal_k, max(3, len(Q) - 1)))
    index = build_index(Q)
    xis = np.zeros((n, 6))
    converged = np.zeros(n, dtype=bool)
    seeds = np.arange(n, dtype=np.int64)
    T_true_inv = T_true.inverse()
    for i in range(n):
        rng = derive_rng(seed, "sample_registrations", i)
        T_init = draw_initial_transform(model, rng)
        try:
            if registrar is None:
                res = icp(P, Q, T_init, config, rng=rng, index=index)
                T_hat, conv = res.transform, res.converged
            else:
                T_hat = registrar(P, Q, T_init, config, index)
                conv = True
            xis[i] = log_map(T_true_inv @ T_hat)
            converged[i] = conv
        except Exception:
            converged[i] = False
    return SampleSet(xis, converged, seeds)


def dbscan_filter(samples: SampleSet, eps=0.1, min_pts=None,
                  rotation_weight=1.0) -> SampleSet:
    """Keep the DBSCAN cluster whose mean twist is closest to ground truth.

    Clustering runs in R^6 with the rotation components scaled by
    `rotation_weight`. Noise points are dropped. If no cluster forms, the
    result is empty and flagged.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = len(samples)
    if n == 0:
        return SampleSet(samples.xis, samples.converged, samples.seeds,
                         kept=np.zeros(0, dtype=bool), filter_failed=True)
    if min_pts is None:
        min_pts = max(5, n // 500)
    scaled = samples.xis.copy()
    scaled[:, 3:] *= rotation_weight
    labels = DBSCAN(eps=eps, min_samples=min_pts).fit_predict(scaled)
    cluster_ids = [c for c in np.unique(labels) if c >= 0]
    if not cluster_ids:
        return SampleSet(samples.xis, samples.converged, samples.seeds,
                         kept=np.zeros(n, dtype=bool), filter_failed=True)
    best, best_norm = -1, np.inf
    for c in cluster_ids:
        mean_norm = np.linalg.norm(samples.xis[labels == c].mean(axis=0))
        if mean_norm < best_norm:
            best, best_norm = c, mean_norm
    return SampleSet(samples.xis, samples.converged, samples.seeds,
                     kept=labels == best, cluster_id=int(best))


def sampled_covariance(samples: SampleSet) -> SampledCovariance:
    """Y = 1/(n-1) sum xi xi^T over kept samples (second moment about truth)."""
    xis = samples.kept_xis
    n = len(xis)
    if n < 2:
        raise ValueError("need at least 2 kept samples for a covariance")
    Y = xis.T @ xis / (n - 1)
    Y = (Y + Y.T) / 2.0
    return SampledCovariance(Y, len(samples), n, samples.cluster_id,
                             xis.mean(axis=0))


def divergence_check(samples: SampleSet, max_translation=1.0, max_rotation=1.0):
    """Accept unless registrations land on average > 1 m or > 1 rad away."""
    if len(samples) == 0:
        raise ValueError("empty sample set")
    mean_u = np.linalg.norm(samples.xis[:, :3], axis=1).mean()
    mean_w = np.linalg.norm(samples.xis[:, 3:], axis=1).mean()
    return bool(mean_u <= max_translation and mean_w <= max_rotation)

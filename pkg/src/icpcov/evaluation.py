"""Gaussian KL divergence, trajectory odometry with compounded covariances,
and consistency classification."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud, build_index, estimate_normals
from .descriptors import VoxelGridSpec, describe_pair
from .geometry import (RigidTransform, compound_covariance, compound_pose,
                       log_map, mahalanobis, regularize_spd)
from .registration import IcpConfig, icp
from .rng import derive_rng
from .sampling import PerturbationModel, draw_initial_transform


def kl_divergence(Y0, Y1):
    """KL(N(0, Y0) || N(0, Y1)) = (tr(Y1^-1 Y0) - 6 + ln det Y1/det Y0)/2."""
    Y0 = np.asarray(Y0, dtype=float)
    Y1 = np.asarray(Y1, dtype=float)
    if np.linalg.eigvalsh(Y0)[0] <= 0:
        Y0 = regularize_spd(Y0)
    if np.linalg.eigvalsh(Y1)[0] <= 0:
        Y1 = regularize_spd(Y1)
    if np.linalg.eigvalsh(Y0)[0] <= 0 or np.linalg.eigvalsh(Y1)[0] <= 0:
        raise ValueError("covariances not positive definite after regularization")
    _, logdet0 = np.linalg.slogdet(Y0)
    _, logdet1 = np.linalg.slogdet(Y1)
    return float(0.5 * (np.trace(np.linalg.solve(Y1, Y0)) - 6.0
                        + logdet1 - logdet0))


def baseline_covariance(covariances):
    """Elementwise mean of the training covariances (the trivial predictor)."""
    Y = np.mean(np.asarray(covariances, dtype=float), axis=0)
    return (Y + Y.T) / 2.0


@dataclass
class TrajectoryResult:
    step_transforms: list           # per-step estimated relative transforms
    step_covariances: list          # per-step predicted 6x6 covariances
    final_transform: RigidTransform
    final_covariance: np.ndarray
    true_final: RigidTransform
    error_twist: np.ndarray         # log(T_true_final^-1 T_hat_final)
    mahalanobis_full: float
    mahalanobis_translation: float
    mahalanobis_rotation: float
    converged: bool


@dataclass(frozen=True)
class ConsistencyReport:
    mean_dm: float
    mean_dm_translation: float
    mean_dm_rotation: float
    classification: str
    n_trajectories: int
    n_excluded: int


def _scalar_mahalanobis(v, block):
    return float(np.sqrt(v @ np.linalg.solve(block, v)))


def run_trajectory(clouds, poses, predictor, model_a=0.05,
                   config: IcpConfig = IcpConfig(),
                   grid: VoxelGridSpec = VoxelGridSpec(), overlap_radius=0.5,
                   seed=0, fourth_order=True) -> TrajectoryResult:
    """ICP odometry over a sequence with compounded predicted covariances.

    `clouds` are sensor-frame scans, `poses` sensor-to-world ground truth.
    Each step registers cloud k+1 (reading) onto cloud k (reference) from a
    prior drawn around the true relative transform, predicts the step
    covariance from the pair descriptor, and compounds.
    """
    if len(clouds) < 2 or len(clouds) != len(poses):
        raise ValueError("need >= 2 clouds with matching poses")
    T_acc = RigidTransform.identity()
    Y_acc = np.zeros((6, 6))
    steps_T, steps_Y = [], []
    all_converged = True
    for k in range(len(clouds) - 1):
        reference, reading = clouds[k], clouds[k + 1]
        if reference.normals is None:
            reference = estimate_normals(
                reference, k=min(config.normal_k, max(3, len(reference) - 1)))
        index = build_index(reference)
        T_true_step = poses[k].inverse() @ poses[k + 1]
        rng = derive_rng(seed, "trajectory_step", k)
        T_init = draw_initial_transform(PerturbationModel(T_true_step, model_a), rng)
        res = icp(reading, reference, T_init, config, index=index)
        all_converged = all_converged and res.converged
        d, _ = describe_pair(reading, reference, res.transform, grid,
                             overlap_radius)
        Y_step = predictor.predict_one(d)
        Y_acc = compound_covariance(T_acc, Y_acc, Y_step,
                                    fourth_order=fourth_order)
        T_acc = compound_pose(T_acc, res.transform)
        steps_T.append(res.transform)
        steps_Y.append(Y_step)
    true_final = poses[0].inverse() @ poses[-1]
    xi = log_map(true_final.inverse() @ T_acc)
    dm = mahalanobis(xi, regularize_spd(Y_acc))
    dm_u = _scalar_mahalanobis(xi[:3], regularize_spd(Y_acc)[:3, :3])
    dm_w = _scalar_mahalanobis(xi[3:], regularize_spd(Y_acc)[3:, 3:])
    return TrajectoryResult(steps_T, steps_Y, T_acc, Y_acc, true_final, xi,
                            dm, dm_u, dm_w, all_converged)


def consistency_report(trajectories, exclude_nonconverged=True) -> ConsistencyReport:
    """Mean Mahalanobis distances and the optimistic/consistent/pessimistic call.

    Mean D_M > 3 is optimistic, < 1.5 pessimistic, otherwise consistent
    (boundary values count as consistent).
    """
    if not trajectories:
        raise ValueError("no trajectories")
    used = [t for t in trajectories if t.converged or not exclude_nonconverged]
    n_excluded = len(trajectories) - len(used)
    if not used:
        raise ValueError("all trajectories excluded as non-converged")
    mean_dm = float(np.mean([t.mahalanobis_full for t in used]))
    mean_u = float(np.mean([t.mahalanobis_translation for t in used]))
    mean_w = float(np.mean([t.mahalanobis_rotation for t in used]))
    if mean_dm > 3.0:
        classification = "optimistic"
    elif mean_dm < 1.5:
        classification = "pessimistic"
    else:
        classification = "consistent"
    return ConsistencyReport(mean_dm, mean_u, mean_w, classification,
                             len(used), n_excluded)


def evaluate_predictor(test_examples, predictor, baseline, censi_covariances=None):
    """Per-pair KL(sampled || prediction) for each method, averaged.

    `test_examples` iterate as (descriptor, sampled_Y); `baseline` is a fixed
    6x6; `censi_covariances` aligns with the examples when provided. Returns
    (rows, averages) where each row is a dict per pair.
    """
    rows = []
    for i, (d, Y_k) in enumerate(test_examples):
        row = {"pair": i,
               "kl_baseline": kl_divergence(Y_k, baseline),
               "kl_learned": kl_divergence(Y_k, predictor.predict_one(d))}
        if censi_covariances is not None:
            row["kl_censi"] = kl_divergence(Y_k, regularize_spd(
                censi_covariances[i], eps=1e-6))
        rows.append(row)
    averages = {key: float(np.mean([r[key] for r in rows]))
                for key in rows[0] if key != "pair"}
    return rows, averages

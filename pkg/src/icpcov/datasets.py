"""Sequence dataset ingestion: cloud CSV files plus a ground-truth pose file.

Layout: a directory with `cloud_000.csv`, `cloud_001.csv`, ... (header
`x,y,z`, one point per row, meters) and `poses.csv` (one row per cloud,
12 values: the 3x4 matrix [R|t] in row-major order, sensor-to-world).
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .geometry import RigidTransform

MAX_PAIR_GAP = 4


def enumerate_pairs(length, max_gap=MAX_PAIR_GAP):
    """All (i, j) with i < j < length and j - i <= max_gap."""
    return [(i, j) for i in range(length) for j in range(i + 1, length)
            if j - i <= max_gap]


@dataclass(frozen=True)
class SequenceDataset:
    clouds: tuple                    # of PointCloud
    poses: tuple                     # of RigidTransform, sensor-to-world
    pairs: tuple                     # of (i, j) index pairs

    def __post_init__(self):
        if len(self.clouds) != len(self.poses):
            raise ValueError("pose count must equal cloud count")

    def __len__(self):
        return len(self.clouds)

    def relative_transform(self, i, j):
        """Ground-truth transform mapping cloud j's frame into cloud i's."""
        return self.poses[i].inverse() @ self.poses[j]


def _cloud_filename(i):
    return f"cloud_{i:03d}.csv"


def load_cloud_csv(path) -> PointCloud:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x", "y", "z"]:
            raise ValueError(f"{path}: expected header 'x,y,z', got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}: row {lineno} has {len(row)} values")
            try:
                rows.append([float(v) for v in row])
            except ValueError as e:
                raise ValueError(f"{path}: row {lineno}: {e}") from None
    return PointCloud(np.array(rows, dtype=float).reshape(-1, 3).T)


def save_cloud_csv(cloud: PointCloud, path):
    _atomic_savetxt(path, cloud.points.T, header="x,y,z")


def load_poses_csv(path):
    poses = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 12:
                raise ValueError(f"{path}: row {lineno} has {len(row)} values, "
                                 "expected 12 (3x4 row-major [R|t])")
            vals = np.array([float(v) for v in row]).reshape(3, 4)
            R, t = vals[:, :3], vals[:, 3]
            if (np.linalg.norm(R @ R.T - np.eye(3)) > 1e-6
                    or abs(np.linalg.det(R) - 1) > 1e-6):
                raise ValueError(f"{path}: row {lineno}: non-orthonormal rotation")
            # project onto SO(3) so downstream invariants (1e-9) hold
            U, _, Vt = np.linalg.svd(R)
            R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
            poses.append(RigidTransform(R, t))
    return poses


def save_poses_csv(poses, path):
    rows = np.array([np.hstack([p.rotation, p.translation[:, None]]).reshape(-1)
                     for p in poses])
    _atomic_savetxt(path, rows)


def _atomic_savetxt(path, array, header=""):
    tmp = str(path) + ".tmp"
    np.savetxt(tmp, array, fmt="%.17g", delimiter=",", header=header, comments="")
    os.replace(tmp, path)


def load_dataset(directory) -> SequenceDataset:
    """Load a sequence directory; enforces the pair rule j - i <= 4."""
    pose_path = os.path.join(directory, "poses.csv")
    if not os.path.exists(pose_path):
        raise FileNotFoundError(f"{pose_path} missing")
    poses = load_poses_csv(pose_path)
    clouds = []
    for i in range(len(poses)):
        cloud_path = os.path.join(directory, _cloud_filename(i))
        if not os.path.exists(cloud_path):
            raise FileNotFoundError(
                f"{cloud_path} missing: {len(poses)} poses but no cloud {i}")
        clouds.append(load_cloud_csv(cloud_path))
    extra = os.path.join(directory, _cloud_filename(len(poses)))
    if os.path.exists(extra):
        raise ValueError(f"{extra} present but only {len(poses)} poses")
    return SequenceDataset(tuple(clouds), tuple(poses),
                           tuple(enumerate_pairs(len(poses))))


def save_dataset(dataset: SequenceDataset, directory):
    os.makedirs(directory, exist_ok=True)
    save_poses_csv(dataset.poses, os.path.join(directory, "poses.csv"))
    for i, cloud in enumerate(dataset.clouds):
        save_cloud_csv(cloud, os.path.join(directory, _cloud_filename(i)))


def save_matrix_csv(matrix, path):
    """Row-major flattened matrix with a shape comment line."""
    matrix = np.asarray(matrix, dtype=float)
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write("# shape: " + " ".join(str(s) for s in matrix.shape) + "\n")
        f.write(",".join("%.17g" % v for v in matrix.reshape(-1)) + "\n")
    os.replace(tmp, path)


def load_matrix_csv(path):
    with open(path) as f:
        first = f.readline()
        if not first.startswith("# shape:"):
            raise ValueError(f"{path}: missing shape comment line")
        shape = tuple(int(s) for s in first.split(":")[1].split())
        vals = np.array([float(v) for v in f.readline().split(",")])
    return vals.reshape(shape)


def convert_native_dataset(directory):
    """Placeholder for ingesting the original datasets' native layout.

    The expected mapping: each native scan becomes `cloud_###.csv` (sensor
    frame, meters) and each ground-truth pose one 3x4 row-major [R|t] row of
    `poses.csv`, interpreted as sensor-to-world.
    """
    raise NotImplementedError(
        "native dataset conversion is not implemented; arrange the data as "
        "cloud_###.csv files plus poses.csv as documented in this module")

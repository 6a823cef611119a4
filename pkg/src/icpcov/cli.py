"""Command line interface driving scene generation, sampling, training,
prediction, and evaluation.

Every subcommand writes a `manifest.json` next to its outputs holding the
complete parameter set; `icpcov replay manifest.json` reproduces the run
bit-for-bit on the same platform.
"""
from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from . import __version__
from .censi import noise_sweep
from .cloud import estimate_normals
from .datasets import (load_cloud_csv, load_dataset, load_matrix_csv,
                       load_poses_csv, save_cloud_csv, save_matrix_csv,
                       save_poses_csv)
from .descriptors import VoxelGridSpec, describe_pair
from .evaluation import (baseline_covariance, consistency_report,
                         evaluate_predictor, run_trajectory)
from .geometry import RigidTransform
from .predictor import CovariancePredictor, load_model, save_model
from .registration import IcpConfig, objective_value
from .sampling import (PerturbationModel, dbscan_filter, sample_registrations,
                       sampled_covariance, divergence_check)
from .scenes import SceneSpec, generate_scene


def _write_manifest(out_dir, command, params):
    manifest = {"tool_version": __version__, "command": command,
                "params": params}
    tmp = os.path.join(out_dir, "manifest.json.tmp")
    with open(tmp, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    os.replace(tmp, os.path.join(out_dir, "manifest.json"))


def _write_table(path, rows, columns):
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in columns) + "\n")
    os.replace(tmp, path)


def _fmt(v):
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


def _load_pair_dir(scene_dir):
    P = load_cloud_csv(os.path.join(scene_dir, "p_cloud.csv"))
    Q = load_cloud_csv(os.path.join(scene_dir, "q_cloud.csv"))
    poses = load_poses_csv(os.path.join(scene_dir, "true_transform.csv"))
    return P, Q, poses[0]


def _icp_config(params):
    return IcpConfig(knn=params["knn"], trim_ratio=params["trim_ratio"],
                     max_iterations=params["max_iterations"])


# ---------------------------------------------------------------------------
# command implementations (pure functions of their parameter dict)

def run_gen_scene(params):
    spec = SceneSpec(params["archetype"], tuple(params["dimensions"]),
                     params["n_points"], params["sigma"], params["seed"])
    P, Q, T = generate_scene(spec)
    out = params["out"]
    os.makedirs(out, exist_ok=True)
    save_cloud_csv(P, os.path.join(out, "p_cloud.csv"))
    save_cloud_csv(Q, os.path.join(out, "q_cloud.csv"))
    save_poses_csv([T], os.path.join(out, "true_transform.csv"))
    _write_manifest(out, "gen-scene", params)


def run_sample(params):
    P, Q, T_true = _load_pair_dir(params["scene"])
    config = _icp_config(params)
    model = PerturbationModel(T_true, params["a"])
    samples = sample_registrations(P, Q, T_true, model, params["n"],
                                   config, seed=params["seed"])
    accepted = divergence_check(samples)
    filtered = dbscan_filter(samples, eps=params["dbscan_eps"],
                             min_pts=params["dbscan_min_pts"])
    if filtered.kept is not None and filtered.kept.sum() < 2:
        filtered = samples
    cov = sampled_covariance(filtered)
    out = params["out"]
    os.makedirs(out, exist_ok=True)
    filtered.to_csv(os.path.join(out, "samples.csv"))
    save_matrix_csv(cov.matrix, os.path.join(out, "covariance.csv"))
    with open(os.path.join(out, "diagnostics.json"), "w") as f:
        json.dump({"n_total": cov.n_total, "n_kept": cov.n_kept,
                   "cluster_id": cov.cluster_id,
                   "divergence_accepted": accepted,
                   "mean_xi": list(cov.mean_xi)}, f, sort_keys=True)
        f.write("\n")
    _write_manifest(out, "sample", params)


def run_describe(params):
    P, Q, T = _load_pair_dir(params["scene"])
    grid = VoxelGridSpec()
    d, empty = describe_pair(P, Q, T, grid, params["radius"])
    out = params["out"]
    os.makedirs(out, exist_ok=True)
    tmp = os.path.join(out, "descriptor.csv.tmp")
    with open(tmp, "w") as f:
        f.write("pair_id," + ",".join(f"d{i}" for i in range(len(d))) + "\n")
        f.write(params["pair_id"] + "," + ",".join("%.17g" % v for v in d) + "\n")
    os.replace(tmp, os.path.join(out, "descriptor.csv"))
    if empty:
        click.echo("warning: empty overlap, zero descriptor", err=True)
    _write_manifest(out, "describe", params)


def _load_examples(pairs_dir):
    descriptors, covariances, ids = [], [], []
    for name in sorted(os.listdir(pairs_dir)):
        sub = os.path.join(pairs_dir, name)
        d_path = os.path.join(sub, "descriptor.csv")
        y_path = os.path.join(sub, "covariance.csv")
        if not (os.path.isdir(sub) and os.path.exists(d_path)
                and os.path.exists(y_path)):
            continue
        with open(d_path) as f:
            f.readline()
            row = f.readline().strip().split(",")
        descriptors.append([float(v) for v in row[1:]])
        covariances.append(load_matrix_csv(y_path))
        ids.append(row[0])
    if not descriptors:
        raise click.ClickException(f"no example pairs found under {pairs_dir}")
    return np.array(descriptors), np.stack(covariances), ids


def run_train(params):
    D, Y, _ = _load_examples(params["pairs"])
    model = CovariancePredictor(lr=params["lr"], max_epochs=params["max_epochs"],
                                reg=params["reg"],
                                logdet_loss=params["logdet_loss"],
                                seed=params["seed"])
    model.fit(D, Y)
    out = params["out"]
    os.makedirs(out, exist_ok=True)
    save_model(model, os.path.join(out, "model.icpcov"))
    _write_table(os.path.join(out, "loss_history.csv"),
                 [{"epoch": i, "loss": v} for i, v in enumerate(model.loss_history_)],
                 ["epoch", "loss"])
    _write_manifest(out, "train", params)


def run_predict(params):
    model, grid = load_model(params["model"])
    P, Q, T = _load_pair_dir(params["scene"])
    d, _ = describe_pair(P, Q, T, grid, params["radius"])
    out = params["out"]
    os.makedirs(out, exist_ok=True)
    save_matrix_csv(model.predict_one(d), os.path.join(out, "predicted_covariance.csv"))
    _write_manifest(out, "predict", params)


def run_eval_pairs(params):
    model, grid = load_model(params["model"])
    D, Y, ids = _load_examples(params["pairs"])
    baseline = baseline_covariance(model.Y_)
    censi = None
    if params["with_censi"]:
        censi = []
        for name in ids:
            censi.append(load_matrix_csv(
                os.path.join(params["pairs"], name, "censi.csv")))
    rows, averages = evaluate_predictor(list(zip(D, Y)), model, baseline, censi)
    for row, pair_id in zip(rows, ids):
        row["pair"] = pair_id
    out = params["out"]
    os.makedirs(out, exist_ok=True)
    columns = ["pair", "kl_baseline", "kl_learned"] + (
        ["kl_censi"] if censi is not None else [])
    _write_table(os.path.join(out, "kl_divergence.csv"), rows, columns)
    with open(os.path.join(out, "averages.json"), "w") as f:
        json.dump(averages, f, sort_keys=True)
        f.write("\n")
    _write_manifest(out, "eval-pairs", params)


def run_eval_traj(params):
    model, grid = load_model(params["model"])
    dataset = load_dataset(params["sequence"])
    config = _icp_config(params)
    results = []
    for run in range(params["n_trajectories"]):
        results.append(run_trajectory(list(dataset.clouds), list(dataset.poses),
                                      model, model_a=params["a"], config=config,
                                      grid=grid, seed=params["seed"] + run))
    # default policy excludes non-converged trajectories; if every run is
    # flagged, report over all of them rather than failing outright
    if any(r.converged for r in results):
        report = consistency_report(results)
    else:
        report = consistency_report(results, exclude_nonconverged=False)
    out = params["out"]
    os.makedirs(out, exist_ok=True)
    rows = [{"trajectory": i,
             "norm_u": float(np.linalg.norm(r.error_twist[:3])),
             "dm_translation": r.mahalanobis_translation,
             "norm_w": float(np.linalg.norm(r.error_twist[3:])),
             "dm_rotation": r.mahalanobis_rotation,
             "dm": r.mahalanobis_full,
             "converged": int(r.converged)}
            for i, r in enumerate(results)]
    _write_table(os.path.join(out, "trajectories.csv"), rows,
                 ["trajectory", "norm_u", "dm_translation", "norm_w",
                  "dm_rotation", "dm", "converged"])
    with open(os.path.join(out, "consistency.json"), "w") as f:
        json.dump({"mean_dm": report.mean_dm,
                   "mean_dm_translation": report.mean_dm_translation,
                   "mean_dm_rotation": report.mean_dm_rotation,
                   "classification": report.classification,
                   "n_trajectories": report.n_trajectories,
                   "n_excluded": report.n_excluded}, f, sort_keys=True)
        f.write("\n")
    # ground-plane ellipse export: final pose xy plus 2x2 covariance block
    ellipse_rows = [{"trajectory": i,
                     "x": r.final_transform.translation[0],
                     "y": r.final_transform.translation[1],
                     "cov_xx": r.final_covariance[0, 0],
                     "cov_xy": r.final_covariance[0, 1],
                     "cov_yy": r.final_covariance[1, 1]}
                    for i, r in enumerate(results)]
    _write_table(os.path.join(out, "ellipses.csv"), ellipse_rows,
                 ["trajectory", "x", "y", "cov_xx", "cov_xy", "cov_yy"])
    _write_manifest(out, "eval-traj", params)


def run_sweep_noise(params):
    def factory(sigma, seed):
        spec = SceneSpec(params["archetype"], tuple(params["dimensions"]),
                         params["n_points"], sigma, seed)
        return generate_scene(spec)

    rows = noise_sweep(factory, params["sigmas"], params["n"], a=params["a"],
                       config=_icp_config(params), seed=params["seed"])
    out = params["out"]
    os.makedirs(out, exist_ok=True)
    _write_table(os.path.join(out, "noise_sweep.csv"), rows,
                 ["sigma", "trace_sampled", "trace_censi"])
    _write_manifest(out, "sweep-noise", params)


def run_landscape(params):
    P, Q, T_true = _load_pair_dir(params["scene"])
    config = _icp_config(params)
    Q = estimate_normals(Q, k=min(config.normal_k, max(3, len(Q) - 1)))
    half = params["half_range"]
    steps = params["steps"]
    offsets = np.linspace(-half, half, steps)
    rows = []
    for dx in offsets:
        for dy in offsets:
            T = RigidTransform(T_true.rotation,
                               T_true.translation + np.array([dx, dy, 0.0]))
            rows.append({"dx": float(dx), "dy": float(dy),
                         "objective": objective_value(P, Q, T, config)})
    out = params["out"]
    os.makedirs(out, exist_ok=True)
    _write_table(os.path.join(out, "landscape.csv"), rows,
                 ["dx", "dy", "objective"])
    _write_manifest(out, "landscape", params)


_COMMANDS = {
    "gen-scene": run_gen_scene,
    "sample": run_sample,
    "describe": run_describe,
    "train": run_train,
    "predict": run_predict,
    "eval-pairs": run_eval_pairs,
    "eval-traj": run_eval_traj,
    "sweep-noise": run_sweep_noise,
    "landscape": run_landscape,
}


# ---------------------------------------------------------------------------
# click surface

@click.group()
@click.version_option(__version__)
def main():
    """Covariance estimation for 3D ICP registration."""


def _dims(ctx, param, value):
    if not value:
        return []
    return [float(v) for v in value.split(",")]


_icp_options = [
    click.option("--knn", default=3, show_default=True),
    click.option("--trim-ratio", default=0.70, show_default=True),
    click.option("--max-iterations", default=80, show_default=True),
]


def _add(options):
    def wrap(f):
        for opt in reversed(options):
            f = opt(f)
        return f
    return wrap


@main.command("gen-scene")
@click.option("--archetype", required=True,
              type=click.Choice(["cube", "cylinder_pair", "hallway", "corner",
                                 "planes"]))
@click.option("--dimensions", default="", callback=_dims,
              help="comma-separated, archetype-specific (meters)")
@click.option("--n-points", default=1000, show_default=True)
@click.option("--sigma", default=0.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def gen_scene_cmd(**params):
    """Generate a synthetic scene pair (P, Q, ground-truth transform)."""
    run_gen_scene(params)


@main.command("sample")
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--n", default=500, show_default=True)
@click.option("--a", default=0.05, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--dbscan-eps", default=0.1, show_default=True)
@click.option("--dbscan-min-pts", default=None, type=int)
@_add(_icp_options)
@click.option("--out", required=True, type=click.Path())
def sample_cmd(**params):
    """Sample the ICP result distribution and estimate its covariance."""
    run_sample(params)


@main.command("describe")
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--radius", default=0.5, show_default=True)
@click.option("--pair-id", default="pair", show_default=True)
@click.option("--out", required=True, type=click.Path())
def describe_cmd(**params):
    """Compute the voxel descriptor of a registered pair."""
    run_describe(params)


@main.command("train")
@click.option("--pairs", required=True, type=click.Path(exists=True),
              help="directory of per-pair subdirectories with descriptor.csv "
                   "and covariance.csv")
@click.option("--lr", default=1e-5, show_default=True)
@click.option("--max-epochs", default=100, show_default=True)
@click.option("--reg", default=1e-3, show_default=True)
@click.option("--logdet-loss", is_flag=True, default=False)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def train_cmd(**params):
    """Train the covariance predictor on sampled examples."""
    run_train(params)


@main.command("predict")
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--radius", default=0.5, show_default=True)
@click.option("--out", required=True, type=click.Path())
def predict_cmd(**params):
    """Predict the registration covariance of a pair."""
    run_predict(params)


@main.command("eval-pairs")
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--pairs", required=True, type=click.Path(exists=True))
@click.option("--with-censi", is_flag=True, default=False,
              help="also read per-pair censi.csv matrices")
@click.option("--out", required=True, type=click.Path())
def eval_pairs_cmd(**params):
    """Per-pair KL divergence of baseline/learned (and optional Censi)."""
    run_eval_pairs(params)


@main.command("eval-traj")
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--sequence", required=True, type=click.Path(exists=True))
@click.option("--n-trajectories", default=100, show_default=True)
@click.option("--a", default=0.05, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_add(_icp_options)
@click.option("--out", required=True, type=click.Path())
def eval_traj_cmd(**params):
    """Odometry trajectories with compounded covariances and consistency."""
    run_eval_traj(params)


@main.command("sweep-noise")
@click.option("--archetype", default="cube", show_default=True)
@click.option("--dimensions", default="", callback=_dims)
@click.option("--n-points", default=800, show_default=True)
@click.option("--sigmas", default="0,0.0025,0.005,0.0075,0.01",
              show_default=True, callback=lambda c, p, v: [float(x) for x in v.split(",")])
@click.option("--n", default=500, show_default=True)
@click.option("--a", default=0.05, show_default=True)
@click.option("--seed", default=0, show_default=True)
@_add(_icp_options)
@click.option("--out", required=True, type=click.Path())
def sweep_noise_cmd(**params):
    """Sampled vs closed-form covariance traces across sensor noise."""
    run_sweep_noise(params)


@main.command("landscape")
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--half-range", default=0.1, show_default=True)
@click.option("--steps", default=21, show_default=True)
@_add(_icp_options)
@click.option("--out", required=True, type=click.Path())
def landscape_cmd(**params):
    """Objective-function grid around the ground-truth pose."""
    run_landscape(params)


@main.command("replay")
@click.argument("manifest", type=click.Path(exists=True))
def replay_cmd(manifest):
    """Re-run a previous command from its manifest."""
    with open(manifest) as f:
        data = json.load(f)
    command = data.get("command")
    if command not in _COMMANDS:
        raise click.ClickException(f"unknown command in manifest: {command}")
    _COMMANDS[command](data["params"])


if __name__ == "__main__":
    sys.exit(main())

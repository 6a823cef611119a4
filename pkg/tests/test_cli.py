import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from icpcov.cli import main
from icpcov.datasets import load_matrix_csv, save_dataset, SequenceDataset, enumerate_pairs
from icpcov.scenes import generate_corridor_sequence


@pytest.fixture
def runner():
    return CliRunner()


def run_ok(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


@pytest.fixture
def scene_dir(tmp_path, runner):
    out = tmp_path / "scene"
    run_ok(runner, ["gen-scene", "--archetype", "corner", "--dimensions", "3",
                    "--n-points", "400", "--sigma", "0.005", "--seed", "3",
                    "--out", str(out)])
    return out


@pytest.fixture
def sample_dir(tmp_path, runner, scene_dir):
    out = tmp_path / "samples"
    run_ok(runner, ["sample", "--scene", str(scene_dir), "--n", "40",
                    "--seed", "1", "--out", str(out)])
    return out


def make_pairs_dir(tmp_path, runner, n_pairs=4):
    pairs = tmp_path / "pairs"
    for i in range(n_pairs):
        scene = tmp_path / f"scene_{i}"
        run_ok(runner, ["gen-scene", "--archetype", "corner", "--dimensions",
                        "3", "--n-points", "300", "--sigma", "0.005",
                        "--seed", str(10 + i), "--out", str(scene)])
        pair = pairs / f"pair_{i:03d}"
        run_ok(runner, ["describe", "--scene", str(scene),
                        "--pair-id", f"pair_{i:03d}", "--out", str(pair)])
        run_ok(runner, ["sample", "--scene", str(scene), "--n", "25",
                        "--seed", str(i), "--out", str(pair / "mc")])
        os.replace(pair / "mc" / "covariance.csv", pair / "covariance.csv")
    return pairs


class TestGenScene:
    def test_outputs(self, scene_dir):
        for name in ("p_cloud.csv", "q_cloud.csv", "true_transform.csv",
                     "manifest.json"):
            assert (scene_dir / name).exists()

    def test_manifest_content(self, scene_dir):
        manifest = json.loads((scene_dir / "manifest.json").read_text())
        assert manifest["command"] == "gen-scene"
        assert manifest["params"]["archetype"] == "corner"
        assert manifest["params"]["seed"] == 3

    def test_replay_byte_identical(self, scene_dir, runner):
        before = {n: (scene_dir / n).read_bytes()
                  for n in os.listdir(scene_dir)}
        run_ok(runner, ["replay", str(scene_dir / "manifest.json")])
        after = {n: (scene_dir / n).read_bytes() for n in os.listdir(scene_dir)}
        assert before == after


class TestSample:
    def test_outputs(self, sample_dir):
        for name in ("samples.csv", "covariance.csv", "diagnostics.json",
                     "manifest.json"):
            assert (sample_dir / name).exists()
        Y = load_matrix_csv(sample_dir / "covariance.csv")
        assert Y.shape == (6, 6)
        assert np.allclose(Y, Y.T)

    def test_diagnostics(self, sample_dir):
        diag = json.loads((sample_dir / "diagnostics.json").read_text())
        assert diag["n_total"] == 40
        assert 2 <= diag["n_kept"] <= 40
        assert diag["divergence_accepted"] is True

    def test_replay_byte_identical(self, sample_dir, runner):
        before = {n: (sample_dir / n).read_bytes()
                  for n in os.listdir(sample_dir)}
        run_ok(runner, ["replay", str(sample_dir / "manifest.json")])
        after = {n: (sample_dir / n).read_bytes()
                 for n in os.listdir(sample_dir)}
        assert before == after


class TestTrainPredictEval:
    def test_pipeline(self, tmp_path, runner):
        pairs = make_pairs_dir(tmp_path, runner)
        model_dir = tmp_path / "model"
        run_ok(runner, ["train", "--pairs", str(pairs), "--lr", "1e-5",
                        "--max-epochs", "2", "--out", str(model_dir)])
        assert (model_dir / "model.icpcov").exists()
        assert (model_dir / "loss_history.csv").exists()

        pred_dir = tmp_path / "pred"
        run_ok(runner, ["predict", "--model", str(model_dir / "model.icpcov"),
                        "--scene", str(tmp_path / "scene_0"),
                        "--out", str(pred_dir)])
        Y = load_matrix_csv(pred_dir / "predicted_covariance.csv")
        assert Y.shape == (6, 6)
        assert np.linalg.eigvalsh(Y)[0] > -1e-15

        eval_dir = tmp_path / "eval"
        run_ok(runner, ["eval-pairs", "--model", str(model_dir / "model.icpcov"),
                        "--pairs", str(pairs), "--out", str(eval_dir)])
        lines = (eval_dir / "kl_divergence.csv").read_text().strip().splitlines()
        assert lines[0] == "pair,kl_baseline,kl_learned"
        assert len(lines) == 5
        avgs = json.loads((eval_dir / "averages.json").read_text())
        assert set(avgs) == {"kl_baseline", "kl_learned"}

        # train replay reproduces the model file byte for byte
        before = (model_dir / "model.icpcov").read_bytes()
        run_ok(runner, ["replay", str(model_dir / "manifest.json")])
        assert (model_dir / "model.icpcov").read_bytes() == before

    def test_train_empty_pairs_fails(self, tmp_path, runner):
        empty = tmp_path / "pairs"
        empty.mkdir()
        result = runner.invoke(main, ["train", "--pairs", str(empty),
                                      "--out", str(tmp_path / "m")])
        assert result.exit_code != 0


class TestEvalTraj:
    def test_runs(self, tmp_path, runner):
        pairs = make_pairs_dir(tmp_path, runner, n_pairs=2)
        model_dir = tmp_path / "model"
        run_ok(runner, ["train", "--pairs", str(pairs), "--max-epochs", "1",
                        "--out", str(model_dir)])
        clouds, poses = generate_corridor_sequence(n_clouds=3, n_points=400,
                                                   seed=9)
        seq_dir = tmp_path / "seq"
        save_dataset(SequenceDataset(tuple(clouds), tuple(poses),
                                     tuple(enumerate_pairs(len(clouds)))),
                     seq_dir)
        out = tmp_path / "traj"
        run_ok(runner, ["eval-traj", "--model", str(model_dir / "model.icpcov"),
                        "--sequence", str(seq_dir), "--n-trajectories", "3",
                        "--out", str(out)])
        lines = (out / "trajectories.csv").read_text().strip().splitlines()
        assert len(lines) == 4
        report = json.loads((out / "consistency.json").read_text())
        assert report["classification"] in ("optimistic", "consistent",
                                            "pessimistic")
        ellipses = (out / "ellipses.csv").read_text().strip().splitlines()
        assert ellipses[0] == "trajectory,x,y,cov_xx,cov_xy,cov_yy"


class TestSweepNoise:
    def test_runs(self, tmp_path, runner):
        out = tmp_path / "sweep"
        run_ok(runner, ["sweep-noise", "--archetype", "corner", "--dimensions",
                        "3", "--n-points", "300", "--sigmas", "0,0.01",
                        "--n", "10", "--out", str(out)])
        lines = (out / "noise_sweep.csv").read_text().strip().splitlines()
        assert lines[0] == "sigma,trace_sampled,trace_censi"
        assert len(lines) == 3


class TestLandscape:
    def test_grid(self, tmp_path, runner, scene_dir):
        out = tmp_path / "land"
        run_ok(runner, ["landscape", "--scene", str(scene_dir),
                        "--half-range", "0.05", "--steps", "5",
                        "--out", str(out)])
        lines = (out / "landscape.csv").read_text().strip().splitlines()
        assert lines[0] == "dx,dy,objective"
        assert len(lines) == 26


class TestReplayErrors:
    def test_unknown_command(self, tmp_path, runner):
        bad = tmp_path / "manifest.json"
        bad.write_text(json.dumps({"command": "nope", "params": {}}))
        result = runner.invoke(main, ["replay", str(bad)])
        assert result.exit_code != 0
        assert "unknown command" in result.output

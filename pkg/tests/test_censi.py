import numpy as np
import pytest

from icpcov.censi import SensorNoiseModel, censi_covariance, noise_sweep
from icpcov.cloud import PointCloud, estimate_normals
from icpcov.geometry import RigidTransform
from icpcov.registration import AssociationSet
from icpcov.scenes import SceneSpec, generate_scene


def corner_pair(sigma=0.0, seed=21, n=1200):
    P, Q, T = generate_scene(SceneSpec("corner", (3.0,), n, sigma, seed))
    return P, estimate_normals(Q, k=20), T


class TestNoiseModel:
    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            SensorNoiseModel(-0.1)


class TestCensiCovariance:
    def test_zero_noise_zero_covariance(self):
        P, Q, T = corner_pair()
        Y = censi_covariance(P, Q, T, SensorNoiseModel(0.0))
        assert np.allclose(Y, 0.0)

    def test_exact_quadratic_scaling(self):
        P, Q, T = corner_pair()
        Y1 = censi_covariance(P, Q, T, SensorNoiseModel(0.01))
        Y2 = censi_covariance(P, Q, T, SensorNoiseModel(0.02))
        assert np.allclose(Y2, 4.0 * Y1, rtol=1e-10, atol=1e-30)

    def test_symmetric_psd(self):
        P, Q, T = corner_pair(sigma=0.005)
        Y = censi_covariance(P, Q, T, SensorNoiseModel(0.01))
        assert np.allclose(Y, Y.T)
        assert np.linalg.eigvalsh(Y)[0] >= -1e-18

    def test_reference_noise_doubles(self):
        P, Q, T = corner_pair()
        base = censi_covariance(P, Q, T, SensorNoiseModel(0.01))
        both = censi_covariance(P, Q, T,
                                SensorNoiseModel(0.01, include_reference=True))
        assert np.allclose(both, 2.0 * base)

    def test_matches_linear_oracle(self, rng):
        # orthogonal-plane constraints with frozen associations: the implicit
        # least-squares solution is linear in the noise, so a direct Monte
        # Carlo over the linearized solve must agree with the closed form
        m = 600
        normals = np.zeros((3, m))
        normals[0, :200] = 1.0
        normals[1, 200:400] = 1.0
        normals[2, 400:] = 1.0
        p = rng.uniform(-1, 1, size=(3, m))
        reading = PointCloud(p)
        reference = PointCloud(p, normals=normals)
        assoc = AssociationSet(np.arange(m), np.arange(m), np.zeros(m), normals)
        sigma = 0.01
        Y = censi_covariance(reading, reference, RigidTransform.identity(),
                             SensorNoiseModel(sigma), assoc=assoc, moved=reading)
        a = np.vstack([normals, np.cross(p.T, normals.T).T])     # (6, m)
        A = a @ a.T
        draws = 20000
        noise = rng.normal(scale=sigma, size=(draws, 3, m))
        # perturbing reading points shifts b_i by n_i . eps_i
        b = np.einsum("im,dim->dm", normals, noise)
        x = np.linalg.solve(A, (b @ a.T).T).T                    # (draws, 6)
        mc = x.T @ x / draws
        assert np.linalg.norm(mc - Y) / np.linalg.norm(Y) < 0.10

    def test_hallway_unconstrained_axis_dominates(self):
        P, Q, T = generate_scene(SceneSpec("hallway", (10.0, 2.0, 2.5), 1500,
                                           0.0, seed=22))
        Q = estimate_normals(Q, k=20)
        Y = censi_covariance(P, Q, T, SensorNoiseModel(0.01))
        assert Y[0, 0] > 10.0 * max(Y[1, 1], Y[2, 2])


class TestNoiseSweep:
    def test_rows_and_monotonicity(self):
        def factory(sigma, seed):
            P, Q, T = generate_scene(SceneSpec("corner", (3.0,), 600, sigma,
                                               seed=30))
            return P, estimate_normals(Q, k=20), T

        sigmas = [0.0, 0.005, 0.01]
        rows = noise_sweep(factory, sigmas, n_samples=30, seed=5)
        assert [r["sigma"] for r in rows] == sigmas
        censi = [r["trace_censi"] for r in rows]
        assert censi[0] == pytest.approx(0.0, abs=1e-20)
        assert censi[1] < censi[2]
        assert all(np.isfinite(r["trace_sampled"]) for r in rows)

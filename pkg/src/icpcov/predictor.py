"""Learned covariance predictor: a metric-weighted average of training
covariances, with the metric trained by stochastic gradient descent.

Prediction for a descriptor d is
    F(d) = sum_k s(rho(d, d_k)) Y_k / sum_k s(rho(d, d_k)),
with s(x) = exp(-x) and rho(d, d') = ||Theta (d - d')||^2 for an upper
triangular weight matrix Theta.
"""
from __future__ import annotations

import io
import json
import os
import warnings
import zipfile

import numpy as np
from sklearn.base import BaseEstimator

from .descriptors import HISTOGRAM_DIRECTIONS, VoxelGridSpec
from .geometry import regularize_spd
from .rng import derive_rng

MODEL_FORMAT_VERSION = 1


def descriptor_distance(d, d_other, theta):
    """rho(d, d') = (d - d')^T Theta^T Theta (d - d')."""
    d = np.asarray(d, dtype=float)
    d_other = np.asarray(d_other, dtype=float)
    if d.shape != d_other.shape:
        raise ValueError("descriptor length mismatch")
    z = theta @ (d - d_other)
    return float(z @ z)


def _weights(d, D, theta):
    """exp(-rho(d, d_k)) for all training descriptors; rows of D are d_k."""
    z = theta @ (D - d).T                       # (p, n)
    rho = np.sum(z * z, axis=0)
    return np.exp(-rho)


def weighted_prediction(d, D, Y, theta):
    """Weighted average of training covariances; uniform fallback when all
    weights underflow."""
    w = _weights(d, D, theta)
    total = w.sum()
    if total <= 0:
        warnings.warn("all predictor weights underflowed; using uniform weights")
        w = np.ones(len(D))
        total = float(len(D))
    return np.einsum("k,kij->ij", w, Y) / total


def prediction_loss(F, Y, logdet=False):
    """det(F) + tr(F^-1 Y); the `logdet` flag substitutes log det(F).

    det is evaluated in the log domain and exponentiated, so tiny 6x6
    covariance determinants do not underflow inside intermediate products.
    """
    F = np.asarray(F, dtype=float)
    Y = np.asarray(Y, dtype=float)
    sign, logabsdet = np.linalg.slogdet(F)
    if sign <= 0:
        F = regularize_spd(F)
        sign, logabsdet = np.linalg.slogdet(F)
    det_term = logabsdet if logdet else sign * np.exp(logabsdet)
    return float(det_term + np.trace(np.linalg.solve(F, Y)))


class CovariancePredictor(BaseEstimator):
    """Weighted-average covariance predictor with a learned descriptor metric.

    Parameters
    ----------
    lr : float
        SGD learning rate.
    max_epochs : int
        Epoch cap; training also stops on relative loss change < tol.
    reg : float
        Tikhonov weight on ||Theta||_F^2.
    logdet_loss : bool
        Use log det(F) instead of det(F) in the per-example loss.
    tol : float
        Relative epoch-loss change declaring convergence.
    seed : int
        Shuffle seed; training is deterministic given it.

    Attributes
    ----------
    theta_ : (p, p) upper triangular weight matrix after fit.
    D_, Y_ : retained training descriptors and covariances.
    loss_history_ : mean leave-one-out loss per epoch (before each epoch's
        updates, plus a final value).
    """

    def __init__(self, lr=1e-5, max_epochs=100, reg=1e-3, logdet_loss=False,
                 tol=1e-6, seed=0):
        self.lr = lr
        self.max_epochs = max_epochs
        self.reg = reg
        self.logdet_loss = logdet_loss
        self.tol = tol
        self.seed = seed

    # -- loss and gradient -------------------------------------------------

    def _example_loss(self, k, D, Y, theta):
        mask = np.arange(len(D)) != k
        F = weighted_prediction(D[k], D[mask], Y[mask], theta)
        return (prediction_loss(F, Y[k], self.logdet_loss)
                + self.reg * float(np.sum(theta ** 2)))

    def _example_gradient(self, k, D, Y, theta):
        """d(loss_k)/d(Theta), upper triangle only."""
        n = len(D)
        mask = np.arange(n) != k
        Dm, Ym = D[mask], Y[mask]
        delta = Dm - D[k]                       # (n-1, p)
        z = theta @ delta.T                     # (p, n-1)
        rho = np.sum(z * z, axis=0)
        w = np.exp(-rho)
        W = w.sum()
        if W <= 0:
            return self.reg * 2.0 * np.triu(theta)
        F = np.einsum("k,kij->ij", w, Ym) / W
        sign, logabsdet = np.linalg.slogdet(F)
        if sign <= 0:
            F = regularize_spd(F)
            sign, logabsdet = np.linalg.slogdet(F)
        Finv = np.linalg.inv(F)
        det_F = sign * np.exp(logabsdet)
        # dL/dF for det(F) + tr(F^-1 Y): det(F) F^-1 - F^-1 Y F^-1
        ddet = Finv if self.logdet_loss else det_F * Finv
        dL_dF = ddet - Finv @ Y[k] @ Finv
        # dF/dw_j = (Y_j - F)/W, then chain through w_j = exp(-rho_j)
        dL_dw = np.einsum("ij,kij->k", dL_dF, Ym - F[None]) / W
        coeff = -w * dL_dw                      # d rho / contributes -w
        # sum_j coeff_j * 2 Theta delta_j delta_j^T
        grad = 2.0 * (z * coeff) @ delta
        grad += self.reg * 2.0 * theta
        return np.triu(grad)

    # -- estimator API -----------------------------------------------------

    def fit(self, D, Y):
        """Learn Theta from descriptors D (n, p) and covariances Y (n, 6, 6)."""
        D = np.asarray(D, dtype=float)
        Y = np.asarray(Y, dtype=float)
        n, p = D.shape
        if n < 2:
            raise ValueError("need at least 2 training examples")
        theta = np.eye(p) / np.sqrt(p)
        rng = derive_rng(self.seed, "train_shuffle")
        self.loss_history_ = []
        prev = None
        for epoch in range(self.max_epochs):
            mean_loss = np.mean([self._example_loss(k, D, Y, theta)
                                 for k in range(n)])
            if not np.isfinite(mean_loss):
                raise FloatingPointError(
                    f"training loss diverged at epoch {epoch}: {mean_loss}")
            self.loss_history_.append(float(mean_loss))
            if prev is not None and abs(prev - mean_loss) <= self.tol * abs(prev):
                break
            prev = mean_loss
            for k in rng.permutation(n):
                theta = theta - self.lr * self._example_gradient(k, D, Y, theta)
        self.loss_history_.append(float(np.mean(
            [self._example_loss(k, D, Y, theta) for k in range(n)])))
        self.theta_ = theta
        self.D_ = D
        self.Y_ = Y
        return self

    def set_training_set(self, D, Y, theta=None):
        """Install a training set without fitting (Theta defaults to zero,
        which makes the predictor the baseline mean of the covariances)."""
        self.D_ = np.asarray(D, dtype=float)
        self.Y_ = np.asarray(Y, dtype=float)
        self.theta_ = (np.zeros((self.D_.shape[1],) * 2) if theta is None
                       else np.asarray(theta, dtype=float))
        return self

    def predict(self, D):
        """Predicted 6x6 covariances, shape (m, 6, 6), for descriptors (m, p)."""
        D = np.atleast_2d(np.asarray(D, dtype=float))
        return np.stack([weighted_prediction(d, self.D_, self.Y_, self.theta_)
                         for d in D])

    def predict_one(self, d):
        return self.predict(np.asarray(d)[None])[0]


# ---------------------------------------------------------------------------
# serialization

def save_model(model: CovariancePredictor, path, grid: VoxelGridSpec | None = None):
    """Versioned container: JSON header plus npz payload, atomically written."""
    grid = grid or VoxelGridSpec()
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "grid": grid.to_dict(),
        "histogram_directions": np.asarray(HISTOGRAM_DIRECTIONS).tolist(),
        "params": model.get_params(),
    }
    p = model.theta_.shape[0]
    iu = np.triu_indices(p)
    tmp = str(path) + ".tmp"
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
        # fixed timestamps keep the container byte-identical across runs
        def _write(name, data):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)

        def _npy_bytes(arr):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr))
            return buf.getvalue()

        _write("header.json", json.dumps(header, sort_keys=True))
        _write("theta_upper.npy", _npy_bytes(model.theta_[iu]))
        _write("D.npy", _npy_bytes(model.D_))
        _write("Y.npy", _npy_bytes(model.Y_))
    os.replace(tmp, path)


def load_model(path):
    """Inverse of save_model; returns (model, grid)."""
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(
                f"unsupported model format version {header.get('format_version')}")
        arrays = {name: np.lib.format.read_array(io.BytesIO(zf.read(name + ".npy")))
                  for name in ("theta_upper", "D", "Y")}
        model = CovariancePredictor(**header["params"])
        D, Y = arrays["D"], arrays["Y"]
        p = D.shape[1]
        theta = np.zeros((p, p))
        theta[np.triu_indices(p)] = arrays["theta_upper"]
        model.set_training_set(D, Y, theta)
    return model, VoxelGridSpec.from_dict(header["grid"])

"""SE(3) machinery: exp/log maps, adjoints, covariance transport and compounding.

Twist convention throughout: xi = [u; omega] with u the translation part
(meters) and omega the angle-axis rotation part (radians). 6x6 covariances
use the same block ordering.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

_ANGLE_EPS = 1e-4          # below this, 4th-order Taylor series for V, V^-1
_PI_EPS = 1e-6             # within this of pi, eigen-axis extraction


def skew(v):
    """Cross-product matrix [v]x such that skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


@dataclass(frozen=True)
class RigidTransform:
    """Element of SE(3) stored as a rotation matrix and a translation vector."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("non-finite transform entries")
        if np.linalg.norm(R @ R.T - np.eye(3)) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        R.setflags(write=False)
        t.setflags(write=False)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @property
    def matrix(self):
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points):
        """Map a 3xN array (or a single 3-vector) through the transform."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.rotation @ points + self.translation
        return self.rotation @ points + self.translation[:, None]

    def __matmul__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)


def compound_pose(T1: RigidTransform, T2: RigidTransform) -> RigidTransform:
    """Group composition T1 * T2."""
    return T1 @ T2


def so3_exp(omega):
    """Rodrigues formula; Taylor series near the identity."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < _ANGLE_EPS:
        a = 1.0 - theta ** 2 / 6.0 + theta ** 4 / 120.0
        b = 0.5 - theta ** 2 / 24.0 + theta ** 4 / 720.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta ** 2
    return np.eye(3) + a * W + b * (W @ W)


def so3_log(R):
    """Angle-axis vector of a rotation matrix, with ||omega|| in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < _ANGLE_EPS:
        # log(R) ~ (R - R^T)/2 with a second-order angle correction
        w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        return w * (1.0 + theta ** 2 / 6.0)
    if theta > np.pi - _PI_EPS:
        # near pi the antisymmetric part vanishes; use the eigen-axis instead
        logger.debug("so3_log near pi (theta=%.12f): eigen-axis extraction", theta)
        vals, vecs = np.linalg.eigh((R + R.T) / 2.0)
        axis = vecs[:, np.argmax(vals)]
        axis = axis / np.linalg.norm(axis)
        # fix the sign so that exp reproduces R (irrelevant exactly at pi)
        w_asym = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(axis, w_asym) < 0:
            axis = -axis
        elif np.allclose(w_asym, 0) and (axis[np.nonzero(axis)[0][0]] < 0):
            axis = -axis
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def _left_jacobian_coeffs(theta):
    """Coefficients (b, c) with V = I + b W + c W^2 for W = skew(omega)."""
    if theta < _ANGLE_EPS:
        b = 0.5 - theta ** 2 / 24.0 + theta ** 4 / 720.0
        c = 1.0 / 6.0 - theta ** 2 / 120.0 + theta ** 4 / 5040.0
    else:
        b = (1.0 - np.cos(theta)) / theta ** 2
        c = (theta - np.sin(theta)) / theta ** 3
    return b, c


def _inv_left_jacobian_coeff(theta):
    """Coefficient A with V^-1 = I - W/2 + A W^2."""
    if theta < _ANGLE_EPS:
        return 1.0 / 12.0 + theta ** 2 / 720.0 + theta ** 4 / 30240.0
    return 1.0 / theta ** 2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))


def exp_map(xi) -> RigidTransform:
    """SE(3) exponential of a twist [u; omega]."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    u, omega = xi[:3], xi[3:]
    theta = np.linalg.norm(omega)
    W = skew(omega)
    R = so3_exp(omega)
    b, c = _left_jacobian_coeffs(theta)
    V = np.eye(3) + b * W + c * (W @ W)
    return RigidTransform(R, V @ u)


def log_map(T: RigidTransform):
    """SE(3) logarithm; inverse of exp_map with ||omega|| in [0, pi]."""
    omega = so3_log(T.rotation)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    A = _inv_left_jacobian_coeff(theta)
    Vinv = np.eye(3) - 0.5 * W + A * (W @ W)
    return np.concatenate([Vinv @ T.translation, omega])


# ---------------------------------------------------------------------------
# batch versions (hot paths: Monte-Carlo oracles and sampling)

def batch_exp(xis):
    """Exponential of an (N, 6) array of twists; returns (N, 4, 4) matrices."""
    xis = np.asarray(xis, dtype=float)
    n = xis.shape[0]
    u, omega = xis[:, :3], xis[:, 3:]
    theta = np.linalg.norm(omega, axis=1)
    W = np.zeros((n, 3, 3))
    W[:, 0, 1], W[:, 0, 2] = -omega[:, 2], omega[:, 1]
    W[:, 1, 0], W[:, 1, 2] = omega[:, 2], -omega[:, 0]
    W[:, 2, 0], W[:, 2, 1] = -omega[:, 1], omega[:, 0]
    W2 = W @ W
    small = theta < _ANGLE_EPS
    t2 = theta ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / theta)
        b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / t2)
        c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (theta - np.sin(theta)) / theta ** 3)
    I = np.eye(3)[None]
    R = I + a[:, None, None] * W + b[:, None, None] * W2
    V = I + b[:, None, None] * W + c[:, None, None] * W2
    M = np.tile(np.eye(4), (n, 1, 1))
    M[:, :3, :3] = R
    M[:, :3, 3] = (V @ u[:, :, None])[:, :, 0]
    return M


def batch_log(Ms):
    """Logarithm of an (N, 4, 4) array of transforms; returns (N, 6) twists."""
    Ms = np.asarray(Ms, dtype=float)
    n = Ms.shape[0]
    R = Ms[:, :3, :3]
    t = Ms[:, :3, 3]
    tr = np.trace(R, axis1=1, axis2=2)
    cos_theta = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w_asym = 0.5 * np.stack([R[:, 2, 1] - R[:, 1, 2],
                             R[:, 0, 2] - R[:, 2, 0],
                             R[:, 1, 0] - R[:, 0, 1]], axis=1)
    small = theta < _ANGLE_EPS
    near_pi = theta > np.pi - _PI_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(small, 1.0 + theta ** 2 / 6.0,
                         theta / np.where(small, 1.0, np.sin(theta)))
    omega = w_asym * scale[:, None]
    if np.any(near_pi):
        for i in np.nonzero(near_pi)[0]:
            omega[i] = so3_log(R[i])
    W = np.zeros((n, 3, 3))
    W[:, 0, 1], W[:, 0, 2] = -omega[:, 2], omega[:, 1]
    W[:, 1, 0], W[:, 1, 2] = omega[:, 2], -omega[:, 0]
    W[:, 2, 0], W[:, 2, 1] = -omega[:, 1], omega[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        A = np.where(small | near_pi, 1.0 / 12.0 + theta ** 2 / 720.0,
                     1.0 / theta ** 2
                     - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta)))
    if np.any(near_pi):
        for i in np.nonzero(near_pi)[0]:
            A[i] = _inv_left_jacobian_coeff(np.linalg.norm(omega[i]))
    I = np.eye(3)[None]
    Vinv = I - 0.5 * W + A[:, None, None] * (W @ W)
    u = (Vinv @ t[:, :, None])[:, :, 0]
    return np.concatenate([u, omega], axis=1)


# ---------------------------------------------------------------------------
# adjoints and covariances

def adjoint(T: RigidTransform):
    """6x6 adjoint Ad_T = [[R, [t]x R], [0, R]] for the [u; omega] ordering."""
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = T.rotation
    Ad[:3, 3:] = skew(T.translation) @ T.rotation
    Ad[3:, 3:] = T.rotation
    return Ad


def ensure_covariance(Y, name="covariance"):
    """Validate a 6x6 covariance: symmetric and positive semi-definite."""
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (6, 6):
        raise ValueError(f"{name} must be 6x6, got {Y.shape}")
    scale = max(np.abs(Y).max(), 1.0)
    if np.abs(Y - Y.T).max() > 1e-12 * scale:
        raise ValueError(f"{name} is not symmetric")
    eigmin = np.linalg.eigvalsh(Y)[0]
    if eigmin < -1e-10 * max(np.trace(Y), 1e-300):
        raise ValueError(f"{name} is not positive semi-definite (eigmin={eigmin})")
    return Y


def transform_covariance(Y, T: RigidTransform):
    """Push a twist covariance through a frame change: Ad_T Y Ad_T^T."""
    Ad = adjoint(T)
    out = Ad @ np.asarray(Y, dtype=float) @ Ad.T
    return (out + out.T) / 2.0


def _se3_ad(xi):
    """Algebra adjoint ad_xi = [[skew(omega), skew(u)], [0, skew(omega)]]."""
    xi = np.asarray(xi, dtype=float)
    A = np.zeros((6, 6))
    A[:3, :3] = skew(xi[3:])
    A[:3, 3:] = skew(xi[:3])
    A[3:, 3:] = skew(xi[3:])
    return A


_AD_BASIS = None


def _ad_basis():
    global _AD_BASIS
    if _AD_BASIS is None:
        _AD_BASIS = np.stack([_se3_ad(e) for e in np.eye(6)])
    return _AD_BASIS


def _expected_ad_sq(Y):
    """E[ad_xi ad_xi] for xi ~ N(0, Y), via the adjoint basis expansion."""
    K = _ad_basis()
    return np.einsum("ij,iab,jbc->ac", Y, K, K)


def _expected_ad_sandwich(Y1, X):
    """E[ad_xi X ad_xi^T] for xi ~ N(0, Y1) and a fixed matrix X."""
    K = _ad_basis()
    return np.einsum("ij,iab,jcb->ac", Y1, K @ X, K)


def compound_covariance(T1: RigidTransform, Y1, Y2, fourth_order=True):
    """Covariance of T1*T2 from the covariances of its factors.

    Y1 and Y2 are left-perturbation covariances (T = exp(xi) T_mean), Y2
    expressed in the frame T1 maps from. With `fourth_order` disabled this
    is exactly Y1 + Ad_T1 Y2 Ad_T1^T.
    """
    Y1 = ensure_covariance(Y1, "Y1")
    Y2 = ensure_covariance(Y2, "Y2")
    if np.trace(Y1) > 1.0 or np.trace(Y2) > 1.0:
        warnings.warn("compound_covariance outside the small-covariance regime "
                      "(trace > 1); the series approximation degrades")
    Y2p = transform_covariance(Y2, T1)
    out = Y1 + Y2p
    if fourth_order:
        # BCH: xi = xi1 + xi2' + ad(xi1) xi2'/2 + ad(xi1)^2 xi2'/12
        #      + ad(xi2')^2 xi1/12 + ...; take expectations to 4th order.
        A1 = _expected_ad_sq(Y1)
        A2 = _expected_ad_sq(Y2p)
        B = _expected_ad_sandwich(Y1, Y2p)
        out = out + B / 4.0
        out = out + (A1 @ Y2p + Y2p @ A1.T + A2 @ Y1 + Y1 @ A2.T) / 12.0
    return (out + out.T) / 2.0


def regularize_spd(Y, eps=1e-9):
    """Nudge a (possibly singular) covariance to positive definite."""
    Y = np.asarray(Y, dtype=float)
    bump = eps * max(np.trace(Y), 1e-300) / 6.0
    return Y + bump * np.eye(6)


def mahalanobis(xi, Y):
    """sqrt(xi^T Y^-1 xi); singular Y is regularized with a warning."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    Y = np.asarray(Y, dtype=float)
    try:
        L = np.linalg.cholesky(Y)
    except np.linalg.LinAlgError:
        warnings.warn("mahalanobis: covariance is singular, regularizing")
        L = np.linalg.cholesky(regularize_spd(Y))
    z = np.linalg.solve(L, xi)
    return float(np.sqrt(z @ z))

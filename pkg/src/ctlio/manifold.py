"""Composite-manifold math for SO(3) x R^3.

Rotations are plain 3x3 orthonormal numpy arrays.  The composite manifold
treats rotation and translation as independent group components: group
composition is component-wise and Exp/Log decouple into an SO(3) part and a
plain vector part.  Rigid SE(3) composition (for mapping points between
frames) is deliberately separate and lives on :class:`PoseSplit`.

Tangent vectors are laid out ``[translation(3), rotation(3)]``.

Perturbation conventions used throughout the library:
  * state updates are left increments, ``oplus(X, tau) = Exp(tau) o X``
  * ``ominus(Y, X)`` is the exact inverse, ``Log(Y o X^-1)``
  * rotation-valued Jacobians are left-trivialized,
    ``f(X oplus tau) ~ Exp(J tau) o f(X)``
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Taylor branch for exp / Jacobians; keeps 0/0 out of the trig formulas.
SMALL_ANGLE = 1e-5
# so3_log switches to the outer-product (axis from R + R^T) branch above this.
LOG_PI_BRANCH = np.deg2rad(175.0)


def skew(v):
    """Skew-symmetric matrix of a 3-vector, batched over leading dims."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def so3_exp(phi):
    """Rodrigues exponential map, batched over leading dimensions."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    K = skew(phi)
    KK = K @ K
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    eye = np.broadcast_to(np.eye(3), K.shape).copy()
    return eye + a[..., None, None] * K + b[..., None, None] * KK


def _vee(M):
    return np.array([M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]])


def so3_log(R):
    """Axis-angle logarithm of a rotation matrix.

    Uses atan2 over (sin, cos) everywhere and switches to the outer-product
    formulation above LOG_PI_BRANCH where the vee-part loses the axis.
    Output norm is < pi + eps (canonical branch).
    """
    R = np.asarray(R, dtype=float)
    w = 0.5 * _vee(R)
    s = np.linalg.norm(w)  # |sin(theta)|
    c = 0.5 * (np.trace(R) - 1.0)
    c = min(1.0, max(-1.0, c))
    theta = np.arctan2(s, c)
    if theta < SMALL_ANGLE:
        # vee/2 * (1 + theta^2/6) to third order
        return w * (1.0 + theta * theta / 6.0)
    if theta < LOG_PI_BRANCH:
        return w * (theta / s)
    # Near pi: axis from a a^T = (R + R^T - 2 cos I) / (2 (1 - cos)).
    A = (R + R.T) / 2.0 - c * np.eye(3)
    A /= 1.0 - c
    i = int(np.argmax(np.diag(A)))
    axis = A[i] / np.sqrt(max(A[i, i], 1e-18))
    axis /= np.linalg.norm(axis)
    # orient with the vee part when it is usable, else canonicalize
    if s > 1e-12:
        if np.dot(axis, w) < 0.0:
            axis = -axis
    else:
        nz = np.nonzero(np.abs(axis) > 1e-12)[0][0]
        if axis[nz] < 0.0:
            axis = -axis
    return axis * theta


def so3_log_many(Rs):
    Rs = np.asarray(Rs, dtype=float)
    return np.stack([so3_log(R) for R in Rs.reshape(-1, 3, 3)]).reshape(Rs.shape[:-2] + (3,))


def jr_so3(phi):
    """Right Jacobian of SO(3): Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        - (1.0 - np.cos(theta)) / t2 * K
        + (theta - np.sin(theta)) / (t2 * theta) * (K @ K)
    )


def jr_inv_so3(phi):
    """Inverse right Jacobian of SO(3); small-angle Taylor below SMALL_ANGLE."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    t2 = theta * theta
    coef = 1.0 / t2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * (K @ K)


def jl_inv_so3(phi):
    """Inverse left Jacobian: Log(Exp(d) Exp(phi)) ~ phi + Jl_inv(phi) d."""
    return jr_inv_so3(np.asarray(phi, dtype=float)).T


@dataclass
class PoseSplit:
    """A rotation/translation pair; rigid helpers operate in SE(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity() -> "PoseSplit":
        return PoseSplit(np.eye(3), np.zeros(3))

    def copy(self) -> "PoseSplit":
        return PoseSplit(self.rotation.copy(), self.translation.copy())

    # -- rigid-transform geometry (map-frame composition) ------------------
    def compose(self, other: "PoseSplit") -> "PoseSplit":
        return PoseSplit(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "PoseSplit":
        Rt = self.rotation.T
        return PoseSplit(Rt, -Rt @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T


def exp(tau) -> PoseSplit:
    """Composite exponential: rotation via SO(3) exp, translation copied."""
    tau = np.asarray(tau, dtype=float)
    return PoseSplit(so3_exp(tau[3:]), tau[:3].copy())


def log(X: PoseSplit):
    """Decoupled logarithm; inverse of :func:`exp` for rotation norm < pi."""
    return np.concatenate([X.translation, so3_log(X.rotation)])


def oplus(X: PoseSplit, tau) -> PoseSplit:
    """Left-increment update Exp(tau) o X (component-wise composition)."""
    tau = np.asarray(tau, dtype=float)
    return PoseSplit(so3_exp(tau[3:]) @ X.rotation, X.translation + tau[:3])


def ominus(Y: PoseSplit, X: PoseSplit):
    """Left difference Log(Y o X^-1); exact inverse of :func:`oplus`."""
    return np.concatenate([Y.translation - X.translation,
                           so3_log(Y.rotation @ X.rotation.T)])


def adjoint(X: PoseSplit):
    """Adjoint of the composite manifold: block-diag(R, R)."""
    A = np.zeros((6, 6))
    A[:3, :3] = X.rotation
    A[3:, 3:] = X.rotation
    return A


def slerp(times_ns, rotations, t_ns):
    """Geodesic interpolation of a time-stamped rotation sequence.

    Reproduces samples exactly and extrapolates with the nearest endpoint.
    """
    times_ns = np.asarray(times_ns)
    if len(times_ns) == 0:
        raise ValueError("slerp needs at least one rotation sample")
    rotations = np.asarray(rotations, dtype=float)
    if t_ns <= times_ns[0]:
        return rotations[0].copy()
    if t_ns >= times_ns[-1]:
        return rotations[-1].copy()
    i = int(np.searchsorted(times_ns, t_ns, side="right") - 1)
    if times_ns[i] == t_ns:
        return rotations[i].copy()
    alpha = float(t_ns - times_ns[i]) / float(times_ns[i + 1] - times_ns[i])
    d = so3_log(rotations[i].T @ rotations[i + 1])
    return rotations[i] @ so3_exp(alpha * d)


# -- quaternion helpers for file formats (internal storage stays matrices) --

def rot_to_quat_wxyz(R):
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            w = (R[2, 1] - R[1, 2]) / s
            x = 0.25 * s
            y = (R[0, 1] + R[1, 0]) / s
            z = (R[0, 2] + R[2, 0]) / s
        elif i == 1:
            s = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
            w = (R[0, 2] - R[2, 0]) / s
            x = (R[0, 1] + R[1, 0]) / s
            y = 0.25 * s
            z = (R[1, 2] + R[2, 1]) / s
        else:
            s = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
            w = (R[1, 0] - R[0, 1]) / s
            x = (R[0, 2] + R[2, 0]) / s
            y = (R[1, 2] + R[2, 1]) / s
            z = 0.25 * s
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def quat_wxyz_to_rot(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])

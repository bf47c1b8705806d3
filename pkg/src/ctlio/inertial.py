"""IMU handling: pre-orientation, preintegration, residuals and Jacobians.

Conventions
-----------
Gravity is a unit direction g on the 2-sphere with fixed magnitude,
g_w = 9.81 * g, initialized to (0, 0, -1).  The accelerometer measures
specific force,

    a_m = R(t)^T (a(t) - g_w) + b_acc(t) + noise,

which makes a stationary sensor read -R^T g_w (upward).  The gyroscope
measures omega_m = omega(t) + b_gyr(t) + noise.

Preintegration accumulates right-increment deltas (Delta p, Delta R,
Delta v) with midpoint integration; residuals follow the relative forms

    d_p = R_i^T (p_j - p_i - v_i dt - g_w dt^2/2) - Delta p_corr
    d_R = Log(Delta R_corr  R_j^T R_i)
    d_v = R_i^T (v_j - v_i - g_w dt) - Delta v_corr

with first-order bias corrections applied to the deltas.  All Jacobians are
w.r.t. left-increment perturbations of the spline knots, bias knots and the
2-dof gravity tangent; every one of them is checked against central finite
differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import jr_inv_so3, jr_so3, skew, slerp, so3_exp, so3_log
from .spline import NS_PER_S, BiasSpline, NonUniformSpline

GRAVITY_MAGNITUDE = 9.81
RAW_SWITCH_RAD_S = np.deg2rad(120.0)


@dataclass
class ImuStream:
    """Time-sorted IMU samples (column arrays)."""

    t_ns: np.ndarray
    gyr: np.ndarray   # rad/s
    acc: np.ndarray   # m/s^2

    def __post_init__(self):
        self.t_ns = np.asarray(self.t_ns, dtype=np.int64)
        self.gyr = np.asarray(self.gyr, dtype=float)
        self.acc = np.asarray(self.acc, dtype=float)
        if np.any(np.diff(self.t_ns) <= 0):
            raise ValueError("IMU sample times must be strictly increasing")

    def __len__(self):
        return len(self.t_ns)

    def slice(self, t0_ns: int, t1_ns: int) -> "ImuStream":
        sel = (self.t_ns > t0_ns) & (self.t_ns <= t1_ns)
        return ImuStream(self.t_ns[sel], self.gyr[sel], self.acc[sel])

    def interp(self, t_ns: int):
        """Linear interpolation of (gyr, acc) at one time."""
        i = int(np.searchsorted(self.t_ns, t_ns))
        if i == 0:
            return self.gyr[0].copy(), self.acc[0].copy()
        if i >= len(self.t_ns):
            return self.gyr[-1].copy(), self.acc[-1].copy()
        a = float(t_ns - self.t_ns[i - 1]) / float(self.t_ns[i] - self.t_ns[i - 1])
        return ((1 - a) * self.gyr[i - 1] + a * self.gyr[i],
                (1 - a) * self.acc[i - 1] + a * self.acc[i])

    def max_rate(self, t0_ns: int, t1_ns: int) -> float:
        sel = (self.t_ns > t0_ns) & (self.t_ns <= t1_ns)
        if not np.any(sel):
            return 0.0
        return float(np.linalg.norm(self.gyr[sel], axis=1).max())


def raw_mode(stream: ImuStream, t0_ns: int, t1_ns: int,
             threshold_rad_s: float = RAW_SWITCH_RAD_S) -> bool:
    """All-raw IMU mode when the scan's peak angular rate is at or above the
    switch threshold."""
    return stream.max_rate(t0_ns, t1_ns) >= threshold_rad_s


def integrate_rotations(stream: ImuStream, t0_ns: int, t1_ns: int):
    """Incremental orientation over (t0, t1] from gyro integration.

    Returns (times_ns, rotations) starting with the identity at t0, suitable
    for slerp-based pre-orientation.  An empty stream yields the identity
    sample only.
    """
    sub = stream.slice(t0_ns, t1_ns)
    times = [int(t0_ns)]
    rots = [np.eye(3)]
    prev_t = int(t0_ns)
    prev_w = stream.interp(t0_ns)[0] if len(stream) else np.zeros(3)
    R = np.eye(3)
    for k in range(len(sub)):
        dt = (int(sub.t_ns[k]) - prev_t) / NS_PER_S
        w_mid = 0.5 * (prev_w + sub.gyr[k])
        R = R @ so3_exp(w_mid * dt)
        times.append(int(sub.t_ns[k]))
        rots.append(R.copy())
        prev_t = int(sub.t_ns[k])
        prev_w = sub.gyr[k]
    return np.asarray(times, dtype=np.int64), np.asarray(rots)


def preorient_points(points, point_times_ns, rot_times_ns, rotations, t_ref_ns):
    """Rotate each point to a common reference time: p~ = slerp(t_ref)^-1
    slerp(t_p) p."""
    points = np.asarray(points, dtype=float)
    Rref = slerp(rot_times_ns, rotations, t_ref_ns)
    out = np.empty_like(points)
    # points come column-grouped; evaluate slerp once per distinct time
    ts = np.asarray(point_times_ns)
    uniq, inverse = np.unique(ts, return_inverse=True)
    for u, t in enumerate(uniq):
        Rp = slerp(rot_times_ns, rotations, int(t))
        M = Rref.T @ Rp
        sel = inverse == u
        out[sel] = points[sel] @ M.T
    return out


def preorient_points_segmented(points, point_times_ns, rot_times_ns, rotations,
                               seg_times_ns, seg_idx):
    """Rotate each point to its segment's reference time.

    Per-segment references keep the later surfelwise compensation and the
    segment-time registration poses frame-consistent."""
    points = np.asarray(points, dtype=float)
    out = np.empty_like(points)
    seg_refs = [slerp(rot_times_ns, rotations, int(t)) for t in seg_times_ns]
    ts = np.asarray(point_times_ns)
    uniq, inverse = np.unique(ts, return_inverse=True)
    for u, t in enumerate(uniq):
        Rp = slerp(rot_times_ns, rotations, int(t))
        sel = np.nonzero(inverse == u)[0]
        for s in np.unique(seg_idx[sel]):
            M = seg_refs[s].T @ Rp
            rows = sel[seg_idx[sel] == s]
            out[rows] = points[rows] @ M.T
    return out


# -- gravity on the unit sphere ----------------------------------------------

def s2_tangent_basis(g):
    """Orthonormal 3x2 tangent basis at g from Householder completion."""
    g = np.asarray(g, dtype=float)
    e = np.zeros(3)
    e[2] = 1.0
    s = -1.0 if g[2] < 0 else 1.0
    u = g + s * e
    H = np.eye(3) - 2.0 * np.outer(u, u) / np.dot(u, u)
    return H[:, :2]


@dataclass
class GravityState:
    """Unit gravity direction with fixed magnitude and 2-dof retraction."""

    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    magnitude: float = GRAVITY_MAGNITUDE

    @property
    def vector(self):
        return self.magnitude * self.direction

    def basis(self):
        return s2_tangent_basis(self.direction)

    def jacobian(self):
        """d g_w / d delta for the normalized-additive retraction."""
        return self.magnitude * self.basis()

    def retract(self, delta):
        g = self.direction + self.basis() @ np.asarray(delta, dtype=float)
        return GravityState(g / np.linalg.norm(g), self.magnitude)


def gravity_from_static(acc_samples):
    """Static initialization: averaged specific force points opposite g_w."""
    mean_acc = np.asarray(acc_samples, dtype=float).mean(axis=0)
    u = mean_acc / np.linalg.norm(mean_acc)
    # choose R0 with zero yaw mapping the body up-axis onto world +z
    z = np.array([0.0, 0.0, 1.0])
    v = np.cross(u, z)
    c = float(np.dot(u, z))
    if np.linalg.norm(v) < 1e-12:
        R0 = np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    else:
        axis = v / np.linalg.norm(v)
        R0 = so3_exp(axis * np.arccos(np.clip(c, -1.0, 1.0)))
    return GravityState(), R0


# -- preintegration ------------------------------------------------------------

@dataclass
class PreintegratedImu:
    dp: np.ndarray
    dR: np.ndarray
    dv: np.ndarray
    cov: np.ndarray                 # 9x9 over [dp, dR, dv]
    J_p_ba: np.ndarray
    J_p_bg: np.ndarray
    J_R_bg: np.ndarray
    J_v_ba: np.ndarray
    J_v_bg: np.ndarray
    bias_acc_ref: np.ndarray
    bias_gyr_ref: np.ndarray
    t0_ns: int
    t1_ns: int

    @property
    def dt(self) -> float:
        return (self.t1_ns - self.t0_ns) / NS_PER_S

    def corrected(self, bias_acc, bias_gyr):
        """First-order bias-corrected deltas (left-increment on the rotation)."""
        dba = np.asarray(bias_acc, dtype=float) - self.bias_acc_ref
        dbg = np.asarray(bias_gyr, dtype=float) - self.bias_gyr_ref
        dp = self.dp + self.J_p_ba @ dba + self.J_p_bg @ dbg
        dR = so3_exp(self.J_R_bg @ dbg) @ self.dR
        dv = self.dv + self.J_v_ba @ dba + self.J_v_bg @ dbg
        return dp, dR, dv


def preintegrate(stream: ImuStream, t0_ns: int, t1_ns: int, bias_acc, bias_gyr,
                 sigma_acc: float, sigma_gyr: float) -> PreintegratedImu:
    """Midpoint preintegration of (t0, t1] with bias Jacobians and covariance.

    sigma_acc / sigma_gyr are per-sample measurement standard deviations.
    Raises when the stream has no samples bracketing the interval.
    """
    if t1_ns <= t0_ns:
        raise ValueError("empty preintegration interval")
    if len(stream) == 0 or stream.t_ns[0] > t1_ns or stream.t_ns[-1] < t0_ns:
        raise ValueError("IMU stream does not cover the interval")
    bias_acc = np.asarray(bias_acc, dtype=float)
    bias_gyr = np.asarray(bias_gyr, dtype=float)

    inner = stream.slice(t0_ns, t1_ns - 1)
    g0, a0 = stream.interp(t0_ns)
    g1, a1 = stream.interp(t1_ns)
    times = np.concatenate([[t0_ns], inner.t_ns, [t1_ns]])
    gyr = np.vstack([g0, inner.gyr, g1])
    acc = np.vstack([a0, inner.acc, a1])

    dp = np.zeros(3)
    dR = np.eye(3)
    dv = np.zeros(3)
    Jp_ba = np.zeros((3, 3))
    Jp_bg = np.zeros((3, 3))
    JR_bg = np.zeros((3, 3))
    Jv_ba = np.zeros((3, 3))
    Jv_bg = np.zeros((3, 3))
    cov = np.zeros((9, 9))
    qa = sigma_acc ** 2
    qg = sigma_gyr ** 2

    Q = np.diag([qa] * 3 + [qg] * 3)
    for k in range(len(times) - 1):
        dt = (int(times[k + 1]) - int(times[k])) / NS_PER_S
        if dt <= 0:
            continue
        w = 0.5 * (gyr[k] + gyr[k + 1]) - bias_gyr
        a = 0.5 * (acc[k] + acc[k + 1]) - bias_acc
        theta = w * dt
        E = so3_exp(theta)
        Jr = jr_so3(theta)
        # acceleration rotates with the half-step orientation; the start-of-step
        # rotation leaves an O(dt^2 * omega x a) bias that breaks closure tests
        R_half = dR @ so3_exp(0.5 * theta)
        Ra = R_half @ a
        dR_next = dR @ E

        # bias Jacobians, left-increment convention on the rotation
        L_half = JR_bg - 0.5 * dt * R_half @ jr_so3(0.5 * theta)
        Jp_ba += Jv_ba * dt - 0.5 * R_half * dt * dt
        Jp_bg += Jv_bg * dt - 0.5 * dt * dt * skew(Ra) @ L_half
        Jv_ba += -R_half * dt
        Jv_bg += -skew(Ra * dt) @ L_half
        JR_bg += -dR_next @ Jr * dt

        # noise propagation, state [dp, theta_left, dv]
        A = np.eye(9)
        A[0:3, 6:9] = np.eye(3) * dt
        A[0:3, 3:6] = -0.5 * dt * dt * skew(Ra)
        A[6:9, 3:6] = -dt * skew(Ra)
        B = np.zeros((9, 6))
        B[0:3, 0:3] = 0.5 * R_half * dt * dt
        B[6:9, 0:3] = R_half * dt
        B[3:6, 3:6] = dR_next @ Jr * dt
        cov = A @ cov @ A.T + B @ Q @ B.T

        dp = dp + dv * dt + 0.5 * Ra * dt * dt
        dv = dv + Ra * dt
        dR = dR_next

    return PreintegratedImu(dp, dR, dv, cov, Jp_ba, Jp_bg, JR_bg, Jv_ba, Jv_bg,
                            bias_acc.copy(), bias_gyr.copy(), int(t0_ns), int(t1_ns))


# -- residuals -----------------------------------------------------------------

def _knot_pose_rate(spline: NonUniformSpline, t_ns: int):
    pose = spline.evaluate_pose(t_ns)
    rates = spline.evaluate_derivatives(t_ns)
    kj = spline.knot_jacobians(t_ns)
    return pose, rates, kj


@dataclass
class ResidualBlocks:
    """Residual vector plus Jacobian blocks keyed by state-block ids.

    Keys: ("knot", i) for 6-dof pose knots, ("bias", i) for 6-dof bias knots
    (accelerometer part first), ("grav",) for the 2-dof gravity tangent.
    """

    r: np.ndarray
    blocks: dict
    weight: np.ndarray  # information matrix of the residual

    def add(self, key, J):
        if key in self.blocks:
            self.blocks[key] = self.blocks[key] + J
        else:
            self.blocks[key] = J


def preint_residual(pre: PreintegratedImu, spline: NonUniformSpline,
                    bias: BiasSpline, gravity: GravityState) -> ResidualBlocks:
    """9-dof preintegration residual [d_p, d_R, d_v] with analytic Jacobians
    w.r.t. pose knots, bias knots and the gravity tangent."""
    t_i, t_j = pre.t0_ns, pre.t1_ns
    dtm = pre.dt
    pose_i, rates_i, kj_i = _knot_pose_rate(spline, t_i)
    pose_j, rates_j, kj_j = _knot_pose_rate(spline, t_j)
    Ri = pose_i.rotation
    Rit = Ri.T
    gw = gravity.vector

    bacc_i, bgyr_i = bias.evaluate(t_i)
    dp_c, dR_c, dv_c = pre.corrected(bacc_i, bgyr_i)

    hp = Rit @ (pose_j.translation - pose_i.translation
                - rates_i.velocity * dtm - 0.5 * gw * dtm * dtm)
    hv = Rit @ (rates_j.velocity - rates_i.velocity - gw * dtm)
    dRt = dR_c @ pose_j.rotation.T @ Ri
    d_rot = so3_log(dRt)
    r = np.concatenate([hp - dp_c, d_rot, hv - dv_c])

    out = ResidualBlocks(r, {}, np.linalg.inv(pre.cov + 1e-18 * np.eye(9)))
    jr_inv_rot = jr_inv_so3(d_rot)

    # pose-knot blocks; knots may support t_i, t_j or both
    for kj, at_i in ((kj_i, True), (kj_j, False)):
        for m in range(spline.order):
            gk = kj.k0 + m
            J = np.zeros((9, 6))
            if at_i:
                # translation part
                J[0:3, 0:3] += Rit * (-kj.c[m] - dtm * kj.cd[m])
                J[6:9, 0:3] += Rit * (-kj.cd[m])
                # rotation part
                J[0:3, 3:6] += skew(hp) @ Rit @ kj.JR[m]
                J[6:9, 3:6] += skew(hv) @ Rit @ kj.JR[m]
                J[3:6, 3:6] += jr_inv_rot @ Rit @ kj.JR[m]
            else:
                J[0:3, 0:3] += Rit * kj.c[m]
                J[6:9, 0:3] += Rit * kj.cd[m]
                J[3:6, 3:6] += -jr_inv_rot @ Rit @ kj.JR[m]
            out.add(("knot", gk), J)

    # gravity block
    Jg = np.zeros((9, 3))
    Jg[0:3] = -Rit * (0.5 * dtm * dtm)
    Jg[6:9] = -Rit * dtm
    out.add(("grav",), Jg @ gravity.jacobian())

    # bias-knot blocks through the stored linearization Jacobians; the dp/dv
    # rows enter with a minus (subtracted corrections) while the rotation row
    # chains through Jr^-1 dRt^T Jl(u) because the correction Exp(u) with
    # u = J_R_bg (b(t_i) - b_ref) left-multiplies dR away from u = 0
    kb, wb = bias.weights(t_i)
    u_corr = pre.J_R_bg @ (bgyr_i - pre.bias_gyr_ref)
    mid = jr_inv_rot @ dRt.T @ jr_so3(u_corr).T
    col_ba = np.vstack([-pre.J_p_ba, np.zeros((3, 3)), -pre.J_v_ba])
    col_bg = np.vstack([-pre.J_p_bg, mid @ pre.J_R_bg, -pre.J_v_bg])
    for m in range(bias.order):
        J = np.zeros((9, 6))
        J[:, 0:3] = wb[m] * col_ba
        J[:, 3:6] = wb[m] * col_bg
        out.add(("bias", kb + m), J)
    return out


def raw_residual(t_ns: int, gyr_m, acc_m, spline: NonUniformSpline,
                 bias: BiasSpline, gravity: GravityState) -> ResidualBlocks:
    """6-dof raw IMU residual [d_gyr, d_acc] with analytic Jacobians."""
    pose, rates, kj = _knot_pose_rate(spline, t_ns)
    R = pose.rotation
    Rt = R.T
    gw = gravity.vector
    bacc, bgyr = bias.evaluate(t_ns)
    d_gyr = rates.omega - (np.asarray(gyr_m, dtype=float) - bgyr)
    spec = Rt @ (rates.accel - gw)
    d_acc = spec - (np.asarray(acc_m, dtype=float) - bacc)
    out = ResidualBlocks(np.concatenate([d_gyr, d_acc]), {}, np.eye(6))

    for m in range(spline.order):
        J = np.zeros((6, 6))
        J[0:3, 3:6] = kj.Jw[m]
        J[3:6, 0:3] = Rt * kj.cdd[m]
        J[3:6, 3:6] = skew(spec) @ Rt @ kj.JR[m]
        out.add(("knot", kj.k0 + m), J)

    kb, wb = bias.weights(t_ns)
    for m in range(bias.order):
        J = np.zeros((6, 6))
        J[0:3, 3:6] = wb[m] * np.eye(3)
        J[3:6, 0:3] = wb[m] * np.eye(3)
        out.add(("bias", kb + m), J)

    out.add(("grav",), np.vstack([np.zeros((3, 3)), -Rt]) @ gravity.jacobian())
    return out


def zero_accel_residual(t_ns: int, spline: NonUniformSpline) -> ResidualBlocks:
    """[a(t); alpha(t)] soft zero-acceleration residual (needs order >= 3)."""
    rates = spline.evaluate_derivatives(t_ns)
    if rates.accel is None:
        raise ValueError("zero-acceleration term needs spline order >= 3")
    kj = spline.knot_jacobians(t_ns)
    out = ResidualBlocks(np.concatenate([rates.accel, rates.ang_accel]), {},
                         np.eye(6))
    for m in range(spline.order):
        J = np.zeros((6, 6))
        J[0:3, 0:3] = kj.cdd[m] * np.eye(3)
        J[3:6, 3:6] = kj.Jaa[m]
        out.add(("knot", kj.k0 + m), J)
    return out


@dataclass
class RelPoseMeasurement:
    """Relative pose between two trajectory times with an SPD weight."""

    t0_ns: int
    t1_ns: int
    dR: np.ndarray
    dp: np.ndarray
    weight: np.ndarray  # 6x6 SPD


def relpose_residual(meas: RelPoseMeasurement, spline: NonUniformSpline) -> ResidualBlocks:
    """Relative-pose residual [dRm^T (Dp - Dp_m); Log(dRm^T Rj^T Ri)]."""
    pose_i = spline.evaluate_pose(meas.t0_ns)
    pose_j = spline.evaluate_pose(meas.t1_ns)
    kj_i = spline.knot_jacobians(meas.t0_ns)
    kj_j = spline.knot_jacobians(meas.t1_ns)
    Ri = pose_i.rotation
    Rit = Ri.T
    dRmT = meas.dR.T

    Dp = Rit @ (pose_j.translation - pose_i.translation)
    rot = dRmT @ pose_j.rotation.T @ Ri
    d_rot = so3_log(rot)
    r = np.concatenate([dRmT @ (Dp - meas.dp), d_rot])
    out = ResidualBlocks(r, {}, meas.weight)
    jr_inv_rot = jr_inv_so3(d_rot)

    for kj, at_i in ((kj_i, True), (kj_j, False)):
        for m in range(spline.order):
            J = np.zeros((6, 6))
            if at_i:
                J[0:3, 0:3] = dRmT @ Rit * (-kj.c[m])
                J[0:3, 3:6] = dRmT @ skew(Dp) @ Rit @ kj.JR[m]
                J[3:6, 3:6] = jr_inv_rot @ Rit @ kj.JR[m]
            else:
                J[0:3, 0:3] = dRmT @ Rit * kj.c[m]
                J[3:6, 3:6] = -jr_inv_rot @ Rit @ kj.JR[m]
            out.add(("knot", kj.k0 + m), J)
    return out


# -- scan-geometry constraint weighting ----------------------------------------

def constraint_weight(surfel_means, surfel_normals, kappa_gate: float = 10.0,
                      eig_floor: float = 1e-12):
    """Eigen-scaled 6x6 weight for relative-pose constraints.

    Builds C = mean of h h^T with h = [n, mu x n], scales eigenvectors by
    kappa_i = lambda_max / lambda_i and reports whether the constraint should
    activate (condition number above the gate).  Position- and
    orientation-only 3x3 variants use the corresponding diagonal blocks.
    """
    mu = np.asarray(surfel_means, dtype=float)
    nrm = np.asarray(surfel_normals, dtype=float)
    if len(mu) < 6:
        raise ValueError("need at least 6 surfels for the constraint weight")
    h = np.concatenate([nrm, np.cross(mu, nrm)], axis=1)
    C = h.T @ h / len(h)

    def scaled(Cb):
        w, V = np.linalg.eigh(Cb)
        w = np.maximum(w, eig_floor)
        kappa = w[-1] / w
        W = (V * kappa) @ V.T
        active = bool(kappa.max() > kappa_gate)
        return W, active, float(kappa.max())

    W6, active, kmax = scaled(C)
    Wp, _, _ = scaled(C[:3, :3])
    Wr, _, _ = scaled(C[3:, 3:])
    return {"full": W6, "position": Wp, "orientation": Wr,
            "active": active, "kappa_max": kmax}


def filter_vertical_spikes(rel_measurements, spike_factor: float = 3.0):
    """Drop relative-pose measurements whose implied vertical speed exceeds
    spike_factor times the window median."""
    if not rel_measurements:
        return []
    vz = np.array([abs(m.dp[2]) / max((m.t1_ns - m.t0_ns) / NS_PER_S, 1e-9)
                   for m in rel_measurements])
    med = np.median(vz)
    if med <= 0:
        med = np.finfo(float).tiny
    keep = vz <= spike_factor * med
    return [m for m, k in zip(rel_measurements, keep) if k]

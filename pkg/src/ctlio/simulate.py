"""Synthetic world: rotating-LiDAR scans and IMU streams from analytic or
spline ground-truth trajectories, exactly consistent in the noise-free mode.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inertial import GRAVITY_MAGNITUDE, GravityState, ImuStream
from .manifold import PoseSplit, skew, so3_exp, so3_log
from .spline import NS_PER_S, NonUniformSpline, to_ns


@dataclass
class LidarModel:
    rows: int = 32
    cols: int = 256
    vfov_deg: float = 45.0
    max_range: float = 40.0
    range_sigma: float = 0.0
    scan_rate_hz: float = 10.0

    @property
    def duration_ns(self) -> int:
        return int(round(NS_PER_S / self.scan_rate_hz))

    def directions(self):
        """Unit ray directions (rows, cols, 3) in the sensor frame; the
        azimuth of column u is 2 pi u / cols, matching the column model."""
        elev = np.deg2rad(np.linspace(self.vfov_deg / 2, -self.vfov_deg / 2, self.rows))
        az = 2.0 * np.pi * np.arange(self.cols) / self.cols
        ce, se = np.cos(elev), np.sin(elev)
        ca, sa = np.cos(az), np.sin(az)
        d = np.empty((self.rows, self.cols, 3))
        d[..., 0] = ce[:, None] * ca[None, :]
        d[..., 1] = ce[:, None] * sa[None, :]
        d[..., 2] = se[:, None]
        return d


@dataclass
class ImuModel:
    rate_hz: float = 200.0
    sigma_acc: float = 0.0      # m/s^2 per sample
    sigma_gyr: float = 0.0      # rad/s per sample
    bias_acc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias_gyr: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class BoxRoom:
    """Axis-aligned box interior; optionally open along +x/-x (corridor)."""

    half_extents: np.ndarray = field(default_factory=lambda: np.array([5.0, 4.0, 2.0]))
    open_x: bool = False

    def ray_ranges(self, origins, dirs):
        """Range to the nearest wall per ray; inf when no hit (open faces)."""
        n = len(origins)
        best = np.full(n, np.inf)
        axes = range(1 if self.open_x else 0, 3)
        for a in axes:
            for sign in (-1.0, 1.0):
                bound = sign * self.half_extents[a]
                da = dirs[:, a]
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = (bound - origins[:, a]) / da
                ok = (da * sign > 1e-12) & (t > 1e-9)
                t = np.where(ok, t, 1.0)
                hit = origins + t[:, None] * dirs
                inside = np.ones(n, dtype=bool)
                for b in range(3):
                    if b == a:
                        continue
                    lim = self.half_extents[b] + 1e-9
                    if b == 0 and self.open_x:
                        lim = np.inf
                    inside &= np.abs(hit[:, b]) <= lim
                ok &= inside
                best = np.where(ok & (t < best), t, best)
        return best


class ConstantTwistTrajectory:
    """Screw motion with constant body twist (v, w); exact derivatives."""

    def __init__(self, pose0: PoseSplit, linear, angular, t0_ns: int = 0):
        self.pose0 = pose0
        self.v = np.asarray(linear, dtype=float)
        self.w = np.asarray(angular, dtype=float)
        self.t0_ns = int(t0_ns)

    def pose(self, t_ns: int) -> PoseSplit:
        s = (int(t_ns) - self.t0_ns) / NS_PER_S
        R = self.pose0.rotation @ so3_exp(self.w * s)
        # p(t) = p0 + R0 * integral exp(w u) v du
        th = np.linalg.norm(self.w) * s
        if th < 1e-12:
            V = np.eye(3) * s
        else:
            a = self.w / np.linalg.norm(self.w)
            K = skew(a)
            wn = np.linalg.norm(self.w)
            V = (np.eye(3) * s + (1 - np.cos(th)) / wn ** 2 * skew(self.w)
                 + (s - np.sin(th) / wn) * (K @ K))
        p = self.pose0.translation + self.pose0.rotation @ (V @ self.v)
        return PoseSplit(R, p)

    def rates(self, t_ns: int):
        s = (int(t_ns) - self.t0_ns) / NS_PER_S
        R = self.pose0.rotation @ so3_exp(self.w * s)
        vel = R @ self.v
        acc = R @ np.cross(self.w, self.v)
        return self.w.copy(), vel, acc


class SplineTrajectory:
    """Ground truth backed by a dense cumulative spline (exact derivatives)."""

    def __init__(self, spline: NonUniformSpline):
        self.spline = spline

    def pose(self, t_ns: int) -> PoseSplit:
        return self.spline.evaluate_pose(int(t_ns))

    def rates(self, t_ns: int):
        r = self.spline.evaluate_derivatives(int(t_ns))
        return r.omega, r.velocity, r.accel


def waypoint_trajectory(times_s, rotvecs, positions, order: int = 4):
    """Order-4 spline through waypoint knots (C2 trajectory for IMU closure)."""
    times_ns = np.array([to_ns(t) for t in times_s], dtype=np.int64)
    rots = np.stack([so3_exp(np.asarray(r, dtype=float)) for r in rotvecs])
    return SplineTrajectory(NonUniformSpline(times_ns, rots,
                                             np.asarray(positions, dtype=float),
                                             order=order))


@dataclass
class ScanData:
    t_end_ns: int
    duration_ns: int
    rows: int
    cols: int
    points: np.ndarray     # (n,3) sensor frame
    column: np.ndarray     # (n,) uint32
    times_ns: np.ndarray   # (n,) capture times


def simulate(world: BoxRoom, traj, lidar: LidarModel, imu: ImuModel,
             t0_s: float, duration_s: float, seed: int = 0,
             gravity: GravityState | None = None):
    """Deterministic synthetic sequence: scans, IMU stream and ground truth.

    Scan columns fire in order over one revolution; each column's rays use
    the exact trajectory pose at the column time, so the pointwise
    compensation oracle reproduces the static geometry in the noise-free
    mode.  The accelerometer follows the specific-force model.
    """
    rng = np.random.default_rng(seed)
    grav = gravity or GravityState()
    gw = grav.vector
    t0_ns = to_ns(t0_s)
    dirs = lidar.directions()
    n_scans = int(round(duration_s * lidar.scan_rate_hz))
    dt_e = lidar.duration_ns

    scans = []
    for l in range(n_scans):
        t_end = t0_ns + (l + 1) * dt_e
        u = np.arange(lidar.cols)
        t_cols = t_end - dt_e + (dt_e * u) // lidar.cols
        pts, colidx, times = [], [], []
        for ui in range(lidar.cols):
            pose = traj.pose(int(t_cols[ui]))
            d_sensor = dirs[:, ui, :]
            d_world = d_sensor @ pose.rotation.T
            o_world = np.tile(pose.translation, (lidar.rows, 1))
            rng_hit = world.ray_ranges(o_world, d_world)
            if lidar.range_sigma > 0:
                rng_hit = rng_hit + rng.normal(0.0, lidar.range_sigma, size=lidar.rows)
            ok = np.isfinite(rng_hit) & (rng_hit > 0.1) & (rng_hit <= lidar.max_range)
            if not np.any(ok):
                continue
            pts.append(rng_hit[ok, None] * d_sensor[ok])
            colidx.append(np.full(ok.sum(), ui, dtype=np.uint32))
            times.append(np.full(ok.sum(), t_cols[ui], dtype=np.int64))
        scans.append(ScanData(int(t_end), int(dt_e), lidar.rows, lidar.cols,
                              np.concatenate(pts), np.concatenate(colidx),
                              np.concatenate(times)))

    imu_dt = int(round(NS_PER_S / imu.rate_hz))
    imu_t = np.arange(t0_ns, t0_ns + to_ns(duration_s) + imu_dt, imu_dt, dtype=np.int64)
    gyr = np.empty((len(imu_t), 3))
    acc = np.empty((len(imu_t), 3))
    for i, t in enumerate(imu_t):
        w, v, a = traj.rates(int(t))
        R = traj.pose(int(t)).rotation
        gyr[i] = w + imu.bias_gyr
        acc[i] = R.T @ (a - gw) + imu.bias_acc
    if imu.sigma_gyr > 0:
        gyr += rng.normal(0.0, imu.sigma_gyr, size=gyr.shape)
    if imu.sigma_acc > 0:
        acc += rng.normal(0.0, imu.sigma_acc, size=acc.shape)
    stream = ImuStream(imu_t, gyr, acc)

    truth_t = np.array([s.t_end_ns for s in scans], dtype=np.int64)
    truth_poses = [traj.pose(int(t)) for t in truth_t]
    return scans, stream, (truth_t, truth_poses)


def _smooth_profile(rng, n, dt, peak, ease_s, n_modes=4, min_period_s=2.5):
    """Band-limited random rate profile with a smooth ease-in, |value| <= peak."""
    t = np.arange(n) * dt
    total = n * dt
    out = np.zeros(n)
    for _ in range(n_modes):
        period = rng.uniform(min_period_s, max(2 * min_period_s, total))
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * t / period + phase)
    out *= peak / max(np.abs(out).max(), 1e-9)
    ease = np.clip(t / max(ease_s, 1e-9), 0.0, 1.0)
    return out * (3 * ease ** 2 - 2 * ease ** 3)


def box_sequence(duration_s: float = 10.0, seed: int = 0, noise: bool = False,
                 peak_rate: float = 2.0, peak_speed: float = 1.0,
                 rows: int = 32, cols: int = 256, imu_rate: float = 200.0,
                 range_sigma: float = 0.02, still_s: float = 0.7,
                 half_extents=(5.0, 4.0, 2.0)):
    """Standard box-room fixture: stationary lead-in, then smooth wandering
    with bounded angular rate and speed (band-limited profiles, no jerk)."""
    rng = np.random.default_rng(seed + 1)
    world = BoxRoom(np.asarray(half_extents, dtype=float))
    knot_dt = 0.1
    horizon = duration_s + still_s + 3.0
    n_knots = int(horizon / knot_dt) + 8
    margin = world.half_extents - 1.2

    move = np.arange(n_knots) * knot_dt >= still_s
    n_mv = int(move.sum())
    yaw_rate = np.zeros(n_knots)
    yaw_rate[move] = _smooth_profile(rng, n_mv, knot_dt, peak_rate, ease_s=1.0)
    vx = np.zeros(n_knots)
    vy = np.zeros(n_knots)
    vz = np.zeros(n_knots)
    vx[move] = _smooth_profile(rng, n_mv, knot_dt, peak_speed, ease_s=1.0)
    vy[move] = _smooth_profile(rng, n_mv, knot_dt, peak_speed, ease_s=1.0)
    vz[move] = _smooth_profile(rng, n_mv, knot_dt, 0.2 * peak_speed, ease_s=1.0)

    times, rotvecs, positions = [], [], []
    yaw = 0.0
    pos = np.zeros(3)
    for k in range(n_knots):
        times.append(k * knot_dt)
        rotvecs.append(np.array([0.0, 0.0, yaw]))
        positions.append(pos.copy())
        yaw += yaw_rate[k] * knot_dt
        step = np.array([vx[k], vy[k], vz[k]]) * knot_dt
        nxt = pos + step
        # reflect velocity softly at the walls
        for a in range(3):
            if abs(nxt[a]) > margin[a]:
                vx_arr = (vx, vy, vz)[a]
                vx_arr[k:] *= -1.0
                nxt[a] = np.clip(nxt[a], -margin[a], margin[a])
        pos = nxt
    traj = waypoint_trajectory(times, rotvecs, positions, order=4)
    lidar = LidarModel(rows=rows, cols=cols,
                       range_sigma=(range_sigma if noise else 0.0))
    imu = ImuModel(rate_hz=imu_rate,
                   sigma_acc=(0.05 if noise else 0.0),
                   sigma_gyr=(0.005 if noise else 0.0))
    t_start = 3 * knot_dt + 0.05  # inside the spline domain
    scans, stream, truth = simulate(world, traj, lidar, imu, t_start,
                                    duration_s, seed=seed)
    return world, traj, scans, stream, truth


def spin_sequence(duration_s: float = 4.0, seed: int = 0, spin_rate: float = 2.0,
                  rows: int = 32, cols: int = 256, speed: float = 0.5):
    """Rotation-heavy fixture for the de-skewing evaluation."""
    world = BoxRoom(np.array([5.0, 4.0, 2.0]))
    n_knots = int((duration_s + 3.0) / 0.1) + 10
    times, rotvecs, positions = [], [], []
    yaw = 0.0
    for k in range(n_knots):
        t = k * 0.1
        times.append(t)
        rotvecs.append(np.array([0.0, 0.0, yaw]))
        positions.append(np.array([0.4 * np.cos(0.3 * t) - 0.4, 0.3 * np.sin(0.3 * t), 0.0]) * speed)
        yaw += spin_rate * 0.1
    traj = waypoint_trajectory(times, rotvecs, positions, order=4)
    lidar = LidarModel(rows=rows, cols=cols)
    imu = ImuModel(rate_hz=400.0)
    scans, stream, truth = simulate(world, traj, lidar, imu, 0.25, duration_s, seed=seed)
    return world, traj, scans, stream, truth

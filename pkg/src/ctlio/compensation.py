"""Motion compensation: point timing, exact pointwise de-skewing and the
surfelwise unscented-transform variant.

The pointwise path p_bar = T(t_ref)^-1 T(t(p)) p is exact but touches every
point, so it serves as keyframe undistortion and as the test oracle.  The
surfelwise path draws the symmetric sigma set of d*Sigma (mean excluded),
assigns each sigma point a time through the scan geometry, compensates the
set through the spline and refuses mean/covariance with 1/(2d) weights.
"""
from __future__ import annotations

import numpy as np

from .manifold import PoseSplit, slerp
from .spline import NS_PER_S, NonUniformSpline

TWO_PI = 2.0 * np.pi


def column_from_azimuth(points, width: int, sensor_offset: float = 0.0,
                        row_offsets=0.0):
    """Column index from the azimuthal angle in sensor coordinates."""
    points = np.asarray(points, dtype=float)
    if np.any(np.all(points[..., :2] == 0.0, axis=-1)):
        raise ValueError("azimuth undefined for points on the sensor z-axis")
    az = np.arctan2(points[..., 1], points[..., 0]) % TWO_PI
    u = width / TWO_PI * az + sensor_offset + row_offsets
    return u % width


def point_time_ns(column, width: int, t_end_ns: int, duration_ns: int):
    """Capture time from the column index: t_end - dt_e + dt_e/w * u."""
    u = np.asarray(column, dtype=float)
    dt = np.asarray(duration_ns, dtype=float)
    t = t_end_ns - dt + dt / width * u
    return np.round(t).astype(np.int64)


def compensate_points(points, point_times_ns, spline: NonUniformSpline,
                      t_ref_ns: int):
    """Exact pointwise de-skewing towards t_ref (the oracle path)."""
    points = np.asarray(points, dtype=float)
    ref = spline.evaluate_pose(int(t_ref_ns))
    Rs, ps = spline.evaluate_pose_many(np.asarray(point_times_ns, dtype=np.int64))
    world = np.einsum("nij,nj->ni", Rs, points) + ps
    return (world - ref.translation) @ ref.rotation


def sigma_points(mean, cov, jitter: float = 1e-9):
    """Symmetric 2d sigma set of d*Sigma around the mean, mean excluded.

    Rank-deficient covariances get one diagonal jitter retry; a second
    failure raises so callers can skip the surfel.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    d = len(mean)
    try:
        L = np.linalg.cholesky(d * cov)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(d * cov + jitter * np.eye(d))
    cols = L.T  # rows are the scaled columns L_i
    return np.concatenate([mean + cols, mean - cols], axis=0)


def ut_refuse(transformed):
    """Recombine transformed sigma points with equal 1/(2d) weights."""
    y = np.asarray(transformed, dtype=float)
    mu = y.mean(axis=0)
    dc = y - mu
    cov = dc.T @ dc / len(y)
    return mu, cov


def ut_compensate_surfel(mean, cov, col_offset, spline: NonUniformSpline,
                         t_seg_ns: int, scan_t_end_ns: int, scan_duration_ns: int,
                         scan_width: int, imu_rot_times_ns=None, imu_rots=None,
                         lidar_from_ref: PoseSplit | None = None,
                         jitter: float = 1e-9):
    """Unscented-transform compensation of one surfel towards its segment time.

    Sigma points are projected into the LiDAR frame (via `lidar_from_ref`
    when the embedding frame differs) to obtain their capture times with the
    surfel's mean directional offset; an optional rotation table counteracts
    the scan pre-orientation before the spline moves each point to t_seg.
    """
    Y = sigma_points(mean, cov, jitter=jitter)
    if lidar_from_ref is not None:
        Y_lidar = lidar_from_ref.apply(Y)
    else:
        Y_lidar = Y
    u = column_from_azimuth(Y_lidar, scan_width, row_offsets=col_offset)
    t_y = point_time_ns(u, scan_width, scan_t_end_ns, scan_duration_ns)

    if imu_rot_times_ns is not None and len(imu_rot_times_ns):
        R_seg = slerp(imu_rot_times_ns, imu_rots, int(t_seg_ns))
        Yc = np.empty_like(Y)
        for i in range(len(Y)):
            R_y = slerp(imu_rot_times_ns, imu_rots, int(t_y[i]))
            Yc[i] = (R_y.T @ R_seg) @ Y[i]
    else:
        Yc = Y

    ref = spline.evaluate_pose(int(t_seg_ns))
    Rs, ps = spline.evaluate_pose_many(t_y)
    world = np.einsum("nij,nj->ni", Rs, Yc) + ps
    moved = (world - ref.translation) @ ref.rotation
    return ut_refuse(moved)


def slerp_many(times_ns, rotations, query_ns):
    """Vectorized geodesic interpolation over many query times."""
    from .manifold import so3_exp, so3_log
    times_ns = np.asarray(times_ns)
    rotations = np.asarray(rotations, dtype=float)
    q = np.asarray(query_ns, dtype=np.int64)
    if len(times_ns) == 1:
        return np.broadcast_to(rotations[0], (len(q), 3, 3)).copy()
    i = np.clip(np.searchsorted(times_ns, q, side="right") - 1, 0, len(times_ns) - 2)
    span = (times_ns[i + 1] - times_ns[i]).astype(float)
    alpha = np.clip((q - times_ns[i]).astype(float) / span, 0.0, 1.0)
    deltas = np.stack([so3_log(rotations[k].T @ rotations[k + 1])
                       for k in range(len(times_ns) - 1)])
    return rotations[i] @ so3_exp(alpha[:, None] * deltas[i])


def ut_compensate_table(table, t_seg_ns: int, spline: NonUniformSpline,
                        scan_t_end_ns: int, scan_duration_ns: int,
                        scan_width: int, imu_rot_times_ns=None, imu_rots=None,
                        lidar_from_ref: PoseSplit | None = None,
                        jitter: float = 1e-9):
    """Batched unscented-transform compensation of a whole surfel table.

    Returns a new table with compensated means/covariances; surfels whose
    covariance resists the jittered Cholesky are passed through unchanged and
    counted in the second return value.
    """
    m = len(table)
    if m == 0:
        return table, 0
    from .kernels import sym_l
    covs = sym_l(table.cov8)
    d = 3
    scaled = d * covs
    try:
        L = np.linalg.cholesky(scaled)
        failed = np.zeros(m, dtype=bool)
    except np.linalg.LinAlgError:
        L = np.empty((m, 3, 3))
        failed = np.zeros(m, dtype=bool)
        for i in range(m):
            try:
                L[i] = np.linalg.cholesky(scaled[i])
            except np.linalg.LinAlgError:
                try:
                    L[i] = np.linalg.cholesky(scaled[i] + d * jitter * np.eye(3))
                except np.linalg.LinAlgError:
                    L[i] = np.eye(3)
                    failed[i] = True

    cols = np.swapaxes(L, 1, 2)                      # (m,3,3): rows are L_i
    Y = np.concatenate([table.mean[:, None, :] + cols,
                        table.mean[:, None, :] - cols], axis=1)  # (m,6,3)
    flat = Y.reshape(-1, 3)
    if lidar_from_ref is not None:
        flat_lidar = lidar_from_ref.apply(flat)
    else:
        flat_lidar = flat
    off = np.repeat(table.col_offset, 2 * d)
    u = column_from_azimuth(flat_lidar, scan_width, row_offsets=off)
    t_y = point_time_ns(u, scan_width, scan_t_end_ns, scan_duration_ns)

    if imu_rot_times_ns is not None and len(imu_rot_times_ns) > 1:
        R_seg = slerp(imu_rot_times_ns, imu_rots, int(t_seg_ns))
        R_y = slerp_many(imu_rot_times_ns, imu_rots, t_y)
        undo = np.swapaxes(R_y, 1, 2) @ R_seg
        flat = np.einsum("nij,nj->ni", undo, flat)

    ref = spline.evaluate_pose(int(t_seg_ns))
    Rs, ps = spline.evaluate_pose_many(t_y)
    world = np.einsum("nij,nj->ni", Rs, flat) + ps
    moved = (world - ref.translation) @ ref.rotation

    Ym = moved.reshape(m, 2 * d, 3)
    mu = Ym.mean(axis=1)
    dc = Ym - mu[:, None, :]
    cov_new = np.einsum("mki,mkj->mij", dc, dc) / (2 * d)

    from .lattice import SurfelTable
    from .kernels import vec_l
    mean_out = np.where(failed[:, None], table.mean, mu)
    cov_out = np.where(failed[:, None], table.cov8, vec_l(cov_new))
    return SurfelTable(table.cell_size, table.segment, table.packed,
                       table.count, mean_out, cov_out, table.mean_time_ns,
                       table.view_dir, table.col_offset), int(failed.sum())


def kld_gaussian(mu_q, cov_q, mu_r, cov_r):
    """D_KL(N_q || N_r) for 3-dimensional Gaussians."""
    mu_q = np.asarray(mu_q, dtype=float)
    mu_r = np.asarray(mu_r, dtype=float)
    cov_q = np.asarray(cov_q, dtype=float)
    cov_r = np.asarray(cov_r, dtype=float)
    k = len(mu_q)
    sign_r, logdet_r = np.linalg.slogdet(cov_r)
    sign_q, logdet_q = np.linalg.slogdet(cov_q)
    if sign_r <= 0 or sign_q <= 0:
        raise np.linalg.LinAlgError("KLD needs positive definite covariances")
    inv_r = np.linalg.inv(cov_r)
    dmu = mu_r - mu_q
    return 0.5 * (np.trace(inv_r @ cov_q) + dmu @ inv_r @ dmu - k
                  + logdet_r - logdet_q)

"""Trajectory evaluation: timestamp association, rigid alignment, RMS-ATE
and the divergence rule (length ratio above 1.25 or mean error above 50 m).
"""
from __future__ import annotations

import numpy as np

ASSOC_TOL_NS = 10_000_000  # 10 ms


def associate_timestamps(est_t_ns, ref_t_ns, tol_ns: int = ASSOC_TOL_NS):
    """Nearest-timestamp pairs within tolerance; returns index arrays."""
    est_t = np.asarray(est_t_ns, dtype=np.int64)
    ref_t = np.asarray(ref_t_ns, dtype=np.int64)
    pos = np.searchsorted(ref_t, est_t)
    pos = np.clip(pos, 1, len(ref_t) - 1)
    left = ref_t[pos - 1]
    right = ref_t[pos]
    use_left = (est_t - left) <= (right - est_t)
    ref_idx = np.where(use_left, pos - 1, pos)
    dt = np.abs(ref_t[ref_idx] - est_t)
    ok = dt <= tol_ns
    return np.nonzero(ok)[0], ref_idx[ok]


def umeyama_alignment(source, target):
    """Rigid (no scale) least-squares alignment: R, t with R s + t ~ target."""
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d) / len(src)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1.0
    R = Vt.T @ S @ U.T
    t = mu_d - R @ mu_s
    return R, t


def rms_ate(est_t_ns, est_pos, ref_t_ns, ref_pos, tol_ns: int = ASSOC_TOL_NS):
    """RMS absolute trajectory error after SE(3) alignment.

    Returns (ate, per-pose errors, aligned estimate positions).
    """
    ei, ri = associate_timestamps(est_t_ns, ref_t_ns, tol_ns)
    if len(ei) < 3:
        raise ValueError("fewer than three associated poses")
    E = np.asarray(est_pos, dtype=float)[ei]
    G = np.asarray(ref_pos, dtype=float)[ri]
    R, t = umeyama_alignment(E, G)
    aligned = E @ R.T + t
    err = np.linalg.norm(aligned - G, axis=1)
    return float(np.sqrt(np.mean(err ** 2))), err, aligned


def trajectory_length(positions):
    p = np.asarray(positions, dtype=float)
    if len(p) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def divergence_flag(est_t_ns, est_pos, ref_t_ns, ref_pos,
                    length_ratio: float = 1.25, mean_error: float = 50.0):
    """True when the estimate's length exceeds the reference length by the
    ratio threshold or the mean aligned error exceeds the error threshold."""
    ei, ri = associate_timestamps(est_t_ns, ref_t_ns)
    if len(ei) < 3:
        return True
    est_len = trajectory_length(np.asarray(est_pos)[ei])
    ref_len = trajectory_length(np.asarray(ref_pos)[ri])
    if ref_len > 1e-6 and est_len > length_ratio * ref_len:
        return True
    _, err, _ = rms_ate(est_t_ns, est_pos, ref_t_ns, ref_pos)
    return bool(err.mean() > mean_error)

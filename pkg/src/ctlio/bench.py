"""Desk-scale benchmarks and evaluations behind the CLI subcommands:
kernel and splatting throughput, the conditioning sweep, and the
unscented-transform de-skew quality study against the pointwise oracle.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import kernels as K
from . import lattice as LA
from .compensation import (compensate_points, kld_gaussian, ut_compensate_table)
from .manifold import so3_exp
from .registration import segment_times_ns
from .simulate import spin_sequence
from .spline import NonUniformSpline


def _timeit(fn, reps=3):
    best = np.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def random_spd_lanes(n, rng, lam_lo=0.05, lam_hi=5.0):
    """Unit-scale SPD covariances in the sigma-inflated operating regime."""
    lam = np.exp(rng.uniform(np.log(lam_lo), np.log(lam_hi), size=(n, 3)))
    Q, _ = np.linalg.qr(rng.normal(size=(n, 3, 3)))
    covs = np.einsum("nij,nj,nkj->nik", Q, lam, Q)
    return covs, K.vec_l(covs)


def bench_kernels(n: int = 100_000, seed: int = 0, reps: int = 3):
    """Optimized-vs-naive timing and differential error per kernel.

    Returns rows of (kernel, batch, ns_per_op_opt, ns_per_op_naive, speedup,
    max_abs_err).
    """
    rng = np.random.default_rng(seed)
    covs, c8 = random_spd_lanes(n, rng)
    adds, a8 = random_spd_lanes(n, rng)
    d = rng.normal(size=(n, 3))
    R = so3_exp(rng.normal(size=3))
    Z = K.rot_kron_z(R)
    rows = []

    t_o = _timeit(lambda: K.rescale_planar(c8, 0.5), reps)
    t_n = _timeit(lambda: K.rescale_planar_naive(covs, 0.5), reps)
    err = np.abs(K.sym_l(K.rescale_planar(c8, 0.5)) - K.rescale_planar_naive(covs, 0.5)).max()
    rows.append(("rescale_planar", n, t_o / n * 1e9, t_n / n * 1e9, t_n / t_o, err))

    t_o = _timeit(lambda: K.rotate_cov(Z, c8, a8), reps)
    t_n = _timeit(lambda: K.rotate_cov_naive(R, covs, adds), reps)
    err = np.abs(K.sym_l(K.rotate_cov(Z, c8, a8)) - K.rotate_cov_naive(R, covs, adds)).max()
    rows.append(("rotate_cov", n, t_o / n * 1e9, t_n / n * 1e9, t_n / t_o, err))

    t_o = _timeit(lambda: K.sym_inverse(c8), reps)
    t_n = _timeit(lambda: K.sym_inverse_naive(covs), reps)
    err = np.abs(K.sym_l(K.sym_inverse(c8)) - K.sym_inverse_naive(covs)).max()
    rows.append(("sym_inverse", n, t_o / n * 1e9, t_n / n * 1e9, t_n / t_o, err))

    t_o = _timeit(lambda: K.mahalanobis_batch(d, c8), reps)
    t_n = _timeit(lambda: K.mahalanobis_naive(d, covs), reps)
    err = np.abs(K.mahalanobis_batch(d, c8) - K.mahalanobis_naive(d, covs)).max()
    rows.append(("mahalanobis", n, t_o / n * 1e9, t_n / n * 1e9, t_n / t_o, err))
    return rows


def surface_cloud(n, rng, half=10.0):
    """Scan-like cloud on the walls of a box (realistic surfel density)."""
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-half, half, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        sel = axis == a
        others = [i for i in range(3) if i != a]
        pts[sel, a] = sign[sel] * half
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return pts


def bench_splat(n_points: int = 1_000_000, seed: int = 0, reps: int = 3,
                threads=(1, 4), orders=("LP", "PL")):
    """Splatting throughput rows: (variant, order, threads, ns_per_point,
    speedup_vs_naive)."""
    rng = np.random.default_rng(seed)
    pts = surface_cloud(n_points, rng)
    tns = (rng.uniform(0, 0.1, size=n_points) * 1e9).astype(np.int64)
    cols = rng.integers(0, 1024, size=n_points)
    sizes = [4.0, 2.0, 1.0, 0.5]

    def run_opt(level_to_point=True, workers=1):
        if workers <= 1:
            return LA.splat_scan(pts, tns, cols, sizes,
                                 level_to_point=level_to_point)
        with ThreadPoolExecutor(max_workers=workers) as ex:
            futs = {c: ex.submit(LA.splat_scan, pts, tns, cols, [c])
                    for c in sizes}
            out = {}
            for c, f in futs.items():
                out.update(f.result())
            return out

    t_naive = _timeit(lambda: LA.splat_scan_naive(pts, tns, cols, sizes), reps)
    rows = [("naive", "LP", 1, t_naive / n_points * 1e9, 1.0)]
    for order in orders:
        ltp = order == "LP"
        for w in threads:
            t = _timeit(lambda: run_opt(ltp, w), reps)
            rows.append(("optimized", order, w, t / n_points * 1e9, t_naive / t))
    return rows


def conditioning_rows(order=3, window_scans=3, n_sweep=100):
    from .spline import condition_analysis
    out = []
    for mode in ("uniform", "nonuniform"):
        fr, ka, kr = condition_analysis(mode, order=order,
                                        window_scans=window_scans,
                                        n_sweep=n_sweep)
        for f, k in zip(fr, ka):
            out.append((mode, float(f), float(k), float(k / kr)))
    return out


def deskew_eval(duration_s: float = 3.0, seed: int = 0, spin_rate: float = 2.0,
                segments: int = 4, cell_sizes=(1.0, 0.5), min_count: int = 5,
                inflation: float = 2e-3, skip_scans: int = 1):
    """Per-surfel KLD triples (raw, pre-oriented, unscented) vs the pointwise
    oracle on a synthetic spin sequence compensated with the true trajectory.

    Returns (rows, summary): rows of (scan, cell, count, kld_raw, kld_pre,
    kld_ut); summary holds the surfel-level win fraction and the per-scan
    median-improvement fraction of the UT against the raw surfels.
    """
    from .inertial import integrate_rotations, preorient_points

    world, traj, scans, stream, truth = spin_sequence(duration_s=duration_s,
                                                      seed=seed,
                                                      spin_rate=spin_rate)
    spline = traj.spline
    inflate = (inflation ** 2) * np.eye(3)
    rows = []
    
    per_scan_improve = []
    for si, scan in enumerate(scans):
        if si < skip_scans:
            continue
        t_prev = scan.t_end_ns - scan.duration_ns
        seg_times = segment_times_ns(t_prev, scan.t_end_ns, segments)
        rot_times, rots = integrate_rotations(stream, t_prev, scan.t_end_ns)
        pts_pre = preorient_points(scan.points, scan.times_ns, rot_times, rots,
                                   scan.t_end_ns)
        offsets = np.zeros(len(scan.points))
        seg_idx = np.argmin(np.abs(scan.times_ns[:, None]
                                   - seg_times[None, :]), axis=1)
        klds_scan = []
        for c in cell_sizes:
            packed, _ = LA.embed_optimized_packed(scan.points, 1.0 / c)
            raw_tabs = LA.splat_scan(scan.points, scan.times_ns, offsets, [c],
                                     segment_times_ns=seg_times)
            pre_tabs = LA.splat_scan(pts_pre, scan.times_ns, offsets, [c],
                                     segment_times_ns=seg_times)
            for s in range(segments):
                tab = raw_tabs.get((c, s))
                if tab is None:
                    continue
                t_seg = int(seg_times[s])
                ut_tab, _ = ut_compensate_table(tab, t_seg, spline,
                                                scan.t_end_ns, scan.duration_ns,
                                                scan.cols)
                pre_tab = pre_tabs.get((c, s))
                pre_lookup = (pre_tab.lookup(tab.packed)
                              if pre_tab is not None else None)
                sel_pts = seg_idx == s
                pk_seg = packed[sel_pts]
                pts_seg = scan.points[sel_pts]
                t_pts = scan.times_ns[sel_pts]
                comp = compensate_points(pts_seg, t_pts, spline, t_seg)
                order_idx = np.argsort(pk_seg)
                sp = pk_seg[order_idx]
                starts = np.flatnonzero(np.concatenate([[True], sp[1:] != sp[:-1]]))
                ends = np.append(starts[1:], len(sp))
                cell_of = {int(sp[a]): (a, b) for a, b in zip(starts, ends)}
                covs_raw = K.sym_l(tab.cov8)
                covs_ut = K.sym_l(ut_tab.cov8)
                for r in range(len(tab)):
                    if tab.count[r] < min_count:
                        continue
                    span = cell_of.get(int(tab.packed[r]))
                    if span is None:
                        continue
                    member = comp[order_idx[span[0]:span[1]]]
                    if len(member) < min_count:
                        continue
                    mu_r = member.mean(axis=0)
                    dc = member - mu_r
                    cov_r = dc.T @ dc / len(member) + inflate
                    try:
                        k_raw = kld_gaussian(tab.mean[r], covs_raw[r] + inflate,
                                             mu_r, cov_r)
                        k_ut = kld_gaussian(ut_tab.mean[r], covs_ut[r] + inflate,
                                            mu_r, cov_r)
                        if pre_lookup is not None and pre_lookup[r] >= 0:
                            pr = pre_lookup[r]
                            k_pre = kld_gaussian(pre_tab.mean[pr],
                                                 K.sym_l(pre_tab.cov8[pr]) + inflate,
                                                 mu_r, cov_r)
                        else:
                            k_pre = np.nan
                    except np.linalg.LinAlgError:
                        continue
                    rows.append((si, c, int(tab.count[r]), k_raw, k_pre, k_ut))
                    klds_scan.append((k_raw, k_ut))
        if klds_scan:
            arr = np.asarray(klds_scan)
            per_scan_improve.append(np.median(arr[:, 1]) < np.median(arr[:, 0]))
    arr = np.asarray([(r[3], r[5]) for r in rows])
    summary = {
        "n_surfels": len(rows),
        "ut_beats_raw": float(np.mean(arr[:, 1] < arr[:, 0])),
        "scan_median_improves": float(np.mean(per_scan_improve)),
    }
    return rows, summary

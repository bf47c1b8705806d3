"""Per-scan odometry driver: pre-orient, embed, advance the window,
initialize, compensate, register, keyframe, update the local map.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import inertial as IN
from . import lattice as LA
from . import registration as REG
from .compensation import ut_compensate_table
from .inertial import GravityState, ImuStream, RelPoseMeasurement
from .lattice import MapConfig, MultiResMap
from .manifold import PoseSplit, ominus, so3_log
from .spline import NS_PER_S, SplineWindow
from .simulate import ScanData


@dataclass
class OdometryConfig:
    spline_order: int = 3
    window_scans: int = 3
    max_active_knots: int = 6
    bias_order: int = 1
    segments: int = 4
    levels: int = 4
    coarse_init: float = 4.0
    coarse_fine: float = 2.0
    coarse_switch: float = 3.0
    ewma_gamma: float = 0.1
    sigma_scale: float = 1.0
    reg_sigma_scale: float = 0.01
    planarity_ratio: float = 0.1
    min_surfel_points: int = 10
    keyframe_threshold: float = 0.8
    max_keyframes: int = 10
    lm_lambda0: float = 1e-4
    lm_iters: int = 5
    imu_weight: float = 1.0
    imu_init_boost: float = 10.0
    zero_acc_weight: float = 1.0
    zero_acc_always: bool = False
    zero_acc_sigma_lin: float = 0.5
    zero_acc_sigma_ang: float = 0.5
    assoc_maha_gate: float = 25.0
    relpose_weight: float = 1.0
    relpose_mode: str = "full"   # full | position | orientation
    kappa_gate: float = 10.0
    raw_switch_deg: float = 120.0
    sigma_acc: float = 0.2       # residual sigma for accel terms, m/s^2 (covers model error)
    sigma_gyr: float = 0.02      # residual sigma for gyro terms, rad/s (covers model error)
    sigma_ba_walk: float = 0.005  # accel-bias random walk per scan, m/s^2
    sigma_bg_walk: float = 0.0005  # gyro-bias random walk per scan, rad/s
    sigma_ba_abs: float = 0.05   # weak absolute bias anchor
    sigma_bg_abs: float = 0.01
    sigma_grav_abs: float = 0.01  # gravity-direction anchor, rad (0 disables)
    use_imu: bool = True
    static_init_s: float = 0.5
    compensate_all: bool = False      # compensate every window scan, not only the new one
    ut_per_iteration: bool = False    # re-run the UT after each outer iteration

    @staticmethod
    def from_dict(d: dict) -> "OdometryConfig":
        cfg = OdometryConfig()
        for k, v in d.items():
            if hasattr(cfg, k):
                setattr(cfg, k, type(getattr(cfg, k))(v) if not isinstance(v, bool) else v)
        return cfg

    def to_dict(self):
        return asdict(self)


@dataclass
class ScanRecord:
    t_end_ns: int
    t_prev_ns: int
    seg_times_ns: np.ndarray
    tables: dict
    rot_times_ns: np.ndarray
    rots: np.ndarray
    raw: ScanData
    tables_raw: dict | None = None   # pre-compensation tables (UT input)
    pre: object = None
    assoc_fraction: float = 1.0
    raw_mode: bool = False


class OdometryPipeline:
    """Stateful per-scan odometry; feed scans in time order."""

    def __init__(self, config: OdometryConfig, imu: ImuStream | None,
                 odom_prior=None):
        self.cfg = config
        self.imu = imu if config.use_imu else None
        self.odom_prior = odom_prior  # (times_ns, poses) in the odometry frame
        self.window: SplineWindow | None = None
        self.map = MultiResMap(MapConfig(levels=config.levels,
                                         coarse_choices=(config.coarse_fine,
                                                         config.coarse_init),
                                         coarse_switch_dist=config.coarse_switch,
                                         ewma_gamma=config.ewma_gamma,
                                         sigma_scale=config.sigma_scale,
                                         max_local_keyframes=config.max_keyframes),
                               coarse0=config.coarse_init)
        self.gravity = GravityState()
        self._grav_ref = None
        self.records: list[ScanRecord] = []
        self.local_map = {}
        self.marg_prior: REG.MargPrior | None = None
        self.diagnostics = []
        self.poses_out = []
        self.times_out = []

    # -- helpers --------------------------------------------------------------
    def _state(self) -> REG.WindowState:
        return REG.WindowState(self.window.spline, self.window.bias, self.gravity)

    def _static_init(self, t_end_ns: int):
        """Gravity/attitude/gyro-bias from averaged samples of the initial
        stationary stretch; motion onset truncates the averaging window."""
        if self.imu is None:
            return GravityState(), np.eye(3), np.zeros(3)
        t0 = int(self.imu.t_ns[0])
        t_cap = t0 + int(self.cfg.static_init_s * NS_PER_S)
        sel = self.imu.t_ns <= t_cap
        nb = max(min(5, sel.sum()), 1)
        base_g = self.imu.gyr[:nb].mean(axis=0)
        base_a = self.imu.acc[:nb].mean(axis=0)
        moving = (np.linalg.norm(self.imu.gyr - base_g, axis=1) > 0.01) \
            | (np.linalg.norm(self.imu.acc - base_a, axis=1) > 0.05)
        idx = np.nonzero(moving)[0]
        if len(idx):
            sel &= self.imu.t_ns < self.imu.t_ns[idx[0]]
        if sel.sum() < 3:
            sel = np.arange(len(self.imu.t_ns)) < 3
        acc = self.imu.acc[sel]
        gyr = self.imu.gyr[sel]
        grav, R0 = IN.gravity_from_static(acc)
        return grav, R0, gyr.mean(axis=0)

    def _preorient(self, scan: ScanData, seg_times):
        """Per-segment pre-orientation; each point rotates to its segment's
        reference time so segment-time registration poses stay consistent."""
        t0 = scan.t_end_ns - scan.duration_ns
        seg_idx = np.argmin(np.abs(scan.times_ns[:, None]
                                   - np.asarray(seg_times)[None, :]), axis=1)
        if self.imu is None:
            times = np.array([t0, scan.t_end_ns], dtype=np.int64)
            return times, np.stack([np.eye(3), np.eye(3)]), scan.points
        times, rots = IN.integrate_rotations(self.imu, t0, scan.t_end_ns)
        if len(times) < 2:
            times = np.array([t0, scan.t_end_ns], dtype=np.int64)
            rots = np.stack([np.eye(3), np.eye(3)])
        pts = IN.preorient_points_segmented(scan.points, scan.times_ns, times,
                                            rots, seg_times, seg_idx)
        return times, rots, pts

    def _embed_scan(self, scan: ScanData, points, seg_times):
        # per-point directional offset: true column minus the azimuth-derived
        # column of the embedded (pre-oriented) point; its per-cell mean
        # corrects the sigma-point time projection for the pre-orientation
        from .compensation import column_from_azimuth
        u_az = column_from_azimuth(points, scan.cols)
        off = (scan.column.astype(float) - u_az + scan.cols / 2) % scan.cols \
            - scan.cols / 2
        return LA.splat_scan(points, scan.times_ns, off,
                             self.map.cell_sizes(), view_origin=np.zeros(3),
                             segment_times_ns=seg_times,
                             sigma_scale=self.cfg.sigma_scale)

    def _ut_compensate(self, record: ScanRecord):
        """Surfelwise compensation, always from the uncompensated tables."""
        spline = self.window.spline
        if record.tables_raw is None:
            record.tables_raw = dict(record.tables)
        out = {}
        for (c, s), tab in record.tables_raw.items():
            t_seg = int(record.seg_times_ns[s])
            new_tab, _ = ut_compensate_table(
                tab, t_seg, spline, record.t_end_ns, record.raw.duration_ns,
                record.raw.cols, record.rot_times_ns, record.rots)
            out[(c, s)] = new_tab
        record.tables = out

    def _imu_terms(self, record: ScanRecord, boost: float = 1.0):
        if self.imu is None:
            return []
        cfg = self.cfg
        terms = []
        t0, t1 = record.t_prev_ns, record.t_end_ns
        record.raw_mode = IN.raw_mode(self.imu, t0, t1,
                                      np.deg2rad(cfg.raw_switch_deg))
        w = cfg.imu_weight * boost
        raw_w = np.diag([1.0 / cfg.sigma_gyr ** 2] * 3 + [1.0 / cfg.sigma_acc ** 2] * 3)
        sub = self.imu.slice(t0, t1)
        if len(sub) == 0:
            return []
        if record.raw_mode:
            for i in range(len(sub)):
                t = int(sub.t_ns[i])
                gm, am = sub.gyr[i], sub.acc[i]
                terms.append(REG.ResidualTerm(
                    lambda st, t=t, gm=gm, am=am: _raw_rb(st, t, gm, am, raw_w), w))
            return terms
        t_last = int(sub.t_ns[-1])
        if record.pre is None and t_last > t0 + 1:
            ba, bg = self.window.bias.evaluate(t0)
            record.pre = IN.preintegrate(self.imu, t0, t_last - 1, ba, bg,
                                         cfg.sigma_acc, cfg.sigma_gyr)
        if record.pre is not None:
            terms.append(REG.ResidualTerm(
                lambda st, pre=record.pre: IN.preint_residual(pre, st.spline, st.bias, st.gravity), w))
        gm, am = sub.gyr[-1], sub.acc[-1]
        terms.append(REG.ResidualTerm(
            lambda st, t=t_last, gm=gm, am=am: _raw_rb(st, t, gm, am, raw_w), w))
        return terms

    def _bias_terms(self):
        """Random-walk coupling between consecutive bias knots plus a weak
        absolute anchor; keeps the weakly observable biases bounded."""
        if self.imu is None:
            return []
        cfg = self.cfg
        idx = self.window.active_bias_knots()
        W_walk = np.diag([1.0 / cfg.sigma_ba_walk ** 2] * 3
                         + [1.0 / cfg.sigma_bg_walk ** 2] * 3)
        W_abs = np.diag([1.0 / cfg.sigma_ba_abs ** 2] * 3
                        + [1.0 / cfg.sigma_bg_abs ** 2] * 3)
        terms = []

        def walk_rb(state, i, j):
            r = np.concatenate([state.bias.acc[j] - state.bias.acc[i],
                                state.bias.gyr[j] - state.bias.gyr[i]])
            rb = IN.ResidualBlocks(r, {}, W_walk)
            rb.add(("bias", j), np.eye(6))
            rb.add(("bias", i), -np.eye(6))
            return rb

        def abs_rb(state, i):
            r = np.concatenate([state.bias.acc[i], state.bias.gyr[i]])
            rb = IN.ResidualBlocks(r, {}, W_abs)
            rb.add(("bias", i), np.eye(6))
            return rb

        for a, b in zip(idx[:-1], idx[1:]):
            terms.append(REG.ResidualTerm(lambda st, a=a, b=b: walk_rb(st, a, b)))
        for i in idx:
            terms.append(REG.ResidualTerm(lambda st, i=i: abs_rb(st, i)))
        if cfg.sigma_grav_abs > 0 and self._grav_ref is not None:
            W_g = np.eye(2) / cfg.sigma_grav_abs ** 2
            g_ref = self._grav_ref

            def grav_rb(state, g_ref=g_ref):
                basis = state.gravity.basis()
                r = basis.T @ (state.gravity.direction - g_ref)
                rb = IN.ResidualBlocks(r, {}, W_g)
                rb.add(("grav",), basis.T @ basis)
                return rb

            terms.append(REG.ResidualTerm(grav_rb))
        return terms

    def _zero_acc_terms(self, records):
        """Zero-acceleration soft constraint; active without an IMU (its
        stated role) or when forced by `zero_acc_always`."""
        cfg = self.cfg
        if self.imu is not None and not cfg.zero_acc_always:
            return []
        if cfg.zero_acc_weight <= 0 or cfg.spline_order < 3:
            return []
        Wz = np.diag([1.0 / cfg.zero_acc_sigma_lin ** 2] * 3
                     + [1.0 / cfg.zero_acc_sigma_ang ** 2] * 3)
        terms = []
        for rec in records:
            for t in rec.seg_times_ns:
                terms.append(REG.ResidualTerm(
                    lambda st, t=int(t): _zero_rb(st, t, Wz), cfg.zero_acc_weight))
        return terms

    def _relpose_terms(self, records):
        if self.odom_prior is None:
            return []
        cfg = self.cfg
        times_ns, poses = self.odom_prior
        meas = []
        for rec in records:
            i0 = int(np.argmin(np.abs(times_ns - rec.t_prev_ns)))
            i1 = int(np.argmin(np.abs(times_ns - rec.t_end_ns)))
            if i0 == i1:
                continue
            Ti, Tj = poses[i0], poses[i1]
            dR = Tj.rotation.T @ Ti.rotation
            dp = Ti.rotation.T @ (Tj.translation - Ti.translation)
            W = self._relpose_weight(rec)
            if W is None:
                continue
            meas.append(RelPoseMeasurement(rec.t_prev_ns, rec.t_end_ns, dR.T, dp, W))
        meas = IN.filter_vertical_spikes(meas)
        return [REG.ResidualTerm(
            lambda st, m=m: IN.relpose_residual(m, st.spline), cfg.relpose_weight)
            for m in meas]

    def _relpose_weight(self, rec: ScanRecord):
        cfg = self.cfg
        means, normals = [], []
        for (c, s), tab in rec.tables.items():
            ok = tab.count >= cfg.min_surfel_points
            if np.any(ok):
                means.append(tab.mean[ok])
                normals.append(tab.normals()[ok])
        if not means:
            return None
        mu = np.concatenate(means)
        nr = np.concatenate(normals)
        if len(mu) < 6:
            return None
        info = IN.constraint_weight(mu, nr, kappa_gate=cfg.kappa_gate)
        if self.odom_prior is not None and not self.imu:
            pass  # prior is the only constraint source; keep it active
        elif not info["active"]:
            return None
        if cfg.relpose_mode == "position":
            W = np.zeros((6, 6))
            W[:3, :3] = info["position"]
            return W
        if cfg.relpose_mode == "orientation":
            W = np.zeros((6, 6))
            W[3:, 3:] = info["orientation"]
            return W
        return info["full"]

    def _associate_all(self, records):
        """Frozen associations for every (scan, segment, level) with
        finest-first resolution selection; returns (DataTerms, per-scan
        association fractions)."""
        cfg = self.cfg
        reg_sigma = {c: cfg.reg_sigma_scale * c for c in self.map.cell_sizes()}
        terms = []
        fractions = []
        spline = self.window.spline
        sizes = sorted(self.local_map.keys())  # ascending: finest first
        for rec in records:
            n_sel = 0
            n_assoc = 0
            for s_idx, t_seg in enumerate(rec.seg_times_ns):
                pose_seg = spline.evaluate_pose(int(t_seg))
                covered_parents = {}
                for c in sizes:
                    tab = rec.tables.get((c, s_idx))
                    mtab = self.local_map.get(c)
                    if tab is None or mtab is None or len(mtab) == 0:
                        continue
                    covered = covered_parents.get(c)
                    assoc, usable, associated = REG.associate(
                        tab, mtab, pose_seg, cfg.sigma_scale, reg_sigma[c],
                        cfg.planarity_ratio, cfg.min_surfel_points,
                        covered=covered, t_seg_ns=int(t_seg),
                        maha_gate=cfg.assoc_maha_gate)
                    n_sel += int(usable.sum())
                    n_assoc += int(associated.sum())
                    if assoc is not None and len(assoc):
                        terms.append(REG.DataTerm(assoc, int(t_seg), reg_sigma[c]))
                        # mark parents of associated surfels at coarser levels
                        hit_means = tab.mean[associated]
                        if len(hit_means):
                            for c2 in sizes:
                                if c2 <= c:
                                    continue
                                pk, _ = LA.embed_optimized_packed(
                                    hit_means, 1.0 / (cfg.sigma_scale * c2))
                                tab2 = rec.tables.get((c2, s_idx))
                                if tab2 is None:
                                    continue
                                mask = covered_parents.get(c2)
                                if mask is None:
                                    mask = np.zeros(len(tab2), dtype=bool)
                                hit = tab2.lookup(np.unique(pk))
                                mask[hit[hit >= 0]] = True
                                covered_parents[c2] = mask
            fractions.append(n_assoc / n_sel if n_sel else 0.0)
        return terms, fractions

    # -- main entry -------------------------------------------------------------
    def process(self, scan: ScanData):
        t_start = time.perf_counter()
        cfg = self.cfg
        diag = {"t_end_ns": int(scan.t_end_ns)}

        if self.window is None:
            self._bootstrap(scan)
            diag.update(first=True, assoc_fraction=0.0, keyframe=True,
                        coarse=self.map.coarse, cost_trace=[],
                        raw_mode=False, kappa_max=0.0)
            self._finish(scan, diag, t_start)
            return diag

        t_prev = self.window.scan_ends_ns[-1]
        seg_times = REG.segment_times_ns(t_prev, scan.t_end_ns, cfg.segments)
        rot_times, rots, pts = self._preorient(scan, seg_times)
        departing = (self.records[0]
                     if len(self.records) >= cfg.window_scans else None)
        left_knots, left_bias = self.window.advance(scan.t_end_ns)
        self._marginalize_departure(departing, left_knots, left_bias)
        record = ScanRecord(int(scan.t_end_ns), int(t_prev), seg_times, {},
                            rot_times, rots, scan)
        self._initialize_scan(record)

        record.tables = self._embed_scan(scan, pts, seg_times)
        self._ut_compensate(record)
        self.records.append(record)
        self.records = self.records[-cfg.window_scans:]

        cost_trace = self._register(diag)

        oldest = self.records[0]
        make_kf = MultiResMap.keyframe_decision(oldest.assoc_fraction) \
            if self.local_map else True
        if make_kf:
            self._create_keyframe(oldest)
        dists = [np.linalg.norm(t.mean, axis=1).mean()
                 for t in record.tables.values() if len(t)]
        if dists:
            self.map.adapt_coarse_size(float(np.mean(dists)))
        self._refresh_local_map(record)

        diag.update(first=False, assoc_fraction=oldest.assoc_fraction,
                    keyframe=bool(make_kf), coarse=self.map.coarse,
                    cost_trace=cost_trace, raw_mode=record.raw_mode,
                    n_keyframes=len(self.map.keyframes))
        self._finish(scan, diag, t_start)
        return diag

    def _finish(self, scan, diag, t_start):
        pose = self.window.spline.evaluate_pose(int(scan.t_end_ns))
        self.poses_out.append(pose)
        self.times_out.append(int(scan.t_end_ns))
        diag["pose"] = [float(v) for v in pose.translation]
        diag["timing_s"] = time.perf_counter() - t_start
        self.diagnostics.append(diag)

    def _bootstrap(self, scan: ScanData):
        cfg = self.cfg
        self.gravity, R0, gyr_bias = self._static_init(scan.t_end_ns)
        self._grav_ref = self.gravity.direction.copy()
        self.window = SplineWindow.bootstrap(
            int(scan.t_end_ns), scan.duration_ns, PoseSplit(R0, np.zeros(3)),
            order=cfg.spline_order, bias_order=cfg.bias_order,
            window_scans=cfg.window_scans, max_active_knots=cfg.max_active_knots)
        if self.imu is not None:
            self.window.bias.gyr[:] = gyr_bias
        seg = REG.segment_times_ns(scan.t_end_ns - scan.duration_ns,
                                   scan.t_end_ns, cfg.segments)
        rot_times, rots, pts = self._preorient(scan, seg)
        record = ScanRecord(int(scan.t_end_ns), int(scan.t_end_ns - scan.duration_ns),
                            seg, self._embed_scan(scan, pts, seg),
                            rot_times, rots, scan)
        self.records = [record]
        self._create_keyframe(record)
        self._refresh_local_map(record)

    def _marginalize_departure(self, departing, left_knots, left_bias):
        """Fold the departing scan's terms (which will never be rebuilt) plus
        the old prior into a new prior over the retained variables."""
        leaving = [("knot", i) for i in left_knots] + [("bias", i) for i in left_bias]
        if not leaving or departing is None:
            return
        cfg = self.cfg
        terms = []
        if self.local_map:
            data, _ = self._associate_all([departing])
            terms += data
        terms += self._imu_terms(departing)
        terms += self._zero_acc_terms([departing])
        terms += self._relpose_terms([departing])
        if self.imu is not None and left_bias:
            W_walk = np.diag([1.0 / cfg.sigma_ba_walk ** 2] * 3
                             + [1.0 / cfg.sigma_bg_walk ** 2] * 3)
            i = max(left_bias)
            j = i + 1

            def walk_rb(state, i=i, j=j):
                r = np.concatenate([state.bias.acc[j] - state.bias.acc[i],
                                    state.bias.gyr[j] - state.bias.gyr[i]])
                rb = IN.ResidualBlocks(r, {}, W_walk)
                rb.add(("bias", j), np.eye(6))
                rb.add(("bias", i), -np.eye(6))
                return rb

            terms.append(REG.ResidualTerm(walk_rb))
        if self.marg_prior is not None:
            terms.append(self.marg_prior)
        if not terms:
            return

        kmin = min(i for _, i in (k for k in leaving if k[0] == "knot"))
        if self.marg_prior is not None:
            for key in self.marg_prior.keys:
                if key[0] == "knot":
                    kmin = min(kmin, key[1])
        kmax = self.window.newest_real_knot() + self.window.spline.order - 1
        kmax = min(kmax, self.window.spline.n_knots - 1)
        keys = [("knot", i) for i in range(kmin, kmax + 1)]
        if self.imu is not None:
            keys += [("bias", i) for i in range(kmin, min(kmax, self.window.bias.n_knots - 1) + 1)]
            keys += [("grav",)]
        layout = REG.StateLayout(keys)
        state = self._state()
        H = np.zeros((layout.dim, layout.dim))
        g = np.zeros(layout.dim)
        for t in terms:
            t.accumulate(state, layout, H, g)
        leaving = [k for k in leaving if layout.contains(k)]
        self.marg_prior = REG.marginalize(H, g, layout, leaving, state)
        # drop prior blocks that carry no information to keep it compact
        self._prune_prior()

    def _prune_prior(self):
        p = self.marg_prior
        if p is None or not p.keys:
            return
        lay = REG.StateLayout(p.keys)
        keep = []
        for k in p.keys:
            s = lay.slices[k]
            if np.abs(p.H[s, :]).max() > 1e-12 or np.abs(p.b[s]).max() > 1e-12:
                keep.append(k)
        if len(keep) == len(p.keys):
            return
        idx = np.concatenate([np.arange(lay.slices[k].start, lay.slices[k].stop)
                              for k in keep]) if keep else np.zeros(0, dtype=int)
        self.marg_prior = REG.MargPrior(
            keep, p.H[np.ix_(idx, idx)], p.b[idx],
            {k[1]: p.lin_rot[k[1]] for k in keep if k[0] == "knot"},
            {k[1]: p.lin_tra[k[1]] for k in keep if k[0] == "knot"},
            {k[1]: p.lin_bias[k[1]] for k in keep if k[0] == "bias"},
            p.lin_grav)

    def _init_prior(self):
        """Initialization variant of the prior: bias and gravity marginalized
        out, poses kept."""
        if self.marg_prior is None:
            return None
        p = self.marg_prior
        drop = [k for k in p.keys if k[0] != "knot"]
        if not drop:
            return p
        lay = REG.StateLayout(p.keys)
        state = self._state()
        reduced = REG.marginalize(p.H, p.b, lay, drop, state)
        # keep the original linearization points for the surviving knots
        reduced.lin_rot = {k[1]: p.lin_rot[k[1]] for k in reduced.keys}
        reduced.lin_tra = {k[1]: p.lin_tra[k[1]] for k in reduced.keys}
        return reduced

    def _initialize_scan(self, record: ScanRecord):
        cfg = self.cfg
        newest = self.window.newest_real_knot()
        layout = REG.StateLayout([("knot", newest)])
        terms = list(self._imu_terms(record, boost=cfg.imu_init_boost))
        terms += self._zero_acc_terms([record])
        terms += self._relpose_terms([record]) if self.odom_prior else []
        prior = self._init_prior()
        if prior is not None:
            terms.append(prior)
        if not terms:
            return
        state = self._state()
        REG.solve_window(state, layout, terms, lm_lambda0=cfg.lm_lambda0,
                         max_iters=3)
        record.pre = None  # re-preintegrate with final biases during registration

    def _register(self, diag):
        cfg = self.cfg
        if not self.local_map:
            return []
        state = self._state()
        keys = [("knot", i) for i in self.window.active_knots()]
        if self.imu is not None:
            keys += [("bias", i) for i in self.window.active_bias_knots()]
            keys += [("grav",)]
        layout = REG.StateLayout(keys)
        trace = []
        terms = []
        for outer in range(cfg.lm_iters):
            data_terms, fractions = self._associate_all(self.records)
            for rec, f in zip(self.records, fractions):
                rec.assoc_fraction = f
            terms = list(data_terms)
            for rec in self.records:
                terms += self._imu_terms(rec)
            terms += self._zero_acc_terms(self.records)
            terms += self._relpose_terms(self.records)
            terms += self._bias_terms()
            if self.marg_prior is not None:
                terms.append(self.marg_prior)
            if not terms:
                return trace
            rep = REG.solve_window(state, layout, terms,
                                   lm_lambda0=cfg.lm_lambda0, max_iters=1)
            trace.extend(rep.costs[:1] + rep.costs[-1:])
            if cfg.ut_per_iteration:
                self._ut_compensate(self.records[-1])
        self.gravity = state.gravity
        return trace

    def _create_keyframe(self, record: ScanRecord):
        spline = self.window.spline
        raw = record.raw
        lo, hi = spline.timeline.domain_ns()
        times = np.clip(record.raw.times_ns, lo, hi - 1)
        Rs, ps = spline.evaluate_pose_many(times)
        pts_map = np.einsum("nij,nj->ni", Rs, raw.points) + ps
        pose = spline.evaluate_pose(int(np.clip(record.t_end_ns, lo, hi - 1)))
        self.map.insert_keyframe(pts_map, raw.times_ns, raw.column, pose,
                                 record.t_end_ns)

    def _refresh_local_map(self, record: ScanRecord):
        cc = self.map.coarsest_common_cell()
        if cc is None:
            self.local_map = {}
            return
        spline = self.window.spline
        lo, hi = spline.timeline.domain_ns()
        pose = spline.evaluate_pose(int(np.clip(record.t_end_ns, lo, hi - 1)))
        means = [t.mean for (c, s), t in record.tables.items()
                 if abs(c - cc) < 1e-9 and len(t)]
        if means:
            mu_map = np.concatenate(means) @ pose.rotation.T + pose.translation
            pk = np.unique(LA.embed_optimized_packed(
                mu_map, 1.0 / (self.cfg.sigma_scale * cc))[0])
        else:
            pk = np.zeros(0, dtype=np.uint64)
        self.local_map = self.map.select_local_map(pose.translation, pk)


def _raw_rb(state, t, gm, am, W):
    rb = IN.raw_residual(t, gm, am, state.spline, state.bias, state.gravity)
    rb.weight = W
    return rb


def _zero_rb(state, t, W):
    rb = IN.zero_accel_residual(t, state.spline)
    rb.weight = W
    return rb


def run_odometry(scans, imu: ImuStream | None, config: OdometryConfig,
                 odom_prior=None):
    """Run the full pipeline over a scan list.

    Returns (times_ns, poses, diagnostics)."""
    pipe = OdometryPipeline(config, imu, odom_prior=odom_prior)
    for scan in scans:
        pipe.process(scan)
    return np.asarray(pipe.times_out, dtype=np.int64), pipe.poses_out, pipe.diagnostics

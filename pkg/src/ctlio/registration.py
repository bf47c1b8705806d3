"""Surfel-to-map GMM registration and the sliding-window solver.

Association freezes correspondences and mixture covariances per outer
iteration (iterated-EM style); the inner Levenberg-Marquardt step then
minimizes the weighted Mahalanobis data term together with the inertial,
zero-acceleration, relative-pose and marginalization-prior terms over the
active knots, bias knots and gravity.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .inertial import GravityState, ResidualBlocks
from .lattice import (DP1, SurfelTable, embed_optimized, pack_keys)
from .manifold import oplus, skew, so3_log
from .spline import BiasSpline, NonUniformSpline

STEEP_ANGLE_SIGMA = np.pi / 8.0


# -- state layout ----------------------------------------------------------

BLOCK_DIMS = {"knot": 6, "bias": 6, "grav": 2}


class StateLayout:
    """Ordered mapping from block keys to slices of the flat state vector."""

    def __init__(self, keys):
        self.keys = list(keys)
        self.slices = {}
        off = 0
        for k in self.keys:
            dim = BLOCK_DIMS[k[0]]
            self.slices[k] = slice(off, off + dim)
            off += dim
        self.dim = off

    def contains(self, key):
        return key in self.slices


@dataclass
class WindowState:
    """Mutable optimization state: trajectory, biases and gravity."""

    spline: NonUniformSpline
    bias: BiasSpline
    gravity: GravityState

    def snapshot(self):
        return (self.spline.rotations.copy(), self.spline.translations.copy(),
                self.bias.acc.copy(), self.bias.gyr.copy(),
                self.gravity.direction.copy())

    def restore(self, snap):
        self.spline.rotations[:] = snap[0]
        self.spline.translations[:] = snap[1]
        self.spline.touch()
        self.bias.acc[:] = snap[2]
        self.bias.gyr[:] = snap[3]
        self.gravity = GravityState(snap[4].copy(), self.gravity.magnitude)

    def apply_delta(self, layout: StateLayout, delta):
        for key in layout.keys:
            d = delta[layout.slices[key]]
            if key[0] == "knot":
                i = key[1]
                self.spline.set_knot(i, oplus(self.spline.knot(i), d))
            elif key[0] == "bias":
                i = key[1]
                self.bias.acc[i] = self.bias.acc[i] + d[:3]
                self.bias.gyr[i] = self.bias.gyr[i] + d[3:]
            else:
                self.gravity = self.gravity.retract(d)


# -- association -------------------------------------------------------------

@dataclass
class Association:
    """Frozen scene-to-map correspondences of one (cell size, segment) block."""

    cell_size: float
    segment_time_ns: int
    scene: SurfelTable
    scene_rows: np.ndarray       # (A,)
    map_mean: np.ndarray         # (A,3)
    map_cov8: np.ndarray         # (A,8) planar-rescaled map covariances
    scene_cov8: np.ndarray       # (A,8) planar-rescaled scene covariances
    weights: np.ndarray          # (A,)

    def __len__(self):
        return len(self.scene_rows)


def rescale_if_planar(table: SurfelTable, planarity_ratio: float):
    """Planar surfels get the clamped-spectrum covariance; others stay.
    Cached on the (immutable) table."""
    cached = getattr(table, "_rescaled", None)
    if cached is not None and cached[0] == planarity_ratio:
        return cached[1]
    cov = table.cov8
    planar = table.planarity() < planarity_ratio
    out = cov.copy()
    if np.any(planar):
        out[planar] = kernels.rescale_planar(cov[planar], table.cell_size)
    object.__setattr__(table, "_rescaled", (planarity_ratio, out))
    return out


def steep_angle_weight(table: SurfelTable):
    """Down-weights surfaces seen under steep angles, N(0, (pi/8)^2) prior."""
    cached = getattr(table, "_steep_w", None)
    if cached is not None:
        return cached
    n = table.normals()
    cosang = np.abs(np.einsum("ij,ij->i", n, table.view_dir))
    theta = np.arccos(np.clip(cosang, -1.0, 1.0))
    out = np.exp(-0.5 * (theta / STEEP_ANGLE_SIGMA) ** 2)
    object.__setattr__(table, "_steep_w", out)
    return out


def associate(scene: SurfelTable, map_table: SurfelTable, pose_seg,
              sigma_scale: float, reg_sigma: float, planarity_ratio: float,
              min_points: int, covered=None, t_seg_ns: int = 0,
              maha_gate: float = 25.0):
    """Frozen GMM association of one scene table against one map level.

    Scene surfel means are moved by the segment pose, embedded into the map
    lattice, and matched against the map cells at the containing-simplex
    vertices.  Weights combine Mahalanobis similarity (normalized per scene
    surfel) with the steep-angle prior.  Returns (association or None,
    selected row mask, associated row mask).
    """
    usable = scene.count >= min_points
    if covered is not None:
        usable &= ~covered
    rows = np.nonzero(usable)[0]
    if len(rows) == 0 or len(map_table) == 0:
        return None, usable, np.zeros(len(scene), dtype=bool)

    mu_map_frame = scene.mean[rows] @ pose_seg.rotation.T + pose_seg.translation
    # candidates: all d+1 simplex vertices around the transformed mean
    from .lattice import embed_reference
    _, _, _, greedy, rank = embed_reference(mu_map_frame,
                                            1.0 / (sigma_scale * scene.cell_size))
    cand_rows = []
    cand_scene = []
    for k in range(DP1):
        vk = greedy + k - DP1 * (rank >= (DP1 - k))
        hit = map_table.lookup(pack_keys(vk))
        ok = hit >= 0
        cand_rows.append(hit[ok])
        cand_scene.append(np.nonzero(ok)[0])
    if sum(len(c) for c in cand_rows) == 0:
        return None, usable, np.zeros(len(scene), dtype=bool)
    map_idx = np.concatenate(cand_rows)
    scene_local = np.concatenate(cand_scene)

    scene_cov = rescale_if_planar(scene, planarity_ratio)
    map_cov = rescale_if_planar(map_table, planarity_ratio)

    R = pose_seg.rotation
    Z = kernels.rot_kron_z(R)
    cov_s = scene_cov[rows][scene_local]
    cov_m = map_cov[map_idx]
    cov_sm = kernels.rotate_cov(Z, cov_s, cov_m)
    cov_sm[:, :3] += reg_sigma ** 2
    d = mu_map_frame[scene_local] - map_table.mean[map_idx]
    try:
        maha = kernels.mahalanobis_batch(d, cov_sm)
    except kernels.SingularCovarianceError:
        inv_ok = np.abs(kernels._cofactor_lanes(cov_sm)[-1]) >= kernels.DET_FLOOR
        scene_local = scene_local[inv_ok]
        map_idx = map_idx[inv_ok]
        cov_s = cov_s[inv_ok]
        cov_m = cov_m[inv_ok]
        cov_sm = cov_sm[inv_ok]
        d = d[inv_ok]
        maha = kernels.mahalanobis_batch(d, cov_sm)

    # gate on the absolute Mahalanobis distance before normalizing, so a
    # lone far-off candidate cannot claim full weight
    gate = maha <= maha_gate
    scene_local = scene_local[gate]
    map_idx = map_idx[gate]
    cov_s = cov_s[gate]
    cov_m = cov_m[gate]
    maha = maha[gate]
    if len(scene_local) == 0:
        return None, usable, np.zeros(len(scene), dtype=bool)
    sim = np.exp(-0.5 * maha)
    # normalize similarity per scene surfel, then apply the angle prior
    denom = np.zeros(len(rows))
    np.add.at(denom, scene_local, sim)
    keep = sim > 1e-6 * np.maximum(denom[scene_local], 1e-300)
    keep &= denom[scene_local] > 1e-12
    scene_local = scene_local[keep]
    map_idx = map_idx[keep]
    cov_s = cov_s[keep]
    cov_m = cov_m[keep]
    sim = sim[keep]
    w = sim / denom[scene_local]
    w *= steep_angle_weight(scene)[rows][scene_local]

    associated = np.zeros(len(scene), dtype=bool)
    associated[rows[np.unique(scene_local)]] = True
    assoc = Association(scene.cell_size, int(t_seg_ns), scene,
                        rows[scene_local], map_table.mean[map_idx], cov_m,
                        cov_s, w)
    return assoc, usable, associated


def segment_times_ns(t_prev_ns: int, t_end_ns: int, n_segments: int):
    """Linear subdivision t_seg(o) = t_{l-1} + o/(O-1) (t_l - t_{l-1})."""
    if n_segments < 2:
        raise ValueError("need at least two segments")
    o = np.arange(n_segments, dtype=float)
    t = t_prev_ns + o / (n_segments - 1) * float(t_end_ns - t_prev_ns)
    return np.round(t).astype(np.int64)


# -- terms --------------------------------------------------------------------

class DataTerm:
    """Mahalanobis data term of one association block at its segment time.

    Mixture covariances and weights stay frozen at association time; the
    residual d = T(t_seg) mu_s - mu_m is re-evaluated against the current
    spline (Gauss-Newton on the frozen-metric objective).
    """

    def __init__(self, assoc: Association, t_seg_ns: int, reg_sigma: float,
                 weight: float = 1.0):
        self.assoc = assoc
        self.t_seg_ns = int(t_seg_ns)
        self.weight = weight
        self.reg_sigma = reg_sigma
        self.mu_s = assoc.scene.mean[assoc.scene_rows]
        self._frozen_inv = None

    def freeze_metric(self, state: WindowState):
        pose = state.spline.evaluate_pose(self.t_seg_ns)
        Z = kernels.rot_kron_z(pose.rotation)
        cov_sm = kernels.rotate_cov(Z, self.assoc.scene_cov8, self.assoc.map_cov8)
        cov_sm[:, :3] += self.reg_sigma ** 2
        self._frozen_inv = kernels.sym_l(kernels.sym_inverse(cov_sm))

    def _residuals(self, state: WindowState):
        pose = state.spline.evaluate_pose(self.t_seg_ns)
        return self.mu_s @ pose.rotation.T + pose.translation - self.assoc.map_mean

    def cost(self, state: WindowState) -> float:
        if self._frozen_inv is None:
            self.freeze_metric(state)
        d = self._residuals(state)
        q = np.einsum("ai,aij,aj->a", d, self._frozen_inv, d)
        return float(self.weight * np.dot(self.assoc.weights, q))

    def accumulate(self, state: WindowState, layout: StateLayout, H, g) -> float:
        if self._frozen_inv is None:
            self.freeze_metric(state)
        pose = state.spline.evaluate_pose(self.t_seg_ns)
        kj = state.spline.knot_jacobians(self.t_seg_ns)
        d = self._residuals(state)
        S = self._frozen_inv
        w = self.assoc.weights * self.weight

        keys = []
        for m in range(state.spline.order):
            key = ("knot", kj.k0 + m)
            if layout.contains(key):
                keys.append((m, key))
        A = len(d)
        nb = len(keys)
        Jbig = np.zeros((A, 3, 6 * nb))
        neg_skew = -skew(self.mu_s @ pose.rotation.T)
        for b, (m, _) in enumerate(keys):
            Jbig[:, 0, 6 * b] = kj.c[m]
            Jbig[:, 1, 6 * b + 1] = kj.c[m]
            Jbig[:, 2, 6 * b + 2] = kj.c[m]
            Jbig[:, :, 6 * b + 3:6 * b + 6] = neg_skew @ kj.JR[m]
        wS = S * w[:, None, None]
        SJ = wS @ Jbig
        Hloc = np.einsum("aij,aik->jk", Jbig, SJ)
        Sd = np.einsum("aij,aj->ai", wS, d)
        gloc = np.einsum("aij,ai->j", Jbig, Sd)
        for b1, (_, k1) in enumerate(keys):
            s1 = layout.slices[k1]
            g[s1] += gloc[6 * b1:6 * b1 + 6]
            for b2, (_, k2) in enumerate(keys):
                H[s1, layout.slices[k2]] += Hloc[6 * b1:6 * b1 + 6, 6 * b2:6 * b2 + 6]
        return float(np.dot(d.reshape(-1), Sd.reshape(-1)))


class ResidualTerm:
    """Wraps a ResidualBlocks factory into a quadratic term."""

    def __init__(self, factory, weight: float = 1.0):
        self.factory = factory
        self.weight = weight

    def cost(self, state: WindowState) -> float:
        rb = self.factory(state)
        return float(self.weight * rb.r @ rb.weight @ rb.r)

    def accumulate(self, state: WindowState, layout: StateLayout, H, g) -> float:
        rb = self.factory(state)
        W = rb.weight * self.weight
        Wr = W @ rb.r
        items = [(k, J) for k, J in rb.blocks.items() if layout.contains(k)]
        for k1, J1 in items:
            s1 = layout.slices[k1]
            g[s1] += J1.T @ Wr
            for k2, J2 in items:
                s2 = layout.slices[k2]
                H[s1, s2] += J1.T @ W @ J2
        return float(self.weight * rb.r @ rb.weight @ rb.r)


@dataclass
class MargPrior:
    """Quadratic prior from marginalized variables.

    cost(x) = (x [-] x0)^T H (x [-] x0) + 2 b^T (x [-] x0); linearization
    points are frozen (first-estimate Jacobians).
    """

    keys: list
    H: np.ndarray
    b: np.ndarray
    lin_rot: dict
    lin_tra: dict
    lin_bias: dict
    lin_grav: tuple | None

    def delta(self, state: WindowState):
        parts = []
        for key in self.keys:
            if key[0] == "knot":
                i = key[1]
                dr = so3_log(state.spline.rotations[i] @ self.lin_rot[i].T)
                dp = state.spline.translations[i] - self.lin_tra[i]
                parts.append(np.concatenate([dp, dr]))
            elif key[0] == "bias":
                i = key[1]
                ba0, bg0 = self.lin_bias[i]
                parts.append(np.concatenate([state.bias.acc[i] - ba0,
                                             state.bias.gyr[i] - bg0]))
            else:
                g0, basis0 = self.lin_grav
                parts.append(basis0.T @ (state.gravity.direction - g0))
        return np.concatenate(parts) if parts else np.zeros(0)

    def cost(self, state: WindowState) -> float:
        d = self.delta(state)
        return float(d @ self.H @ d + 2.0 * self.b @ d)

    def accumulate(self, state: WindowState, layout: StateLayout, H, g) -> float:
        d = self.delta(state)
        local = StateLayout(self.keys)
        grad = self.H @ d + self.b
        for k1 in self.keys:
            if not layout.contains(k1):
                continue
            s1 = layout.slices[k1]
            l1 = local.slices[k1]
            g[s1] += grad[l1]
            for k2 in self.keys:
                if not layout.contains(k2):
                    continue
                H[layout.slices[k1], layout.slices[k2]] += self.H[l1, local.slices[k2]]
        return self.cost(state)

    @staticmethod
    def from_state(keys, H, b, state: WindowState):
        lin_rot = {}
        lin_tra = {}
        lin_bias = {}
        lin_grav = None
        for key in keys:
            if key[0] == "knot":
                lin_rot[key[1]] = state.spline.rotations[key[1]].copy()
                lin_tra[key[1]] = state.spline.translations[key[1]].copy()
            elif key[0] == "bias":
                lin_bias[key[1]] = (state.bias.acc[key[1]].copy(),
                                    state.bias.gyr[key[1]].copy())
            else:
                lin_grav = (state.gravity.direction.copy(), state.gravity.basis())
        return MargPrior(list(keys), H, b, lin_rot, lin_tra, lin_bias, lin_grav)


def marginalize(H, b, layout: StateLayout, leaving_keys, state: WindowState,
                eig_floor: float = 0.0):
    """Schur complement of the leaving block; returns a MargPrior over the
    remaining keys with linearization at the current state."""
    leaving = [k for k in layout.keys if k in set(leaving_keys)]
    keeping = [k for k in layout.keys if k not in set(leaving_keys)]
    if not leaving:
        return MargPrior.from_state(keeping, H.copy(), b.copy(), state)
    il = np.concatenate([np.arange(layout.slices[k].start, layout.slices[k].stop)
                         for k in leaving])
    ik = (np.concatenate([np.arange(layout.slices[k].start, layout.slices[k].stop)
                          for k in keeping]) if keeping else np.zeros(0, dtype=int))
    Hll = H[np.ix_(il, il)]
    Hkl = H[np.ix_(ik, il)]
    Hkk = H[np.ix_(ik, ik)]
    bl = b[il]
    bk = b[ik]
    Hll_inv = np.linalg.pinv(Hll, rcond=1e-12)
    Hred = Hkk - Hkl @ Hll_inv @ Hkl.T
    bred = bk - Hkl @ Hll_inv @ bl
    Hred = 0.5 * (Hred + Hred.T)
    ev, V = np.linalg.eigh(Hred)
    if np.any(ev < -1e-9 * max(abs(ev[-1]), 1.0)):
        # numerical indefiniteness: project onto the PSD cone
        ev = np.maximum(ev, eig_floor)
        Hred = (V * ev) @ V.T
    return MargPrior.from_state(keeping, Hred, bred, state)


# -- the LM solver ---------------------------------------------------------------

@dataclass
class SolveReport:
    costs: list = field(default_factory=list)
    accepted: int = 0
    rejected: int = 0
    aborted: bool = False


def solve_window(state: WindowState, layout: StateLayout, terms,
                 lm_lambda0: float = 1e-4, max_iters: int = 5,
                 lm_max: float = 1e8) -> SolveReport:
    """Levenberg-Marquardt over the window state.

    Each iteration linearizes every term, solves the damped normal equations
    and accepts the step only when the total cost decreases; rejected steps
    double the damping and retry within the same iteration.
    """
    report = SolveReport()
    lam = lm_lambda0
    for _ in range(max_iters):
        H = np.zeros((layout.dim, layout.dim))
        g = np.zeros(layout.dim)
        cost0 = 0.0
        for t in terms:
            cost0 += t.accumulate(state, layout, H, g)
        if not np.isfinite(cost0):
            report.aborted = True
            break
        report.costs.append(cost0)
        stepped = False
        while lam <= lm_max:
            damp = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = np.linalg.solve(damp, -g)
            except np.linalg.LinAlgError:
                lam *= 2.0
                continue
            snap = state.snapshot()
            state.apply_delta(layout, delta)
            cost1 = sum(t.cost(state) for t in terms)
            if np.isfinite(cost1) and cost1 <= cost0:
                report.accepted += 1
                lam = max(lam * 0.5, 1e-12)
                stepped = True
                break
            state.restore(snap)
            report.rejected += 1
            lam *= 2.0
        if not stepped:
            report.aborted = True
            break
    final = sum(t.cost(state) for t in terms)
    report.costs.append(final)
    return report


def assemble_normal_equations(state: WindowState, layout: StateLayout, terms):
    H = np.zeros((layout.dim, layout.dim))
    g = np.zeros(layout.dim)
    cost = 0.0
    for t in terms:
        cost += t.accumulate(state, layout, H, g)
    return H, g, cost

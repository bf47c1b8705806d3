"""Non-uniform cumulative B-splines on SO(3) x R^3 and reduced-order bias splines.

Knot times are 64-bit integer nanoseconds so that the one-nanosecond knot
placement of the sliding window is exactly representable; the normalized
local coordinate u in [0, 1) is double precision.

Indexing convention: the interval [t_k, t_{k+1}) is controlled by the N knots
X_k .. X_{k+N-1} and its basis matrix touches only the 2(N-1) timestamps
t_{k-N+2} .. t_{k+N-1}.  In cumulative form the trajectory on that interval is

    C(t) = X_k o Exp(lam_1(t) d_1) o ... o Exp(lam_{N-1}(t) d_{N-1}),
    d_n  = Log(X_{k+n-1}^-1 o X_{k+n})   (component-wise group ops)

with cumulative weights lam_n; lam_0 is identically one.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifold import (PoseSplit, jl_inv_so3, jr_so3, rot_to_quat_wxyz, skew,
                       so3_exp, so3_log)

NS_PER_S = 1_000_000_000


class SplineDomainError(ValueError):
    """Evaluation time outside the spline's valid domain."""


def to_ns(t_seconds: float) -> int:
    return int(round(t_seconds * NS_PER_S))


def span_basis_polynomials(times_ns, k: int, order: int):
    """Non-cumulative basis polynomials of one span via the Cox-de Boor recursion.

    Returns an (order, order) array: row m holds ascending powers of u for the
    weight of control X_{k+m} on [t_k, t_{k+1}).  Row 0 is reconstructed from
    partition of unity so only the timestamps t_{k-N+2} .. t_{k+N-1} are read.
    """
    t = np.asarray(times_ns)
    if order == 1:
        return np.array([[1.0]])
    t0 = t[k]
    dt = float(t[k + 1] - t[k])
    if dt <= 0:
        raise ValueError("knot times must be strictly increasing")
    # polys[j]: coefficients of the standard basis N_{j,r} restricted to the span
    polys = {k: np.array([1.0])}
    for r in range(2, order + 1):
        new = {}
        for j in range(max(k - r + 1, k - order + 2), k + 1):
            acc = np.zeros(r)
            pj = polys.get(j)
            if pj is not None:
                den = float(t[j + r - 1] - t[j])
                c0 = float(t0 - t[j]) / den
                c1 = dt / den
                acc[: r - 1] += c0 * pj
                acc[1:r] += c1 * pj
            pj1 = polys.get(j + 1)
            if pj1 is not None:
                den = float(t[j + r] - t[j + 1])
                c0 = float(t[j + r] - t0) / den
                c1 = -dt / den
                acc[: r - 1] += c0 * pj1
                acc[1:r] += c1 * pj1
            if np.any(acc):
                new[j] = acc
        polys = new
    out = np.zeros((order, order))
    for m in range(1, order):
        j = k - order + 1 + m
        if j in polys:
            out[m] = polys[j]
    out[0] = -np.sum(out[1:], axis=0)
    out[0, 0] += 1.0
    return out


def cumulative_matrix(times_ns, k: int, order: int):
    """Cumulative basis matrix: row n = sum of non-cumulative rows n..N-1.

    Row 0 is exactly (1, 0, ..., 0).
    """
    b = span_basis_polynomials(times_ns, k, order)
    M = np.zeros_like(b)
    M[0, 0] = 1.0
    for n in range(order - 1, 0, -1):
        M[n] = b[n] + (M[n + 1] if n + 1 < order else 0.0)
    return M


@dataclass
class KnotTimeline:
    """Strictly increasing knot times (ns) plus the spline order."""

    times_ns: np.ndarray
    order: int

    def __post_init__(self):
        self.times_ns = np.asarray(self.times_ns, dtype=np.int64)
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if np.any(np.diff(self.times_ns) <= 0):
            raise ValueError("knot times must be strictly increasing")

    def __len__(self):
        return len(self.times_ns)

    def first_interval(self) -> int:
        return max(self.order - 2, 0)

    def last_interval(self) -> int:
        return len(self.times_ns) - self.order

    def domain_ns(self):
        return (int(self.times_ns[self.first_interval()]),
                int(self.times_ns[self.last_interval() + 1]))

    def interval_of(self, t_ns: int) -> int:
        k = int(np.searchsorted(self.times_ns, t_ns, side="right") - 1)
        if k < self.first_interval() or k > self.last_interval():
            lo, hi = self.domain_ns()
            raise SplineDomainError(f"time {t_ns} outside spline domain [{lo}, {hi})")
        return k

    def stamp_signature(self, k: int):
        lo = max(k - self.order + 2, 0)
        hi = min(k + self.order, len(self.times_ns))
        return tuple(int(v) for v in self.times_ns[lo:hi])


class _BasisCache:
    """Per-interval cumulative matrices, invalidated by timestamp signature."""

    def __init__(self):
        self._entries = {}

    def get(self, timeline: KnotTimeline, k: int):
        sig = timeline.stamp_signature(k)
        hit = self._entries.get(k)
        if hit is not None and hit[0] == sig:
            return hit[1]
        M = cumulative_matrix(timeline.times_ns, k, timeline.order)
        self._entries[k] = (sig, M)
        return M

    def cached_entry(self, k: int):
        return self._entries.get(k)


@dataclass
class SplineRates:
    omega: np.ndarray        # body angular rate, rad/s
    velocity: np.ndarray     # world linear velocity, m/s
    accel: np.ndarray | None        # world linear acceleration, m/s^2
    ang_accel: np.ndarray | None    # body angular acceleration, rad/s^2


@dataclass
class KnotJacobians:
    """Per-knot Jacobian blocks at one evaluation time (left-trivialized).

    Arrays are indexed by local knot m = 0..N-1 (global index k0 + m); blocks
    for knots outside the support are exactly zero and are not represented.
    """

    k0: int
    c: np.ndarray      # pose/translation weights, (N,)
    cd: np.ndarray     # velocity weights, 1/s
    cdd: np.ndarray | None  # acceleration weights, 1/s^2 (None for N < 3)
    JR: np.ndarray     # rotation block d R(t) / d R_k, (N,3,3)
    Jw: np.ndarray     # d omega / d R_k, (N,3,3)
    Jaa: np.ndarray | None  # d ang_accel / d R_k, (N,3,3)


class NonUniformSpline:
    """Cumulative B-spline trajectory with analytic derivatives and Jacobians."""

    def __init__(self, times_ns, rotations, translations, order: int = 3):
        self.timeline = KnotTimeline(np.asarray(times_ns, dtype=np.int64), order)
        self.rotations = np.asarray(rotations, dtype=float).copy()
        self.translations = np.asarray(translations, dtype=float).copy()
        if len(self.rotations) != len(self.timeline) or len(self.translations) != len(self.timeline):
            raise ValueError("knot arrays must match the timeline length")
        if len(self.timeline) < order:
            raise ValueError("need at least `order` knots")
        self._cache = _BasisCache()
        self._version = 0
        self._memo = {}

    # -- knot access ---------------------------------------------------------
    @property
    def order(self) -> int:
        return self.timeline.order

    @property
    def n_knots(self) -> int:
        return len(self.timeline)

    def knot(self, i: int) -> PoseSplit:
        return PoseSplit(self.rotations[i].copy(), self.translations[i].copy())

    def set_knot(self, i: int, pose: PoseSplit):
        self.rotations[i] = pose.rotation
        self.translations[i] = pose.translation
        self.touch()

    def touch(self):
        """Invalidate evaluation memos after direct knot mutation."""
        self._version += 1
        if self._memo:
            self._memo.clear()

    def _memo_get(self, kind, t_ns):
        return self._memo.get((kind, int(t_ns)))

    def _memo_put(self, kind, t_ns, value):
        self._memo[(kind, int(t_ns))] = value
        return value

    def support(self, k: int):
        """Global knot indices controlling interval k."""
        return range(k, k + self.order)

    # -- internals -----------------------------------------------------------
    def _local(self, t_ns: int):
        k = self.timeline.interval_of(int(t_ns))
        tk = int(self.timeline.times_ns[k])
        dt_ns = int(self.timeline.times_ns[k + 1]) - tk
        u = float(int(t_ns) - tk) / float(dt_ns)
        M = self._cache.get(self.timeline, k)
        return k, u, float(dt_ns) / NS_PER_S, M

    @staticmethod
    def _weights(M, u, dt_s, order, derivs=0):
        up = u ** np.arange(order)
        lam = M @ up
        out = [lam]
        if derivs >= 1:
            r = np.arange(1, order)
            upd = u ** np.arange(order - 1)
            lam_d = (M[:, 1:] * r) @ upd / dt_s
            out.append(lam_d)
        if derivs >= 2:
            if order >= 3:
                r2 = np.arange(2, order) * np.arange(1, order - 1)
                updd = u ** np.arange(order - 2)
                lam_dd = (M[:, 2:] * r2) @ updd / (dt_s * dt_s)
            else:
                lam_dd = np.zeros(order)
            out.append(lam_dd)
        return out

    def _deltas(self, k):
        N = self.order
        d = np.empty((N - 1, 3))
        dp = np.empty((N - 1, 3))
        for n in range(1, N):
            d[n - 1] = so3_log(self.rotations[k + n - 1].T @ self.rotations[k + n])
            dp[n - 1] = self.translations[k + n] - self.translations[k + n - 1]
        return d, dp

    # -- evaluation ----------------------------------------------------------
    def evaluate_pose(self, t_ns: int) -> PoseSplit:
        hit = self._memo_get("pose", t_ns)
        if hit is not None:
            return hit
        k, u, dt_s, M = self._local(t_ns)
        N = self.order
        (lam,) = self._weights(M, u, dt_s, N, derivs=0)
        d, dp = self._deltas(k)
        R = self.rotations[k].copy()
        for n in range(1, N):
            R = R @ so3_exp(lam[n] * d[n - 1])
        p = self.translations[k] + lam[1:] @ dp if N > 1 else self.translations[k].copy()
        return self._memo_put("pose", t_ns, PoseSplit(R, p))

    def evaluate_pose_many(self, t_ns_array):
        """Vectorized pose evaluation; returns (R (n,3,3), p (n,3))."""
        t = np.asarray(t_ns_array, dtype=np.int64)
        Rs = np.empty((len(t), 3, 3))
        ps = np.empty((len(t), 3))
        ks = np.array([self.timeline.interval_of(int(ti)) for ti in t])
        N = self.order
        for k in np.unique(ks):
            sel = np.nonzero(ks == k)[0]
            tk = int(self.timeline.times_ns[k])
            dt_ns = int(self.timeline.times_ns[k + 1]) - tk
            u = (t[sel] - tk).astype(float) / float(dt_ns)
            M = self._cache.get(self.timeline, k)
            lam = (M @ np.vander(u, N, increasing=True).T).T  # (n_sel, N)
            d, dp = self._deltas(k)
            R = np.broadcast_to(self.rotations[k], (len(sel), 3, 3)).copy()
            for n in range(1, N):
                R = R @ so3_exp(lam[:, n, None] * d[n - 1])
            Rs[sel] = R
            ps[sel] = self.translations[k] + lam[:, 1:] @ dp
        return Rs, ps

    def evaluate_derivatives(self, t_ns: int) -> SplineRates:
        """Body angular rate/acceleration and world velocity/acceleration.

        Angular rate and velocity need order >= 2; accelerations need >= 3
        and are returned as None otherwise only if `require_accel` is False.
        """
        N = self.order
        if N < 2:
            raise SplineDomainError("derivatives need spline order >= 2")
        hit = self._memo_get("rates", t_ns)
        if hit is not None:
            return hit
        k, u, dt_s, M = self._local(t_ns)
        lam, lam_d, lam_dd = self._weights(M, u, dt_s, N, derivs=2)
        d, dp = self._deltas(k)
        w = np.zeros(3)
        al = np.zeros(3)
        for n in range(1, N):
            A = so3_exp(lam[n] * d[n - 1])
            Atw = A.T @ w
            al = A.T @ al + lam_d[n] * np.cross(Atw, d[n - 1]) + lam_dd[n] * d[n - 1]
            w = Atw + lam_d[n] * d[n - 1]
        v = lam_d[1:] @ dp
        if N >= 3:
            a = lam_dd[1:] @ dp
            return self._memo_put("rates", t_ns, SplineRates(w, v, a, al))
        return self._memo_put("rates", t_ns, SplineRates(w, v, None, None))

    # -- analytic knot Jacobians ----------------------------------------------
    def knot_jacobians(self, t_ns: int) -> KnotJacobians:
        """Left-trivialized Jacobians of pose, rates and accelerations w.r.t.
        the supporting knots.  Verified against finite differences in tests."""
        hit = self._memo_get("kj", t_ns)
        if hit is not None:
            return hit
        N = self.order
        k, u, dt_s, M = self._local(t_ns)
        lam, lam_d, lam_dd = self._weights(M, u, dt_s, N, derivs=2)
        d, dp = self._deltas(k)

        # translation weights: non-cumulative differences of lam rows
        c = np.empty(N)
        cd = np.empty(N)
        cdd = np.empty(N)
        lam_pad = np.append(lam, 0.0)
        lam_d_pad = np.append(lam_d, 0.0)
        lam_dd_pad = np.append(lam_dd, 0.0)
        for m in range(N):
            top = lam_pad[m] if m >= 1 else 1.0
            top_d = lam_d_pad[m] if m >= 1 else 0.0
            top_dd = lam_dd_pad[m] if m >= 1 else 0.0
            c[m] = top - lam_pad[m + 1]
            cd[m] = top_d - lam_d_pad[m + 1]
            cdd[m] = top_dd - lam_dd_pad[m + 1]

        # forward sweep carrying values and per-delta sensitivities
        w = np.zeros(3)
        al = np.zeros(3)
        JR_d = [None] * N     # d R(t) / d d_n, left-trivialized
        Gw = [None] * N       # d omega / d d_n
        Ga = [None] * N       # d ang_accel / d d_n
        Rpart = self.rotations[k].copy()
        for n in range(1, N):
            phi = lam[n] * d[n - 1]
            A = so3_exp(phi)
            Jr = jr_so3(phi)
            Atw = A.T @ w
            Atal = A.T @ al
            # propagate older sensitivities through this factor; JR_d is already
            # expressed on the full product and needs no propagation
            for m in range(1, n):
                Ga[m] = A.T @ Ga[m] - lam_d[n] * skew(d[n - 1]) @ (A.T @ Gw[m])
                Gw[m] = A.T @ Gw[m]
            # new sensitivities w.r.t. d_n
            SJr = lam[n] * Jr
            Gw[n] = skew(Atw) @ SJr + lam_d[n] * np.eye(3)
            Ga[n] = (skew(Atal) @ SJr
                     + lam_d[n] * skew(Atw)
                     - lam_d[n] * lam[n] * skew(d[n - 1]) @ skew(Atw) @ Jr
                     + lam_dd[n] * np.eye(3))
            Rpart = Rpart @ A
            JR_d[n] = Rpart @ SJr
            # update values
            al = Atal + lam_d[n] * np.cross(Atw, d[n - 1]) + lam_dd[n] * d[n - 1]
            w = Atw + lam_d[n] * d[n - 1]

        # chain d_n -> knot rotations (left increments on knots)
        JR = np.zeros((N, 3, 3))
        Jw = np.zeros((N, 3, 3))
        Jaa = np.zeros((N, 3, 3))
        JR[0] = np.eye(3)
        for n in range(1, N):
            Dright = jl_inv_so3(d[n - 1]) @ self.rotations[k + n - 1].T
            # d d_n / d eps(knot k+n) = +Dright ; d d_n / d eps(knot k+n-1) = -Dright
            JR[n] += JR_d[n] @ Dright
            JR[n - 1] -= JR_d[n] @ Dright
            Jw[n] += Gw[n] @ Dright
            Jw[n - 1] -= Gw[n] @ Dright
            Jaa[n] += Ga[n] @ Dright
            Jaa[n - 1] -= Ga[n] @ Dright

        if N < 3:
            return self._memo_put("kj", t_ns, KnotJacobians(k, c, cd, None, JR, Jw, None))
        return self._memo_put("kj", t_ns, KnotJacobians(k, c, cd, cdd, JR, Jw, Jaa))

    # -- serialization ---------------------------------------------------------
    def to_debug_dict(self):
        return {
            "order": self.order,
            "knot_times_ns": [int(v) for v in self.timeline.times_ns],
            "quaternions_wxyz": [list(map(float, rot_to_quat_wxyz(R))) for R in self.rotations],
            "translations": [list(map(float, p)) for p in self.translations],
        }


class BiasSpline:
    """Reduced-order (N_B in {1, 2}) vector-valued spline for IMU biases."""

    def __init__(self, times_ns, acc_knots, gyr_knots, order: int = 1):
        if order not in (1, 2):
            raise ValueError("bias spline order must be 1 or 2")
        self.timeline = KnotTimeline(np.asarray(times_ns, dtype=np.int64), order)
        self.acc = np.asarray(acc_knots, dtype=float).copy()
        self.gyr = np.asarray(gyr_knots, dtype=float).copy()
        self._cache = _BasisCache()

    @property
    def order(self):
        return self.timeline.order

    @property
    def n_knots(self):
        return len(self.timeline)

    def interval_of(self, t_ns: int) -> int:
        k = int(np.searchsorted(self.timeline.times_ns, t_ns, side="right") - 1)
        if self.order == 1:
            # piecewise constant, clamped beyond the last knot
            if k < 0:
                raise SplineDomainError("time before bias spline domain")
            return min(k, len(self.timeline) - 1)
        if k < 0 or k > len(self.timeline) - 2:
            raise SplineDomainError("time outside bias spline domain")
        return k

    def weights(self, t_ns: int):
        """(first knot index, per-knot weights) at time t."""
        k = self.interval_of(t_ns)
        if self.order == 1:
            return k, np.array([1.0])
        tk = int(self.timeline.times_ns[k])
        dt = int(self.timeline.times_ns[k + 1]) - tk
        u = float(int(t_ns) - tk) / float(dt)
        return k, np.array([1.0 - u, u])

    def evaluate(self, t_ns: int):
        k, w = self.weights(t_ns)
        sl = slice(k, k + self.order)
        return w @ self.acc[sl], w @ self.gyr[sl]


@dataclass
class SplineWindow:
    """Sliding registration window with non-uniform knot placement.

    The newest knot sits at the latest scan end plus epsilon (1 ns); the
    N-2 provisional future knots are spaced by the expected scan period and
    temporally corrected when the next scan arrives.
    """

    spline: NonUniformSpline
    bias: BiasSpline
    dt_expected_ns: int
    window_scans: int = 3
    max_active_knots: int = 6
    epsilon_ns: int = 1
    scan_ends_ns: list = field(default_factory=list)

    @staticmethod
    def bootstrap(t0_ns: int, dt_expected_ns: int, pose0: PoseSplit, order: int = 3,
                  bias_order: int = 1, window_scans: int = 3,
                  max_active_knots: int = 6) -> "SplineWindow":
        """Window covering the first scan ending at t0 with static knots."""
        eps = 1
        lead = [t0_ns - (order - 1 - i) * dt_expected_ns for i in range(order - 1)]
        times = lead + [t0_ns + eps]
        times += [t0_ns + eps + (m + 1) * dt_expected_ns for m in range(order - 2)]
        times = np.asarray(times, dtype=np.int64)
        K = len(times)
        rot = np.tile(pose0.rotation, (K, 1, 1))
        tra = np.tile(pose0.translation, (K, 1))
        spl = NonUniformSpline(times, rot, tra, order=order)
        bias = BiasSpline(times.copy(), np.zeros((K, 3)), np.zeros((K, 3)), order=bias_order)
        return SplineWindow(spl, bias, dt_expected_ns, window_scans=window_scans,
                            max_active_knots=max_active_knots, epsilon_ns=eps,
                            scan_ends_ns=[int(t0_ns)])

    # -- bookkeeping -----------------------------------------------------------
    def newest_real_knot(self) -> int:
        """Index of the knot at (latest scan end + epsilon)."""
        return self.spline.n_knots - 1 - (self.spline.order - 2)

    def newest_interval(self) -> int:
        return self.newest_real_knot() - 1

    def active_intervals(self):
        k_new = self.newest_interval()
        n = min(self.window_scans, len(self.scan_ends_ns))
        return range(max(k_new - n + 1, self.spline.timeline.first_interval()), k_new + 1)

    def active_knots(self):
        ivals = self.active_intervals()
        lo = ivals.start
        hi = ivals.stop - 1 + self.spline.order - 1
        idx = list(range(lo, min(hi, self.spline.n_knots - 1) + 1))
        if len(idx) > self.max_active_knots:
            idx = idx[-self.max_active_knots:]
        return idx

    def active_bias_knots(self):
        ivals = self.active_intervals()
        lo = ivals.start
        hi = ivals.stop - 1 + self.bias.order - 1
        return list(range(lo, min(hi, self.bias.n_knots - 1) + 1))

    def advance(self, t_l_ns: int):
        """Move the window to a new scan end; returns indices of knots that
        left the active set (candidates for marginalization)."""
        t_l_ns = int(t_l_ns)
        if t_l_ns <= self.scan_ends_ns[-1]:
            raise ValueError("scan end times must be strictly increasing")
        prev_active = set(self.active_knots())
        prev_active_bias = set(self.active_bias_knots())
        spl = self.spline
        N = spl.order
        eps = self.epsilon_ns
        times = spl.timeline.times_ns
        j = self.newest_real_knot()

        # value seed: constant-velocity extrapolation from the last two real knots
        def extrapolate(t_ns):
            a, b = spl.knot(j - 1), spl.knot(j)
            span = float(times[j] - times[j - 1])
            s = float(t_ns - times[j]) / span
            from .manifold import ominus, oplus
            return oplus(b, s * ominus(b, a))

        new_times = list(times)
        new_rot = list(spl.rotations)
        new_tra = list(spl.translations)
        # the first provisional becomes the new real knot; re-space the rest
        new_times.append(0)  # grow by one provisional slot
        new_rot.append(spl.rotations[-1].copy())
        new_tra.append(spl.translations[-1].copy())
        for m in range(N - 1):
            idx = j + 1 + m
            new_times[idx] = t_l_ns + eps + m * self.dt_expected_ns
        for m in range(N - 1):
            idx = j + 1 + m
            pose = extrapolate(new_times[idx])
            new_rot[idx] = pose.rotation
            new_tra[idx] = pose.translation

        spl.timeline = KnotTimeline(np.asarray(new_times, dtype=np.int64), N)
        spl.rotations = np.asarray(new_rot)
        spl.translations = np.asarray(new_tra)
        spl.touch()

        # bias knots share the pose timeline
        bias = self.bias
        btimes = list(bias.timeline.times_ns)
        bacc = list(bias.acc)
        bgyr = list(bias.gyr)
        btimes.append(0)
        bacc.append(bias.acc[-1].copy())
        bgyr.append(bias.gyr[-1].copy())
        for m in range(N - 1):
            btimes[j + 1 + m] = new_times[j + 1 + m]
        bias.timeline = KnotTimeline(np.asarray(btimes, dtype=np.int64), bias.order)
        bias.acc = np.asarray(bacc)
        bias.gyr = np.asarray(bgyr)

        self.scan_ends_ns.append(t_l_ns)
        left = sorted(prev_active - set(self.active_knots()))
        left_bias = sorted(prev_active_bias - set(self.active_bias_knots()))
        return left, left_bias


# -- conditioning experiment ---------------------------------------------------

def _pose_constraint_gram(spline: NonUniformSpline, times_ns, knot_idx):
    """H = sum_t J(t)^T J(t) for unit-weight pose constraints at `times_ns`,
    over the 6-dof blocks of `knot_idx`."""
    pos = {k: i for i, k in enumerate(knot_idx)}
    n = 6 * len(knot_idx)
    H = np.zeros((n, n))
    for t in times_ns:
        kj = spline.knot_jacobians(int(t))
        blocks = []
        for m in range(spline.order):
            gk = kj.k0 + m
            if gk not in pos:
                continue
            J = np.zeros((6, 6))
            J[:3, :3] = kj.c[m] * np.eye(3)
            J[3:, 3:] = kj.JR[m]
            blocks.append((pos[gk], J))
        for i1, J1 in blocks:
            for i2, J2 in blocks:
                H[6 * i1:6 * i1 + 6, 6 * i2:6 * i2 + 6] += J1.T @ J2
    return H


def _cond(H):
    ev = np.linalg.eigvalsh(H)
    lo = max(abs(ev[0]), 1e-300)
    return abs(ev[-1]) / lo


def condition_analysis(mode: str, order: int = 3, window_scans: int = 3,
                       dt_expected_s: float = 0.1, n_sweep: int = 100,
                       n_constraints: int = 100):
    """Condition number of the window normal equations versus scan-end timing.

    Previous scans end on the expected grid; the newest scan ends at
    t_l = t_base + f * dt with f swept over (0, 1).  Each sweep point builds
    the Gram matrix H = sum J^T W J of `n_constraints` unit-weight (W = I6)
    pose constraints w.r.t. every knot the window carries as state.

    'uniform' keeps knots on the fixed expected grid with the time-based
    window [t_l - L*dt, t_l] sampled inclusively: when t_l sits just below a
    knot time the window's trailing edge clips a sliver of an old interval
    whose trailing knot is nearly unconstrained, so kappa grows without bound
    as t_l approaches the knot time.  'nonuniform' places knots at the actual
    scan ends (+1 ns) and its window is the union of the half-open scan
    intervals, which never produces slivers; kappa stays flat.

    Returns (sweep fractions, kappa values, kappa_ref); kappa_ref is the
    mid-sweep value of the same mode.
    """
    if mode not in ("uniform", "nonuniform"):
        raise ValueError("mode must be 'uniform' or 'nonuniform'")
    dt = to_ns(dt_expected_s)
    L = window_scans
    fracs = np.empty(n_sweep)
    fracs[0] = 1e-4
    fracs[-1] = 1.0 - 1e-4
    fracs[1:-1] = np.linspace(0.01, 0.99, n_sweep - 2)
    kappas = np.empty(n_sweep)
    base = (L + order + 2) * dt
    eye3 = np.eye(3)
    for i, f in enumerate(fracs):
        t_l = base + int(round(f * dt))
        if mode == "uniform":
            times = np.arange(-(L + order + 2), order + 3) * dt + base
            K = len(times)
            spl = NonUniformSpline(times, np.tile(eye3, (K, 1, 1)),
                                   np.zeros((K, 3)), order=order)
            t0 = t_l - L * dt
            ts = np.linspace(t0, t_l, n_constraints).astype(np.int64)
            k_lo = spl.timeline.interval_of(int(t0))
            k_hi = spl.timeline.interval_of(int(t_l))
        else:
            ends = [base - m * dt for m in range(L + order + 1, 0, -1)] + [t_l]
            times = [e + 1 for e in ends]
            times += [t_l + 1 + (m + 1) * dt for m in range(order - 2)]
            times = np.asarray(times, dtype=np.int64)
            K = len(times)
            spl = NonUniformSpline(times, np.tile(eye3, (K, 1, 1)),
                                   np.zeros((K, 3)), order=order)
            # window = newest L scans, each sampled over its half-open span
            scan_ends = ends[-(L + 1):]
            per = max(n_constraints // L, 2)
            ts = np.concatenate([
                np.linspace(scan_ends[s], scan_ends[s + 1], per + 1)[1:]
                for s in range(L)
            ]).astype(np.int64)
            k_lo = spl.timeline.interval_of(int(ts[0]))
            k_hi = spl.timeline.interval_of(int(t_l))
        knots = list(range(k_lo, k_hi + order))
        H = _pose_constraint_gram(spl, ts, knots)
        kappas[i] = _cond(H)
    kappa_ref = kappas[np.argmin(np.abs(fracs - 0.5))]
    return fracs, kappas, kappa_ref

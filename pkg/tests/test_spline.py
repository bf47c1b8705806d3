import numpy as np
import pytest

from ctlio import manifold as mf
from ctlio.spline import (BiasSpline, NonUniformSpline, SplineDomainError,
                          SplineWindow, condition_analysis, cumulative_matrix,
                          span_basis_polynomials, to_ns)

rng = np.random.default_rng(1)
NS = 1_000_000_000

UNIFORM_CUMULATIVE = {
    2: np.array([[1.0, 0.0], [0.0, 1.0]]),
    3: np.array([[1.0, 0.0, 0.0], [0.5, 1.0, -0.5], [0.0, 0.0, 0.5]]),
    4: np.array([[1, 0, 0, 0],
                 [5 / 6, 3 / 6, -3 / 6, 1 / 6],
                 [1 / 6, 3 / 6, 3 / 6, -2 / 6],
                 [0, 0, 0, 1 / 6]]),
}


def random_spline(order=3, K=9, rot_step=0.4, trans_step=0.5, uniform=False):
    if uniform:
        times = (np.arange(K) * 0.1 * NS).astype(np.int64)
    else:
        times = np.cumsum((rng.uniform(0.05, 0.2, size=K) * NS).astype(np.int64))
    rots = [mf.so3_exp(rng.normal(size=3) * 0.5)]
    for _ in range(K - 1):
        rots.append(rots[-1] @ mf.so3_exp(rng.normal(size=3) * rot_step))
    trans = np.cumsum(rng.normal(size=(K, 3)) * trans_step, axis=0)
    return NonUniformSpline(times, np.stack(rots), trans, order=order)


def deboor_basis(times, j, order, t):
    """Textbook Cox-de Boor evaluation of N_{j,order} at scalar t
    (independent recursion used as the test oracle)."""
    if order == 1:
        return 1.0 if times[j] <= t < times[j + 1] else 0.0
    left = 0.0
    den = times[j + order - 1] - times[j]
    if den > 0:
        left = (t - times[j]) / den * deboor_basis(times, j, order - 1, t)
    right = 0.0
    den = times[j + order] - times[j + 1]
    if den > 0:
        right = (times[j + order] - t) / den * deboor_basis(times, j + 1, order - 1, t)
    return left + right


class UniformSpline:
    """Closed-form uniform cumulative spline, the equivalence oracle."""

    def __init__(self, dt_ns, t0_ns, rotations, translations, order):
        self.dt = int(dt_ns)
        self.t0 = int(t0_ns)
        self.R = rotations
        self.p = translations
        self.M = UNIFORM_CUMULATIVE[order]
        self.order = order

    def pose(self, t_ns):
        k = (int(t_ns) - self.t0) // self.dt
        u = (int(t_ns) - self.t0 - k * self.dt) / self.dt
        lam = self.M @ u ** np.arange(self.order)
        R = self.R[k].copy()
        p = self.p[k].copy()
        for n in range(1, self.order):
            d = mf.so3_log(self.R[k + n - 1].T @ self.R[k + n])
            R = R @ mf.so3_exp(lam[n] * d)
            p = p + lam[n] * (self.p[k + n] - self.p[k + n - 1])
        return mf.PoseSplit(R, p)


@pytest.mark.parametrize("order", [2, 3, 4])
def test_uniform_basis_matches_closed_form(order):
    times = (np.arange(10) * 37_000_000).astype(np.int64)
    M = cumulative_matrix(times, 4, order)
    assert np.abs(M - UNIFORM_CUMULATIVE[order]).max() < 1e-12


def test_linear_weights_are_one_and_u():
    times = np.cumsum(rng.integers(10**7, 10**8, size=8)).astype(np.int64)
    M = cumulative_matrix(times, 3, 2)
    assert np.allclose(M, [[1, 0], [0, 1]])


@pytest.mark.parametrize("order", [3, 4])
def test_nonuniform_basis_matches_deboor(order):
    # non-cumulative weights against the independent pointwise recursion
    times = np.cumsum(rng.integers(10**7, 3 * 10**8, size=12)).astype(np.int64)
    k = 5
    B = span_basis_polynomials(times, k, order)
    tf = times.astype(float)
    for u in (0.01, 0.3, 0.77, 0.99):
        t = tf[k] + u * (tf[k + 1] - tf[k])
        w = B @ u ** np.arange(order)
        for m in range(order):
            ref = deboor_basis(tf, k - order + 1 + m, order, t)
            assert abs(w[m] - ref) < 1e-10
        assert abs(w.sum() - 1.0) < 1e-12


def test_basis_only_uses_spec_stamps():
    # perturbing timestamps outside t_{k-N+2}..t_{k+N-1} leaves the matrix alone
    times = np.cumsum(rng.integers(10**7, 3 * 10**8, size=12)).astype(np.int64)
    k, order = 5, 3
    M0 = cumulative_matrix(times, k, order)
    t2 = times.copy()
    t2[k - order + 1] -= 5_000_000   # outside the stamp set
    t2[k + order] += 5_000_000
    assert np.array_equal(cumulative_matrix(t2, k, order), M0)
    t3 = times.copy()
    t3[k + order - 1] += 5_000_000   # inside the stamp set
    assert not np.array_equal(cumulative_matrix(t3, k, order), M0)


def test_partition_of_unity_row():
    spl = random_spline()
    M = spl._cache.get(spl.timeline, 4)
    assert M[0, 0] == 1.0 and np.all(M[0, 1:] == 0.0)


def test_nonincreasing_times_rejected():
    with pytest.raises(ValueError):
        NonUniformSpline(np.array([0, 10, 10, 20, 30], dtype=np.int64),
                         np.tile(np.eye(3), (5, 1, 1)), np.zeros((5, 3)), 3)


def test_constant_pose_spline():
    K = 7
    times = np.cumsum(rng.integers(10**7, 10**8, size=K)).astype(np.int64)
    R0 = mf.so3_exp(np.array([0.2, -0.1, 0.7]))
    p0 = np.array([1.0, -2.0, 3.0])
    spl = NonUniformSpline(times, np.tile(R0, (K, 1, 1)), np.tile(p0, (K, 1)), 3)
    lo, hi = spl.timeline.domain_ns()
    for t in np.linspace(lo, hi - 1, 7):
        P = spl.evaluate_pose(int(t))
        assert np.allclose(P.rotation, R0, atol=1e-12)
        assert np.allclose(P.translation, p0, atol=1e-12)
        r = spl.evaluate_derivatives(int(t))
        assert np.allclose(r.omega, 0, atol=1e-12)
        assert np.allclose(r.velocity, 0, atol=1e-12)


def test_domain_errors():
    spl = random_spline()
    lo, hi = spl.timeline.domain_ns()
    with pytest.raises(SplineDomainError):
        spl.evaluate_pose(lo - 10)
    with pytest.raises(SplineDomainError):
        spl.evaluate_pose(hi + 10)


@pytest.mark.parametrize("order", [2, 3, 4])
def test_uniform_equivalence(order):
    # the non-uniform implementation on uniform timings matches the closed form
    K = 10
    dt = 100_000_000
    times = (np.arange(K) * dt).astype(np.int64)
    spl = random_spline(order=order, K=K)
    spl2 = NonUniformSpline(times, spl.rotations, spl.translations, order)
    oracle = UniformSpline(dt, 0, spl.rotations, spl.translations, order)
    lo, hi = spl2.timeline.domain_ns()
    for t in np.linspace(lo, hi - 1, 23):
        P = spl2.evaluate_pose(int(t))
        Q = oracle.pose(int(t))
        assert np.abs(P.rotation - Q.rotation).max() < 1e-10
        assert np.abs(P.translation - Q.translation).max() < 1e-10


def test_screw_exactness_axis_through_origin():
    # a constant twist lies in the spline space (linear reproduction), shifted
    # by the Greville offset (N-2)/2 * dt of the leading-knot convention
    w = np.array([0.0, 0.0, 1.2])
    v = np.array([0.0, 0.0, 0.4])
    K = 10
    dt = 100_000_000
    times = (np.arange(K) * dt).astype(np.int64)
    rots = np.stack([mf.so3_exp(w * k * 0.1) for k in range(K)])
    trans = np.stack([v * k * 0.1 for k in range(K)])
    for order in (2, 3, 4):
        spl = NonUniformSpline(times, rots, trans, order)
        shift_s = (order - 2) / 2 * dt / 1e9
        lo, hi = spl.timeline.domain_ns()
        for t in np.linspace(lo, hi - 1, 11).astype(np.int64):
            s = int(t) / 1e9 + shift_s
            P = spl.evaluate_pose(int(t))
            assert np.abs(P.rotation - mf.so3_exp(w * s)).max() < 1e-10
            assert np.abs(P.translation - v * s).max() < 1e-10


def test_derivatives_match_finite_differences():
    h_ns = 10_000
    h = h_ns * 1e-9
    for order in (2, 3, 4):
        for _ in range(10):
            spl = random_spline(order=order, rot_step=0.3, trans_step=0.3)
            lo, hi = spl.timeline.domain_ns()
            t = int(rng.integers(lo + 5 * h_ns, hi - 5 * h_ns))
            r = spl.evaluate_derivatives(t)
            Pp = spl.evaluate_pose(t + h_ns)
            Pm = spl.evaluate_pose(t - h_ns)
            w_fd = mf.so3_log(Pm.rotation.T @ Pp.rotation) / (2 * h)
            v_fd = (Pp.translation - Pm.translation) / (2 * h)
            assert np.abs(r.omega - w_fd).max() < 1e-4 + 1e-4 * np.abs(w_fd).max()
            assert np.abs(r.velocity - v_fd).max() < 1e-4 + 1e-4 * np.abs(v_fd).max()
            if order >= 3:
                P0 = spl.evaluate_pose(t)
                a_fd = (Pp.translation - 2 * P0.translation + Pm.translation) / h**2
                rp = spl.evaluate_derivatives(t + h_ns)
                rm = spl.evaluate_derivatives(t - h_ns)
                aa_fd = (rp.omega - rm.omega) / (2 * h)
                assert np.abs(r.accel - a_fd).max() < 1e-3 * max(1.0, np.abs(a_fd).max())
                assert np.abs(r.ang_accel - aa_fd).max() < 1e-3 * max(1.0, np.abs(aa_fd).max())


def fd_knot_jacobian(spl, t, gk, quantity, h=1e-6):
    cols = []
    for c in range(6):
        tau = np.zeros(6)
        tau[c] = h

        def value(sign):
            s2 = NonUniformSpline(spl.timeline.times_ns, spl.rotations,
                                  spl.translations, spl.order)
            s2.set_knot(gk, mf.oplus(spl.knot(gk), sign * tau))
            if quantity == "pose":
                P = s2.evaluate_pose(t)
                return P
            return getattr(s2.evaluate_derivatives(t), quantity)

        if quantity == "pose":
            Pp, Pm = value(1.0), value(-1.0)
            d = np.concatenate([Pp.translation - Pm.translation,
                                mf.so3_log(Pp.rotation @ Pm.rotation.T)]) / (2 * h)
        else:
            d = (value(1.0) - value(-1.0)) / (2 * h)
        cols.append(d)
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("order", [2, 3, 4])
def test_knot_jacobians_match_fd(order):
    for _ in range(6):
        spl = random_spline(order=order, rot_step=0.3, trans_step=0.3)
        lo, hi = spl.timeline.domain_ns()
        t = int(rng.integers(lo + 1000, hi - 1000))
        kj = spl.knot_jacobians(t)
        for m in range(order):
            gk = kj.k0 + m
            J = np.zeros((6, 6))
            J[:3, :3] = kj.c[m] * np.eye(3)
            J[3:, 3:] = kj.JR[m]
            assert np.abs(J - fd_knot_jacobian(spl, t, gk, "pose")).max() < 1e-5
            Jw = np.zeros((3, 6))
            Jw[:, 3:] = kj.Jw[m]
            assert np.abs(Jw - fd_knot_jacobian(spl, t, gk, "omega")).max() < 1e-4
            Jv = np.zeros((3, 6))
            Jv[:, :3] = kj.cd[m] * np.eye(3)
            assert np.abs(Jv - fd_knot_jacobian(spl, t, gk, "velocity")).max() < 1e-4
            if order >= 3:
                Ja = np.zeros((3, 6))
                Ja[:, :3] = kj.cdd[m] * np.eye(3)
                assert np.abs(Ja - fd_knot_jacobian(spl, t, gk, "accel")).max() < 2e-3
                Jaa = np.zeros((3, 6))
                Jaa[:, 3:] = kj.Jaa[m]
                assert np.abs(Jaa - fd_knot_jacobian(spl, t, gk, "ang_accel")).max() < 2e-3


def test_knot_jacobian_local_support_zero():
    spl = random_spline(order=3, K=10)
    lo, hi = spl.timeline.domain_ns()
    t = int((lo + hi) // 2)
    kj = spl.knot_jacobians(t)
    support = set(range(kj.k0, kj.k0 + spl.order))
    outside = [i for i in range(spl.n_knots) if i not in support][0]
    # perturbing a knot outside the support leaves the value bit-identical
    P0 = spl.evaluate_pose(t)
    spl.set_knot(outside, mf.oplus(spl.knot(outside), np.full(6, 0.2)))
    P1 = spl.evaluate_pose(t)
    assert np.array_equal(P0.rotation, P1.rotation)
    assert np.array_equal(P0.translation, P1.translation)


def test_interpolation_endpoint_identity_jacobian_n2():
    K = 6
    times = (np.arange(K) * 0.1 * NS).astype(np.int64)
    spl = random_spline(order=2, K=K)
    spl2 = NonUniformSpline(times, spl.rotations, spl.translations, 2)
    t = int(times[3])  # exactly at a knot
    kj = spl2.knot_jacobians(t)
    m = 3 - kj.k0
    J = np.zeros((6, 6))
    J[:3, :3] = kj.c[m] * np.eye(3)
    J[3:, 3:] = kj.JR[m]
    assert np.abs(J - np.eye(6)).max() < 1e-12
    other = 1 - m
    assert abs(kj.c[other]) < 1e-12
    assert np.abs(kj.JR[other]).max() < 1e-12


def test_bias_spline_orders():
    K = 6
    times = (np.arange(K) * 0.1 * NS).astype(np.int64)
    acc = rng.normal(size=(K, 3))
    gyr = rng.normal(size=(K, 3))
    b1 = BiasSpline(times, acc, gyr, order=1)
    a, g = b1.evaluate(int(times[2]) + 5)
    assert np.allclose(a, acc[2]) and np.allclose(g, gyr[2])
    b2 = BiasSpline(times, acc, gyr, order=2)
    a, g = b2.evaluate(int(times[2]) + 50_000_000)
    assert np.allclose(a, 0.5 * (acc[2] + acc[3]))
    with pytest.raises(ValueError):
        BiasSpline(times, acc, gyr, order=3)


def make_window(order=3):
    return SplineWindow.bootstrap(10 * NS, NS // 10, mf.PoseSplit.identity(),
                                  order=order)


def test_window_bootstrap_and_epsilon():
    w = make_window()
    spl = w.spline
    assert spl.timeline.times_ns[w.newest_real_knot()] == 10 * NS + 1
    lo, hi = spl.timeline.domain_ns()
    assert lo <= 10 * NS - NS // 10 + 1 and hi > 10 * NS


def test_window_advance_regular():
    w = make_window()
    w.advance(int(10.1 * NS))
    times = w.spline.timeline.times_ns
    assert times[w.newest_real_knot()] == int(10.1 * NS) + 1
    # provisional spaced by the expected period
    assert times[-1] - times[-2] == NS // 10


def test_window_advance_irregular_and_cache_scope():
    w = make_window()
    w.advance(int(10.1 * NS))
    spl = w.spline
    # warm the basis cache over current intervals
    lo, hi = spl.timeline.domain_ns()
    for k in range(spl.timeline.first_interval(), spl.timeline.last_interval() + 1):
        spl._cache.get(spl.timeline, k)
    old_entries = {k: spl._cache.cached_entry(k)[1] for k in
                   range(spl.timeline.first_interval(), spl.timeline.last_interval() + 1)}
    fixed_rot = spl.rotations[:3].copy()
    w.advance(int(10.1 * NS + 1.3 * NS / 10))  # late scan: 1.3 * dt_e
    times = w.spline.timeline.times_ns
    newest = w.newest_real_knot()
    assert times[newest] == int(10.1 * NS + 1.3 * NS / 10) + 1
    # untouched old intervals keep their cached basis objects
    for k in range(spl.timeline.first_interval(), newest - spl.order):
        got = spl._cache.get(spl.timeline, k)
        if k in old_entries:
            assert got is old_entries[k]
    # fixed knots bit-identical
    assert np.array_equal(spl.rotations[:3], fixed_rot)


def test_window_advance_rejects_nonincreasing():
    w = make_window()
    w.advance(int(10.1 * NS))
    with pytest.raises(ValueError):
        w.advance(int(10.05 * NS))


def test_window_active_set_bounded():
    w = make_window()
    for i in range(5):
        w.advance(int((10.1 + 0.1 * i) * NS))
        assert len(w.active_knots()) <= w.max_active_knots
    assert len(w.active_intervals()) == w.window_scans


def test_conditioning_trend():
    fr_u, ka_u, kr_u = condition_analysis("uniform", n_sweep=40)
    fr_n, ka_n, kr_n = condition_analysis("nonuniform", n_sweep=40)
    ratio_u = ka_u / kr_u
    ratio_n = ka_n / kr_n
    mid = np.argmin(np.abs(fr_u - 0.5))
    assert abs(ratio_u[mid] - 1.0) < 0.5
    assert ratio_u[-1] > 100.0       # t_l -> t_{k+1}
    assert ratio_n.max() < 2.0

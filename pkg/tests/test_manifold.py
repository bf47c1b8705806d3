import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctlio import manifold as mf

rng = np.random.default_rng(0)


def random_tangent(max_angle=np.pi - 1e-3):
    tau = rng.normal(size=6)
    n = np.linalg.norm(tau[3:])
    if n > 0:
        tau[3:] *= rng.uniform(0.0, max_angle) / n
    return tau


def test_exp_identity():
    X = mf.exp(np.zeros(6))
    assert np.allclose(X.rotation, np.eye(3))
    assert np.allclose(X.translation, 0.0)


def test_exp_decoupled():
    tau = np.array([1.0, 0, 0, np.pi / 2, 0, 0])
    X = mf.exp(tau)
    assert np.allclose(X.translation, [1, 0, 0])
    expect = np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
    assert np.allclose(X.rotation, expect, atol=1e-12)


def test_exp_log_round_trip_bulk():
    for _ in range(1000):
        tau = random_tangent()
        assert np.linalg.norm(mf.log(mf.exp(tau)) - tau) < 1e-9


def test_log_identity_is_zero():
    assert np.allclose(mf.log(mf.PoseSplit.identity()), 0.0)


def test_log_near_pi():
    R = mf.so3_exp(np.array([0.0, 0.0, np.deg2rad(179.9)]))
    phi = mf.so3_log(R)
    assert np.allclose(phi, [0, 0, 3.139845], atol=1e-5)


def test_log_branch_continuity():
    # across the outer-product branch threshold the result stays smooth
    axis = np.array([0.3, -0.5, 0.8])
    axis /= np.linalg.norm(axis)
    angles = np.deg2rad(np.linspace(174.0, 176.0, 401))
    logs = np.array([mf.so3_log(mf.so3_exp(a * axis)) for a in angles])
    steps = np.linalg.norm(np.diff(logs, axis=0), axis=1)
    assert steps.max() < 2e-4


def test_small_angle_branch_continuity():
    axis = np.array([1.0, 0, 0])
    for scale in (0.9e-5, 1.1e-5):
        phi = axis * scale
        assert np.allclose(mf.so3_log(mf.so3_exp(phi)), phi, atol=1e-14)
        J = mf.jr_inv_so3(phi) @ mf.jr_so3(phi)
        assert np.allclose(J, np.eye(3), atol=1e-9)


def test_oplus_zero_and_identity():
    X = mf.exp(random_tangent())
    Y = mf.oplus(X, np.zeros(6))
    assert np.allclose(Y.rotation, X.rotation)
    assert np.allclose(Y.translation, X.translation)
    tau = random_tangent()
    Z = mf.oplus(mf.PoseSplit.identity(), tau)
    E = mf.exp(tau)
    assert np.allclose(Z.rotation, E.rotation)
    assert np.allclose(Z.translation, E.translation)


def test_oplus_ominus_inverse_pair():
    for _ in range(200):
        X = mf.exp(random_tangent(2.0))
        tau = random_tangent(2.0)
        got = mf.ominus(mf.oplus(X, tau), X)
        assert np.allclose(got, tau, atol=1e-10)


def test_adjoint_identity():
    A = mf.adjoint(mf.PoseSplit.identity())
    assert np.allclose(A, np.eye(6))


def test_adjoint_numeric_identity():
    # exp(Adj_X tau) == X exp(tau) X^-1, component-wise group ops
    for _ in range(100):
        X = mf.exp(random_tangent(2.5))
        tau = random_tangent(1.0)
        lhs = mf.exp(mf.adjoint(X) @ tau)
        R = X.rotation
        assert np.allclose(lhs.rotation, R @ mf.so3_exp(tau[3:]) @ R.T, atol=1e-10)
        assert np.allclose(lhs.translation, R @ tau[:3], atol=1e-10)


def test_right_jacobian_inverse_consistency():
    for _ in range(50):
        phi = rng.normal(size=3)
        phi *= rng.uniform(0, 3.0) / np.linalg.norm(phi)
        assert np.allclose(mf.jr_so3(phi) @ mf.jr_inv_so3(phi), np.eye(3), atol=1e-9)


def test_right_jacobian_inv_matches_finite_difference():
    # d Log(Exp(phi) Exp(d)) / d d at d=0 equals Jr^-1(phi)
    phi = np.array([0.3, 0.0, 0.0])
    h = 1e-6
    J = np.zeros((3, 3))
    for c in range(3):
        d = np.zeros(3)
        d[c] = h
        p = mf.so3_log(mf.so3_exp(phi) @ mf.so3_exp(d))
        m = mf.so3_log(mf.so3_exp(phi) @ mf.so3_exp(-d))
        J[:, c] = (p - m) / (2 * h)
    assert np.abs(J - mf.jr_inv_so3(phi)).max() < 1e-6


def test_slerp_endpoints_and_midpoint():
    times = np.array([0, 1_000_000_000], dtype=np.int64)
    rots = np.stack([np.eye(3), mf.so3_exp(np.array([0, 0, np.pi / 2]))])
    assert np.allclose(mf.slerp(times, rots, 0), np.eye(3))
    assert np.allclose(mf.slerp(times, rots, 1_000_000_000), rots[1])
    mid = mf.slerp(times, rots, 500_000_000)
    assert np.allclose(mf.so3_log(mid), [0, 0, np.pi / 4], atol=1e-12)


def test_slerp_constant_rate_ramp():
    rate = np.array([0.0, 0.0, 1.3])  # rad/s
    times = (np.arange(10) * 0.05e9).astype(np.int64)
    rots = np.stack([mf.so3_exp(rate * t / 1e9) for t in times])
    for t in np.linspace(0.01e9, 0.44e9, 17):
        R = mf.slerp(times, rots, int(t))
        w_est = mf.so3_log(R) / (t / 1e9)
        assert np.linalg.norm(w_est - rate) / np.linalg.norm(rate) < 0.01


def test_slerp_extrapolation_clamps():
    times = np.array([10, 20], dtype=np.int64)
    rots = np.stack([np.eye(3), mf.so3_exp(np.array([0.1, 0, 0]))])
    assert np.allclose(mf.slerp(times, rots, 0), rots[0])
    assert np.allclose(mf.slerp(times, rots, 100), rots[1])


def test_slerp_empty_errors():
    with pytest.raises(ValueError):
        mf.slerp(np.array([], dtype=np.int64), np.zeros((0, 3, 3)), 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
def test_exp_log_property(vals):
    tau = np.asarray(vals)
    n = np.linalg.norm(tau[3:])
    if n >= np.pi - 1e-3:
        tau[3:] *= (np.pi - 1e-2) / n
    assert np.linalg.norm(mf.log(mf.exp(tau)) - tau) < 1e-9


def test_quaternion_round_trip():
    for _ in range(100):
        R = mf.so3_exp(random_tangent()[3:])
        q = mf.rot_to_quat_wxyz(R)
        assert np.allclose(mf.quat_wxyz_to_rot(q), R, atol=1e-12)


def test_rigid_compose_inverse():
    X = mf.exp(random_tangent(2.0))
    Y = mf.exp(random_tangent(2.0))
    Z = X.compose(Y)
    back = X.inverse().compose(Z)
    assert np.allclose(back.rotation, Y.rotation, atol=1e-12)
    assert np.allclose(back.translation, Y.translation, atol=1e-12)
    pts = rng.normal(size=(10, 3))
    assert np.allclose(X.apply(Y.apply(pts)), Z.apply(pts), atol=1e-12)

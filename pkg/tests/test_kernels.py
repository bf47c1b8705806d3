import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctlio import kernels as K

rng = np.random.default_rng(2)


def rand_spd(n, lam_lo=0.05, lam_hi=5.0):
    lam = np.exp(rng.uniform(np.log(lam_lo), np.log(lam_hi), size=(n, 3)))
    Q, _ = np.linalg.qr(rng.normal(size=(n, 3, 3)))
    return np.einsum("nij,nj,nkj->nik", Q, lam, Q)


def test_vec_l_layout():
    A = np.arange(9, dtype=float).reshape(3, 3)
    A = 0.5 * (A + A.T)
    v = K.vec_l(A)
    assert v[0] == A[0, 0] and v[1] == A[1, 1] and v[2] == A[2, 2]
    assert v[4] == A[1, 0] and v[5] == A[2, 0] and v[6] == A[2, 1]
    assert v[3] == 0.0 and v[7] == 0.0


def test_vec_l_identity():
    assert np.array_equal(K.vec_l(np.eye(3)), [1, 1, 1, 0, 0, 0, 0, 0])


def test_vec_l_off_diagonal():
    A = np.eye(3)
    A[1, 0] = A[0, 1] = 0.5
    assert K.vec_l(A)[4] == 0.5


def test_round_trip_exact():
    covs = rand_spd(1000)
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))  # exactly symmetric
    v = K.vec_l(covs)
    assert np.array_equal(K.vec_l(K.sym_l(v)), v)
    assert np.array_equal(K.sym_l(K.vec_l(covs)), covs)


def test_vec_l_symmetry_check():
    A = np.eye(3)
    A[0, 1] = 0.5  # asymmetric
    with pytest.raises(ValueError):
        K.vec_l(A, check_symmetry=True)


def test_eigh3_matches_lapack():
    covs = rand_spd(20000)
    w, V = K.eigh3_sym(covs)
    wl, _ = np.linalg.eigh(covs)
    assert np.abs(w - wl).max() < 1e-10
    recon = np.einsum("nij,nj,nkj->nik", V, w, V)
    assert np.abs(recon - covs).max() < 1e-11
    orth = np.einsum("nij,nik->njk", V, V)
    assert np.abs(orth - np.eye(3)).max() < 1e-12


def test_rescale_planar_examples():
    out = K.sym_l(K.rescale_planar(K.vec_l(np.diag([1e-5, 1.0, 1.0])), 0.5))
    assert np.allclose(out, np.diag([1e-5, 0.25, 0.25]), atol=1e-15)
    out = K.sym_l(K.rescale_planar(K.vec_l(np.diag([0.01, 1.0, 1.0])), 0.5))
    assert np.allclose(out, np.diag([0.001, 0.25, 0.25]), atol=1e-15)


def test_rescale_planar_matches_naive():
    covs = rand_spd(20000)
    got = K.sym_l(K.rescale_planar(K.vec_l(covs), 0.5))
    ref = K.rescale_planar_naive(covs, 0.5)
    assert np.abs(got - ref).max() < 1e-12
    # outputs stay symmetric PSD
    w = np.linalg.eigvalsh(got)
    assert w.min() > 0


def test_rescale_lanes_stay_zero():
    covs = rand_spd(100)
    out = K.rescale_planar(K.vec_l(covs), 1.0)
    assert np.all(out[:, 3] == 0.0) and np.all(out[:, 7] == 0.0)


def test_rotate_cov_identity():
    covs = rand_spd(100)
    adds = rand_spd(100)
    Z = K.rot_kron_z(np.eye(3))
    got = K.sym_l(K.rotate_cov(Z, K.vec_l(covs), K.vec_l(adds)))
    assert np.abs(got - (covs + adds)).max() < 1e-14


def test_rotate_cov_axis_permutation():
    Rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    Z = K.rot_kron_z(Rz)
    got = K.sym_l(K.rotate_cov(Z, K.vec_l(np.diag([1.0, 2.0, 3.0]))))
    assert np.allclose(got, np.diag([2.0, 1.0, 3.0]), atol=1e-14)


def test_rotate_cov_matches_naive():
    from ctlio.manifold import so3_exp
    covs = rand_spd(20000)
    adds = rand_spd(20000)
    R = so3_exp(rng.normal(size=3))
    Z = K.rot_kron_z(R)
    got = K.sym_l(K.rotate_cov(Z, K.vec_l(covs), K.vec_l(adds)))
    ref = K.rotate_cov_naive(R, covs, adds)
    assert np.abs(got - ref).max() < 1e-12


def test_sym_inverse_examples():
    assert np.allclose(K.sym_l(K.sym_inverse(K.vec_l(np.eye(3)))), np.eye(3))
    got = K.sym_l(K.sym_inverse(K.vec_l(np.diag([2.0, 4.0, 8.0]))))
    assert np.allclose(got, np.diag([0.5, 0.25, 0.125]))


def test_sym_inverse_matches_lu():
    covs = rand_spd(20000)
    got = K.sym_l(K.sym_inverse(K.vec_l(covs)))
    ref = K.sym_inverse_naive(covs)
    assert np.abs(got - ref).max() < 1e-10


def test_sym_inverse_identity_product_conditioned():
    covs = rand_spd(20000, lam_lo=1e-2, lam_hi=1e2)  # cond up to 1e4
    inv = K.sym_l(K.sym_inverse(K.vec_l(covs)))
    err = np.abs(inv @ covs - np.eye(3)).max()
    assert err < 1e-8


def test_sym_inverse_singular_raises():
    with pytest.raises(K.SingularCovarianceError):
        K.sym_inverse(K.vec_l(np.zeros((3, 3))))


def test_mahalanobis_examples():
    assert K.mahalanobis_batch(np.zeros(3), K.vec_l(np.eye(3))) == 0.0
    got = K.mahalanobis_batch(np.array([1.0, 0, 0]), K.vec_l(np.diag([4.0, 1, 1])))
    assert np.allclose(got, 0.25)


def test_mahalanobis_matches_naive():
    covs = rand_spd(20000)
    d = rng.normal(size=(20000, 3))
    got = K.mahalanobis_batch(d, K.vec_l(covs))
    ref = K.mahalanobis_naive(d, covs)
    assert np.abs(got - ref).max() < 1e-10
    assert got.min() >= 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kernel_differential_property(seed):
    r = np.random.default_rng(seed)
    lam = np.exp(r.uniform(np.log(0.05), np.log(5.0), size=(64, 3)))
    Q, _ = np.linalg.qr(r.normal(size=(64, 3, 3)))
    covs = np.einsum("nij,nj,nkj->nik", Q, lam, Q)
    v = K.vec_l(covs)
    assert np.abs(K.sym_l(K.rescale_planar(v, 0.7))
                  - K.rescale_planar_naive(covs, 0.7)).max() < 1e-12
    assert np.abs(K.sym_l(K.sym_inverse(v)) - K.sym_inverse_naive(covs)).max() < 1e-10

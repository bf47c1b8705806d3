"""Lane-oriented covariance kernels with naive reference twins.

Symmetric 3x3 covariances are stored as 8-lane vectors

    vec_l(A) = [A00, A11, A22, 0, A10, A20, A21, 0]

which keeps diagonal and off-diagonal lanes aligned for vectorized math.
Every optimized kernel here has a `*_naive` twin used for differential
testing and for the benchmark CLI; the twins deliberately use generic
linear-algebra routines.

All kernels are pure and batched: inputs of shape (n, 8) or (n, 3, 3).
"""
from __future__ import annotations

import numpy as np

DET_FLOOR = 1e-18  # below this a lane-inverse input counts as singular


class SingularCovarianceError(ValueError):
    """Determinant below DET_FLOOR in an analytic inverse."""


# -- vec_l / sym_l ---------------------------------------------------------

def vec_l(A, check_symmetry: bool = False, tol: float = 1e-9):
    """Pack symmetric 3x3 matrices (n,3,3) into 8-lane vectors (n,8)."""
    A = np.asarray(A, dtype=float)
    squeeze = A.ndim == 2
    if squeeze:
        A = A[None]
    if check_symmetry and np.max(np.abs(A - np.swapaxes(A, -1, -2))) > tol:
        raise ValueError("input matrix is not symmetric within tolerance")
    out = np.zeros(A.shape[:-2] + (8,))
    out[..., 0] = A[..., 0, 0]
    out[..., 1] = A[..., 1, 1]
    out[..., 2] = A[..., 2, 2]
    out[..., 4] = A[..., 1, 0]
    out[..., 5] = A[..., 2, 0]
    out[..., 6] = A[..., 2, 1]
    return out[0] if squeeze else out


def sym_l(v):
    """Unpack 8-lane vectors back to symmetric 3x3 matrices."""
    v = np.asarray(v, dtype=float)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[None]
    A = np.empty(v.shape[:-1] + (3, 3))
    A[..., 0, 0] = v[..., 0]
    A[..., 1, 1] = v[..., 1]
    A[..., 2, 2] = v[..., 2]
    A[..., 1, 0] = A[..., 0, 1] = v[..., 4]
    A[..., 2, 0] = A[..., 0, 2] = v[..., 5]
    A[..., 2, 1] = A[..., 1, 2] = v[..., 6]
    return A[0] if squeeze else A


# -- closed-form symmetric 3x3 eigendecomposition ---------------------------

def _det3(M):
    return (M[:, 0, 0] * (M[:, 1, 1] * M[:, 2, 2] - M[:, 1, 2] * M[:, 2, 1])
            - M[:, 0, 1] * (M[:, 1, 0] * M[:, 2, 2] - M[:, 1, 2] * M[:, 2, 0])
            + M[:, 0, 2] * (M[:, 1, 0] * M[:, 2, 1] - M[:, 1, 1] * M[:, 2, 0]))


def _cross_rows(ax, ay, az, bx, by, bz):
    return ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx


def _null_vector_lanes(m0, m1, m2, m4, m5, m6, lam):
    """Best cross-product null vector of (A - lam I) per row, normalized."""
    r0x = m0 - lam
    r1y = m1 - lam
    r2z = m2 - lam
    cands = (
        _cross_rows(r0x, m4, m5, m4, r1y, m6),
        _cross_rows(r0x, m4, m5, m5, m6, r2z),
        _cross_rows(m4, r1y, m6, m5, m6, r2z),
    )
    norms = [cx * cx + cy * cy + cz * cz for cx, cy, cz in cands]
    best01 = norms[0] >= norms[1]
    best_a = np.where(best01, norms[0], norms[1])
    use_last = norms[2] > best_a
    out = np.empty((len(lam), 3))
    for i in range(3):
        first = np.where(best01, cands[0][i], cands[1][i])
        out[:, i] = np.where(use_last, cands[2][i], first)
    nv = np.sqrt(out[:, 0] ** 2 + out[:, 1] ** 2 + out[:, 2] ** 2)
    out /= np.maximum(nv, 1e-300)[:, None]
    return out


def _eigh3_lanes(v8, gap_rel_tol: float = 1e-2):
    """Lane-form symmetric 3x3 eigendecomposition, ascending eigenvalues."""
    m0, m1, m2 = v8[:, 0], v8[:, 1], v8[:, 2]
    m4, m5, m6 = v8[:, 4], v8[:, 5], v8[:, 6]
    q = (m0 + m1 + m2) / 3.0
    b0, b1, b2 = m0 - q, m1 - q, m2 - q
    p = np.sqrt(np.maximum(
        (b0 * b0 + b1 * b1 + b2 * b2 + 2.0 * (m4 * m4 + m5 * m5 + m6 * m6)) / 6.0, 0.0))
    detB = (b0 * (b1 * b2 - m6 * m6) - m4 * (m4 * b2 - m6 * m5)
            + m5 * (m4 * m6 - b1 * m5))
    r = np.clip(detB / np.maximum(2.0 * p ** 3, 1e-300), -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    big = q + 2.0 * p * np.cos(phi)
    sml = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    mid = 3.0 * q - big - sml
    w = np.empty((len(q), 3))
    w[:, 0] = sml
    w[:, 1] = mid
    w[:, 2] = big

    v0 = _null_vector_lanes(m0, m1, m2, m4, m5, m6, sml)
    v2 = _null_vector_lanes(m0, m1, m2, m4, m5, m6, big)
    v1 = np.cross(v2, v0)
    v1 /= np.maximum(np.linalg.norm(v1, axis=-1, keepdims=True), 1e-300)
    v2 = np.cross(v0, v1)
    V = np.stack([v0, v1, v2], axis=-1)

    scale = np.maximum(np.abs(big), np.abs(sml))
    gap = np.minimum(mid - sml, big - mid)
    bad = ~np.isfinite(gap) | (gap <= gap_rel_tol * np.maximum(scale, 1e-300))
    if np.any(bad):
        wb, Vb = np.linalg.eigh(sym_l(v8[bad]))
        w[bad] = wb
        V[bad] = Vb
    return w, V


def eigh3_sym(A, gap_rel_tol: float = 1e-2):
    """Eigendecomposition of symmetric 3x3 batches, ascending eigenvalues.

    Hybrid solver: trigonometric eigenvalues plus cross-product eigenvectors
    completed to an orthonormal frame; rows with a near-degenerate spectrum
    (relative gap below `gap_rel_tol`) fall back to LAPACK.
    """
    A = np.asarray(A, dtype=float)
    squeeze = A.ndim == 2
    if squeeze:
        A = A[None]
    w, V = _eigh3_lanes(vec_l(A), gap_rel_tol=gap_rel_tol)
    if squeeze:
        return w[0], V[0]
    return w, V


# -- planar covariance rescaling (eigenvalue clamp, Kronecker form) ----------

def planar_lambda(w, cell_size):
    """Clamped eigenvalues [min(l0, 1e-3), c/2, c/2] for planar surfels."""
    w = np.asarray(w, dtype=float)
    lam = np.empty_like(w)
    lam[..., 0] = np.minimum(w[..., 0], 0.001)
    lam[..., 1] = cell_size / 2.0
    lam[..., 2] = cell_size / 2.0
    return lam


def rescale_planar(cov8, cell_size):
    """Planar covariance rescale in lane form.

    Decomposes each covariance, clamps the spectrum via `planar_lambda` and
    reassembles vec_l(V diag(lam) V^T) directly from the stacked
    [(V*V)^T, 0, E_V^T, 0] lane matrix, so no 3x3 products are formed.
    """
    cov8 = np.asarray(cov8, dtype=float)
    squeeze = cov8.ndim == 1
    if squeeze:
        cov8 = cov8[None]
    w, V = _eigh3_lanes(cov8)
    lam = planar_lambda(w, cell_size)
    out = np.zeros(cov8.shape[:-1] + (8,))
    out[..., 0:3] = np.einsum("nij,nj->ni", V * V, lam)
    out[..., 4] = np.einsum("nj,nj->n", V[:, 0, :] * V[:, 1, :], lam)
    out[..., 5] = np.einsum("nj,nj->n", V[:, 0, :] * V[:, 2, :], lam)
    out[..., 6] = np.einsum("nj,nj->n", V[:, 1, :] * V[:, 2, :], lam)
    return out[0] if squeeze else out


def rescale_planar_naive(cov33, cell_size):
    """Reference twin: full eigendecomposition and V diag(lam) V^T rebuild."""
    cov33 = np.asarray(cov33, dtype=float)
    squeeze = cov33.ndim == 2
    if squeeze:
        cov33 = cov33[None]
    w, V = np.linalg.eigh(cov33)
    lam = planar_lambda(w, cell_size)
    out = np.einsum("nij,nj,nkj->nik", V, lam, V)
    return out[0] if squeeze else out


# -- rotated covariance via the 8x8 Z matrix ---------------------------------

_H1 = np.zeros((9, 8))
for _r, _lane in enumerate([0, 4, 5, 4, 1, 6, 5, 6, 2]):
    _H1[_r, _lane] = 1.0
_H2 = np.zeros((8, 9))
for _c, _lane in enumerate([0, 4, 5, None, 1, 6, None, None, 2]):
    if _lane is not None:
        _H2[_lane, _c] = 1.0


def rot_kron_z(R):
    """Z = H2 (R kron R) H1 so that vec_l(R S R^T) = Z vec_l(S).

    Constant per rotation, so callers precompute it once per evaluation time
    and reuse it across all surfels.
    """
    R = np.asarray(R, dtype=float)
    return _H2 @ np.kron(R, R) @ _H1


def rotate_cov(Z, cov8, add8=None):
    """vec_l(Sigma_m + R Sigma_s R^T) = Z vec_l(Sigma_s) + vec_l(Sigma_m)."""
    out = np.asarray(cov8, dtype=float) @ Z.T
    if add8 is not None:
        out = out + add8
    return out


def rotate_cov_naive(R, cov33, add33=None):
    out = np.einsum("ij,njk,lk->nil", R, np.asarray(cov33, dtype=float), R)
    if add33 is not None:
        out = out + add33
    return out


# -- analytic symmetric inverse ----------------------------------------------

def _cofactor_lanes(m):
    """Cofactor lanes of the analytic inverse, c = a0 * b0 - a1 * b1 in the
    paper-ordered layout [C00, C11, C22, C01, C02, C12], plus the determinant
    m0*c0 + m4*c3 + m5*c4."""
    m0, m1, m2 = m[..., 0], m[..., 1], m[..., 2]
    m4, m5, m6 = m[..., 4], m[..., 5], m[..., 6]
    c00 = m1 * m2 - m6 * m6
    c11 = m0 * m2 - m5 * m5
    c22 = m0 * m1 - m4 * m4
    c01 = m5 * m6 - m4 * m2
    c02 = m4 * m6 - m5 * m1
    c12 = m4 * m5 - m6 * m0
    det = m0 * c00 + m4 * c01 + m5 * c02
    return c00, c11, c22, c01, c02, c12, det


def sym_inverse(m8, det_floor: float = DET_FLOOR):
    """Analytic inverse of symmetric 3x3 matrices in lane form.

    One multiply plus one fused multiply-add per cofactor lane, a three-term
    dot for the determinant, one division.  Raises SingularCovarianceError
    when any |det| < det_floor.
    """
    m = np.asarray(m8, dtype=float)
    squeeze = m.ndim == 1
    if squeeze:
        m = m[None]
    c00, c11, c22, c01, c02, c12, det = _cofactor_lanes(m)
    if np.any(np.abs(det) < det_floor):
        raise SingularCovarianceError("determinant below floor in sym_inverse")
    out = np.zeros(m.shape)
    inv_det = 1.0 / det
    out[..., 0] = c00 * inv_det
    out[..., 1] = c11 * inv_det
    out[..., 2] = c22 * inv_det
    out[..., 4] = c01 * inv_det
    out[..., 5] = c02 * inv_det
    out[..., 6] = c12 * inv_det
    return out[0] if squeeze else out


def sym_inverse_naive(m33):
    return np.linalg.inv(np.asarray(m33, dtype=float))


# -- batched Mahalanobis -------------------------------------------------------

def mahalanobis_batch(d, covs8, det_floor: float = DET_FLOOR):
    """d^T Sigma^-1 d per row, with Sigma given in lane form.

    Works on the cofactor lanes directly so the inverse is never materialized.
    """
    d = np.asarray(d, dtype=float)
    m = np.asarray(covs8, dtype=float)
    c00, c11, c22, c01, c02, c12, det = _cofactor_lanes(m)
    if np.any(np.abs(det) < det_floor):
        raise SingularCovarianceError("determinant below floor in mahalanobis_batch")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    q = (x * (c00 * x + c01 * y + c02 * z)
         + y * (c01 * x + c11 * y + c12 * z)
         + z * (c02 * x + c12 * y + c22 * z))
    return q / det


def mahalanobis_naive(d, covs33):
    d = np.asarray(d, dtype=float)
    sol = np.linalg.solve(np.asarray(covs33, dtype=float), d[..., None])[..., 0]
    return np.einsum("...i,...i->...", d, sol)



"""Multi-resolution permutohedral-lattice surfel map.

Points are lifted into the d+1 = 4 dimensional zero-sum hyperplane, the
containing lattice simplex is located through the closest remainder-0 vertex,
and each point is assigned to the simplex vertex with the highest barycentric
weight.  Two embedding paths exist:

  * `embed_reference`: rank via stable argsort, barycentric coordinates via
    the classic scatter loop over remainders.
  * `embed_optimized`: rank via unrolled pairwise comparisons, then a
    three-stage min/max sorting network over rank-encoded indices followed by
    a gather, with barycentric weights as differences of neighboring sorted
    entries.

Both return identical integer keys; the optimized path is the production one
and the reference serves differential tests and the splat benchmark.

Keys are (d+1)-integer lattice coordinates summing to zero; surfel statistics
are accumulated anchored to the first point of each cell to avoid
cancellation at large coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import _eigh3_lanes, sym_l, vec_l

D = 3
DP1 = 4
_KEY_OFFSET = 1 << 15  # 16-bit lanes when packing 4 coords into a uint64


def elevation_matrix():
    """(d+1) x d lift matrix; columns sum to zero, scaled per lattice geometry."""
    s = np.array([DP1 / np.sqrt((j + 1) * (j + 2)) for j in range(D)])
    E = np.zeros((DP1, D))
    E[0] = s
    for i in range(1, DP1):
        E[i, i:] = s[i:]
        E[i, i - 1] = -i * s[i - 1]
    return E


_E = elevation_matrix()
_E_PINV = np.linalg.pinv(_E)


def elevate(points, inv_sigma: float):
    return (np.asarray(points, dtype=float) * inv_sigma) @ _E.T


def lattice_to_world(keys, sigma: float):
    """World position of lattice vertices (inverse of `elevate`)."""
    return (np.asarray(keys, dtype=float) @ _E_PINV.T) * sigma


def _round_remainder0(elevated):
    """Closest multiple-of-(d+1) vector per coordinate plus residuals."""
    v = elevated / DP1
    up = np.ceil(v) * DP1
    down = np.floor(v) * DP1
    greedy = np.where(up - elevated < elevated - down, up, down)
    return greedy.astype(np.int64)


def _apply_sum_correction(greedy, rank):
    """Project the rounded point back onto the zero-sum hyperplane."""
    s = greedy.sum(axis=1) // DP1
    pos = s > 0
    neg = s < 0
    if np.any(pos):
        fix = pos[:, None] & (rank >= (DP1 - s)[:, None])
        greedy[fix] -= DP1
        rank = rank + np.where(fix, s[:, None] - DP1, np.where(pos[:, None], s[:, None], 0))
    if np.any(neg):
        fix = neg[:, None] & (rank < (-s)[:, None])
        greedy[fix] += DP1
        rank = rank + np.where(fix, DP1 + s[:, None], np.where(neg[:, None], s[:, None], 0))
    return greedy, rank


def _vertex_for_remainder(greedy, rank, k):
    """Simplex vertex of remainder k (canonical offsets un-permuted by rank)."""
    k = np.asarray(k)
    if k.ndim == 0:
        k = np.full(len(greedy), int(k))
    return greedy + k[:, None] - DP1 * (rank >= (DP1 - k)[:, None])


def embed_reference(points, inv_sigma: float):
    """Reference embedding: argsort ranks and scatter-style barycentrics.

    Returns (keys (n,4) int64, weights (n,), bary (n,4), greedy, rank).
    """
    el = elevate(points, inv_sigma)
    greedy = _round_remainder0(el)
    res = el - greedy
    order = np.argsort(-res, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(DP1)[None, :].repeat(len(res), 0), axis=1)
    greedy, rank = _apply_sum_correction(greedy, rank)
    res = el - greedy

    n = len(el)
    b = np.zeros((n, DP1 + 1))
    rows = np.arange(n)
    for i in range(DP1):
        b[rows, D - rank[:, i]] += res[:, i] / DP1
        b[rows, DP1 - rank[:, i]] -= res[:, i] / DP1
    b[:, 0] += 1.0 + b[:, DP1]
    bary = b[:, :DP1]
    kstar = np.argmax(bary, axis=1)
    keys = _vertex_for_remainder(greedy, rank, kstar)
    return keys, bary[rows, kstar], bary, greedy, rank


def _rank_by_comparison(res):
    """Unrolled pairwise-comparison ranks; ties broken toward lower index."""
    n = len(res)
    rank = np.zeros((n, DP1), dtype=np.int64)
    for i in range(DP1):
        for j in range(i + 1, DP1):
            lt = res[:, i] < res[:, j]
            rank[:, i] += lt
            rank[:, j] += ~lt
    return rank


def _minmax_sort4(enc):
    """Three compare-exchange stages sorting each 4-block ascending."""
    a0, a1, a2, a3 = enc[:, 0], enc[:, 1], enc[:, 2], enc[:, 3]
    lo, hi = np.minimum(a0, a1), np.maximum(a0, a1)
    b2, b3 = np.minimum(a2, a3), np.maximum(a2, a3)
    a0, a1, a2, a3 = lo, hi, b2, b3
    lo, hi = np.minimum(a0, a2), np.maximum(a0, a2)
    c1, c3 = np.minimum(a1, a3), np.maximum(a1, a3)
    a0, a2, a1, a3 = lo, hi, c1, c3
    m1, m2 = np.minimum(a1, a2), np.maximum(a1, a2)
    return np.stack([a0, m1, m2, a3], axis=1)


def _minmax_sort4_rows(enc, work):
    """Three compare-exchange stages sorting the four rows of (4,n) ascending."""
    a0, a1, a2, a3 = enc
    w0, w1, w2, w3 = work
    lo01 = np.minimum(a0, a1, out=w0)
    hi01 = np.maximum(a0, a1, out=w1)
    lo23 = np.minimum(a2, a3, out=w2)
    hi23 = np.maximum(a2, a3, out=w3)
    r0 = np.minimum(lo01, lo23, out=a0)
    r2 = np.maximum(lo01, lo23, out=a2)
    m1 = np.minimum(hi01, hi23, out=a1)
    r3 = np.maximum(hi01, hi23, out=a3)
    r1 = np.minimum(m1, r2, out=w0)
    r2b = np.maximum(m1, r2, out=w1)
    return r0, r1, r2b, r3


def _embed_optimized_core(points, inv_sigma: float):
    """Shared body of the optimized embedding; returns transposed pieces."""
    el = np.asarray(points, dtype=float) @ (_E.T * inv_sigma)
    n = len(el)
    elT = np.ascontiguousarray(el.T)
    # half-down rounding to the nearest multiple of d+1 (same ties as reference)
    gT = elT * (1.0 / DP1)
    np.subtract(gT, 0.5, out=gT)
    np.ceil(gT, out=gT)
    np.multiply(gT, float(DP1), out=gT)
    resT = elT
    np.subtract(elT, gT, out=resT)
    greedyT = gT.astype(np.int32)

    # unrolled pairwise-comparison ranks, ties toward lower index
    rankT = np.zeros((DP1, n), dtype=np.int32)
    for i in range(DP1):
        for j in range(i + 1, DP1):
            lt = resT[i] < resT[j]
            rankT[i] += lt
            rankT[j] += ~lt

    # zero-sum correction.  After adding the row sum s, rank overflow (>= d+1)
    # can only occur for s > 0 and underflow (< 0) only for s < 0, so the
    # repair is branch-free arithmetic on ranks, keys and residuals alike.
    s = greedyT.sum(axis=0, dtype=np.int32)
    s //= DP1
    rankT += s
    adj = (rankT < 0).astype(np.int32)
    adj -= rankT >= DP1
    adj *= DP1
    rankT += adj
    greedyT += adj
    resT -= adj

    # encode the original index in the low two bits behind the rank, sort each
    # 4-block with the min/max network, then gather residuals in rank order
    enc = rankT << 2
    enc |= np.arange(DP1, dtype=np.int32)[:, None]
    work = np.empty((DP1, n), dtype=np.int32)
    enc_sorted = _minmax_sort4_rows(enc, work)
    flat = resT.reshape(-1)
    base = np.arange(n, dtype=np.int64)
    z = []
    for e in enc_sorted:
        idx = (e & (DP1 - 1)).astype(np.int64)
        idx *= n
        idx += base
        z.append(flat[idx])

    # barycentric weights are differences of neighboring sorted residuals
    b = [1.0 + (z[D] - z[0]) / DP1]
    for k in range(1, DP1):
        b.append((z[D - k] - z[DP1 - k]) / DP1)
    kstar = np.zeros(n, dtype=np.int32)
    best = b[0].copy()
    for k in range(1, DP1):
        better = b[k] > best
        kstar[better] = k
        np.maximum(best, b[k], out=best)
    greedyT += kstar
    greedyT -= (rankT >= (DP1 - kstar)).astype(np.int32) * DP1
    return greedyT, best


def embed_optimized(points, inv_sigma: float):
    """Optimized embedding: comparison ranks, min/max network, gathered
    barycentrics from neighboring differences.  Key-identical to the
    reference path; coordinate-major layout keeps every pass contiguous.
    """
    keysT, best = _embed_optimized_core(points, inv_sigma)
    return keysT.T.astype(np.int64), best


def embed_optimized_packed(points, inv_sigma: float):
    """Production variant returning packed uint64 keys directly."""
    keysT, best = _embed_optimized_core(points, inv_sigma)
    lo = int(keysT.min())
    hi = int(keysT.max())
    if lo + _KEY_OFFSET < 0 or hi + _KEY_OFFSET >= (1 << 16):
        raise ValueError("lattice key out of packable range")
    out = (keysT[0].astype(np.int64) + _KEY_OFFSET).view(np.uint64) << np.uint64(48)
    out |= (keysT[1].astype(np.int64) + _KEY_OFFSET).view(np.uint64) << np.uint64(32)
    out |= (keysT[2].astype(np.int64) + _KEY_OFFSET).view(np.uint64) << np.uint64(16)
    out |= (keysT[3].astype(np.int64) + _KEY_OFFSET).view(np.uint64)
    return out, best


def embed_point(p, sigma: float):
    """Single-point convenience wrapper: (key, barycentric weight)."""
    keys, w = embed_optimized(np.asarray(p, dtype=float)[None, :], 1.0 / sigma)
    return keys[0], float(w[0])


def pack_keys(keys):
    """Pack (n,4) small integer keys into uint64 group ids."""
    k = np.asarray(keys, dtype=np.int64) + _KEY_OFFSET
    if np.any((k < 0) | (k >= (1 << 16))):
        raise ValueError("lattice key out of packable range")
    k = k.view(np.uint64)
    out = k[:, 0] << np.uint64(48)
    out |= k[:, 1] << np.uint64(32)
    out |= k[:, 2] << np.uint64(16)
    out |= k[:, 3]
    return out


def unpack_keys(packed):
    p = np.asarray(packed, dtype=np.uint64)
    out = np.empty((len(p), DP1), dtype=np.int64)
    for i, sh in enumerate((48, 32, 16, 0)):
        out[:, i] = ((p >> np.uint64(sh)) & np.uint64(0xFFFF)).astype(np.int64) - _KEY_OFFSET
    return out


# -- surfel tables ---------------------------------------------------------

@dataclass
class SurfelTable:
    """Column-wise surfel statistics of one (cell size, segment) table."""

    cell_size: float
    segment: int                  # -1 for unsegmented (map/keyframe) tables
    packed: np.ndarray            # (m,) uint64, ascending
    count: np.ndarray             # (m,)
    mean: np.ndarray              # (m,3)
    cov8: np.ndarray              # (m,8) lane covariances
    mean_time_ns: np.ndarray      # (m,) int64
    view_dir: np.ndarray          # (m,3) unit mean view direction
    col_offset: np.ndarray        # (m,) count-weighted mean column offset

    def __len__(self):
        return len(self.packed)

    @property
    def keys(self):
        return unpack_keys(self.packed)

    # tables are immutable after construction, so derived spectral quantities
    # are computed once and cached
    def eig(self):
        cached = getattr(self, "_eig", None)
        if cached is None:
            cached = _eigh3_lanes(self.cov8)
            object.__setattr__(self, "_eig", cached)
        return cached

    def normals(self):
        cached = getattr(self, "_normals", None)
        if cached is None:
            _, V = self.eig()
            n = V[:, :, 0].copy()
            flip = np.einsum("ij,ij->i", n, self.view_dir) > 0
            n[flip] = -n[flip]
            cached = n
            object.__setattr__(self, "_normals", cached)
        return cached

    def planarity(self):
        cached = getattr(self, "_planarity", None)
        if cached is None:
            w, _ = self.eig()
            cached = w[:, 0] / np.maximum(w[:, 1], 1e-300)
            object.__setattr__(self, "_planarity", cached)
        return cached

    def lookup(self, packed_queries):
        """Row index per query or -1 when the cell is absent."""
        idx = np.searchsorted(self.packed, packed_queries)
        idx = np.clip(idx, 0, len(self.packed) - 1)
        ok = len(self.packed) > 0
        if not ok:
            return np.full(len(packed_queries), -1)
        hit = self.packed[idx] == packed_queries
        return np.where(hit, idx, -1)


def _accumulate(packed, pstats, cell_size, segment, t_origin_ns):
    """Single-pass anchored moment accumulation via sort plus segment reduce.

    `pstats` is the (n, 8) per-point matrix [p(3), view_dir(3), dt, column].
    The first point of each cell anchors the second moments, which keeps the
    fused multiply-add covariance accumulation safe at large coordinates.
    """
    n = len(packed)
    order = np.argsort(packed)
    sp = packed[order]
    boundary = np.empty(n, dtype=bool)
    boundary[0] = True
    np.not_equal(sp[1:], sp[:-1], out=boundary[1:])
    starts = np.flatnonzero(boundary)
    uniq = sp[starts]
    ends = np.empty(len(starts), dtype=np.int64)
    ends[:-1] = starts[1:]
    ends[-1] = n
    cnt = (ends - starts).astype(float)
    m = len(uniq)

    W = pstats[order]
    anchor = W[starts, :3].copy()
    delta = W[:, :3]
    delta -= np.repeat(anchor, ends - starts, axis=0)
    prod = np.empty((n, 6))
    prod[:, 0] = delta[:, 0] * delta[:, 0]
    prod[:, 1] = delta[:, 1] * delta[:, 1]
    prod[:, 2] = delta[:, 2] * delta[:, 2]
    prod[:, 3] = delta[:, 1] * delta[:, 0]
    prod[:, 4] = delta[:, 2] * delta[:, 0]
    prod[:, 5] = delta[:, 2] * delta[:, 1]
    sums = np.add.reduceat(W, starts, axis=0)
    sums /= cnt[:, None]
    psums = np.add.reduceat(prod, starts, axis=0)
    psums /= cnt[:, None]
    mu_rel = sums[:, :3]
    cov8 = np.zeros((m, 8))
    for lane, col, (i, j) in zip((0, 1, 2, 4, 5, 6), range(6),
                                 [(0, 0), (1, 1), (2, 2), (1, 0), (2, 0), (2, 1)]):
        cov8[:, lane] = psums[:, col] - mu_rel[:, i] * mu_rel[:, j]
    mean = anchor + mu_rel

    vn = np.sqrt(sums[:, 3] ** 2 + sums[:, 4] ** 2 + sums[:, 5] ** 2)
    vdir = sums[:, 3:6] / np.maximum(vn, 1e-300)[:, None]
    mean_time = t_origin_ns + np.round(sums[:, 6]).astype(np.int64)
    coff = sums[:, 7]
    return SurfelTable(cell_size, segment, uniq, cnt, mean, cov8,
                       mean_time, vdir, coff)


def splat_scan(points, times_ns, columns, cell_sizes, view_origin=None,
               segment_times_ns=None, sigma_scale: float = 1.0,
               use_reference: bool = False, level_to_point: bool = True):
    """Embed one scan into per-(cell size, segment) surfel tables.

    `cell_sizes` lists the resolutions (meters); the lattice scale is
    sigma_scale * cell_size.  With `segment_times_ns` given, points are
    grouped to their nearest segment and separate tables are built per
    segment.  `level_to_point` iterates levels outer / points inner (the
    L->P order); the transpose order exists for the benchmark CLI.
    """
    points = np.asarray(points, dtype=float)
    times_ns = np.asarray(times_ns, dtype=np.int64)
    columns = np.asarray(columns)
    if view_origin is None:
        view_origin = np.zeros(3)
    t_origin = int(times_ns[0]) if len(times_ns) else 0
    pstats = np.empty((len(points), 8))
    pstats[:, :3] = points
    vd = points - view_origin
    vd /= np.maximum(np.linalg.norm(vd, axis=1, keepdims=True), 1e-300)
    pstats[:, 3:6] = vd
    pstats[:, 6] = (times_ns - t_origin).astype(float)
    pstats[:, 7] = columns.astype(float)

    if segment_times_ns is None:
        seg_idx = np.full(len(points), -1)
        seg_ids = [-1]
    else:
        seg_times = np.asarray(segment_times_ns, dtype=np.int64)
        seg_idx = np.argmin(np.abs(times_ns[:, None] - seg_times[None, :]), axis=1)
        seg_ids = list(range(len(seg_times)))

    tables = {}
    if level_to_point:
        chunks = [np.arange(len(points))]
    else:
        step = 65536
        chunks = [np.arange(i, min(i + step, len(points)))
                  for i in range(0, len(points), step)]

    per_level_packed = {c: np.empty(len(points), dtype=np.uint64) for c in cell_sizes}
    for chunk in chunks:
        for c in cell_sizes:
            if use_reference:
                keys = embed_reference(points[chunk], 1.0 / (sigma_scale * c))[0]
                per_level_packed[c][chunk] = pack_keys(keys)
            else:
                per_level_packed[c][chunk] = embed_optimized_packed(
                    points[chunk], 1.0 / (sigma_scale * c))[0]

    for c in cell_sizes:
        packed = per_level_packed[c]
        for s in seg_ids:
            if s == -1:
                tables[(c, s)] = _accumulate(packed, pstats, c, s, t_origin)
                continue
            sel = np.nonzero(seg_idx == s)[0]
            if len(sel) == 0:
                continue
            tables[(c, s)] = _accumulate(packed[sel], pstats[sel], c, s, t_origin)
    return tables


def splat_scan_naive(points, times_ns, columns, cell_sizes, view_origin=None,
                     segment_times_ns=None, sigma_scale: float = 1.0):
    """Naive twin: reference embedding plus scatter-style two-pass moments.

    Kept deliberately unoptimized (argsort ranks, np.add.at scatters, separate
    mean and covariance passes) as the benchmark baseline and test oracle.
    """
    points = np.asarray(points, dtype=float)
    times_ns = np.asarray(times_ns, dtype=np.int64)
    columns = np.asarray(columns)
    if view_origin is None:
        view_origin = np.zeros(3)
    vd = points - view_origin
    vd /= np.maximum(np.linalg.norm(vd, axis=1, keepdims=True), 1e-300)
    t_origin = int(times_ns[0]) if len(times_ns) else 0

    if segment_times_ns is None:
        seg_idx = np.full(len(points), -1)
        seg_ids = [-1]
    else:
        seg_times = np.asarray(segment_times_ns, dtype=np.int64)
        seg_idx = np.argmin(np.abs(times_ns[:, None] - seg_times[None, :]), axis=1)
        seg_ids = list(range(len(seg_times)))

    tables = {}
    for c in cell_sizes:
        keys, _, _, _, _ = embed_reference(points, 1.0 / (sigma_scale * c))
        packed = pack_keys(keys)
        for s in seg_ids:
            sel = np.nonzero(seg_idx == s)[0] if s != -1 else np.arange(len(points))
            if len(sel) == 0:
                continue
            pk = packed[sel]
            uniq, inverse = np.unique(pk, return_inverse=True)
            m = len(uniq)
            cnt = np.zeros(m)
            np.add.at(cnt, inverse, 1.0)
            mean = np.zeros((m, 3))
            np.add.at(mean, inverse, points[sel])
            mean /= cnt[:, None]
            dc = points[sel] - mean[inverse]
            outer = np.zeros((m, 3, 3))
            np.add.at(outer, inverse, dc[:, :, None] * dc[:, None, :])
            outer /= cnt[:, None, None]
            cov8 = vec_l(outer)
            mtime = np.zeros(m)
            np.add.at(mtime, inverse, (times_ns[sel] - t_origin).astype(float))
            mtime = t_origin + np.round(mtime / cnt).astype(np.int64)
            vsum = np.zeros((m, 3))
            np.add.at(vsum, inverse, vd[sel])
            vsum /= np.maximum(np.linalg.norm(vsum, axis=1, keepdims=True), 1e-300)
            coff = np.zeros(m)
            np.add.at(coff, inverse, columns[sel].astype(float))
            coff /= cnt
            tables[(c, s)] = SurfelTable(c, s, uniq, cnt, mean, cov8, mtime,
                                         vsum, coff)
    return tables


def fuse_tables(tables, cell_size, segment=-1):
    """Cell-wise fusion of surfel tables sharing one resolution.

    Inputs are (packed keys, table) pairs where keys are already expressed in
    the common lattice (keyframe shifts applied by the caller).
    """
    if not tables:
        return SurfelTable(cell_size, segment, np.empty(0, np.uint64),
                           np.empty(0), np.empty((0, 3)), np.empty((0, 8)),
                           np.empty(0, np.int64), np.empty((0, 3)), np.empty(0))
    packed = np.concatenate([pk for pk, _ in tables])
    cnt = np.concatenate([t.count for _, t in tables])
    mean = np.concatenate([t.mean for _, t in tables])
    cov8 = np.concatenate([t.cov8 for _, t in tables])
    mtime = np.concatenate([t.mean_time_ns for _, t in tables]).astype(float)
    vdir = np.concatenate([t.view_dir for _, t in tables])
    coff = np.concatenate([t.col_offset for _, t in tables])

    uniq, inverse = np.unique(packed, return_inverse=True)
    m = len(uniq)
    n12 = np.bincount(inverse, weights=cnt, minlength=m)
    musum = np.stack([np.bincount(inverse, weights=cnt * mean[:, i], minlength=m)
                      for i in range(3)], axis=1)
    mu12 = musum / n12[:, None]
    # E[p p^T] recombination in lanes
    lanes = [(0, 0, 0), (1, 1, 1), (2, 2, 2), (4, 1, 0), (5, 2, 0), (6, 2, 1)]
    cov12 = np.zeros((m, 8))
    for lane, i, j in lanes:
        m2 = cov8[:, lane] + mean[:, i] * mean[:, j]
        acc = np.bincount(inverse, weights=cnt * m2, minlength=m) / n12
        cov12[:, lane] = acc - mu12[:, i] * mu12[:, j]
    t12 = np.bincount(inverse, weights=cnt * mtime, minlength=m) / n12
    v12 = np.stack([np.bincount(inverse, weights=cnt * vdir[:, i], minlength=m)
                    for i in range(3)], axis=1)
    v12 /= np.maximum(np.linalg.norm(v12, axis=1, keepdims=True), 1e-300)
    c12 = np.bincount(inverse, weights=cnt * coff, minlength=m) / n12
    return SurfelTable(cell_size, segment, uniq, n12, mu12, cov12,
                       np.round(t12).astype(np.int64), v12, c12)


# -- keyframes and the multi-resolution map ----------------------------------

@dataclass
class Keyframe:
    kf_id: int
    created_ns: int
    pose_rotation: np.ndarray
    pose_translation: np.ndarray
    coarse_cell: float
    shift_coarse: np.ndarray            # (4,) int, lattice key at coarse_cell
    tables: dict                        # cell_size -> SurfelTable (rel keys)

    def shift_at(self, cell_size):
        factor = self.coarse_cell / cell_size
        f = int(round(factor))
        if abs(factor - f) > 1e-9:
            return None
        return self.shift_coarse * f

    def common_packed(self, cell_size):
        tab = self.tables.get(cell_size)
        sh = self.shift_at(cell_size)
        if tab is None or sh is None:
            return None, None
        return pack_keys(tab.keys + sh[None, :]), tab


@dataclass
class MapConfig:
    levels: int = 4
    coarse_choices: tuple = (2.0, 4.0)
    coarse_switch_dist: float = 3.0
    ewma_gamma: float = 0.1
    sigma_scale: float = 1.0
    max_local_keyframes: int = 10


class MultiResMap:
    """Keyframe store plus IoU-selected local surfel map."""

    def __init__(self, config: MapConfig | None = None, coarse0: float = 4.0):
        self.config = config or MapConfig()
        self.coarse = coarse0
        self.mean_dist = None
        self.keyframes: list[Keyframe] = []
        self._next_id = 0

    def cell_sizes(self, coarse=None):
        c0 = self.coarse if coarse is None else coarse
        return [c0 * 2.0 ** (-l) for l in range(self.config.levels)]

    def adapt_coarse_size(self, scan_mean_distance: float):
        """EWMA-filtered mean surfel distance drives the coarse cell size."""
        g = self.config.ewma_gamma
        if self.mean_dist is None:
            self.mean_dist = float(scan_mean_distance)
        else:
            self.mean_dist = (1.0 - g) * self.mean_dist + g * float(scan_mean_distance)
        lo, hi = self.config.coarse_choices
        new = hi if self.mean_dist >= self.config.coarse_switch_dist else lo
        changed = new != self.coarse
        self.coarse = new
        return new, changed

    @staticmethod
    def keyframe_decision(associated_fraction: float) -> bool:
        return associated_fraction < 0.8

    def insert_keyframe(self, points, times_ns, columns, pose, created_ns):
        """Embed a compensated scan (map frame) locally at the closest coarse
        vertex and store it with the lattice-aligned shift."""
        origin = pose.translation
        shift, _ = embed_point(origin, self.config.sigma_scale * self.coarse)
        anchor_world = lattice_to_world(shift[None, :],
                                        self.config.sigma_scale * self.coarse)[0]
        local_pts = np.asarray(points, dtype=float) - anchor_world
        tables = splat_scan(local_pts, times_ns, columns, self.cell_sizes(),
                            view_origin=origin - anchor_world,
                            sigma_scale=self.config.sigma_scale)
        tabs = {c: tables[(c, -1)] for c in self.cell_sizes() if (c, -1) in tables}
        kf = Keyframe(self._next_id, int(created_ns), pose.rotation.copy(),
                      pose.translation.copy(), self.coarse,
                      shift.astype(np.int64), tabs)
        # stored means/views are lattice-local; lift them back to map frame
        for tab in kf.tables.values():
            tab.mean = tab.mean + anchor_world
        self.keyframes.append(kf)
        self._next_id += 1
        return kf.kf_id

    def coarsest_common_cell(self):
        sizes = None
        for kf in self.keyframes:
            s = set(kf.tables.keys()) & set(self.cell_sizes())
            sizes = s if sizes is None else (sizes & s)
        if not sizes:
            return None
        return max(sizes)

    def select_local_map(self, scan_origin, scan_coarse_packed):
        """Local map from up to F keyframes: closest third by distance, the
        rest gated by lattice-index IoU against the current scan, oldest
        first.  Returns dict cell_size -> fused SurfelTable (common keys)."""
        F = self.config.max_local_keyframes
        if not self.keyframes:
            return {}
        order = sorted(self.keyframes,
                       key=lambda kf: (np.linalg.norm(kf.pose_translation - scan_origin),
                                       kf.created_ns))
        selected = list(order[:max(F // 3, 0)])
        chosen = {kf.kf_id for kf in selected}
        cc = self.coarsest_common_cell()
        rest = []
        for kf in self.keyframes:
            if kf.kf_id in chosen or cc is None:
                continue
            pk, _ = kf.common_packed(cc)
            if pk is None or len(scan_coarse_packed) == 0:
                continue
            inter = len(np.intersect1d(pk, scan_coarse_packed, assume_unique=False))
            union = len(np.union1d(pk, scan_coarse_packed))
            iou = inter / union if union else 0.0
            if iou > 0.0:
                rest.append((kf.created_ns, kf.kf_id, kf))
        rest.sort(key=lambda t: (t[0], t[1]))  # oldest first
        for _, _, kf in rest:
            if len(selected) >= F:
                break
            selected.append(kf)
            chosen.add(kf.kf_id)

        local = {}
        for c in self.cell_sizes():
            pieces = []
            for kf in selected:
                pk, tab = kf.common_packed(c)
                if pk is not None:
                    pieces.append((pk, tab))
            if pieces:
                local[c] = fuse_tables(pieces, c)
        return local

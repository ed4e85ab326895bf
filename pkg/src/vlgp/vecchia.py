"""Vecchia factorization: ordering, neighbor sets, sparse factors, gradients.

The factorization approximates a GP prior N(0, Sigma) on n points by a
directed model b_i | b_{N(i)} ~ N(A_i b_{N(i)}, D_i) with N(i) a set of at
most m earlier points in a permutation.  Collecting the coefficients in a
unit-lower-triangular sparse B (row i holds -A_i at columns N(i)) and the
conditional variances in a diagonal D gives the sparse precision
SigmaTilde^{-1} = B^T D^{-1} B.

Everything in this module works in the permuted ("factor") order; callers
reorder data once via ``factor.perm`` and map results back with
``factor.iperm``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .covariance import (
    K_RHO,
    K_SIGMA2,
    Locations,
    matern_from_dist,
    matern_grad_from_dist,
)
from .errors import ConfigError, DataError, FactorizationError

BRUTE_FORCE_MAX_N = 4096
D_FLOOR_REL = 1e-10
_CHUNK = 2048


def order_random(n, seed):
    """Uniformly random permutation of [0, n), reproducible from ``seed``."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    return np.random.default_rng(seed).permutation(n)


def _nearest_preceding(dists, i, m):
    """Indices of the m smallest entries of ``dists`` (length i), ties by index."""
    take = min(i, m)
    if take == i:
        cand = np.arange(i)
    else:
        part = np.argpartition(dists, take - 1)[:take]
        thr = dists[part].max()
        cand = np.flatnonzero(dists <= thr)
    order = np.lexsort((cand, dists[cand]))
    return cand[order][:take]


def find_neighbors(locs, perm, m):
    """Nearest-preceding-neighbor sets along the permuted ordering.

    For permuted position i the set N(i) holds the min(i, m) points among
    positions 0..i-1 closest in Euclidean distance, ties broken by the
    smaller permuted index.  Brute force below 4096 points, k-d tree with a
    growing candidate window above (exact up to equal-distance ties at the
    window boundary, which have measure zero for continuous coordinates).
    """
    coords = locs.coords if isinstance(locs, Locations) else np.atleast_2d(locs)
    coords = coords[np.asarray(perm, dtype=int)]
    n = coords.shape[0]
    if m < 0:
        raise ConfigError("m must be >= 0")
    neighbors = [np.empty(0, dtype=int) for _ in range(n)]
    if m == 0 or n == 1:
        return neighbors

    n_brute = n if n <= BRUTE_FORCE_MAX_N else BRUTE_FORCE_MAX_N
    for i in range(1, n_brute):
        d = cdist(coords[i : i + 1], coords[:i])[0]
        neighbors[i] = _nearest_preceding(d, i, m)

    if n_brute < n:
        tree = cKDTree(coords)
        pending = np.arange(n_brute, n)
        k = min(n, 2 * m + 16)
        while pending.size:
            dd, ii = tree.query(coords[pending], k=k)
            counts = (ii < pending[:, None]).sum(axis=1)
            done = (counts >= m) | (k >= n)
            for row in np.flatnonzero(done):
                i = int(pending[row])
                mask = ii[row] < i
                cand, cd = ii[row][mask], dd[row][mask]
                order = np.lexsort((cand, cd))
                neighbors[i] = cand[order][: min(i, m)].astype(int)
            pending = pending[~done]
            k = min(n, 2 * k)
    return neighbors


def _submatrices(spec, coords, nb_idx, points):
    """Kernel blocks for a chunk of rows sharing one neighbor count.

    Returns (K, k_i, r_nn, r_ni): neighbor-set kernel matrices (c, j, j),
    cross vectors (c, j), and the distance arrays they came from.
    """
    pts = coords[nb_idx]  # (c, j, d)
    diff = pts[:, :, None, :] - pts[:, None, :, :]
    r_nn = np.sqrt(np.einsum("cjkd,cjkd->cjk", diff, diff))
    dxi = pts - points[:, None, :]
    r_ni = np.sqrt(np.einsum("cjd,cjd->cj", dxi, dxi))
    return matern_from_dist(spec, r_nn), matern_from_dist(spec, r_ni), r_nn, r_ni


def _chol_or_report(K, row_ids):
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        for local, K_i in enumerate(K):
            try:
                np.linalg.cholesky(K_i)
            except np.linalg.LinAlgError:
                raise FactorizationError(
                    f"neighbor covariance submatrix of point {row_ids[local]} is "
                    "not positive definite (near-duplicate locations?)"
                ) from None
        raise


@dataclass
class VecchiaGradient:
    """theta_k-derivatives of the factor: dB (pattern of B's off-diagonal), dD."""

    dB: sp.csr_matrix
    dD: np.ndarray
    k: int


class VecchiaFactor:
    """Immutable Vecchia factor (B, D) with triangular-solve machinery."""

    def __init__(self, coords, spec, neighbors, perm, B, D, m):
        self.coords = coords
        self.spec = spec
        self.neighbors = neighbors
        self.perm = np.asarray(perm, dtype=int)
        self.iperm = np.argsort(self.perm)
        self.B = B.tocsr()
        self._B_csc = B.tocsc()
        self.D = D
        self.m = m
        self._lu = None
        # scratch for theta-only derived quantities (low-rank factors,
        # covariance diagonals) reused across Newton/gradient steps
        self.cache = {}

    @property
    def n(self):
        return self.D.shape[0]

    @property
    def lu(self):
        # B is unit lower triangular: SuperLU with the natural ordering
        # factors it trivially and gives C-speed solves with B and B^T.
        if self._lu is None:
            self._lu = splu(
                self._B_csc, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                options={"SymmetricMode": False},
            )
        return self._lu

    def solve_B(self, v, transpose=False):
        """B^{-1} v, or B^{-T} v when ``transpose``; v may be a matrix."""
        return self.lu.solve(np.asarray(v, dtype=float), trans="T" if transpose else "N")

    def apply_precision(self, v):
        """(B^T D^{-1} B) v via two sparse matvecs."""
        t = self.B @ np.asarray(v, dtype=float)
        if t.ndim == 1:
            t /= self.D
        else:
            t /= self.D[:, None]
        return self.B.T @ t

    def apply_sigma_tilde(self, v):
        """SigmaTilde v = B^{-1} D B^{-T} v via two triangular solves."""
        x = self.solve_B(v, transpose=True)
        if x.ndim == 1:
            x = x * self.D
        else:
            x = x * self.D[:, None]
        return self.solve_B(x)

    def logdet_sigma_tilde(self):
        """log det SigmaTilde = sum_i log D_i."""
        return float(np.log(self.D).sum())

    def diag_sigma_tilde(self, batch=1024):
        """Exact diagonal of SigmaTilde via batched solves with B^T.

        Costs O(n^2 m / batch-efficiency); intended for desk-scale n where
        the diagonally preconditioned prediction path needs it.
        """
        n = self.n
        out = np.empty(n)
        for a in range(0, n, batch):
            b = min(a + batch, n)
            E = np.zeros((n, b - a))
            E[np.arange(a, b), np.arange(b - a)] = 1.0
            X = self.solve_B(E, transpose=True)
            out[a:b] = np.einsum("j,jc->c", self.D, X**2)
        return out

    def dense_sigma_tilde(self):
        """Materialize SigmaTilde (tests and small-n oracles only)."""
        Binv = self.solve_B(np.eye(self.n))
        return (Binv * self.D) @ Binv.T


def build_factor(locs, spec, neighbors, perm=None):
    """Assemble the sparse factor (B, D) from neighbor sets.

    Rows are grouped by neighbor count and processed with batched Cholesky
    factorizations of the (at most m x m) neighbor covariance submatrices,
    so the O(n m^3) work runs at BLAS speed.

    Raises
    ------
    FactorizationError
        If a neighbor submatrix is not positive definite or a conditional
        variance D_i falls below 1e-10 * sigma2 (near-duplicate inputs are
        reported, not jittered away).
    """
    coords = locs.coords if isinstance(locs, Locations) else np.atleast_2d(locs)
    if perm is None:
        perm = np.arange(coords.shape[0])
    perm = np.asarray(perm, dtype=int)
    coords = coords[perm]
    n = coords.shape[0]
    if len(neighbors) != n:
        raise ConfigError("neighbor sets must have one entry per point")

    sizes = np.array([len(nb) for nb in neighbors])
    m = int(sizes.max()) if n else 0
    D = np.full(n, spec.sigma2)
    rows_idx = [np.empty(0, int)] * n
    rows_val = [np.empty(0, float)] * n

    for j in np.unique(sizes):
        if j == 0:
            continue
        ids = np.flatnonzero(sizes == j)
        for a in range(0, ids.size, _CHUNK):
            chunk = ids[a : a + _CHUNK]
            nb_idx = np.stack([neighbors[i] for i in chunk])
            K, k_i, _, _ = _submatrices(spec, coords, nb_idx, coords[chunk])
            _chol_or_report(K, chunk)
            A = np.linalg.solve(K, k_i[..., None])[..., 0]
            D[chunk] = spec.sigma2 - np.einsum("cj,cj->c", k_i, A)
            for local, i in enumerate(chunk):
                rows_idx[i] = nb_idx[local]
                rows_val[i] = -A[local]

    bad = np.flatnonzero(D < D_FLOOR_REL * spec.sigma2)
    if bad.size:
        i = int(bad[0])
        raise FactorizationError(
            f"conditional variance D_{i} = {D[i]:.3e} below "
            f"{D_FLOOR_REL:g} * sigma2 for point {perm[i]} (near-duplicate inputs)"
        )

    indptr = np.zeros(n + 1, dtype=int)
    indptr[1:] = np.cumsum(sizes + 1)
    indices = np.empty(indptr[-1], dtype=int)
    data = np.empty(indptr[-1])
    for i in range(n):
        lo, hi = indptr[i], indptr[i + 1]
        indices[lo : hi - 1] = rows_idx[i]
        data[lo : hi - 1] = rows_val[i]
        indices[hi - 1] = i
        data[hi - 1] = 1.0
    B = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    return VecchiaFactor(coords, spec, neighbors, perm, B, D, m)


def factor_gradient(factor, k):
    """d B / d theta_k and d D / d theta_k with the pattern of B.

    For the marginal variance the coefficients A_i are scale invariant, so
    dB = 0 and dD = D / sigma2.  For the range parameter the chain rule on
    A_i = Sigma_{i,N} Sigma_N^{-1} gives
    dA = (dk - dK a)^T Sigma_N^{-1} and dD = dc(0) - dA k - A dk.
    """
    spec = factor.spec
    n = factor.n
    zero_pattern = k == K_SIGMA2
    if k not in (K_SIGMA2, K_RHO):
        raise ConfigError(f"parameter index must be 0 or 1, got {k}")

    if zero_pattern:
        dB = factor.B.copy()
        dB.data = np.zeros_like(dB.data)
        dB.setdiag(0.0)
        return VecchiaGradient(dB.tocsr(), factor.D / spec.sigma2, k)

    coords = factor.coords
    neighbors = factor.neighbors
    sizes = np.array([len(nb) for nb in neighbors])
    dD = np.full(n, matern_grad_from_dist(spec, 0.0, k))
    rows_val = [np.empty(0, float)] * n

    for j in np.unique(sizes):
        if j == 0:
            continue
        ids = np.flatnonzero(sizes == j)
        for a in range(0, ids.size, _CHUNK):
            chunk = ids[a : a + _CHUNK]
            nb_idx = np.stack([neighbors[i] for i in chunk])
            K, k_i, r_nn, r_ni = _submatrices(spec, coords, nb_idx, coords[chunk])
            dK = matern_grad_from_dist(spec, r_nn, k)
            dk = matern_grad_from_dist(spec, r_ni, k)
            A = np.linalg.solve(K, k_i[..., None])[..., 0]
            rhs = dk - np.einsum("cjk,ck->cj", dK, A)
            dA = np.linalg.solve(K, rhs[..., None])[..., 0]
            dD[chunk] += -np.einsum("cj,cj->c", dA, k_i) - np.einsum(
                "cj,cj->c", A, dk
            )
            for local, i in enumerate(chunk):
                rows_val[i] = -dA[local]

    B = factor.B
    data = np.zeros_like(B.data)
    for i in range(n):
        lo, hi = B.indptr[i], B.indptr[i + 1]
        data[lo : hi - 1] = rows_val[i]
    dB = sp.csr_matrix((data, B.indices.copy(), B.indptr.copy()), shape=(n, n))
    return VecchiaGradient(dB, dD, k)


def apply_dprecision(factor, grad, v):
    """(d SigmaTilde^{-1} / d theta_k) v from the factor derivatives.

    d(B^T D^{-1} B) = dB^T D^{-1} B + B^T D^{-1} dB - B^T D^{-1} dD D^{-1} B.
    Accepts a vector or a matrix of columns.
    """
    B, dB, D, dD = factor.B, grad.dB, factor.D, grad.dD
    v = np.asarray(v, dtype=float)
    col = (slice(None), None) if v.ndim == 2 else slice(None)
    Bv = B @ v
    dBv = dB @ v
    out = dB.T @ (Bv / D[col])
    out += B.T @ (dBv / D[col])
    out -= B.T @ ((dD / D**2)[col] * Bv)
    return out


def quad_dprecision(factor, grad, v):
    """v^T (d SigmaTilde^{-1} / d theta_k) v without materializing anything."""
    Bv = factor.B @ v
    dBv = grad.dB @ v
    return float(2.0 * (dBv / factor.D) @ Bv - (grad.dD / factor.D**2) @ Bv**2)


@dataclass
class PredictionBlocks:
    """Blocks of the joint train+prediction Vecchia precision.

    Prediction points condition only on training points, so Bp is the
    identity and the conditional mean/variance reduce to
    nu_p = F_p - Bpo b*  and  Xi_p = diag(Dp).
    """

    Bpo: sp.csr_matrix
    Dp: np.ndarray
    neighbors: list

    @property
    def n_p(self):
        return self.Dp.shape[0]

    def bp_solve(self, v, transpose=False):
        return np.asarray(v, dtype=float)

    def conditional_mean_term(self, b):
        """-Bp^{-1} Bpo b, the data-dependent part of the predictive mean."""
        return -(self.Bpo @ b)

    def rhs_matrix(self):
        """Bpo^T Bp^{-T} as a sparse n x n_p matrix (CG right-hand sides)."""
        return self.Bpo.T.tocsc()


def prediction_blocks(factor, pred_locs, m=None, spec=None):
    """Vecchia blocks linking n_p prediction points to a trained factor.

    Each prediction point conditions on its min(m, n) nearest training
    points (in factor coordinates).  A prediction point that coincides with
    a training point within 1e-12 is rejected.
    """
    spec = factor.spec if spec is None else spec
    m = factor.m if m is None else m
    pred = pred_locs.coords if isinstance(pred_locs, Locations) else np.atleast_2d(pred_locs)
    n, n_p = factor.n, pred.shape[0]
    if m < 1:
        raise ConfigError("prediction requires m >= 1")
    if n_p == 0:
        return PredictionBlocks(sp.csr_matrix((0, n)), np.empty(0), [])

    tree = cKDTree(factor.coords)
    take = min(m, n)
    k_query = min(n, take + 8)
    dd, ii = tree.query(pred, k=k_query)
    dd = np.atleast_2d(dd)
    ii = np.atleast_2d(ii)
    if np.any(dd[:, 0] <= 1e-12):
        bad = int(np.argmin(dd[:, 0]))
        raise DataError(
            f"prediction point {bad} duplicates training point {ii[bad, 0]}"
        )
    neighbors = []
    for row in range(n_p):
        order = np.lexsort((ii[row], dd[row]))
        neighbors.append(ii[row][order][:take].astype(int))

    Dp = np.empty(n_p)
    rows_val = []
    nb_all = np.stack(neighbors)
    for a in range(0, n_p, _CHUNK):
        b = min(a + _CHUNK, n_p)
        nb_idx = nb_all[a:b]
        K, k_i, _, _ = _submatrices(spec, factor.coords, nb_idx, pred[a:b])
        _chol_or_report(K, np.arange(a, b))
        A = np.linalg.solve(K, k_i[..., None])[..., 0]
        Dp[a:b] = spec.sigma2 - np.einsum("cj,cj->c", k_i, A)
        rows_val.extend(-A[i] for i in range(b - a))

    indptr = np.arange(0, (n_p + 1) * take, take)
    Bpo = sp.csr_matrix(
        (np.concatenate(rows_val), nb_all.ravel(), indptr), shape=(n_p, n)
    )
    return PredictionBlocks(Bpo, Dp, neighbors)


def make_factor(locs, spec, m, ordering_seed):
    """Convenience: random ordering, neighbor search, factor assembly."""
    locs = locs if isinstance(locs, Locations) else Locations(locs)
    perm = order_random(locs.n, ordering_seed)
    neighbors = find_neighbors(locs, perm, m)
    return build_factor(locs, spec, neighbors, perm)

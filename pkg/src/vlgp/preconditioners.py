"""Preconditioners for the latent-model system matrices.

Variants preconditioning W + SigmaTilde^{-1} (solve form "eq4"):

* ``vadu`` / ``l1`` -- B^T (W + D^{-1}) B, the Vecchia factor with the
  likelihood curvature folded into the diagonal;
* ``lva``           -- B^T D^{-1} B, the prior precision itself;
* ``diag``          -- diagonal of W + B^T D^{-1} B;
* ``pchol-precision`` -- W + L_k L_k^T with L_k a pivoted Cholesky factor
  of the precision;
* ``rowsel``        -- W + B_k^T D_k^{-1} B_k over the k rows maximizing
  sum_i D_ii^{-1} sum_j B_ij^2;
* ``identity``.

Variants preconditioning SigmaTilde + W^{-1} (solve form "eq5"):

* ``lrac`` -- L_k L_k^T + W^{-1} with L_k a pivoted Cholesky factor of the
  original covariance (not the Vecchia approximation, whose entries are
  slow to materialize);
* ``l2``   -- diagonal of SigmaTilde + W^{-1}.

Every variant supports exact solves, log-determinants, and sampling from
N(0, P).  Symmetric factors P = P^{1/2} P^{T/2} are available where the
Lanczos prediction path needs them (vadu/l1, lva, l2, identity).
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, cholesky

from .covariance import matern_from_dist
from .errors import CapabilityError, ConfigError, FactorizationError
from scipy.spatial.distance import cdist

#: variants whose natural linear system is SigmaTilde + W^{-1} (eq5/eq7)
EQ5_VARIANTS = ("lrac", "l2")


def _colscale(v, d):
    v = np.asarray(v, dtype=float)
    return v * d if v.ndim == 1 else v * d[:, None]


class Preconditioner:
    name = "base"

    def __init__(self, n):
        self.n = n

    def solve(self, b):
        raise NotImplementedError

    def matvec(self, v):
        raise NotImplementedError

    def logdet(self):
        raise NotImplementedError

    def sample_block(self, t, rng):
        """Draw t columns from N(0, P)."""
        raise CapabilityError(f"{self.name} does not support sampling")

    def sample(self, seed):
        return sample_vector(self, seed)

    def sym_factor_apply(self, v, transpose=False, inverse=False):
        raise CapabilityError(
            f"{self.name} has no symmetric factor; use vadu/l1, lva, l2 or identity"
        )

    def dense(self):
        """Materialize P column by column (tests and small-n oracles)."""
        return self.matvec(np.eye(self.n))


def sample_vector(P, seed):
    return P.sample_block(1, np.random.default_rng(seed))[:, 0]


class IdentityPreconditioner(Preconditioner):
    name = "identity"

    def solve(self, b):
        return np.array(b, dtype=float, copy=True)

    def matvec(self, v):
        return np.array(v, dtype=float, copy=True)

    def logdet(self):
        return 0.0

    def sample_block(self, t, rng):
        return rng.standard_normal((self.n, t))

    def sym_factor_apply(self, v, transpose=False, inverse=False):
        return np.array(v, dtype=float, copy=True)


class TriangularSandwichPreconditioner(Preconditioner):
    """P = B^T diag(d) B for the Vecchia triangle B; covers vadu/l1 and lva."""

    def __init__(self, factor, d, name):
        super().__init__(factor.n)
        self.factor = factor
        self.d = d
        self.name = name
        self._sqrt_d = np.sqrt(d)

    def solve(self, b):
        x = self.factor.solve_B(b, transpose=True)
        return self.factor.solve_B(_colscale(x, 1.0 / self.d))

    def matvec(self, v):
        return self.factor.B.T @ _colscale(self.factor.B @ np.asarray(v, float), self.d)

    def logdet(self):
        return float(np.log(self.d).sum())

    def sample_block(self, t, rng):
        return self.factor.B.T @ _colscale(rng.standard_normal((self.n, t)), self._sqrt_d)

    def sym_factor_apply(self, v, transpose=False, inverse=False):
        # P^{1/2} = B^T diag(sqrt(d)), so P = P^{1/2} P^{T/2}.
        if not inverse:
            if transpose:
                return _colscale(self.factor.B @ np.asarray(v, float), self._sqrt_d)
            return self.factor.B.T @ _colscale(v, self._sqrt_d)
        if transpose:
            return self.factor.solve_B(_colscale(v, 1.0 / self._sqrt_d))
        return _colscale(self.factor.solve_B(v, transpose=True), 1.0 / self._sqrt_d)


class DiagonalPreconditioner(Preconditioner):
    # the symmetric factor is exposed only for the prediction variant (l2);
    # the estimation-side diagonal (P1) deliberately reports no factor so the
    # Lanczos prediction path cannot be pointed at it
    def __init__(self, d, name, expose_sym_factor=False):
        super().__init__(d.shape[0])
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise FactorizationError(f"{name} diagonal must be positive and finite")
        self.d = d
        self.name = name
        self.expose_sym_factor = expose_sym_factor
        self._sqrt_d = np.sqrt(d)

    def solve(self, b):
        return _colscale(b, 1.0 / self.d)

    def matvec(self, v):
        return _colscale(v, self.d)

    def logdet(self):
        return float(np.log(self.d).sum())

    def sample_block(self, t, rng):
        return _colscale(rng.standard_normal((self.n, t)), self._sqrt_d)

    def sym_factor_apply(self, v, transpose=False, inverse=False):
        if not self.expose_sym_factor:
            return super().sym_factor_apply(v, transpose, inverse)
        s = 1.0 / self._sqrt_d if inverse else self._sqrt_d
        return _colscale(v, s)


class LowRankPlusDiagonalPreconditioner(Preconditioner):
    """P = U U^T + diag(e), solved with the Woodbury identity.

    log det(P) = sum log e + log det(I_k + U^T diag(1/e) U) by the matrix
    determinant lemma.  Covers lrac (U = L_k from Sigma, e = 1/W),
    pchol-precision (U = L_k from the precision, e = W) and rowsel
    (U = B_k^T D_k^{-1/2}, e = W).
    """

    def __init__(self, U, e, name):
        super().__init__(e.shape[0])
        if np.any(e <= 0) or not np.all(np.isfinite(e)):
            raise FactorizationError(f"{name} diagonal part must be positive and finite")
        self.U = U
        self.e = e
        self.name = name
        self.k = U.shape[1]
        Ue = self._scale_rows(U, 1.0 / e)
        UtUe = U.T @ Ue
        if sp.issparse(UtUe):
            UtUe = UtUe.toarray()
        M = np.eye(self.k) + UtUe
        self._M_cho = cho_factor(M, lower=True)
        self._logdet_M = 2.0 * float(np.log(np.diag(self._M_cho[0])).sum())

    @staticmethod
    def _scale_rows(U, s):
        if sp.issparse(U):
            return sp.diags(s) @ U
        return U * s[:, None]

    def solve(self, b):
        x = _colscale(b, 1.0 / self.e)
        y = self.U.T @ x
        w = cho_solve(self._M_cho, np.asarray(y))
        return x - _colscale(self.U @ w, 1.0 / self.e)

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        return self.U @ (self.U.T @ v) + _colscale(v, self.e)

    def logdet(self):
        return float(np.log(self.e).sum()) + self._logdet_M

    def sample_block(self, t, rng):
        g_n = rng.standard_normal((self.n, t))
        g_k = rng.standard_normal((self.k, t))
        return _colscale(g_n, np.sqrt(self.e)) + self.U @ g_k


class DensePreconditioner(Preconditioner):
    """Exact preconditioner wrapping a dense SPD matrix (oracles, tests)."""

    name = "dense"

    def __init__(self, M, name="dense"):
        super().__init__(M.shape[0])
        self.M = np.asarray(M, dtype=float)
        self.name = name
        self._L = cholesky(self.M, lower=True)

    def solve(self, b):
        return cho_solve((self._L, True), np.asarray(b, dtype=float))

    def matvec(self, v):
        return self.M @ np.asarray(v, dtype=float)

    def logdet(self):
        return 2.0 * float(np.log(np.diag(self._L)).sum())

    def sample_block(self, t, rng):
        return self._L @ rng.standard_normal((self.n, t))

    def sym_factor_apply(self, v, transpose=False, inverse=False):
        v = np.asarray(v, dtype=float)
        from scipy.linalg import solve_triangular

        if not inverse:
            return (self._L.T @ v) if transpose else (self._L @ v)
        return solve_triangular(self._L, v, lower=True, trans="T" if transpose else "N")


class SigmaAccessor:
    """Diagonal/row access to the original covariance matrix."""

    def __init__(self, spec, coords):
        self.spec = spec
        self.coords = coords
        self.n = coords.shape[0]

    def diag(self):
        return np.full(self.n, self.spec.sigma2)

    def row(self, i):
        r = cdist(self.coords[i : i + 1], self.coords)[0]
        return matern_from_dist(self.spec, r)


class PrecisionAccessor:
    """Diagonal/row access to SigmaTilde^{-1} = B^T D^{-1} B."""

    def __init__(self, factor):
        self.factor = factor
        self.n = factor.n
        B = factor.B
        rows = np.repeat(np.arange(self.n), np.diff(B.indptr))
        self._diag = np.bincount(
            B.indices, weights=B.data**2 / factor.D[rows], minlength=self.n
        )

    def diag(self):
        return self._diag.copy()

    def row(self, i):
        col = np.zeros(self.n)
        B_csc = self.factor._B_csc
        lo, hi = B_csc.indptr[i], B_csc.indptr[i + 1]
        col[B_csc.indices[lo:hi]] = B_csc.data[lo:hi]
        return self.factor.B.T @ (col / self.factor.D)


def pivoted_cholesky_with_pivots(accessor, k, tol=0.0):
    """Greedy rank-k pivoted Cholesky factor plus the pivot sequence.

    Pivots on the largest remaining diagonal entry (ties to the lowest
    index); stops early when the remaining trace drops below ``tol`` or a
    pivot is exhausted.  An updated diagonal entry below -1e-10 means the
    accessor does not represent a PSD matrix.
    """
    d = np.asarray(accessor.diag(), dtype=float).copy()
    n = d.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"rank k must be in [1, {n}], got {k}")
    L = np.zeros((n, k))
    pivots = []
    for j in range(k):
        if d.min() < -1e-10:
            raise FactorizationError(
                f"pivoted Cholesky: diagonal went negative ({d.min():.3e}); input not PSD"
            )
        np.clip(d, 0.0, None, out=d)
        if d.sum() <= tol:
            return L[:, :j], np.array(pivots, dtype=int)
        p = int(np.argmax(d))
        if d[p] <= 0.0:
            return L[:, :j], np.array(pivots, dtype=int)
        col = accessor.row(p) - L[:, :j] @ L[p, :j]
        col /= np.sqrt(d[p])
        col[p] = np.sqrt(d[p])
        L[:, j] = col
        d -= col**2
        d[p] = 0.0
        pivots.append(p)
    return L, np.array(pivots, dtype=int)


def pivoted_cholesky(accessor, k, tol=0.0):
    """Rank-k pivoted Cholesky factor (see pivoted_cholesky_with_pivots)."""
    return pivoted_cholesky_with_pivots(accessor, k, tol)[0]


def _precision_diag(factor):
    return PrecisionAccessor(factor).diag()


def _rowsel_scores(factor):
    B, D = factor.B, factor.D
    rowsq = np.add.reduceat(B.data**2, B.indptr[:-1])
    return rowsq / D


def build(variant, factor, W, k=None, pchol_tol=0.0):
    """Construct a preconditioner by name for the current factor and W.

    ``k`` is required for the low-rank variants (lrac, pchol-precision,
    rowsel).  W may contain zeros for variants that never invert it.
    """
    n = factor.n
    W = np.asarray(W, dtype=float)
    if W.shape != (n,):
        raise ConfigError("W must be a length-n diagonal")
    if np.any(W < 0):
        raise ConfigError("W must be nonnegative")

    if variant == "identity":
        return IdentityPreconditioner(n)
    if variant in ("vadu", "l1"):
        return TriangularSandwichPreconditioner(factor, W + 1.0 / factor.D, variant)
    if variant == "lva":
        return TriangularSandwichPreconditioner(factor, 1.0 / factor.D, variant)
    if variant == "diag":
        return DiagonalPreconditioner(W + _precision_diag(factor), variant)
    if variant == "l2":
        return DiagonalPreconditioner(
            factor.diag_sigma_tilde() + 1.0 / W, variant, expose_sym_factor=True
        )

    if variant in ("lrac", "pchol-precision", "rowsel"):
        if k is None:
            k = default_rank(n)
        if not 1 <= k <= n:
            raise ConfigError(f"rank k must be in [1, {n}], got {k}")
        if variant == "lrac":
            L = pivoted_cholesky(SigmaAccessor(factor.spec, factor.coords), k, pchol_tol)
            return LowRankPlusDiagonalPreconditioner(L, 1.0 / W, variant)
        if variant == "pchol-precision":
            L = pivoted_cholesky(PrecisionAccessor(factor), k, pchol_tol)
            return LowRankPlusDiagonalPreconditioner(L, W, variant)
        scores = _rowsel_scores(factor)
        order = np.lexsort((np.arange(n), -scores))
        S_k = np.sort(order[:k])
        B_k = factor.B[S_k]
        U = B_k.T @ sp.diags(1.0 / np.sqrt(factor.D[S_k]))
        P = LowRankPlusDiagonalPreconditioner(U.tocsr(), W, variant)
        P.rows = S_k
        return P

    raise ConfigError(
        f"unknown preconditioner {variant!r}; choose from vadu, lva, lrac, diag, "
        "pchol-precision, rowsel, identity, l1, l2"
    )


def default_rank(n):
    """Default low-rank size: 200 scaled by n/1e4, clamped to [20, 200]."""
    return int(np.clip(np.ceil(200 * min(1.0, n / 1e4)), 20, 200))

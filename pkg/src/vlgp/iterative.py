"""Matrix-free iterative kernels: PCG, partial Lanczos, SLQ, trace estimators.

The conjugate gradient solver records the coefficients alpha_l, beta_l and
rebuilds from them the Lanczos tridiagonal matrix of the preconditioned
operator P^{-1/2} A P^{-T/2}; running the solver on probe vectors
z ~ N(0, P) therefore yields both the solves A^{-1} z needed by trace
estimators and the quadrature matrices needed by stochastic Lanczos
quadrature, in one pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import BreakdownError, ConfigError

#: default CG convergence tolerance (relative two-norm of the residual)
CG_TOL_DEFAULT = 10.0 ** (-1.5)
CG_MAX_ITER_DEFAULT = 1000


class MatvecOperator:
    """Symmetric operator defined by a matvec closure."""

    def __init__(self, n, matvec):
        self.n = n
        self._matvec = matvec

    def matvec(self, v):
        return self._matvec(v)


def as_operator(obj, n=None):
    if hasattr(obj, "matvec") and hasattr(obj, "n"):
        return obj
    if callable(obj):
        if n is None:
            raise ConfigError("callable operators need an explicit dimension")
        return MatvecOperator(n, obj)
    A = np.asarray(obj, dtype=float)
    return MatvecOperator(A.shape[0], lambda v: A @ v)


@dataclass
class Tridiag:
    """Symmetric tridiagonal matrix stored as (diagonal, off-diagonal)."""

    diag: np.ndarray
    off: np.ndarray

    @property
    def order(self):
        return self.diag.shape[0]

    def eigh(self):
        if self.order == 0:
            return np.empty(0), np.empty((0, 0))
        if self.order == 1:
            return self.diag.copy(), np.ones((1, 1))
        if not (np.all(np.isfinite(self.diag)) and np.all(np.isfinite(self.off))):
            raise BreakdownError("non-finite Lanczos coefficients")
        try:
            return eigh_tridiagonal(self.diag, self.off)
        except np.linalg.LinAlgError:
            # stemr can fail on near-degenerate clusters; the generic dense
            # driver is slower but robust
            from scipy.linalg import eigh as dense_eigh

            try:
                return dense_eigh(self.dense())
            except np.linalg.LinAlgError as exc:
                raise BreakdownError(
                    f"tridiagonal eigendecomposition failed: {exc}"
                ) from None

    def dense(self):
        T = np.diag(self.diag)
        if self.off.size:
            T += np.diag(self.off, 1) + np.diag(self.off, -1)
        return T

    def quadrature_logdet(self):
        """e_1^T log(T) e_1 via the dense symmetric eigendecomposition."""
        lam, V = self.eigh()
        if np.any(lam <= 0):
            raise BreakdownError(
                f"non-positive tridiagonal eigenvalue {lam.min():.3e} in SLQ"
            )
        return float(np.sum(V[0, :] ** 2 * np.log(lam)))


@dataclass
class PCGResult:
    u: np.ndarray
    iterations: int
    residual_norm: float
    converged: bool
    tridiag: Tridiag | None = None


def pcg_solve(
    A,
    b,
    precond=None,
    tol=CG_TOL_DEFAULT,
    max_iter=CG_MAX_ITER_DEFAULT,
    capture_tridiag=False,
):
    """Preconditioned conjugate gradients for SPD systems.

    Stops when ||b - A u||_2 < tol * ||b||_2 (plain residual, relative) or
    after ``max_iter`` iterations, in which case the result is flagged as
    not converged rather than raising.  A direction with h^T A h <= 0
    signals a non-PD operator and raises :class:`BreakdownError`.

    When ``capture_tridiag`` is set, the Lanczos tridiagonal of the
    preconditioned operator is assembled from the CG coefficients:
    T_{l+1,l+1} = 1/alpha_{l+1} + beta_l/alpha_l and
    T_{l,l+1} = sqrt(beta_l)/alpha_l.
    """
    if tol <= 0:
        raise ConfigError("tol must be > 0")
    A = as_operator(A, n=len(b))
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return PCGResult(np.zeros(n), 0, 0.0, True,
                         Tridiag(np.empty(0), np.empty(0)) if capture_tridiag else None)

    psolve = (lambda r: r.copy()) if precond is None else precond.solve
    u = np.zeros(n)
    r = b.copy()
    z = psolve(r)
    h = z.copy()
    rz = float(r @ z)
    diag, off = [], []
    prev_alpha, prev_beta = 1.0, 0.0
    iterations = 0
    converged = False
    res = norm_b

    for l in range(max_iter):
        v = A.matvec(h)
        hv = float(h @ v)
        if hv <= 0.0:
            raise BreakdownError(
                f"CG breakdown: h^T A h = {hv:.3e} <= 0 (operator not PD)"
            )
        alpha = rz / hv
        u += alpha * h
        r -= alpha * v
        res = float(np.linalg.norm(r))
        if capture_tridiag:
            diag.append(1.0 / alpha + prev_beta / prev_alpha)
            if l > 0:
                off.append(np.sqrt(prev_beta) / prev_alpha)
        iterations = l + 1
        if res < tol * norm_b:
            converged = True
            break
        z = psolve(r)
        rz_new = float(r @ z)
        if rz_new <= 0.0:
            raise BreakdownError(
                f"CG breakdown: r^T P^{{-1}} r = {rz_new:.3e} <= 0 "
                "(preconditioner lost positive definiteness)"
            )
        beta = rz_new / rz
        rz = rz_new
        h = z + beta * h
        prev_alpha, prev_beta = alpha, beta

    tri = Tridiag(np.array(diag), np.array(off)) if capture_tridiag else None
    return PCGResult(u, iterations, res, converged, tri)


def lanczos_partial(A, start, k, breakdown_tol=1e-12):
    """Partial Lanczos decomposition with full reorthogonalization.

    Returns (Q, T) with Q (n x k') orthonormal, first column start/||start||,
    and T the k' x k' tridiagonal; k' < k only on lucky breakdown
    (beta_j < ``breakdown_tol``).
    """
    start = np.asarray(start, dtype=float)
    A = as_operator(A, n=start.shape[0])
    n = start.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"rank k must be in [1, {n}], got {k}")
    norm0 = np.linalg.norm(start)
    if norm0 == 0.0:
        raise ConfigError("Lanczos start vector must be nonzero")

    Q = np.empty((n, k))
    alphas = np.empty(k)
    betas = np.empty(max(k - 1, 0))
    Q[:, 0] = start / norm0
    achieved = k
    for j in range(k):
        w = A.matvec(Q[:, j])
        alphas[j] = float(Q[:, j] @ w)
        w -= alphas[j] * Q[:, j]
        if j > 0:
            w -= betas[j - 1] * Q[:, j - 1]
        # full reorthogonalization, applied twice for numerical safety
        for _ in range(2):
            w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        if j == k - 1:
            break
        beta = float(np.linalg.norm(w))
        if beta < breakdown_tol:
            achieved = j + 1
            break
        betas[j] = beta
        Q[:, j + 1] = w / beta
    return Q[:, :achieved], Tridiag(alphas[:achieved], betas[: achieved - 1])


@dataclass
class ProbeSet:
    """Probe vectors z_i ~ N(0, P), one per column, plus per-probe caches.

    The solves and tridiagonal matrices produced while evaluating a
    likelihood are stashed here so gradient evaluations within the same
    optimizer step can reuse them.
    """

    Z: np.ndarray
    seed: int
    precond_tag: str
    solves: np.ndarray | None = None
    tridiags: list = field(default_factory=list)
    psolves: np.ndarray | None = None

    @property
    def t(self):
        return self.Z.shape[1]

    @property
    def n(self):
        return self.Z.shape[0]


def sample_probes(P, t, n, seed):
    """Draw t i.i.d. probes from N(0, P), reproducible from ``seed``."""
    if t < 1:
        raise ConfigError("probe count t must be >= 1")
    rng = np.random.default_rng(seed)
    Z = P.sample_block(t, rng)
    if Z.shape != (n, t):
        raise ConfigError(
            f"preconditioner produced probes of shape {Z.shape}, expected {(n, t)}"
        )
    return ProbeSet(Z, seed, P.name)


def slq_logdet(P, probes, tridiags):
    """SLQ estimate of log det(P^{-1/2} A P^{-T/2}) from CG tridiagonals.

    Implements (1/t) sum_i ||P^{-1/2} z_i||^2 e_1^T log(T_i) e_1 with the
    exact probe weights z_i^T P^{-1} z_i rather than the n/t large-sample
    simplification.
    """
    if len(tridiags) != probes.t:
        raise ConfigError("one tridiagonal per probe is required")
    if probes.psolves is None:
        probes.psolves = P.solve(probes.Z)
    weights = np.einsum("it,it->t", probes.Z, probes.psolves)
    total = 0.0
    for i, tri in enumerate(tridiags):
        if tri.order == 0:
            continue
        total += weights[i] * tri.quadrature_logdet()
    return total / probes.t


def ste_grad_logdet(probes, solves, P, dA_op, dP_trace=0.0, dP_op=None):
    """Variance-reduced stochastic trace estimate of a log-det derivative.

    Estimates tr(A^{-1} dA) as c * dP_trace + mean_i [h(z_i) - c r(z_i)]
    with h(z) = (A^{-1}z)^T dA P^{-1}z, r(z) = (P^{-1}z)^T dP P^{-1}z, and
    c the sample-optimal control-variate weight Cov(h, r)/Var(r); c falls
    back to 0 (plain estimator) when no dP operator is supplied or Var(r)
    vanishes.
    """
    if solves.shape != probes.Z.shape:
        raise ConfigError("probe/solve count mismatch")
    if probes.psolves is None:
        probes.psolves = P.solve(probes.Z)
    V = probes.psolves
    t = probes.t
    h = np.einsum("it,it->t", solves, dA_op(V))
    if dP_op is None:
        return float(h.mean())
    r = np.einsum("it,it->t", V, dP_op(V))
    var_r = float(np.var(r, ddof=1)) if t > 1 else 0.0
    if var_r < 1e-300:
        return float(h.mean())
    cov_hr = float(np.cov(h, r, ddof=1)[0, 1])
    c = cov_hr / var_r
    return float(c * dP_trace + np.mean(h - c * r))

"""Mode finding, marginal likelihood, and its gradient for the latent model.

The objective is the approximate negative log-marginal likelihood

    L = -log p(y | mu*, xi) + 0.5 b*^T SigmaTilde^{-1} b*
        + 0.5 log det(SigmaTilde W + I),

with b* the mode of the penalized log-likelihood, mu* = F + b*, and W the
negative likelihood Hessian diagonal at the mode.  Two backends compute the
log-determinant and all linear solves: ``cholesky`` densifies
W + SigmaTilde^{-1} (the correctness oracle), ``iterative`` runs
preconditioned CG, splits the log-determinant into exact and stochastically
estimated parts, and estimates trace terms with variance-reduced stochastic
trace estimation.

All vectors here live in factor (permuted) order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.stats import chi2

from . import preconditioners as pc
from .covariance import K_RHO, K_SIGMA2, cov_grad_matrix
from .errors import (
    CapabilityError,
    CapacityError,
    ConfigError,
    ConvergenceError,
)
from .iterative import (
    CG_MAX_ITER_DEFAULT,
    CG_TOL_DEFAULT,
    MatvecOperator,
    pcg_solve,
    sample_probes,
    slq_logdet,
    ste_grad_logdet,
)
from .vecchia import apply_dprecision, factor_gradient, quad_dprecision

DENSE_GUARD_N = 8192
MODE_CG_TOL_CAP = 1e-4


@dataclass(frozen=True)
class BackendConfig:
    """How linear algebra is performed during likelihood evaluations."""

    backend: str = "iterative"
    preconditioner: str = "vadu"
    t: int = 50
    cg_tol: float = CG_TOL_DEFAULT
    cg_max_iter: int = CG_MAX_ITER_DEFAULT
    probe_seed: int = 0
    logdet_split: str = "auto"
    rank: int | None = None
    newton_max_iter: int = 100
    newton_grad_tol: float = 1e-6
    newton_obj_tol: float = 1e-8

    def __post_init__(self):
        if self.backend not in ("cholesky", "iterative"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.t < 1:
            raise ConfigError("t must be >= 1")
        if self.logdet_split not in ("auto", "eq6", "eq7"):
            raise ConfigError(f"unknown logdet split {self.logdet_split!r}")

    def resolved_split(self):
        if self.logdet_split != "auto":
            return self.logdet_split
        return "eq7" if self.preconditioner in pc.EQ5_VARIANTS else "eq6"

    @property
    def mode_cg_tol(self):
        # mode accuracy gates gradient accuracy; solve tighter than the
        # stochastic parts need
        return min(self.cg_tol, MODE_CG_TOL_CAP)


@dataclass
class LaplaceState:
    """Converged mode and everything the likelihood/gradient needs at it."""

    b: np.ndarray
    mu: np.ndarray
    W: np.ndarray
    y: np.ndarray
    F: np.ndarray
    logp: float
    d1: np.ndarray
    d3: np.ndarray
    quad: float
    objective: float
    newton_iters: int
    converged: bool


def dense_precision(factor):
    """Densified B^T D^{-1} B, cached on the factor (oracle backend only)."""
    if factor.n > DENSE_GUARD_N:
        raise CapacityError(
            f"cholesky backend limited to n <= {DENSE_GUARD_N}, got {factor.n}"
        )
    Q = factor.cache.get("dense_precision")
    if Q is None:
        Q = (factor.B.T @ sp.diags(1.0 / factor.D) @ factor.B).toarray()
        factor.cache["dense_precision"] = Q
    return Q


def build_preconditioner(factor, W, cfg):
    """Build cfg's preconditioner, reusing theta-only pieces across calls."""
    variant = cfg.preconditioner
    k = cfg.rank if cfg.rank is not None else pc.default_rank(factor.n)
    if variant in pc.EQ5_VARIANTS and np.any(W <= 0):
        raise CapabilityError(
            f"{variant} preconditions SigmaTilde + W^{{-1}} and needs W > 0 "
            "everywhere (eq7 split; log W undefined); switch to an eq6 "
            "preconditioner such as vadu"
        )
    if variant == "lrac":
        key = ("sigma_pchol", k)
        cached = factor.cache.get(key)
        if cached is None:
            cached = pc.pivoted_cholesky_with_pivots(
                pc.SigmaAccessor(factor.spec, factor.coords), k
            )
            factor.cache[key] = cached
        L, piv = cached
        P = pc.LowRankPlusDiagonalPreconditioner(L, 1.0 / W, "lrac")
        P.pivots = piv
        return P
    if variant == "l2":
        diag = factor.cache.get("diag_sigma_tilde")
        if diag is None:
            diag = factor.diag_sigma_tilde()
            factor.cache["diag_sigma_tilde"] = diag
        return pc.DiagonalPreconditioner(diag + 1.0 / W, "l2", expose_sym_factor=True)
    if variant == "pchol-precision":
        key = ("precision_pchol", k)
        L = factor.cache.get(key)
        if L is None:
            L = pc.pivoted_cholesky(pc.PrecisionAccessor(factor), k)
            factor.cache[key] = L
        return pc.LowRankPlusDiagonalPreconditioner(L, W, variant)
    return pc.build(variant, factor, W, k=k)


def _system_operator(factor, W, split):
    n = factor.n
    if split == "eq7":
        if np.any(W <= 0):
            raise CapabilityError(
                "eq7 split needs W > 0 everywhere (log W undefined); "
                "switch to an eq6 preconditioner such as vadu"
            )
        return MatvecOperator(n, lambda v: factor.apply_sigma_tilde(v) + v / W)
    return MatvecOperator(n, lambda v: W * v + factor.apply_precision(v))


def solve_system(factor, W, P, rhs, cfg, tol=None, capture_tridiag=False):
    """Solve (W + SigmaTilde^{-1}) u = rhs through cfg's preconditioner.

    eq5-form preconditioners solve the equivalent system
    (SigmaTilde + W^{-1})(W u) = SigmaTilde rhs.
    """
    split = cfg.resolved_split()
    tol = cfg.cg_tol if tol is None else tol
    op = _system_operator(factor, W, split)
    if split == "eq7":
        res = pcg_solve(op, factor.apply_sigma_tilde(rhs), P, tol,
                        cfg.cg_max_iter, capture_tridiag)
        return res.u / W, res
    res = pcg_solve(op, rhs, P, tol, cfg.cg_max_iter, capture_tridiag)
    return res.u, res


class _NewtonSolver:
    """One (W + SigmaTilde^{-1})^{-1} rhs solve per Newton step."""

    def __init__(self, factor, cfg):
        self.factor = factor
        self.cfg = cfg
        if cfg.backend == "cholesky":
            self.Q = dense_precision(factor)

    def solve(self, W, rhs, tol):
        if self.cfg.backend == "cholesky":
            A = self.Q.copy()
            A[np.diag_indices_from(A)] += W
            return cho_solve(cho_factor(A, lower=True, overwrite_a=True), rhs)
        P = build_preconditioner(self.factor, W, self.cfg)
        u, _ = solve_system(self.factor, W, P, rhs, self.cfg, tol=tol)
        return u


def find_mode(factor, lik, y, F, cfg, trace=None):
    """Damped Newton iteration for the penalized-likelihood mode b*.

    Steps are halved (up to 10 times) until the penalized objective does
    not increase, which makes the iteration globally convergent for
    log-concave likelihoods.  Convergence requires both a small objective
    change and a small penalized gradient.
    """
    y = lik.validate(y)
    F = np.asarray(F, dtype=float)
    n = factor.n
    solver = _NewtonSolver(factor, cfg)

    b = np.zeros(n)
    logp, d1, d2, d3 = lik.derivs(y, F + b)
    quad = 0.0
    obj = -logp
    grad_norm = float(np.abs(d1).max())
    converged = False
    iters = 0
    # inexact-Newton forcing: the achievable penalized gradient tracks the
    # inner solve residual, so the CG tolerance shrinks with the outer
    # gradient; ``safety`` tightens it further whenever progress stalls
    # (the eq5-form solve can amplify residuals through the W^{-1} map)
    safety = 1.0

    for iters in range(1, cfg.newton_max_iter + 1):
        W = np.maximum(-d2, 0.0)
        rhs = W * b + d1
        rhs_norm = float(np.linalg.norm(rhs))
        tol = cfg.mode_cg_tol
        if rhs_norm > 0.0:
            tol = min(tol, max(safety * 0.25 * grad_norm / rhs_norm, 1e-14))
        b_new = solver.solve(W, rhs, tol)
        delta = b_new - b

        step = 1.0
        accepted = False
        for _ in range(11):
            b_try = b + step * delta
            logp_try = float(lik.log_density(y, F + b_try).sum())
            quad_try = float(b_try @ factor.apply_precision(b_try))
            obj_try = -logp_try + 0.5 * quad_try
            if obj_try <= obj + 1e-12 * (1.0 + abs(obj)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # no descent direction left: either converged or stuck
            break

        obj_change = obj - obj_try
        b, obj, quad = b_try, obj_try, quad_try
        if trace is not None:
            trace.append(obj)
        logp, d1, d2, d3 = lik.derivs(y, F + b)
        grad_prev = grad_norm
        grad_norm = float(np.abs(d1 - factor.apply_precision(b)).max())
        if grad_norm > 0.5 * grad_prev:
            safety = max(0.2 * safety, 1e-10)
        if grad_norm < cfg.newton_grad_tol and obj_change < cfg.newton_obj_tol * (
            1.0 + abs(obj)
        ):
            converged = True
            break
    else:
        iters = cfg.newton_max_iter

    W = np.maximum(-d2, 0.0)
    state = LaplaceState(
        b=b, mu=F + b, W=W, y=y, F=F, logp=logp, d1=d1, d3=d3,
        quad=float(b @ factor.apply_precision(b)), objective=obj,
        newton_iters=iters, converged=converged,
    )
    if not converged:
        grad_norm = float(np.abs(d1 - factor.apply_precision(b)).max())
        if grad_norm >= cfg.newton_grad_tol:
            raise ConvergenceError(
                f"Newton mode finding did not converge in {iters} iterations "
                f"(gradient sup-norm {grad_norm:.2e})",
                last_state=state,
            )
        state = replace(state, converged=True)
    return state


def _run_probe_solves(factor, state, P, cfg, probes):
    """CG-solve every probe against the split's system, capturing tridiagonals.

    Solves run at the capped inner tolerance (min(cg_tol, 1e-4)) because
    they are reused by the gradient's trace estimators, whose bias tracks
    the solve error.
    """
    if probes.solves is not None and len(probes.tridiags) == probes.t:
        return
    split = cfg.resolved_split()
    op = _system_operator(factor, state.W, split)
    solves = np.empty_like(probes.Z)
    tridiags = []
    for i in range(probes.t):
        res = pcg_solve(op, probes.Z[:, i], P, cfg.mode_cg_tol, cfg.cg_max_iter,
                        capture_tridiag=True)
        solves[:, i] = res.u
        tridiags.append(res.tridiag)
    probes.solves = solves
    probes.tridiags = tridiags


def make_probes(factor, state, cfg):
    """Fresh N(0, P) probes for the current mode, deterministic in the seed."""
    P = build_preconditioner(factor, state.W, cfg)
    return sample_probes(P, cfg.t, factor.n, cfg.probe_seed), P


def logdet_system(factor, state, cfg, probes=None, P=None):
    """log det(SigmaTilde W + I) under cfg's backend."""
    if cfg.backend == "cholesky":
        A = dense_precision(factor).copy()
        A[np.diag_indices_from(A)] += state.W
        c, _ = cho_factor(A, lower=True, overwrite_a=True)
        return float(np.log(factor.D).sum()) + 2.0 * float(np.log(np.diag(c)).sum())

    if P is None or probes is None:
        probes, P = make_probes(factor, state, cfg)
    if probes.precond_tag != P.name:
        raise ConfigError("probes were drawn against a different preconditioner")
    split = cfg.resolved_split()
    _run_probe_solves(factor, state, P, cfg, probes)
    slq = slq_logdet(P, probes, probes.tridiags)
    if split == "eq7":
        exact = float(np.log(state.W).sum())
    else:
        exact = float(np.log(factor.D).sum())
    return exact + P.logdet() + slq


def neg_marginal_loglik(state, factor, cfg, probes=None, P=None):
    """Approximate negative log-marginal likelihood at the converged mode."""
    if not state.converged:
        raise ConvergenceError("state is not converged", last_state=state)
    return (
        -state.logp
        + 0.5 * state.quad
        + 0.5 * logdet_system(factor, state, cfg, probes=probes, P=P)
    )


def _factor_grads(factor):
    grads = factor.cache.get("factor_grads")
    if grads is None:
        grads = [factor_gradient(factor, K_SIGMA2), factor_gradient(factor, K_RHO)]
        factor.cache["factor_grads"] = grads
    return grads


def _dprecision_matrix(factor, grad):
    """Sparse d SigmaTilde^{-1} / d theta_k (oracle path)."""
    B, D = factor.B, factor.D
    Dinv = sp.diags(1.0 / D)
    M = grad.dB.T @ (Dinv @ B)
    M = M + M.T
    M -= B.T @ (sp.diags(grad.dD / D**2) @ B)
    return M


def _lrac_dL(factor, P, k_param):
    """Derivative of the rank-k covariance factor at fixed pivots.

    With pivot set pi and R = chol(Sigma[pi, pi]) the factor is
    L = Sigma[:, pi] R^{-T}; differentiate through R with the standard
    Cholesky sensitivity dR = R Phi(R^{-1} dSigma R^{-T}).
    """
    L, piv = P.U, P.pivots
    if k_param == K_SIGMA2:
        return L / (2.0 * factor.spec.sigma2)
    R = L[piv, :]
    dS_cols = cov_grad_matrix(factor.spec, factor.coords, factor.coords[piv], k_param)
    dS_pp = dS_cols[piv, :]
    X = solve_triangular(R, dS_pp, lower=True)
    X = solve_triangular(R, X.T, lower=True).T
    Phi = np.tril(X, -1) + 0.5 * np.diag(np.diag(X))
    dR = R @ Phi
    return solve_triangular(R, (dS_cols - L @ dR.T).T, lower=True).T


def _mu_logdet_derivative(factor, state, cfg, P, probes):
    """Stochastic d log det(SigmaTilde W + I) / d mu*_i, all i at once.

    The entrywise structure of dW/dmu_i makes h and r elementwise products
    of solve vectors, so the whole vector costs O(nt); the likelihood's
    third derivative -d3 is a common factor of h, r and the exact terms and
    cancels out of the control-variate weights.
    """
    W, md3 = state.W, -state.d3
    U, V = probes.solves, probes.psolves
    t = probes.t

    def cv_weights(H, R):
        if t < 2:
            return np.zeros(H.shape[0])
        hm = H.mean(axis=1, keepdims=True)
        rm = R.mean(axis=1, keepdims=True)
        var_r = ((R - rm) ** 2).sum(axis=1) / (t - 1)
        cov_hr = ((H - hm) * (R - rm)).sum(axis=1) / (t - 1)
        c = np.zeros(H.shape[0])
        ok = var_r >= 1e-300
        c[ok] = cov_hr[ok] / var_r[ok]
        return c

    if cfg.preconditioner in ("vadu", "l1"):
        H = U * V
        BV = factor.B @ V
        R = BV**2
        c = cv_weights(H, R)
        exact = c / (W + 1.0 / factor.D)
        return md3 * (exact + (H - c[:, None] * R).mean(axis=1))

    if cfg.preconditioner == "lrac":
        H = U * V / W[:, None] ** 2
        R = (V / W[:, None]) ** 2
        c = cv_weights(H, R)
        L = P.U
        # G2_i = [L (L^T W L + I)^{-1} L^T]_ii; P._M_cho factors exactly that matrix
        G2 = np.einsum("ij,ji->i", L, cho_solve(P._M_cho, L.T))
        exact = 1.0 / W + c * (G2 - 1.0 / W)
        return md3 * (exact - (H - c[:, None] * R).mean(axis=1))

    # plain estimator for the remaining variants
    if cfg.resolved_split() == "eq7":
        H = U * V / W[:, None] ** 2
        return md3 * (1.0 / W - H.mean(axis=1))
    H = U * V
    return md3 * H.mean(axis=1)


def gradient(state, factor, lik, X, cfg, probes=None, P=None):
    """Full gradient of the objective: d theta (2,), d beta (p,), d xi (r,).

    The cholesky backend evaluates every trace exactly; the iterative
    backend reuses the probe solves from the likelihood evaluation and adds
    a single extra CG solve for the implicit (mode-movement) terms.
    """
    if not state.converged:
        raise ConvergenceError("state is not converged", last_state=state)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    W, b, d1, md3 = state.W, state.b, state.d1, -state.d3
    grads = _factor_grads(factor)
    dlogp_dxi, d2xi, d3xi = lik.xi_derivs(state.y, state.mu)
    r_xi = dlogp_dxi.shape[0]

    if cfg.backend == "cholesky":
        A = dense_precision(factor).copy()
        A[np.diag_indices_from(A)] += W
        cho = cho_factor(A, lower=True)
        Ainv = cho_solve(cho, np.eye(factor.n))
        dlogdet_mu = md3 * np.diag(Ainv)
        s = 0.5 * dlogdet_mu
        tvec = cho_solve(cho, s)

        dtheta = np.empty(2)
        for k in (K_SIGMA2, K_RHO):
            g = grads[k]
            dPrec = _dprecision_matrix(factor, g)
            dlogdet_th = float((g.dD / factor.D).sum()) + float(
                dPrec.multiply(Ainv).sum()
            )
            dtheta[k] = (
                0.5 * quad_dprecision(factor, g, b)
                + 0.5 * dlogdet_th
                - float(tvec @ (dPrec @ b))
            )
        dxi = np.empty(r_xi)
        for l in range(r_xi):
            dlogdet_xi = float((np.diag(Ainv) * (-d3xi[l])).sum())
            dxi[l] = -dlogp_dxi[l] + 0.5 * dlogdet_xi + float(tvec @ d2xi[l])
    else:
        if P is None or probes is None:
            probes, P = make_probes(factor, state, cfg)
        _run_probe_solves(factor, state, P, cfg, probes)
        if probes.psolves is None:
            probes.psolves = P.solve(probes.Z)
        split = cfg.resolved_split()

        dlogdet_mu = _mu_logdet_derivative(factor, state, cfg, P, probes)
        s = 0.5 * dlogdet_mu
        tvec, _ = solve_system(factor, W, P, s, cfg, tol=cfg.mode_cg_tol)

        dtheta = np.empty(2)
        for k in (K_SIGMA2, K_RHO):
            g = grads[k]
            if split == "eq7":
                exact = 0.0

                def dA_op(Vv, g=g):
                    # d(SigmaTilde + W^{-1})/d theta = -SigmaTilde dPrec SigmaTilde
                    SV = factor.apply_sigma_tilde(Vv)
                    return -factor.apply_sigma_tilde(apply_dprecision(factor, g, SV))

            else:
                exact = float((g.dD / factor.D).sum())

                def dA_op(Vv, g=g):
                    return apply_dprecision(factor, g, Vv)

            dP_trace, dP_op = 0.0, None
            if cfg.preconditioner in ("vadu", "l1"):
                dP_trace = -float(
                    (g.dD / (factor.D * (factor.D * W + 1.0))).sum()
                )

                def dP_op(Vv, g=g):
                    # dP_vadu = dPrecision + dB^T W B + B^T W dB
                    BV = factor.B @ Vv
                    dBV = g.dB @ Vv
                    WBV = BV * (W[:, None] if BV.ndim == 2 else W)
                    WdBV = dBV * (W[:, None] if dBV.ndim == 2 else W)
                    return (
                        apply_dprecision(factor, g, Vv)
                        + g.dB.T @ WBV
                        + factor.B.T @ WdBV
                    )

            elif cfg.preconditioner == "lrac":
                dL = _lrac_dL(factor, P, k)
                T1 = P.U.T @ (W[:, None] * dL)
                dP_trace = 2.0 * float(np.trace(cho_solve(P._M_cho, T1)))

                def dP_op(Vv, dL=dL):
                    return dL @ (P.U.T @ Vv) + P.U @ (dL.T @ Vv)

            ste = ste_grad_logdet(probes, probes.solves, P, dA_op, dP_trace, dP_op)
            dtheta[k] = (
                0.5 * quad_dprecision(factor, g, b)
                + 0.5 * (exact + ste)
                - float(tvec @ apply_dprecision(factor, g, b))
            )

        dxi = np.empty(r_xi)
        for l in range(r_xi):
            md3x = -d3xi[l]
            if split == "eq7":
                exact = float((md3x / W).sum())

                def dA_op(Vv, md3x=md3x):
                    return -(md3x / W**2)[:, None] * Vv if Vv.ndim == 2 else -(md3x / W**2) * Vv

            else:
                exact = 0.0

                def dA_op(Vv, md3x=md3x):
                    return md3x[:, None] * Vv if Vv.ndim == 2 else md3x * Vv

            dP_trace, dP_op = 0.0, None
            if cfg.preconditioner in ("vadu", "l1"):
                dP_trace = float((md3x / (W + 1.0 / factor.D)).sum())

                def dP_op(Vv, md3x=md3x):
                    BV = factor.B @ Vv
                    return factor.B.T @ (md3x[:, None] * BV if BV.ndim == 2 else md3x * BV)

            elif cfg.preconditioner == "lrac":
                L = P.U
                G2 = np.einsum("ij,ji->i", L, cho_solve(P._M_cho, L.T))
                dP_trace = float((G2 * md3x).sum() - (md3x / W).sum())

                def dP_op(Vv, md3x=md3x):
                    scale = -(md3x / W**2)
                    return scale[:, None] * Vv if Vv.ndim == 2 else scale * Vv

            ste = ste_grad_logdet(probes, probes.solves, P, dA_op, dP_trace, dP_op)
            dxi[l] = -dlogp_dxi[l] + 0.5 * (exact + ste) + float(tvec @ d2xi[l])

    dF = -d1 + s - W * tvec
    dbeta = X.T @ dF
    return {"dtheta": dtheta, "dbeta": dbeta, "dxi": dxi}


def slq_sample_size(kappa, lambda_min, epsilon, eta, n, t):
    """Diagnostic sample sizes for the SLQ error bounds.

    Evaluates the additive-bound requirements l(kappa), t(kappa) and the
    multiplicative-bound l^m(kappa) (defined only when lambda_min > 1,
    NaN otherwise), with C_nt the scaled chi-square quantile.
    """
    if not (0.0 < epsilon < 1.0 and 0.0 < eta < 1.0):
        raise ConfigError("epsilon and eta must lie in (0, 1)")
    if kappa < 1.0:
        raise ConfigError("condition number kappa must be >= 1")
    if n < 1 or t < 1:
        raise ConfigError("n and t must be >= 1")
    nt = float(n) * float(t)
    C_nt = float(chi2.ppf(1.0 - eta / 2.0, nt)) / nt
    l_required = (
        np.sqrt(3.0 * kappa)
        / 4.0
        * np.log(C_nt * 20.0 * np.log(2.0 * (kappa + 1.0)) * np.sqrt(2.0 * kappa + 1.0) / epsilon)
    )
    t_required = 32.0 / epsilon**2 * np.log(kappa + 1.0) ** 2 * np.log(4.0 / eta)
    t_mult = 32.0 / epsilon**2 * np.log(4.0 / eta)
    if lambda_min > 1.0:
        root = np.sqrt(2.0 * kappa + 1.0)
        num = np.log(
            4.0
            * C_nt
            * (np.log(lambda_min * (kappa + 1.0 - 1.0 / kappa)) + np.pi)
            * (root + 1.0)
            / (np.log(lambda_min) * epsilon)
        )
        l_mult = 0.5 * num / np.log((root + 1.0) / (root - 1.0))
    else:
        l_mult = float("nan")
    return {
        "l_required": float(l_required),
        "t_required": float(t_required),
        "l_mult": float(l_mult),
        "t_mult": float(t_mult),
        "C_nt": C_nt,
    }

"""Marginal-likelihood maximization with Nesterov-accelerated gradient descent.

Positive parameters (sigma2, rho, the gamma shape) are optimized on the
log scale; fixed-effect coefficients stay untransformed.  The stochastic
parts of the objective use one probe seed for the whole run (sample
average approximation), so the optimizer sees a deterministic function and
the full run is reproducible bit for bit from its seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .covariance import CovarianceSpec, Locations
from .errors import ConfigError, NumericalError
from .laplace import BackendConfig, find_mode, gradient, make_probes, neg_marginal_loglik
from .vecchia import build_factor, find_neighbors, order_random


@dataclass(frozen=True)
class FitConfig:
    m: int = 20
    ordering_seed: int = 0
    backend: BackendConfig = field(default_factory=BackendConfig)
    nu: float = 1.5
    init_theta: tuple | None = None
    init_beta: np.ndarray | None = None
    init_xi: np.ndarray | None = None
    optimize: tuple = ("theta", "beta", "xi")
    learning_rate: float = 0.1
    lr_grow: float = 1.1
    lr_shrink: float = 0.5
    max_iters: int = 100
    grad_tol: float = 1e-3
    obj_rel_tol: float = 1e-6
    obj_patience: int = 3
    max_backtracks: int = 12
    lr_floor: float = 1e-10
    max_step: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.grad_tol <= 0 or self.obj_rel_tol <= 0:
            raise ConfigError("learning rate and tolerances must be > 0")
        bad = set(self.optimize) - {"theta", "rho", "beta", "xi"}
        if bad:
            raise ConfigError(f"unknown parameter groups {sorted(bad)}")
        if "theta" in self.optimize and "rho" in self.optimize:
            raise ConfigError('"theta" already includes "rho"; pick one')


@dataclass
class FitResult:
    theta: np.ndarray
    beta: np.ndarray
    xi: np.ndarray
    objective: float
    trace: list
    converged: bool
    wall_time: float
    iterations: int
    n_evaluations: int
    m: int
    ordering_seed: int
    probe_seed: int


class _Objective:
    """SAA objective over the packed transformed parameter vector."""

    def __init__(self, y, X, locs, lik, cfg):
        locs = locs if isinstance(locs, Locations) else Locations(locs)
        self.cfg = cfg
        self.lik0 = lik
        self.perm = order_random(locs.n, cfg.ordering_seed)
        self.neighbors = find_neighbors(locs, self.perm, cfg.m)
        self.coords = locs.coords
        self.y = np.asarray(y, dtype=float)[self.perm]
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        self.X = X[self.perm]
        self.p = self.X.shape[1]
        self.r = lik.n_xi
        if "theta" in cfg.optimize:
            self.theta_mode = "both"
        elif "rho" in cfg.optimize:
            self.theta_mode = "rho"
        else:
            self.theta_mode = "none"
        self.opt_beta = "beta" in cfg.optimize and self.p > 0
        self.opt_xi = "xi" in cfg.optimize and self.r > 0
        self.n_evaluations = 0

    def pack(self, theta, beta, xi):
        parts = []
        if self.theta_mode == "both":
            parts.append(np.log(theta))
        elif self.theta_mode == "rho":
            parts.append(np.log(theta[1:2]))
        if self.opt_beta:
            parts.append(beta)
        if self.opt_xi:
            parts.append(np.log(xi))
        return np.concatenate(parts) if parts else np.empty(0)

    def unpack(self, x, theta0, beta0, xi0):
        i = 0
        theta, beta, xi = np.array(theta0, copy=True), beta0.copy(), xi0.copy()
        if self.theta_mode == "both":
            theta = np.exp(x[i : i + 2])
            i += 2
        elif self.theta_mode == "rho":
            theta[1] = np.exp(x[i])
            i += 1
        if self.opt_beta:
            beta = x[i : i + self.p].copy()
            i += self.p
        if self.opt_xi:
            xi = np.exp(x[i : i + self.r])
        return theta, beta, xi

    def evaluate(self, theta, beta, xi, want_grad):
        self.n_evaluations += 1
        spec = CovarianceSpec(float(theta[0]), float(theta[1]), self.cfg.nu)
        factor = build_factor(self.coords, spec, self.neighbors, self.perm)
        lik = self.lik0.with_xi(xi) if self.r else self.lik0
        F = self.X @ beta if self.p else np.zeros(factor.n)
        cfg = self.cfg.backend
        state = find_mode(factor, lik, self.y, F, cfg)
        if cfg.backend == "iterative":
            probes, P = make_probes(factor, state, cfg)
        else:
            probes, P = None, None
        value = neg_marginal_loglik(state, factor, cfg, probes=probes, P=P)
        if not want_grad:
            return value, None
        g = gradient(state, factor, lik, self.X, cfg, probes=probes, P=P)
        parts = []
        if self.theta_mode == "both":
            parts.append(g["dtheta"] * theta)  # chain rule onto log scale
        elif self.theta_mode == "rho":
            parts.append(g["dtheta"][1:2] * theta[1])
        if self.opt_beta:
            parts.append(g["dbeta"])
        if self.opt_xi:
            parts.append(g["dxi"] * xi)
        return value, (np.concatenate(parts) if parts else np.empty(0))


def glm_initial_beta(lik, y, X, iters=15):
    """Fixed-effect start values: damped Newton on the GP-free likelihood."""
    y = lik.validate(np.asarray(y, dtype=float))
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    beta = np.zeros(p)
    if p == 0:
        return beta
    if lik.name in ("bernoulli-logit", "bernoulli-probit"):
        pbar = np.clip(y.mean(), 1.0 / (n + 1.0), 1.0 - 1.0 / (n + 1.0))
        if np.allclose(X[:, 0], 1.0):
            beta[0] = np.log(pbar / (1.0 - pbar))
    elif lik.name == "gamma" and np.allclose(X[:, 0], 1.0):
        beta[0] = np.log(y.mean())
    logp = float(lik.log_density(y, X @ beta).sum())
    for _ in range(iters):
        _, d1, d2, _ = lik.derivs(y, X @ beta)
        g = X.T @ d1
        H = X.T @ (np.maximum(-d2, 1e-10)[:, None] * X)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        s = 1.0
        for _ in range(10):
            cand = beta + s * step
            logp_c = float(lik.log_density(y, X @ cand).sum())
            if logp_c >= logp:
                beta, logp = cand, logp_c
                break
            s *= 0.5
        else:
            break
        if np.abs(g).max() < 1e-8 * n:
            break
    return beta


def initial_parameters(lik, y, X, coords, cfg):
    """Heuristic starts: GLM beta, moment-based sigma2/alpha, NN-scaled rho."""
    from scipy.spatial import cKDTree

    y = np.asarray(y, dtype=float)
    beta = (
        np.asarray(cfg.init_beta, dtype=float)
        if cfg.init_beta is not None
        else glm_initial_beta(lik, y, X)
    )
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    F = X @ beta

    if cfg.init_theta is not None:
        theta = np.asarray(cfg.init_theta, dtype=float)
    else:
        if lik.name == "gamma":
            sigma2 = float(np.clip(np.var(np.log(y) - F), 0.1, 5.0))
        else:
            sigma2 = 1.0
        dists, _ = cKDTree(coords).query(coords, k=2)
        rho = 5.0 * float(dists[:, 1].mean())
        theta = np.array([sigma2, rho])

    if cfg.init_xi is not None:
        xi = np.asarray(cfg.init_xi, dtype=float)
    elif lik.name == "gamma":
        ratio_var = float(np.var(y * np.exp(-F)))
        xi = np.array([np.clip(1.0 / max(ratio_var, 1e-6), 0.5, 100.0)])
    else:
        xi = lik.xi.copy()
    return theta, beta, xi


def fit(y, X, locs, lik, cfg=None):
    """Minimize the SAA objective with Nesterov momentum and backtracking.

    Momentum resets whenever a step is rejected; the learning rate shrinks
    on rejection and grows on acceptance.  Convergence is declared when the
    transformed-scale gradient sup-norm falls below ``grad_tol`` or the
    relative objective change stays below ``obj_rel_tol`` for
    ``obj_patience`` consecutive accepted steps.
    """
    cfg = FitConfig() if cfg is None else cfg
    start = time.perf_counter()
    locs = locs if isinstance(locs, Locations) else Locations(locs)
    theta, beta, xi = initial_parameters(lik, y, X, locs.coords, cfg)
    obj = _Objective(y, X, locs, lik, cfg)

    def try_eval(xvec, want_grad):
        try:
            return obj.evaluate(*obj.unpack(xvec, theta, beta, xi), want_grad)
        except NumericalError:
            return float("inf"), None

    x = obj.pack(theta, beta, xi)
    f_x, _ = obj.evaluate(theta, beta, xi, want_grad=False)
    trace = [{"iteration": 0, "objective": f_x, "grad_norm": float("nan"), "lr": cfg.learning_rate}]
    if cfg.max_iters == 0 or x.size == 0:
        return _result(obj, cfg, theta, beta, xi, f_x, trace, True, start, 0)

    x_prev = x.copy()
    lr = cfg.learning_rate
    momentum_k = 0
    converged = False
    small_changes = 0
    iters_done = 0

    cached_point = None
    cached_eval = None

    for it in range(1, cfg.max_iters + 1):
        iters_done = it
        accepted = False
        grad_norm = float("nan")
        for _ in range(cfg.max_backtracks + 1):
            mu = momentum_k / (momentum_k + 3.0)
            yv = x + mu * (x - x_prev)
            if cached_point is not None and np.array_equal(yv, cached_point):
                f_y, g_y = cached_eval
            else:
                f_y, g_y = try_eval(yv, want_grad=True)
                cached_point, cached_eval = yv.copy(), (f_y, g_y)
            if g_y is None:
                # overshoot into a numerically bad region
                if momentum_k > 0:
                    momentum_k = 0
                    x_prev = x.copy()
                else:
                    lr *= cfg.lr_shrink
                continue
            grad_norm = float(np.abs(g_y).max())
            if grad_norm < cfg.grad_tol and f_y <= f_x + 1e-12 * (1.0 + abs(f_x)):
                x_prev, x = x.copy(), yv
                f_x = f_y
                converged = True
                accepted = True
                break
            step = lr * g_y
            s_max = float(np.abs(step).max())
            if s_max > cfg.max_step:
                step *= cfg.max_step / s_max
            cand = yv - step
            f_c, _ = try_eval(cand, want_grad=False)
            if np.isfinite(f_c) and f_c <= f_x:
                rel_change = abs(f_x - f_c) / (1.0 + abs(f_c))
                x_prev, x = x.copy(), cand
                f_x = f_c
                lr *= cfg.lr_grow
                momentum_k += 1
                accepted = True
                small_changes = small_changes + 1 if rel_change < cfg.obj_rel_tol else 0
                break
            # a failed momentum step is retried without momentum at the same
            # learning rate; only a failed plain step shrinks it
            if momentum_k > 0:
                momentum_k = 0
                x_prev = x.copy()
            else:
                lr *= cfg.lr_shrink
            if lr < cfg.lr_floor:
                break
        theta, beta, xi = obj.unpack(x, theta, beta, xi)
        trace.append(
            {"iteration": it, "objective": f_x, "grad_norm": grad_norm, "lr": lr}
        )
        if converged:
            break
        if not accepted:
            # learning rate exhausted without descent: treat as stationary
            converged = True
            break
        if small_changes >= cfg.obj_patience:
            converged = True
            break

    return _result(obj, cfg, theta, beta, xi, f_x, trace, converged, start, iters_done)


def _result(obj, cfg, theta, beta, xi, f_x, trace, converged, start, iters):
    return FitResult(
        theta=np.asarray(theta, dtype=float),
        beta=np.asarray(beta, dtype=float),
        xi=np.asarray(xi, dtype=float),
        objective=float(f_x),
        trace=trace,
        converged=bool(converged),
        wall_time=time.perf_counter() - start,
        iterations=iters,
        n_evaluations=obj.n_evaluations,
        m=cfg.m,
        ordering_seed=cfg.ordering_seed,
        probe_seed=cfg.backend.probe_seed,
    )


def profile_xi(y, X, locs, lik, cfg=None, subsample_size=None, seed=0):
    """Fit on a uniform random sub-sample (shape-parameter profiling).

    The returned estimates (in particular xi) are meant to be fixed in a
    follow-up full-data fit with optimize=("theta", "beta").
    """
    cfg = FitConfig() if cfg is None else cfg
    locs = locs if isinstance(locs, Locations) else Locations(locs)
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = locs.n
    if subsample_size is None or subsample_size >= n:
        idx = np.arange(n)
    else:
        idx = np.sort(np.random.default_rng(seed).choice(n, subsample_size, replace=False))
    sub_locs = Locations(locs.coords[idx])
    return fit(y[idx], X[idx], sub_locs, lik, cfg)

"""Shared test fixtures: simulated datasets and dense reference computations."""

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from vlgp.covariance import CovarianceSpec, cov_matrix
from vlgp.likelihoods import get_likelihood
from vlgp.vecchia import make_factor


def make_dataset(n, seed, sigma2=1.0, rho=0.05, nu=1.5, family="bernoulli-logit",
                 shape=2.0, m=20, ordering_seed=None, beta=None, design=None):
    """Simulate locations on [0,1]^2, a dense-GP latent field, and responses.

    Returns a dict with the raw arrays plus a built factor and the data
    permuted into factor order.
    """
    rng = np.random.default_rng(seed)
    coords = rng.uniform(size=(n, 2))
    spec = CovarianceSpec(sigma2, rho, nu)
    Sig = cov_matrix(spec, coords)
    b = np.linalg.cholesky(Sig) @ rng.standard_normal(n)
    lik = get_likelihood(family, **({"shape": shape} if family == "gamma" else {}))
    X = None
    F = np.zeros(n)
    if beta is not None:
        beta = np.asarray(beta, dtype=float)
        if design == "coords":
            X = np.column_stack([np.ones(n), coords])
        else:
            X = np.ones((n, 1))
        F = X @ beta
    y = lik.sample(F + b, rng)
    factor = make_factor(coords, spec, m,
                         seed + 1000 if ordering_seed is None else ordering_seed)
    out = {
        "coords": coords, "spec": spec, "Sig": Sig, "b": b, "y": y, "lik": lik,
        "factor": factor, "y_f": y[factor.perm], "b_f": b[factor.perm],
        "F_f": F[factor.perm], "F": F, "X": X,
        "X_f": X[factor.perm] if X is not None else None,
    }
    return out


def dense_system(factor, W):
    """Densified W + B^T D^{-1} B."""
    import scipy.sparse as sp

    Q = (factor.B.T @ sp.diags(1.0 / factor.D) @ factor.B).toarray()
    Q[np.diag_indices_from(Q)] += W
    return Q


def dense_laplace_full_gp(Sig, lik, y, F, iters=100):
    """Laplace objective for the exact (no-Vecchia) GP prior, dense algebra.

    Independent of the package's mode finder: plain damped Newton with
    dense solves against Sigma itself.
    """
    n = Sig.shape[0]
    cho_S = cho_factor(Sig, lower=True)
    b = np.zeros(n)
    logp = float(lik.log_density(y, F + b).sum())
    obj = -logp
    for _ in range(iters):
        _, d1, d2, _ = lik.derivs(y, F + b)
        W = np.maximum(-d2, 0.0)
        A = cho_solve(cho_S, np.eye(n))
        A[np.diag_indices_from(A)] += W
        rhs = W * b + d1
        b_new = np.linalg.solve(A, rhs)
        step = 1.0
        for _ in range(12):
            b_try = b + step * (b_new - b)
            obj_try = -float(lik.log_density(y, F + b_try).sum()) + 0.5 * float(
                b_try @ cho_solve(cho_S, b_try)
            )
            if obj_try <= obj + 1e-12 * (1 + abs(obj)):
                break
            step *= 0.5
        if abs(obj - obj_try) < 1e-12 * (1 + abs(obj)):
            b, obj = b_try, obj_try
            break
        b, obj = b_try, obj_try
    _, d1, d2, _ = lik.derivs(y, F + b)
    W = np.maximum(-d2, 0.0)
    logdet = np.linalg.slogdet(Sig @ np.diag(W) + np.eye(n))[1]
    quad = float(b @ cho_solve(cho_S, b))
    return -float(lik.log_density(y, F + b).sum()) + 0.5 * quad + 0.5 * logdet, b, W

"""Per-observation likelihood families with derivatives in mu up to third order.

All families are log-concave in mu, so the negative Hessian diagonal
W_ii = -d2 log p / d mu_i^2 is nonnegative everywhere.  The gamma family
uses the rate parameterization beta = alpha * exp(-mu), which makes
E[y | mu] = exp(mu).  Auxiliary parameters (the gamma shape) are exposed
through ``xi`` with mixed xi/mu derivatives needed by the marginal
likelihood gradient.
"""

from __future__ import annotations

import numpy as np
from scipy.special import digamma, expit, gammaln, log_ndtr

from .errors import ConfigError, DataError

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class Likelihood:
    """Base class; subclasses implement elementwise densities and samplers."""

    name = ""
    n_xi = 0

    @property
    def xi(self):
        return np.empty(0)

    def with_xi(self, xi):
        if len(np.atleast_1d(xi)) != 0:
            raise ConfigError(f"{self.name} has no auxiliary parameters")
        return self

    def validate(self, y):
        raise NotImplementedError

    def log_density(self, y, mu):
        raise NotImplementedError

    def derivs(self, y, mu):
        """Return (sum log p, d1, d2, d3) with dk the k-th mu-derivative."""
        raise NotImplementedError

    def xi_derivs(self, y, mu):
        """Mixed xi-derivatives: (dlogp_dxi (r,), d2_dxi_dmu (r,n), d3_dxi_dmu2 (r,n)).

        Families without auxiliary parameters return empty arrays.
        """
        n = len(np.atleast_1d(mu))
        return np.empty(0), np.empty((0, n)), np.empty((0, n))

    def sample(self, mu, rng):
        raise NotImplementedError

    def sample_response(self, mu, seed):
        """i.i.d. response draws given mu, reproducible from ``seed``."""
        return self.sample(np.asarray(mu, dtype=float), np.random.default_rng(seed))


class BernoulliLogit(Likelihood):
    name = "bernoulli-logit"

    def validate(self, y):
        y = np.asarray(y)
        bad = np.flatnonzero((y != 0) & (y != 1))
        if bad.size:
            raise DataError(f"bernoulli responses must be 0/1; offending indices {bad[:10].tolist()}")
        return y.astype(float)

    def log_density(self, y, mu):
        # y*mu - log(1 + e^mu), evaluated stably on both tails
        return y * mu - np.logaddexp(0.0, mu)

    def derivs(self, y, mu):
        p = expit(mu)
        w = p * (1.0 - p)
        d1 = y - p
        d2 = -w
        d3 = -w * (1.0 - 2.0 * p)
        return float(self.log_density(y, mu).sum()), d1, d2, d3

    def sample(self, mu, rng):
        return (rng.uniform(size=mu.shape) < expit(mu)).astype(float)


class BernoulliProbit(Likelihood):
    name = "bernoulli-probit"

    def validate(self, y):
        y = np.asarray(y)
        bad = np.flatnonzero((y != 0) & (y != 1))
        if bad.size:
            raise DataError(f"bernoulli responses must be 0/1; offending indices {bad[:10].tolist()}")
        return y.astype(float)

    @staticmethod
    def _mills(u):
        # phi(u)/Phi(u) via log_ndtr; stable on the far left tail where the
        # naive ratio underflows.
        return np.exp(-0.5 * u * u - _LOG_SQRT_2PI - log_ndtr(u))

    def log_density(self, y, mu):
        z = 2.0 * y - 1.0
        return log_ndtr(z * mu)

    def derivs(self, y, mu):
        z = 2.0 * y - 1.0
        u = z * mu
        g = self._mills(u)
        d1 = z * g
        d2 = -g * (u + g)
        d3 = z * g * ((u + g) ** 2 + g * (u + g) - 1.0)
        return float(self.log_density(y, mu).sum()), d1, d2, d3

    def sample(self, mu, rng):
        return (rng.standard_normal(mu.shape) < mu).astype(float)


class Gamma(Likelihood):
    """Gamma likelihood with shape alpha and rate alpha * exp(-mu)."""

    name = "gamma"
    n_xi = 1

    def __init__(self, shape=1.0):
        if shape <= 0:
            raise ConfigError(f"gamma shape must be > 0, got {shape}")
        self.shape = float(shape)

    @property
    def xi(self):
        return np.array([self.shape])

    def with_xi(self, xi):
        return Gamma(float(np.atleast_1d(xi)[0]))

    def validate(self, y):
        y = np.asarray(y, dtype=float)
        bad = np.flatnonzero(~(y > 0))
        if bad.size:
            raise DataError(f"gamma responses must be > 0; offending indices {bad[:10].tolist()}")
        return y

    def log_density(self, y, mu):
        a = self.shape
        return (
            a * np.log(a)
            - gammaln(a)
            + (a - 1.0) * np.log(y)
            - a * mu
            - a * y * np.exp(-mu)
        )

    def derivs(self, y, mu):
        a = self.shape
        w = a * y * np.exp(-mu)
        d1 = -a + w
        d2 = -w
        d3 = w
        return float(self.log_density(y, mu).sum()), d1, d2, d3

    def xi_derivs(self, y, mu):
        a = self.shape
        e = y * np.exp(-mu)
        dlogp = np.array([np.sum(np.log(a) + 1.0 - digamma(a) + np.log(y) - mu - e)])
        d2 = (-1.0 + e)[None, :]
        d3 = (-e)[None, :]
        return dlogp, d2, d3

    def sample(self, mu, rng):
        # rate alpha*e^{-mu}  <=>  scale e^{mu}/alpha
        return rng.gamma(self.shape, np.exp(mu) / self.shape)


_FAMILIES = {
    "bernoulli-logit": BernoulliLogit,
    "bernoulli-probit": BernoulliProbit,
    "gamma": Gamma,
}


def get_likelihood(family, **params):
    """Construct a likelihood by family name."""
    try:
        cls = _FAMILIES[family]
    except KeyError:
        raise ConfigError(
            f"unknown likelihood family {family!r}; choose from {sorted(_FAMILIES)}"
        ) from None
    return cls(**params)

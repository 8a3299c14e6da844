"""Probability kernels used by the model, the simulator, and BBVI.

Each distribution is a small parameter object with `log_pdf`, `sample`,
and (for the score-function families) `grad_log_params`, the gradient of
log q with respect to the distribution's own parameters at a point.

Parameterizations:

    Normal(mean, scale)            scale is the standard deviation
    MultivariateNormal(mean, cov)  cov SPD, Cholesky cached
    Dirichlet(conc)                conc > 0 elementwise
    GammaShapeScale(shape, scale)
    GammaMeanShape(mean, spread)   mean/spread form: shape=(m/s)^2, scale=s^2/m
    BetaShapes(a, b)
    BetaMeanSpread(mean, spread)   mean/spread form, needs spread^2 < m(1-m)
    Poisson(rate)
    InverseWishart(psi, nu)        psi SPD, nu > M - 1
"""
from __future__ import annotations

import numpy as np
from scipy.special import betaln, gammaln, multigammaln

LOG_2PI = float(np.log(2.0 * np.pi))

# Bernoulli numbers B_2 .. B_14 for the digamma asymptotic series
_BERNOULLI = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
)


def digamma(x):
    """Digamma function, elementwise, for x > 0.

    Uses the recurrence psi(x) = psi(x+1) - 1/x to shift arguments up to
    >= 10, then the asymptotic series ln x - 1/(2x) - sum B_2n/(2n x^2n).
    Max absolute error is well under 1e-10 for x >= 1e-4.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0) or np.any(~np.isfinite(x)):
        raise ValueError("digamma requires x > 0")
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    out = np.zeros_like(x)
    for _ in range(10):
        small = x < 10.0
        if not small.any():
            break
        out[small] -= 1.0 / x[small]
        x[small] += 1.0
    inv2 = 1.0 / (x * x)
    series = np.zeros_like(x)
    term = inv2
    for n, b in enumerate(_BERNOULLI, start=1):
        series += b / (2.0 * n) * term
        term = term * inv2
    out += np.log(x) - 0.5 / x - series
    return float(out[0]) if scalar else out


def gammaln_from_log(log_x):
    """log Gamma(exp(log_x)) that stays finite for arbitrarily negative log_x.

    exp(log_x) underflows to 0.0 once log_x < ~-745 and gammaln(0) is +inf,
    which poisons density evaluations at concentrations sampled from
    near-degenerate Dirichlets. Below exp(-34) we use the expansion
    gammaln(x) = -log x - euler_gamma * x + O(x^2); the quadratic term is
    under 1e-28 there, far below double precision on a value of 34+.
    """
    log_x = np.asarray(log_x, dtype=float)
    x = np.exp(log_x)
    small = log_x < -34.0
    return np.where(small, -log_x - np.euler_gamma * x, gammaln(np.where(small, 1.0, x)))


def _as_spd_cholesky(mat, name):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("%s must be a square matrix, got shape %s" % (name, mat.shape))
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ValueError("%s must be symmetric" % (name,))
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ValueError("%s is not positive definite" % (name,)) from None
    return mat, chol


class Normal:
    """Univariate normal; mean and scale may be scalars or arrays."""

    def __init__(self, mean, scale):
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        if np.any(self.scale <= 0.0):
            raise ValueError("Normal scale must be positive")

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mean) / self.scale
        return -0.5 * LOG_2PI - np.log(self.scale) - 0.5 * z * z

    def sample(self, rng, size=None):
        return rng.normal(self.mean, self.scale, size=size)

    def grad_log_params(self, x):
        """Score wrt (mean, scale); stacked along a leading axis of 2."""
        x = np.asarray(x, dtype=float)
        d = x - self.mean
        var = self.scale * self.scale
        g_mean = d / var
        g_scale = -1.0 / self.scale + d * d / (var * self.scale)
        return np.stack(np.broadcast_arrays(g_mean, g_scale))


class MultivariateNormal:
    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        if self.mean.ndim != 1:
            raise ValueError("MultivariateNormal mean must be a vector")
        self.cov, self._chol = _as_spd_cholesky(cov, "covariance")
        if self.cov.shape[0] != self.mean.shape[0]:
            raise ValueError("mean / covariance dimension mismatch")
        self._log_det = 2.0 * np.log(np.diag(self._chol)).sum()
        self._chol_inv = np.linalg.inv(self._chol)

    @property
    def dim(self):
        return self.mean.shape[0]

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.mean
        # quadratic form d' Cov^-1 d = |L^-1 d|^2, batched over leading axes
        z = d @ self._chol_inv.T
        quad = np.sum(z * z, axis=-1)
        return -0.5 * (self.dim * LOG_2PI + self._log_det + quad)

    def sample(self, rng, size=None):
        shape = (self.dim,) if size is None else tuple(np.atleast_1d(size)) + (self.dim,)
        eps = rng.standard_normal(shape)
        return self.mean + eps @ self._chol.T


class Dirichlet:
    def __init__(self, conc):
        self.conc = np.asarray(conc, dtype=float)
        if self.conc.ndim != 1 or self.conc.shape[0] < 1:
            raise ValueError("Dirichlet concentration must be a non-empty vector")
        if np.any(self.conc <= 0.0):
            raise ValueError("Dirichlet concentration must be positive")

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.conc.shape[0]:
            raise ValueError("Dirichlet point has wrong length")
        if np.any(x <= 0.0) or np.any(np.abs(x.sum(axis=-1) - 1.0) > 1e-8):
            raise ValueError("Dirichlet point must lie in the open simplex")
        a = self.conc
        return (
            gammaln(a.sum())
            - gammaln(a).sum()
            + np.sum((a - 1.0) * np.log(x), axis=-1)
        )

    def sample(self, rng, size=None):
        shape = self.conc.shape if size is None else tuple(np.atleast_1d(size)) + self.conc.shape
        g = rng.standard_gamma(self.conc, size=shape)
        return g / g.sum(axis=-1, keepdims=True)

    def grad_log_params(self, x):
        """Score wrt concentration: ln x_k + psi(sum a) - psi(a_k)."""
        x = np.asarray(x, dtype=float)
        return np.log(x) + digamma(self.conc.sum()) - digamma(self.conc)


class GammaShapeScale:
    def __init__(self, shape, scale):
        self.shape = np.asarray(shape, dtype=float)
        self.scale = np.asarray(scale, dtype=float)
        if np.any(self.shape <= 0.0) or np.any(self.scale <= 0.0):
            raise ValueError("Gamma shape and scale must be positive")

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0.0):
            raise ValueError("Gamma support is x > 0")
        a, b = self.shape, self.scale
        return (a - 1.0) * np.log(x) - x / b - gammaln(a) - a * np.log(b)

    def sample(self, rng, size=None):
        return rng.gamma(self.shape, self.scale, size=size)


def gamma_mean_shape_params(mean, spread):
    """(shape, scale) of a Gamma with the given mean and sd-like spread."""
    mean = np.asarray(mean, dtype=float)
    spread = np.asarray(spread, dtype=float)
    shape = (mean / spread) ** 2
    scale = spread * spread / mean
    return shape, scale


class GammaMeanShape:
    """Gamma reparameterized by mean and spread; variance equals spread^2."""

    def __init__(self, mean, spread):
        self.mean = np.asarray(mean, dtype=float)
        self.spread = np.asarray(spread, dtype=float)
        if np.any(self.mean <= 0.0) or np.any(self.spread <= 0.0):
            raise ValueError("GammaMeanShape mean and spread must be positive")
        self.shape, self.scale = gamma_mean_shape_params(self.mean, self.spread)

    def log_pdf(self, x):
        return GammaShapeScale(self.shape, self.scale).log_pdf(x)

    def sample(self, rng, size=None):
        return rng.gamma(self.shape, self.scale, size=size)


class BetaShapes:
    def __init__(self, a, b):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        if np.any(self.a <= 0.0) or np.any(self.b <= 0.0):
            raise ValueError("Beta shapes must be positive")

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0.0) or np.any(x >= 1.0):
            raise ValueError("Beta support is 0 < x < 1")
        return (self.a - 1.0) * np.log(x) + (self.b - 1.0) * np.log1p(-x) - betaln(self.a, self.b)

    def sample(self, rng, size=None):
        return rng.beta(self.a, self.b, size=size)


def beta_mean_spread_params(mean, spread, clamp=False):
    """Beta shapes (a, b) for the given mean and spread.

    Requires spread^2 < mean (1 - mean). With clamp=True an oversized
    spread is reduced to 0.99 sqrt(mean (1-mean)) instead of failing;
    returns (a, b, clamped) where clamped flags any adjusted entry.
    """
    mean = np.asarray(mean, dtype=float)
    spread = np.asarray(spread, dtype=float)
    if np.any(mean <= 0.0) or np.any(mean >= 1.0):
        raise ValueError("BetaMeanSpread mean must lie in (0, 1)")
    if np.any(spread <= 0.0):
        raise ValueError("BetaMeanSpread spread must be positive")
    limit = np.sqrt(mean * (1.0 - mean))
    bad = spread >= limit
    clamped = bool(np.any(bad))
    if clamped:
        if not clamp:
            raise ValueError("BetaMeanSpread spread too large: spread^2 must be < mean (1 - mean)")
        spread = np.where(bad, 0.99 * limit, spread)
    var = spread * spread
    a = ((1.0 - mean) / var - 1.0 / mean) * mean * mean
    b = a * (1.0 / mean - 1.0)
    return a, b, clamped


class BetaMeanSpread:
    """Beta reparameterized by mean and spread; variance equals spread^2."""

    def __init__(self, mean, spread):
        self.mean = np.asarray(mean, dtype=float)
        self.spread = np.asarray(spread, dtype=float)
        self.a, self.b, _ = beta_mean_spread_params(self.mean, self.spread, clamp=False)

    def log_pdf(self, x):
        return BetaShapes(self.a, self.b).log_pdf(x)

    def sample(self, rng, size=None):
        return rng.beta(self.a, self.b, size=size)


class Poisson:
    def __init__(self, rate):
        self.rate = np.asarray(rate, dtype=float)
        if np.any(self.rate <= 0.0):
            raise ValueError("Poisson rate must be positive")

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0.0) or np.any(x != np.floor(x)):
            raise ValueError("Poisson support is non-negative integers")
        return x * np.log(self.rate) - self.rate - gammaln(x + 1.0)

    def sample(self, rng, size=None):
        return rng.poisson(self.rate, size=size)

    def grad_log_params(self, x):
        """Score wrt the rate: x / rate - 1."""
        x = np.asarray(x, dtype=float)
        return x / self.rate - 1.0


class InverseWishart:
    def __init__(self, psi, nu):
        self.psi, self._chol = _as_spd_cholesky(psi, "psi")
        self.nu = float(nu)
        m = self.psi.shape[0]
        if self.nu <= m - 1:
            raise ValueError("InverseWishart needs nu > M - 1")
        self._log_det_psi = 2.0 * np.log(np.diag(self._chol)).sum()

    @property
    def dim(self):
        return self.psi.shape[0]

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        m = self.dim
        _, cx = _as_spd_cholesky(x, "x")
        log_det_x = 2.0 * np.log(np.diag(cx)).sum()
        # tr(psi x^-1) via triangular solves against chol(x)
        sol = np.linalg.solve(cx, self.psi)
        sol = np.linalg.solve(cx, sol.T)
        trace = np.trace(sol)
        nu = self.nu
        return (
            0.5 * nu * self._log_det_psi
            - 0.5 * nu * m * np.log(2.0)
            - multigammaln(0.5 * nu, m)
            - 0.5 * (nu + m + 1.0) * log_det_x
            - 0.5 * trace
        )

    def sample(self, rng, size=None):
        """Draw via Bartlett decomposition of the Wishart of the inverse."""
        m = self.dim
        if size is None:
            return self._draw_one(rng)
        n = int(np.prod(np.atleast_1d(size)))
        out = np.empty((n, m, m))
        for i in range(n):
            out[i] = self._draw_one(rng)
        return out.reshape(tuple(np.atleast_1d(size)) + (m, m))

    def _draw_one(self, rng):
        m = self.dim
        # W ~ Wishart(psi^-1, nu)  =>  W^-1 ~ InverseWishart(psi, nu)
        inv_psi = np.linalg.inv(self.psi)
        l = np.linalg.cholesky(inv_psi)
        a = np.zeros((m, m))
        for i in range(m):
            a[i, i] = np.sqrt(rng.chisquare(self.nu - i))
            for j in range(i):
                a[i, j] = rng.standard_normal()
        w = l @ a @ a.T @ l.T
        return np.linalg.inv(w)


def sample_dirichlet_log(rng, conc, lead_shape=()):
    """Dirichlet draws that stay usable at tiny concentrations.

    Draws unnormalized components in log space via the boost identity
    Gamma(a) =d= Gamma(a+1) * U^(1/a), so concentrations near the 1e-10
    parameter floor yield finite log-coordinates instead of underflowing
    to exact zeros.

    Returns (x, log_x), both of shape lead_shape + conc.shape, normalized
    along the last axis.
    """
    conc = np.asarray(conc, dtype=float)
    shape = tuple(lead_shape) + conc.shape
    g = rng.standard_gamma(conc + 1.0, size=shape)
    u = np.maximum(rng.random(shape), 1e-300)
    log_un = np.log(np.maximum(g, 1e-300)) + np.log(u) / conc
    mx = log_un.max(axis=-1, keepdims=True)
    log_norm = mx + np.log(np.exp(log_un - mx).sum(axis=-1, keepdims=True))
    log_x = log_un - log_norm
    return np.exp(log_x), log_x


def log_pdf(d, x):
    return d.log_pdf(x)


def sample(d, rng, size=None):
    return d.sample(rng, size=size)


def grad_log_q(d, x):
    """Parameter score of log q at x; only the BBVI families support it."""
    fn = getattr(d, "grad_log_params", None)
    if fn is None:
        raise TypeError("grad_log_q is not available for %s" % type(d).__name__)
    return fn(x)

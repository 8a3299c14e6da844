"""Model definition: hyperparameters, data containers, joint density, ELBO.

Generative model for N observations with M features and K factors:

    beta            ~ Dirichlet(alpha0)
    pi_n            ~ Dirichlet(alpha * beta)
    mu_km           ~ Normal(mu0, sqrt(sigma0))      sigma0 is a variance
    Sigma_k         ~ InverseWishart(psi0, nu0)
    P_n             ~ Poisson(rho)
    xbar_nk         ~ MVN(mu_k, Sigma_k / (P_n pi_nk))
    y_nm            ~ f(g(sum_k pi_nk xbar_nkm), eta_m)

g is the link, f the observation family. When beta carries a trailing
remainder entry (length K+1), local terms use its first K entries
unnormalized and the beta prior runs over the full simplex.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import gammaln, logsumexp, multigammaln

from . import distributions as dist
from .errors import DataError, ShapeError
from .links import apply_link, check_compatible
from .state import MU_Q_SCALE, VariationalState

LOG_2PI = dist.LOG_2PI

DOMAINS = ("real", "positive", "integer", "unit")


@dataclass
class Hyperparameters:
    """Model hyperparameters; psi0 and eta are per-dataset (M-dependent).

    sigma0 is the prior VARIANCE of each mu coordinate. eta is the
    observation spread for normal/gamma/beta families (ignored by
    poisson). alpha0 may be a scalar (symmetric beta prior) or a vector
    matching the beta length in use.
    """

    alpha0: float | np.ndarray
    alpha: float
    mu0: float
    sigma0: float
    psi0: np.ndarray
    nu0: float
    rho: float
    eta: np.ndarray
    obs_family: str = "normal"
    link: str = "identity"

    def __post_init__(self):
        self.psi0 = np.asarray(self.psi0, dtype=float)
        self.eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if np.ndim(self.alpha0) > 0:
            self.alpha0 = np.asarray(self.alpha0, dtype=float)
            if np.any(self.alpha0 <= 0):
                raise ValueError("alpha0 entries must be positive")
        elif self.alpha0 <= 0:
            raise ValueError("alpha0 must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if np.any(self.eta <= 0):
            raise ValueError("eta must be positive")
        m = self.psi0.shape[0]
        if self.psi0.shape != (m, m):
            raise ValueError("psi0 must be square")
        if self.nu0 <= m - 1:
            raise ValueError("nu0 must exceed M - 1")
        if self.eta.shape[0] not in (1, m):
            raise ShapeError("eta must be scalar or length M")
        if self.eta.shape[0] == 1 and m > 1:
            self.eta = np.full(m, float(self.eta[0]))
        check_compatible(self.obs_family, self.link)

    def alpha0_vector(self, length: int) -> np.ndarray:
        if np.ndim(self.alpha0) == 0:
            return np.full(length, float(self.alpha0))
        if self.alpha0.shape[0] != length:
            raise ShapeError(
                "alpha0 vector has length %d, need %d" % (self.alpha0.shape[0], length)
            )
        return self.alpha0


@dataclass
class GroundTruth:
    """Simulation ground truth; pi and xbar are empirical (particle-level)."""

    beta: np.ndarray                      # (K,)
    pi: np.ndarray                        # (N, K) empirical particle fractions
    mu: np.ndarray                        # (K, M)
    sigma: np.ndarray                     # (K, M, M)
    xbar: np.ndarray                      # (N, K, M)
    p: np.ndarray                         # (N,) particle counts
    sigma_m: Optional[np.ndarray] = None  # (M,) observation spreads, if drawn
    xbar_mask: Optional[np.ndarray] = None  # (N, K) True where xbar is empirical
    pi_dirichlet: Optional[np.ndarray] = None  # (N, K) drawn Dirichlet weights
    modes: Optional[list] = None          # per factor (S_k, M) mode centers


@dataclass
class Dataset:
    y: np.ndarray
    domain: str = "real"
    ground_truth: Optional[GroundTruth] = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim != 2 or self.y.shape[1] == 0:
            raise DataError("y must be an (N, M) array with M >= 1")
        if self.domain not in DOMAINS:
            raise DataError("unknown domain %r" % (self.domain,))

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.y.shape[1]

    def validate_domain(self) -> None:
        """Raise DataError naming the first offending entry, if any."""
        y = self.y
        if not np.all(np.isfinite(y)):
            n, m = np.argwhere(~np.isfinite(y))[0]
            raise DataError("y[%d, %d] is not finite" % (n, m))
        if self.domain == "positive" and np.any(y <= 0):
            n, m = np.argwhere(y <= 0)[0]
            raise DataError("domain 'positive' violated at y[%d, %d] = %r" % (n, m, y[n, m]))
        if self.domain == "integer" and (np.any(y < 0) or np.any(y != np.floor(y))):
            bad = (y < 0) | (y != np.floor(y))
            n, m = np.argwhere(bad)[0]
            raise DataError("domain 'integer' violated at y[%d, %d] = %r" % (n, m, y[n, m]))
        if self.domain == "unit" and (np.any(y < 0) or np.any(y > 1)):
            bad = (y < 0) | (y > 1)
            n, m = np.argwhere(bad)[0]
            raise DataError("domain 'unit' violated at y[%d, %d] = %r" % (n, m, y[n, m]))


@dataclass
class LatentPoint:
    """One complete setting of the latent variables (for density evaluation)."""

    beta: np.ndarray   # (K,) or (K+1,) with remainder last
    pi: np.ndarray     # (N, K)
    mu: np.ndarray     # (K, M)
    sigma: np.ndarray  # (K, M, M)
    xbar: np.ndarray   # (N, K, M)
    p: np.ndarray      # (N,) non-negative integers


# ---------------------------------------------------------------------------
# observation likelihood


def obs_loglik_terms(hp: Hyperparameters, y, mean):
    """Log-likelihood of y under family hp.obs_family, summed over features.

    `mean` is the post-link observation mean with shape (..., M)
    broadcastable against y. Assumes y already inside the family support;
    invalid (mean, eta) combinations yield -inf rather than raising.
    """
    y = np.asarray(y, dtype=float)
    eta = hp.eta
    fam = hp.obs_family
    with np.errstate(all="ignore"):
        if fam == "normal":
            z = (y - mean) / eta
            t = -0.5 * LOG_2PI - np.log(eta) - 0.5 * z * z
        elif fam == "poisson":
            t = y * np.log(mean) - mean - gammaln(y + 1.0)
        elif fam == "gamma":
            a, b = dist.gamma_mean_shape_params(mean, eta)
            t = (a - 1.0) * np.log(y) - y / b - gammaln(a) - a * np.log(b)
        elif fam == "beta":
            from scipy.special import betaln

            a, b, _ = dist.beta_mean_spread_params(mean, eta, clamp=True)
            t = (a - 1.0) * np.log(y) + (b - 1.0) * np.log1p(-y) - betaln(a, b)
        else:
            raise ValueError("unknown observation family %r" % (fam,))
    return t.sum(axis=-1)


def log_lik_obs(hp: Hyperparameters, y_n, pi_n, xbar_n) -> float:
    """log f(y_n | g(pi_n' xbar_n), eta) for a single observation.

    y_n: (M,), pi_n: (K,), xbar_n: (K, M). Validates the support of y_n.
    """
    y_n = np.asarray(y_n, dtype=float)
    _check_support(hp.obs_family, y_n)
    linear = np.asarray(pi_n, dtype=float) @ np.asarray(xbar_n, dtype=float)
    mean = apply_link(hp.link, linear)
    return float(obs_loglik_terms(hp, y_n, mean))


def _check_support(fam: str, y) -> None:
    if fam == "normal":
        ok = np.all(np.isfinite(y))
    elif fam == "poisson":
        ok = np.all(y >= 0) and np.all(y == np.floor(y))
    elif fam == "gamma":
        ok = np.all(y > 0)
    elif fam == "beta":
        ok = np.all(y > 0) and np.all(y < 1)
    else:
        raise ValueError("unknown observation family %r" % (fam,))
    if not ok:
        raise DataError("y outside the %s support" % (fam,))


# ---------------------------------------------------------------------------
# joint density and its block-relevant parts


def _local_pi_conc(hp: Hyperparameters, beta, k: int) -> np.ndarray:
    """Concentration alpha * beta_k for the pi prior; beta may carry K+1."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape[0] not in (k, k + 1):
        raise ShapeError("beta must have K or K+1 entries")
    return hp.alpha * beta[:k]


def _log_xbar_prior(mu_k, sigma_k, xbar_nk, count: float) -> float:
    """log MVN(xbar_nk | mu_k, sigma_k / count); -inf when count == 0."""
    if count <= 0.0:
        return -np.inf
    m = mu_k.shape[0]
    mvn = dist.MultivariateNormal(mu_k, sigma_k)
    # N(x | mu, Sigma/c) = N-kernel with quad scaled by c and logdet shifted
    d = xbar_nk - mu_k
    z = d @ mvn._chol_inv.T
    quad = float(z @ z)
    log_det = mvn._log_det
    return -0.5 * (m * LOG_2PI - m * np.log(count) + log_det + count * quad)


def log_joint(hp: Hyperparameters, data: Dataset, z: LatentPoint) -> float:
    """log p(y, z) under the generative model. Reference implementation."""
    y = data.y
    n_obs, _ = y.shape
    k = z.pi.shape[1]
    total = 0.0

    total += float(dist.Dirichlet(hp.alpha0_vector(len(z.beta))).log_pdf(z.beta))
    pi_prior = dist.Dirichlet(_local_pi_conc(hp, z.beta, k))
    total += float(pi_prior.log_pdf(z.pi).sum())
    total += float(dist.Normal(hp.mu0, np.sqrt(hp.sigma0)).log_pdf(z.mu).sum())
    iw = dist.InverseWishart(hp.psi0, hp.nu0)
    for j in range(k):
        total += float(iw.log_pdf(z.sigma[j]))
    total += float(dist.Poisson(hp.rho).log_pdf(z.p).sum())
    for i in range(n_obs):
        for j in range(k):
            total += _log_xbar_prior(
                z.mu[j], z.sigma[j], z.xbar[i, j], float(z.p[i] * z.pi[i, j])
            )
        total += log_lik_obs(hp, y[i], z.pi[i], z.xbar[i])
    return total


def partial_log_joint(hp: Hyperparameters, data: Dataset, z: LatentPoint, which) -> float:
    """Terms of log p(y, z) that depend on one latent block.

    which is ("beta",), ("pi", n), ("p", n) or ("xbar", n, k).
    """
    kind = which[0]
    k = z.pi.shape[1]
    if kind == "beta":
        total = float(dist.Dirichlet(hp.alpha0_vector(len(z.beta))).log_pdf(z.beta))
        pi_prior = dist.Dirichlet(_local_pi_conc(hp, z.beta, k))
        total += float(pi_prior.log_pdf(z.pi).sum())
        return total
    if kind == "pi":
        n = which[1]
        total = float(
            dist.Dirichlet(_local_pi_conc(hp, z.beta, k)).log_pdf(z.pi[n])
        )
        for j in range(k):
            total += _log_xbar_prior(
                z.mu[j], z.sigma[j], z.xbar[n, j], float(z.p[n] * z.pi[n, j])
            )
        total += log_lik_obs(hp, data.y[n], z.pi[n], z.xbar[n])
        return total
    if kind == "p":
        n = which[1]
        total = float(dist.Poisson(hp.rho).log_pdf(z.p[n]))
        for j in range(k):
            total += _log_xbar_prior(
                z.mu[j], z.sigma[j], z.xbar[n, j], float(z.p[n] * z.pi[n, j])
            )
        return total
    if kind == "xbar":
        n, j = which[1], which[2]
        total = _log_xbar_prior(
            z.mu[j], z.sigma[j], z.xbar[n, j], float(z.p[n] * z.pi[n, j])
        )
        total += log_lik_obs(hp, data.y[n], z.pi[n], z.xbar[n])
        return total
    raise ValueError("unknown block %r" % (kind,))


# ---------------------------------------------------------------------------
# ELBO


def _kl_normal_fixed_scale(mean_q, mu0: float, sigma0: float) -> float:
    """Sum of KL(N(m, MU_Q_SCALE^2) || N(mu0, sigma0)) over all entries."""
    s2 = MU_Q_SCALE * MU_Q_SCALE
    d = np.asarray(mean_q, dtype=float) - mu0
    per = 0.5 * (np.log(sigma0 / s2) + (s2 + d * d) / sigma0 - 1.0)
    return float(per.sum())


def _iw_e_log_det(psi_q, nu_q: float) -> float:
    """E[log det Sigma] under InverseWishart(psi_q, nu_q)."""
    m = psi_q.shape[0]
    _, logdet = np.linalg.slogdet(psi_q)
    i = np.arange(1, m + 1)
    return float(logdet - m * np.log(2.0) - dist.digamma((nu_q + 1.0 - i) / 2.0).sum())


def _kl_inverse_wishart(psi_q, nu_q: float, psi0, nu0: float) -> float:
    """KL(IW(psi_q, nu_q) || IW(psi0, nu0)), exact."""
    m = psi_q.shape[0]
    _, logdet_q = np.linalg.slogdet(psi_q)
    _, logdet_0 = np.linalg.slogdet(psi0)
    e_log_det_sigma = _iw_e_log_det(psi_q, nu_q)
    psi_q_inv = np.linalg.inv(psi_q)
    e_log_q = (
        0.5 * nu_q * logdet_q
        - 0.5 * nu_q * m * np.log(2.0)
        - multigammaln(0.5 * nu_q, m)
        - 0.5 * (nu_q + m + 1.0) * e_log_det_sigma
        - 0.5 * nu_q * m
    )
    e_log_p = (
        0.5 * nu0 * logdet_0
        - 0.5 * nu0 * m * np.log(2.0)
        - multigammaln(0.5 * nu0, m)
        - 0.5 * (nu0 + m + 1.0) * e_log_det_sigma
        - 0.5 * nu_q * float(np.trace(psi0 @ psi_q_inv))
    )
    return float(e_log_q - e_log_p)


def _log_dirichlet_from_logs(conc, log_x) -> np.ndarray:
    """Dirichlet log density given log-coordinates; conc broadcasts."""
    conc = np.asarray(conc, dtype=float)
    norm = gammaln(conc.sum(axis=-1)) - gammaln(conc).sum(axis=-1)
    return norm + ((conc - 1.0) * log_x).sum(axis=-1)


def _log_dirichlet_from_log_conc(log_conc, log_x) -> np.ndarray:
    """Dirichlet log density with the concentration itself in log space.

    Needed when the concentration is built from sampled global proportions:
    a near-dead factor's beta draw can sit below the smallest positive
    double, so exp() of it is exactly 0 and the plain normalizer hits
    gammaln(0) = +inf. Working from log keeps the density a finite (very
    negative) number instead.
    """
    conc = np.exp(log_conc)
    norm = dist.gammaln_from_log(logsumexp(log_conc, axis=-1))
    norm -= dist.gammaln_from_log(log_conc).sum(axis=-1)
    return norm + ((conc - 1.0) * log_x).sum(axis=-1)


def elbo(
    hp: Hyperparameters,
    data: Dataset,
    state: VariationalState,
    n_samples: int = 64,
    rng: np.random.Generator | None = None,
    return_se: bool = False,
):
    """Monte Carlo ELBO estimate.

    beta, pi, xbar and P are sampled from q; the mu and Sigma terms are
    integrated analytically (exact KL for their priors, exact posterior
    expectation inside the xbar prior), which strictly reduces estimator
    variance without changing its mean. Returns the estimate, or
    (estimate, standard_error) when return_se is set.
    """
    if rng is None:
        raise ValueError("elbo needs an explicit Generator for reproducibility")
    s = int(n_samples)
    if s < 1:
        raise ValueError("n_samples must be >= 1")
    y = data.y
    n, m = y.shape
    k = state.n_factors

    analytic = -_kl_normal_fixed_scale(state.lam_mu_mean, hp.mu0, hp.sigma0)
    for j in range(k):
        analytic -= _kl_inverse_wishart(
            state.lam_sigma_psi[j], float(state.lam_sigma_nu[j]), hp.psi0, hp.nu0
        )

    # per-factor constants for the Rao-Blackwellized xbar prior
    e_lam = np.empty((k, m, m))   # E[Sigma_k^-1] = nu Psi^-1
    e_logdet = np.empty(k)
    for j in range(k):
        nu_j = float(state.lam_sigma_nu[j])
        e_lam[j] = nu_j * np.linalg.inv(state.lam_sigma_psi[j])
        e_logdet[j] = _iw_e_log_det(state.lam_sigma_psi[j], nu_j)
    tr_e_lam = np.trace(e_lam, axis1=1, axis2=2)

    beta_s, log_beta_s = dist.sample_dirichlet_log(rng, state.lam_beta, (s,))
    pi_s, log_pi_s = dist.sample_dirichlet_log(rng, state.lam_pi, (s,))
    p_s = rng.poisson(state.lam_p, size=(s, n)).astype(float)
    xbar_s = state.lam_xbar_mean + state.lam_xbar_scale * rng.standard_normal((s, n, k, m))

    alpha0_vec = hp.alpha0_vector(k + 1)
    with np.errstate(all="ignore"):
        vals = _log_dirichlet_from_logs(alpha0_vec, log_beta_s)
        vals -= _log_dirichlet_from_logs(state.lam_beta, log_beta_s)

        # unnormalized first K entries; built in log space so collapsed
        # factors give a finite density instead of gammaln(0)
        log_conc_pi = np.log(hp.alpha) + log_beta_s[:, :k]  # (s, k)
        vals += _log_dirichlet_from_log_conc(log_conc_pi[:, None, :], log_pi_s).sum(axis=1)
        vals -= _log_dirichlet_from_logs(state.lam_pi, log_pi_s).sum(axis=1)

        vals += (p_s * np.log(hp.rho) - hp.rho - gammaln(p_s + 1.0)).sum(axis=1)
        vals -= (
            p_s * np.log(state.lam_p) - state.lam_p - gammaln(p_s + 1.0)
        ).sum(axis=1)

        # xbar prior, mu and Sigma integrated out
        log_p_float = np.where(p_s > 0, np.log(np.maximum(p_s, 1.0)), -np.inf)
        log_c = log_p_float[:, :, None] + log_pi_s  # (s, n, k)
        d = xbar_s - state.lam_mu_mean  # (s, n, k, m)
        quad = np.einsum("snkm,kmj,snkj->snk", d, e_lam, d)
        quad = quad + (MU_Q_SCALE * MU_Q_SCALE) * tr_e_lam
        c = p_s[:, :, None] * pi_s
        xbar_prior = (
            -0.5 * m * LOG_2PI
            + 0.5 * m * log_c
            - 0.5 * e_logdet
            - 0.5 * c * quad
        )
        vals += xbar_prior.sum(axis=(1, 2))
        z = (xbar_s - state.lam_xbar_mean) / state.lam_xbar_scale
        vals -= (
            -0.5 * LOG_2PI - np.log(state.lam_xbar_scale) - 0.5 * z * z
        ).sum(axis=(1, 2, 3))

        linear = np.einsum("snk,snkm->snm", pi_s, xbar_s)
        mean = apply_link(hp.link, linear)
        vals += obs_loglik_terms(hp, y, mean).sum(axis=1)

    estimate = analytic + float(vals.mean())
    if not return_se:
        return estimate
    se = float(vals.std(ddof=1) / np.sqrt(s)) if s > 1 else np.inf
    return estimate, se

"""Black-box variational inference for the deconvolution model.

One iteration follows the coordinate pattern: stochastic score-function
updates for every local xbar block (factor by factor), then pi, then P,
then closed-form conjugate updates for mu and Sigma, then a stochastic
update for beta. Stochastic blocks sample only their own latent from q;
every other latent enters the objective through its q-expectation.

Gradient steps are RMSProp-scaled with per-block Robbins-Monro learning
rates rho_t = (t + delay) ** rate, and use a per-component control
variate a* estimated leave-one-out from the same sample batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln, logsumexp

from . import seeding
from .distributions import digamma, gammaln_from_log, sample_dirichlet_log
from .errors import DataError
from .links import apply_link, inverse_link
from .model import (
    LOG_2PI,
    Dataset,
    Hyperparameters,
    _iw_e_log_det,
    elbo as model_elbo,
    obs_loglik_terms,
)
from .report import FitReport
from .state import MU_Q_SCALE, PARAM_FLOOR, VariationalState

BLOCKS = ("beta", "pi", "xbar_mean", "xbar_scale", "p")


@dataclass(frozen=True)
class LearningRateSchedule:
    """rho_t = (t + delay) ** rate; rate < 0, delay >= 1."""

    delay: float
    rate: float

    def rho(self, t: int) -> float:
        return float((t + self.delay) ** self.rate)


DEFAULT_SCHEDULES = {
    "beta": LearningRateSchedule(2.0**4, -0.5),
    "pi": LearningRateSchedule(2.0**10, -0.8),
    "xbar_mean": LearningRateSchedule(2.0**20, -0.8),
    "xbar_scale": LearningRateSchedule(2.0**20, -0.8),
    "p": LearningRateSchedule(2.0**5, -0.7),
}

# beta-family observations destabilize early xbar location moves far less,
# so their location schedule warms up much sooner
BETA_OBS_XBAR_MEAN_DELAY = 2.0**10


def default_schedules(obs_family: str) -> dict:
    sched = dict(DEFAULT_SCHEDULES)
    if obs_family == "beta":
        sched["xbar_mean"] = LearningRateSchedule(BETA_OBS_XBAR_MEAN_DELAY, -0.8)
    return sched


@dataclass
class FitOptions:
    samples: int = 64              # S, score-function sample count
    elbo_samples: int = 64         # samples for the convergence/trace ELBO
    max_iters: int = 1000
    min_iters: int = 10
    delta: float = 1e-4            # relative ELBO change threshold
    consecutive: int = 3           # hits needed to declare convergence
    schedules: Optional[dict] = None  # per-block LearningRateSchedule overrides
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-8
    use_control_variates: bool = True
    validate_each_iteration: bool = True
    init_noise: float = 0.01       # init jitter, in per-feature sd units
    init_scale: float = 10.0       # membership -> concentration scaling
    # nonparametric controls
    batch_max_iters: int = 150     # cap per batch-convergence stage
    max_cycles: int = 12           # merge+split cycles
    enable_splits: bool = True
    enable_merges: bool = True
    # checkpointing (used by the CLI)
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def resolved_schedules(self, obs_family: str) -> dict:
        sched = default_schedules(obs_family)
        if self.schedules:
            unknown = set(self.schedules) - set(BLOCKS)
            if unknown:
                raise ValueError("unknown schedule blocks: %s" % sorted(unknown))
            sched.update(self.schedules)
        return sched


@dataclass
class GradientEstimatorState:
    """RMSProp accumulators, one array per stochastic parameter block."""

    samples: int
    decay: float = 0.9
    eps: float = 1e-8
    acc: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, n: int, k: int, m: int, samples: int, decay=0.9, eps=1e-8):
        return cls(
            samples=samples,
            decay=decay,
            eps=eps,
            acc={
                "beta": np.zeros(k + 1),
                "pi": np.zeros((n, k)),
                "xbar_mean": np.zeros((n, k, m)),
                "xbar_scale": np.zeros((n, k, m)),
                "p": np.zeros(n),
            },
        )

    def copy(self) -> "GradientEstimatorState":
        return GradientEstimatorState(
            samples=self.samples,
            decay=self.decay,
            eps=self.eps,
            acc={k: v.copy() for k, v in self.acc.items()},
        )


@dataclass
class ConvergenceMonitor:
    """Counts consecutive relative ELBO changes below delta."""

    delta: float = 1e-4
    needed: int = 3
    min_iters: int = 10
    hits: int = 0
    iters: int = 0
    prev: Optional[float] = None

    def update(self, value: float) -> bool:
        self.iters += 1
        if (
            self.prev is not None
            and np.isfinite(value)
            and np.isfinite(self.prev)
            and abs(value - self.prev) / (abs(self.prev) + 1e-12) < self.delta
        ):
            self.hits += 1
        else:
            self.hits = 0
        self.prev = value
        return self.hits >= self.needed and self.iters >= self.min_iters

    def reset_hits(self) -> None:
        self.hits = 0


# ---------------------------------------------------------------------------
# initialization


def fuzzy_c_means(x, k, rng, fuzzifier=2.0, tol=1e-5, max_iter=300):
    """Fuzzy c-means clustering; returns (memberships (N,k), centroids (k,M)).

    Memberships start from random rows on the simplex and iterate the
    standard alternating updates until the max membership change drops
    below tol.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    u = rng.random((n, k)) + 1e-3
    u /= u.sum(axis=1, keepdims=True)
    power = 1.0 / (fuzzifier - 1.0)
    cent = None
    for _ in range(max_iter):
        w = u**fuzzifier
        cent = (w.T @ x) / np.maximum(w.sum(axis=0)[:, None], 1e-12)
        d2 = ((x[:, None, :] - cent[None, :, :]) ** 2).sum(axis=-1)
        zero = d2 <= 1e-30
        inv = np.where(zero, 0.0, 1.0 / np.maximum(d2, 1e-300)) ** power
        new_u = np.where(
            zero.any(axis=1, keepdims=True),
            zero / np.maximum(zero.sum(axis=1, keepdims=True), 1),
            inv / inv.sum(axis=1, keepdims=True),
        )
        diff = np.abs(new_u - u).max()
        u = new_u
        if diff < tol:
            break
    return u, cent


def _init_common(hp, data, k, rng, noise, scale):
    y = data.y
    sd = y.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    y_noisy = y + rng.normal(size=y.shape) * (noise * sd)
    u, cent = fuzzy_c_means(y_noisy, k, rng)
    latent_cent = inverse_link(hp.link, cent)
    latent_y = inverse_link(hp.link, y_noisy)
    latent_var = np.maximum(latent_y.var(axis=0), 1e-6)
    return y_noisy, u, latent_cent, latent_y, latent_var


def _base_state(hp, data, k, u, latent_cent, latent_var, scale):
    n, m = data.y.shape
    lam_pi = np.maximum(scale * u, 1e-4)
    lam_beta = np.concatenate([np.maximum(scale * u.mean(axis=0), 1e-4), [0.1]])
    xbar_scale = np.sqrt(latent_var * k / hp.rho)
    xbar_scale = np.maximum(xbar_scale, 1e-3)
    return VariationalState(
        lam_beta=lam_beta,
        lam_pi=lam_pi,
        lam_mu_mean=latent_cent.copy(),
        lam_sigma_psi=np.repeat(np.diag(latent_var)[None, :, :], k, axis=0),
        lam_sigma_nu=np.full(k, hp.nu0 + m + 1.0),
        lam_xbar_mean=np.repeat(latent_cent[None, :, :], n, axis=0),
        lam_xbar_scale=np.broadcast_to(xbar_scale, (n, k, m)).copy(),
        lam_p=np.full(n, float(hp.rho)),
    )


def initialize(
    hp: Hyperparameters,
    data: Dataset,
    k: int,
    rng: np.random.Generator,
    nonparametric: bool = False,
    noise: float = 0.01,
    scale: float = 10.0,
) -> VariationalState:
    """Data-driven initialization.

    Jittered observations are clustered with fuzzy c-means; memberships
    seed the pi/beta concentrations (scaled by `scale`), centroids pulled
    through the inverse link seed the global and local factor centers.
    The nonparametric variant appends one extra catch-all factor whose
    local centers hold the reconstruction residual, giving split moves
    material to work with.
    """
    if k < 1:
        raise ValueError("need at least one factor")
    if data.y.shape[0] == 0:
        raise DataError("cannot initialize from zero observations")
    _, u, latent_cent, latent_y, latent_var = _init_common(hp, data, k, rng, noise, scale)
    state = _base_state(hp, data, k, u, latent_cent, latent_var, scale)
    if not nonparametric:
        return state

    n, m = data.y.shape
    recon = u @ latent_cent  # (n, m), membership-weighted latent reconstruction
    residual = latent_y - recon
    catch_mu = latent_y.mean(axis=0)

    state.lam_pi = np.column_stack([state.lam_pi, np.full(n, 0.1)])
    state.lam_beta = np.concatenate([state.lam_beta[:-1], [0.1, 0.1]])
    state.lam_mu_mean = np.vstack([state.lam_mu_mean, catch_mu[None, :]])
    state.lam_sigma_psi = np.concatenate(
        [state.lam_sigma_psi, np.diag(latent_var)[None, :, :]], axis=0
    )
    state.lam_sigma_nu = np.concatenate([state.lam_sigma_nu, [hp.nu0 + m + 1.0]])
    state.lam_xbar_mean = np.concatenate(
        [state.lam_xbar_mean, residual[:, None, :]], axis=1
    )
    state.lam_xbar_scale = np.concatenate(
        [state.lam_xbar_scale, state.lam_xbar_scale[:, :1, :]], axis=1
    )
    return state


def initialize_random(
    hp: Hyperparameters, data: Dataset, k: int, rng: np.random.Generator
) -> VariationalState:
    """Uninformed random initialization (baseline for recovery checks)."""
    n, m = data.y.shape
    latent_y = inverse_link(hp.link, data.y)
    latent_var = np.maximum(latent_y.var(axis=0), 1e-6)
    center = latent_y.mean(axis=0)
    u = rng.dirichlet(np.ones(k), size=n)
    cent = center[None, :] + rng.standard_normal((k, m)) * np.sqrt(latent_var)
    return _base_state(hp, data, k, u, cent, latent_var, 10.0)


# ---------------------------------------------------------------------------
# conjugate updates


def update_mu_sigma(hp: Hyperparameters, data: Dataset, state: VariationalState):
    """Closed-form coordinate updates for q(mu_k) means and q(Sigma_k).

    Mutates `state` in place and returns it. Each update is the exact
    maximizer of the ELBO restricted to its block, holding every other
    factor of q fixed. With w_nk = E[P_n] E[pi_nk]:

        A = sigma0^-1 I + (sum_n w_nk) E[Sigma_k^-1]
        lam_mu_mean_k = A^-1 (sigma0^-1 mu0 1 + E[Sigma_k^-1] sum_n w_nk E[xbar_nk])
        lam_sigma_nu_k = nu0 + N
        lam_sigma_psi_k = psi0 + sum_n w_nk E[(xbar_nk - mu_k)(xbar_nk - mu_k)']

    where E[Sigma^-1] = nu Psi^-1 and the scatter expectation carries the
    q variances of xbar and mu on its diagonal, not just the outer
    product of the means. The Psi update sees the fresh mu mean. Note
    the degrees of freedom grow by the observation count N: each row
    contributes one xbar likelihood term regardless of its particle
    count, which only scales the quadratic part.
    """
    n, m = data.y.shape
    w = state.lam_p[:, None] * state.e_pi()  # (n, k)
    eye = np.eye(m)
    for k in range(state.n_factors):
        try:
            e_prec = state.lam_sigma_nu[k] * np.linalg.inv(state.lam_sigma_psi[k])
        except np.linalg.LinAlgError:
            raise ValueError("factor %d: Psi not invertible" % k) from None
        sw = float(w[:, k].sum())
        a = eye / hp.sigma0 + sw * e_prec
        b = np.full(m, hp.mu0 / hp.sigma0) + e_prec @ (w[:, k] @ state.lam_xbar_mean[:, k, :])
        try:
            new_mean = np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            raise ValueError("factor %d: precision sum not invertible" % k) from None
        state.lam_mu_mean[k] = new_mean
        d = state.lam_xbar_mean[:, k, :] - new_mean
        psi = hp.psi0 + (w[:, k][:, None] * d).T @ d
        psi += np.diag(w[:, k] @ state.lam_xbar_scale[:, k, :] ** 2)
        psi += sw * MU_Q_SCALE**2 * eye
        state.lam_sigma_psi[k] = 0.5 * (psi + psi.T)
        state.lam_sigma_nu[k] = hp.nu0 + n
    return state


# ---------------------------------------------------------------------------
# score-function machinery


def _cv_adjusted_mean(g, h, use_cv):
    """Mean over axis 0 of g - a* h with a* estimated leave-one-out.

    g = score * (log p - log q) per component, h = score. a*_{-s} uses
    every sample but s, so subtracting a*_{-s} h_s keeps the estimator
    exactly unbiased.
    """
    s = g.shape[0]
    if not use_cv or s < 3:
        return g.mean(axis=0)
    sg = g.sum(axis=0)
    sh = h.sum(axis=0)
    sgh = (g * h).sum(axis=0)
    shh = (h * h).sum(axis=0)
    mg = (sg - g) / (s - 1)
    mh = (sh - h) / (s - 1)
    cov = (sgh - g * h) / (s - 1) - mg * mh
    var = (shh - h * h) / (s - 1) - mh * mh
    a = np.where(var > 1e-20, cov / np.maximum(var, 1e-20), 0.0)
    return (g - a * h).mean(axis=0)


def _rmsprop_apply(est, name, grad, sched, t, mask=None, indices=None):
    """RMSProp-scaled step for a parameter array; returns the step.

    mask selects which leading entries update (non-finite gradients skip
    their block). indices optionally addresses a sub-array of the
    accumulator (the factor column for xbar blocks).
    """
    acc = est.acc[name] if indices is None else est.acc[name][indices]
    if mask is None:
        mask = np.ones(grad.shape[:1], dtype=bool) if grad.ndim else True
    grad = np.where(np.isfinite(grad), grad, 0.0)
    upd = est.decay * acc + (1.0 - est.decay) * grad * grad
    acc_new = np.where(_expand(mask, grad.shape), upd, acc)
    step = sched.rho(t) * grad / np.sqrt(acc_new + est.eps)
    step = np.where(_expand(mask, grad.shape), step, 0.0)
    if indices is None:
        est.acc[name] = acc_new
    else:
        est.acc[name][indices] = acc_new
    return step


def _expand(mask, shape):
    mask = np.asarray(mask)
    while mask.ndim < len(shape):
        mask = mask[..., None]
    return np.broadcast_to(mask, shape)


class _IterationWorkspace:
    """Per-iteration plug-in expectations, refreshed between phases.

    Uses E[Sigma^-1] = nu Psi^-1 and E[log det Sigma], matching both the
    ELBO estimator and the conjugate updates, so every block ascends the
    same objective.
    """

    def __init__(self, hp, state):
        self.hp = hp
        self.refresh(state)

    def refresh(self, state):
        m = state.n_features
        self.e_pi = state.e_pi()
        self.e_sigma_inv = np.empty((state.n_factors, m, m))
        self.logdet_e_sigma = np.empty(state.n_factors)
        for k in range(state.n_factors):
            self.e_sigma_inv[k] = state.lam_sigma_nu[k] * np.linalg.inv(
                state.lam_sigma_psi[k]
            )
            self.logdet_e_sigma[k] = _iw_e_log_det(
                state.lam_sigma_psi[k], state.lam_sigma_nu[k]
            )

    def xbar_prior_quads(self, state):
        """(n, k) quadratic forms (E[xbar]-E[mu])' E[Sigma^-1] (E[xbar]-E[mu])."""
        d = state.lam_xbar_mean - state.lam_mu_mean[None, :, :]
        return np.einsum("nkm,kmj,nkj->nk", d, self.e_sigma_inv, d)


def xbar_block_gradient(hp, data, state, k, samples, rng, use_cv=True, ws=None):
    """Score-function gradient for factor k's local centers.

    Returns (g_mean, g_scale), both (n, m): gradients of the plug-in
    objective with respect to lam_xbar_mean[:, k, :] and
    lam_xbar_scale[:, k, :].
    """
    y = data.y
    n, m = y.shape
    ws = ws or _IterationWorkspace(hp, state)
    m0 = state.lam_xbar_mean[:, k, :]
    s0 = state.lam_xbar_scale[:, k, :]
    eps = rng.standard_normal((samples, n, m))
    x = m0 + s0 * eps  # (s, n, m)

    c = state.lam_p * ws.e_pi[:, k]  # (n,)
    lam = ws.e_sigma_inv[k]
    d = x - state.lam_mu_mean[k]
    quad = np.einsum("snm,mj,snj->sn", d, lam, d)
    with np.errstate(all="ignore"):
        prior = (
            -0.5 * m * LOG_2PI
            + 0.5 * m * np.log(c)
            - 0.5 * ws.logdet_e_sigma[k]
            - 0.5 * c * quad
        )
        base = np.einsum("nk,nkm->nm", ws.e_pi, state.lam_xbar_mean)
        linear = base + ws.e_pi[:, k, None] * (x - m0)
        lik = obs_loglik_terms(hp, y, apply_link(hp.link, linear))
        logq = (-0.5 * LOG_2PI - np.log(s0) - 0.5 * eps * eps).sum(axis=-1)
        f = prior + lik - logq  # (s, n)

        h_mean = (x - m0) / (s0 * s0)
        h_scale = -1.0 / s0 + (x - m0) ** 2 / s0**3
        g_mean = _cv_adjusted_mean(h_mean * f[:, :, None], h_mean, use_cv)
        g_scale = _cv_adjusted_mean(h_scale * f[:, :, None], h_scale, use_cv)
    return g_mean, g_scale


def pi_block_gradient(hp, data, state, samples, rng, use_cv=True, ws=None):
    """Score-function gradient for all mixing-weight blocks, (n, k)."""
    y = data.y
    n, m = y.shape
    ws = ws or _IterationWorkspace(hp, state)
    conc = state.lam_pi
    pi_s, log_pi_s = sample_dirichlet_log(rng, conc, (samples,))  # (s, n, k)

    quads = ws.xbar_prior_quads(state)  # (n, k)
    prior_conc = hp.alpha * state.e_beta()[: state.n_factors]  # plug-in E[beta]
    with np.errstate(all="ignore"):
        log_p_n = np.log(state.lam_p)  # E[P] plug-in
        xbar_terms = (
            -0.5 * m * LOG_2PI
            + 0.5 * m * (log_p_n[None, :, None] + log_pi_s)
            - 0.5 * ws.logdet_e_sigma[None, None, :]
            - 0.5 * state.lam_p[None, :, None] * pi_s * quads[None, :, :]
        ).sum(axis=2)
        linear = np.einsum("snk,nkm->snm", pi_s, state.lam_xbar_mean)
        lik = obs_loglik_terms(hp, y, apply_link(hp.link, linear))
        prior_pi = (
            gammaln(prior_conc.sum())
            - gammaln(prior_conc).sum()
            + ((prior_conc - 1.0) * log_pi_s).sum(axis=2)
        )
        logq = (
            gammaln(conc.sum(axis=1))
            - gammaln(conc).sum(axis=1)
            + ((conc - 1.0) * log_pi_s).sum(axis=2)
        )
        f = xbar_terms + lik + prior_pi - logq  # (s, n)

        h = log_pi_s + (digamma(conc.sum(axis=1))[:, None] - digamma(conc))[None, :, :]
        g = _cv_adjusted_mean(h * f[:, :, None], h, use_cv)  # (n, k)
    return g


def p_block_gradient(hp, data, state, samples, rng, use_cv=True, ws=None):
    """Score-function gradient for the particle-count rates, (n,)."""
    n = data.y.shape[0]
    m = state.n_features
    ws = ws or _IterationWorkspace(hp, state)
    p_s = rng.poisson(state.lam_p, size=(samples, n)).astype(float)
    quads = ws.xbar_prior_quads(state)  # (n, k)
    with np.errstate(all="ignore"):
        log_p = np.log(p_s)  # -inf at zero draws; the mask handles it
        per_k = (
            -0.5 * m * LOG_2PI
            + 0.5 * m * (log_p[:, :, None] + np.log(ws.e_pi)[None, :, :])
            - 0.5 * ws.logdet_e_sigma[None, None, :]
            - 0.5 * p_s[:, :, None] * ws.e_pi[None, :, :] * quads[None, :, :]
        ).sum(axis=2)
        prior = p_s * np.log(hp.rho) - hp.rho - gammaln(p_s + 1.0)
        logq = p_s * np.log(state.lam_p) - state.lam_p - gammaln(p_s + 1.0)
        f = per_k + prior - logq  # (s, n)
        h = p_s / state.lam_p - 1.0
        g = _cv_adjusted_mean(h * f, h, use_cv)  # (n,)
    return g


def beta_block_gradient(hp, data, state, samples, rng, use_cv=True, ws=None):
    """Score-function gradient for the global proportions, (k+1,)."""
    k = state.n_factors
    n = data.y.shape[0]
    conc = state.lam_beta
    beta_s, log_beta_s = sample_dirichlet_log(rng, conc, (samples,))  # (s, k+1)
    e_pi = state.e_pi()
    with np.errstate(all="ignore"):
        t_k = np.log(e_pi).sum(axis=0)  # (k,)
        alpha0_vec = hp.alpha0_vector(k + 1)
        prior = (
            gammaln(alpha0_vec.sum())
            - gammaln(alpha0_vec).sum()
            + ((alpha0_vec - 1.0) * log_beta_s).sum(axis=1)
        )
        # log space so a collapsed factor's underflowed beta draw cannot
        # turn this into gammaln(0) = inf and wedge the whole block
        log_local_conc = np.log(hp.alpha) + log_beta_s[:, :k]  # (s, k)
        local_conc = np.exp(log_local_conc)
        local = (
            n * gammaln_from_log(logsumexp(log_local_conc, axis=1))
            - n * gammaln_from_log(log_local_conc).sum(axis=1)
            + ((local_conc - 1.0) * t_k[None, :]).sum(axis=1)
        )
        logq = (
            gammaln(conc.sum())
            - gammaln(conc).sum()
            + ((conc - 1.0) * log_beta_s).sum(axis=1)
        )
        f = prior + local - logq  # (s,)
        h = log_beta_s + digamma(conc.sum()) - digamma(conc)  # (s, k+1)
        g = _cv_adjusted_mean(h * f[:, None], h, use_cv)
    return g


def _xbar_phase(hp, data, state, est, sched_mean, sched_scale, t, s, rng, use_cv, ws):
    """Sampled updates for every local center block, one factor at a time."""
    skipped = 0
    for k in range(state.n_factors):
        ws.refresh(state)
        m0 = state.lam_xbar_mean[:, k, :]
        s0 = state.lam_xbar_scale[:, k, :]
        g_mean, g_scale = xbar_block_gradient(hp, data, state, k, s, rng, use_cv, ws)
        ok = np.isfinite(g_mean).all(axis=1) & np.isfinite(g_scale).all(axis=1)
        skipped += int((~ok).sum())
        idx = (slice(None), k, slice(None))
        step_m = _rmsprop_apply(est, "xbar_mean", g_mean, sched_mean, t, ok, idx)
        step_s = _rmsprop_apply(est, "xbar_scale", g_scale, sched_scale, t, ok, idx)
        state.lam_xbar_mean[:, k, :] = m0 + step_m
        state.lam_xbar_scale[:, k, :] = np.maximum(s0 + step_s, PARAM_FLOOR)
    return skipped


def _pi_phase(hp, data, state, est, sched, t, s, rng, use_cv, ws):
    ws.refresh(state)
    g = pi_block_gradient(hp, data, state, s, rng, use_cv, ws)
    ok = np.isfinite(g).all(axis=1)
    step = _rmsprop_apply(est, "pi", g, sched, t, ok)
    state.lam_pi = np.maximum(state.lam_pi + step, PARAM_FLOOR)
    return int((~ok).sum())


def _p_phase(hp, data, state, est, sched, t, s, rng, use_cv, ws):
    ws.refresh(state)
    g = p_block_gradient(hp, data, state, s, rng, use_cv, ws)
    ok = np.isfinite(g)
    step = _rmsprop_apply(est, "p", g, sched, t, ok)
    state.lam_p = np.maximum(state.lam_p + step, PARAM_FLOOR)
    return int((~ok).sum())


def _beta_phase(hp, data, state, est, sched, t, s, rng, use_cv, ws):
    g = beta_block_gradient(hp, data, state, s, rng, use_cv, ws)
    ok = bool(np.isfinite(g).all())
    step = _rmsprop_apply(est, "beta", g, sched, t, np.array(ok))
    state.lam_beta = np.maximum(state.lam_beta + step, PARAM_FLOOR)
    return 0 if ok else 1


def run_iteration(hp, data, state, est, opts, sched, t, rng, warnings=None):
    """One full update sweep, mutating state and est in place."""
    ws = _IterationWorkspace(hp, state)
    s = opts.samples
    cv = opts.use_control_variates
    skipped_xbar = _xbar_phase(
        hp, data, state, est, sched["xbar_mean"], sched["xbar_scale"], t, s, rng, cv, ws
    )
    skipped_pi = _pi_phase(hp, data, state, est, sched["pi"], t, s, rng, cv, ws)
    skipped_p = _p_phase(hp, data, state, est, sched["p"], t, s, rng, cv, ws)
    update_mu_sigma(hp, data, state)
    skipped_beta = _beta_phase(hp, data, state, est, sched["beta"], t, s, rng, cv, ws)
    if warnings is not None:
        for name, cnt in (
            ("xbar", skipped_xbar),
            ("pi", skipped_pi),
            ("P", skipped_p),
            ("beta", skipped_beta),
        ):
            if cnt:
                warnings.append(
                    "iteration %d: skipped %d %s block update(s), non-finite gradient"
                    % (t, cnt, name)
                )
    if opts.validate_each_iteration:
        state.validate()
    return state


def bbvi_step(which, hp, data, state, est, sched, t, rng, opts=None):
    """Single-block score-function update (mutates state and est).

    which is "beta", ("pi", None), ("xbar", k), or ("p", None); the pi,
    xbar and P forms update every observation's block of that type, which
    is equivalent to per-observation steps because blocks of the same
    type never interact within a phase.
    """
    opts = opts or FitOptions()
    ws = _IterationWorkspace(hp, state)
    s = opts.samples
    cv = opts.use_control_variates
    kind = which if isinstance(which, str) else which[0]
    if kind == "beta":
        _beta_phase(hp, data, state, est, sched["beta"], t, s, rng, cv, ws)
    elif kind == "pi":
        _pi_phase(hp, data, state, est, sched["pi"], t, s, rng, cv, ws)
    elif kind == "p":
        _p_phase(hp, data, state, est, sched["p"], t, s, rng, cv, ws)
    elif kind == "xbar":
        _xbar_phase(
            hp, data, state, est, sched["xbar_mean"], sched["xbar_scale"], t, s, rng, cv, ws
        )
    else:
        raise ValueError("unknown block %r" % (kind,))
    return state


# ---------------------------------------------------------------------------
# full parametric fit


def fit_parametric(
    hp: Hyperparameters,
    data: Dataset,
    k: int,
    opts: Optional[FitOptions] = None,
    seed: int = 0,
    resume: Optional[dict] = None,
) -> FitReport:
    """Fit the K-factor model with BBVI; fully determined by `seed`.

    `resume` takes a checkpoint payload (see report.load_checkpoint);
    because iteration t always draws from the (seed, iteration, t)
    substream, a resumed run reproduces the uninterrupted one exactly.
    """
    opts = opts or FitOptions()
    data.validate_domain()
    sched = opts.resolved_schedules(hp.obs_family)
    monitor = ConvergenceMonitor(opts.delta, opts.consecutive, opts.min_iters)
    warnings: list = []

    def eval_elbo(st):
        return model_elbo(
            hp, data, st, opts.elbo_samples, seeding.substream(seed, seeding.ELBO_EVAL)
        )

    if resume is not None:
        if resume["seed"] != seed:
            raise ValueError(
                "checkpoint seed %d does not match requested seed %d"
                % (resume["seed"], seed)
            )
        state = resume["state"]
        est = GradientEstimatorState.zeros(
            state.n_obs, state.n_factors, state.n_features, opts.samples,
            decay=opts.rmsprop_decay, eps=opts.rmsprop_eps,
        )
        est.acc = resume["acc"]
        monitor.hits = resume["monitor"]["hits"]
        monitor.iters = resume["monitor"]["iters"]
        monitor.prev = resume["monitor"]["prev"]
        trace = list(resume["elbo_trace"])
        warnings = list(resume["warnings"])
        start = resume["iterations"]
    else:
        state = initialize(
            hp, data, k, seeding.substream(seed, seeding.INIT),
            noise=opts.init_noise, scale=opts.init_scale,
        )
        est = GradientEstimatorState.zeros(
            state.n_obs, state.n_factors, state.n_features, opts.samples,
            decay=opts.rmsprop_decay, eps=opts.rmsprop_eps,
        )
        trace = [eval_elbo(state)]
        start = 0

    converged = False
    iters = start
    for t in range(start, opts.max_iters):
        run_iteration(
            hp, data, state, est, opts, sched, t,
            seeding.substream(seed, seeding.ITERATION, t), warnings,
        )
        value = eval_elbo(state)
        trace.append(value)
        if not np.isfinite(value):
            warnings.append("iteration %d: non-finite ELBO estimate" % t)
        iters = t + 1
        if monitor.update(value):
            converged = True
            break
        _maybe_checkpoint(opts, seed, state, est, monitor, trace, warnings, iters)

    return FitReport(
        mode="parametric",
        n_factors=state.n_factors,
        state=state,
        elbo_trace=trace,
        converged=converged,
        iterations=iters,
        warnings=warnings,
        moves=[],
        seed=seed,
        samples=opts.samples,
        elbo_samples=opts.elbo_samples,
    )


def _maybe_checkpoint(opts, seed, state, est, monitor, trace, warnings, iters):
    if not opts.checkpoint_every or not opts.checkpoint_dir:
        return
    if iters % opts.checkpoint_every:
        return
    from .report import save_checkpoint

    save_checkpoint(
        opts.checkpoint_dir, seed, state, est, monitor, trace, warnings, iters
    )

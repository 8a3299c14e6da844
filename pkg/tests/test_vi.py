"""Inference engine tests.

The stochastic-gradient estimators are checked against quadrature
oracles: for each block we integrate the plug-in objective exactly
(Gauss-Legendre / Gauss-Hermite / truncated Poisson sums), finite
difference it with respect to the variational parameters, and demand the
Monte Carlo estimator agree within its own standard error. The conjugate
updates are checked against analytic restricted objectives built
independently with scipy.
"""
import os

import numpy as np
import pytest
import scipy.special as sc
import scipy.stats as st

from deconv import seeding, vi
from deconv.errors import DataError
from deconv.model import Dataset, Hyperparameters
from deconv.report import FitReport, load_checkpoint
from deconv.state import MU_Q_SCALE, PARAM_FLOOR, VariationalState

LOG_2PI = np.log(2.0 * np.pi)


def make_hp(m, obs_family="normal", link="identity", rho=40.0, alpha=3.0,
            sigma0=4.0, eta=0.5):
    return Hyperparameters(
        alpha0=1.0, alpha=alpha, mu0=0.0, sigma0=sigma0,
        psi0=0.3 * np.eye(m), nu0=m + 2.0, rho=rho, eta=eta,
        obs_family=obs_family, link=link,
    )


def small_state(rng, n, k, m, nu_extra=6.0):
    psi = np.empty((k, m, m))
    for j in range(k):
        a = rng.normal(size=(m, m)) * 0.2
        psi[j] = 0.5 * np.eye(m) + a @ a.T
    return VariationalState(
        lam_beta=rng.uniform(1.5, 4.0, k + 1),
        lam_pi=rng.uniform(2.0, 6.0, (n, k)),
        lam_mu_mean=rng.normal(0, 1.0, (k, m)),
        lam_sigma_psi=psi,
        lam_sigma_nu=np.full(k, m + nu_extra),
        lam_xbar_mean=rng.normal(0, 1.0, (n, k, m)),
        lam_xbar_scale=rng.uniform(0.2, 0.6, (n, k, m)),
        lam_p=rng.uniform(20.0, 30.0, n),
    )


# ---------------------------------------------------------------------------
# learning rate schedules


def test_schedule_reference_values():
    sched = vi.default_schedules("normal")
    assert sched["beta"].rho(0) == 0.25  # 16^-0.5 exactly
    for name, s in sched.items():
        rhos = np.array([s.rho(t) for t in range(0, 2000, 97)])
        assert np.all(rhos > 0)
        assert np.all(np.diff(rhos) < 0)
    assert sched["xbar_mean"].delay == 2.0**20
    beta_obs = vi.default_schedules("beta")
    assert beta_obs["xbar_mean"].delay == 2.0**10
    assert beta_obs["xbar_scale"].delay == 2.0**20


def test_schedule_overrides():
    opts = vi.FitOptions(schedules={"pi": vi.LearningRateSchedule(4.0, -0.6)})
    sched = opts.resolved_schedules("normal")
    assert sched["pi"].delay == 4.0
    assert sched["beta"].rho(0) == 0.25
    bad = vi.FitOptions(schedules={"negative_binomial": vi.LearningRateSchedule(1, -1)})
    with pytest.raises(ValueError):
        bad.resolved_schedules("normal")
    # user override of the xbar location wins over the beta-family exception
    opts2 = vi.FitOptions(schedules={"xbar_mean": vi.LearningRateSchedule(8.0, -0.5)})
    assert opts2.resolved_schedules("beta")["xbar_mean"].delay == 8.0


# ---------------------------------------------------------------------------
# clustering and initialization


def test_fuzzy_c_means_single_cluster():
    rng = np.random.default_rng(0)
    x = rng.normal(5.0, 0.1, (40, 3))
    u, cent = vi.fuzzy_c_means(x, 1, rng)
    assert np.allclose(u, 1.0)
    assert np.allclose(cent[0], x.mean(axis=0), atol=1e-8)


def test_fuzzy_c_means_separated_clusters():
    rng = np.random.default_rng(1)
    a = rng.normal(-5.0, 0.2, (60, 2))
    b = rng.normal(5.0, 0.2, (60, 2))
    x = np.vstack([a, b])
    u, cent = vi.fuzzy_c_means(x, 2, rng)
    order = np.argsort(cent[:, 0])
    assert np.allclose(cent[order[0]], a.mean(axis=0), atol=0.05)
    assert np.allclose(cent[order[1]], b.mean(axis=0), atol=0.05)
    # memberships essentially hard at this separation
    top = u.max(axis=1)
    assert top.min() > 0.95


def test_fuzzy_c_means_zero_distance_row():
    rng = np.random.default_rng(2)
    x = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 0.0], [10.0, 0.0]])
    u, cent = vi.fuzzy_c_means(x, 2, rng)
    # every point coincides with a centroid; memberships are one-hot
    assert np.allclose(np.sort(u, axis=1)[:, 0], 0.0, atol=1e-12)
    assert np.allclose(u.sum(axis=1), 1.0)


def _lloyd_kmeans(x, k, rng, iters=100, restarts=10):
    # plain k-means, used only as an oracle
    best = None
    for _ in range(restarts):
        cent = x[rng.choice(len(x), k, replace=False)]
        for _ in range(iters):
            d2 = ((x[:, None, :] - cent[None]) ** 2).sum(-1)
            lab = d2.argmin(axis=1)
            new = np.array([
                x[lab == j].mean(axis=0) if np.any(lab == j) else cent[j]
                for j in range(k)
            ])
            if np.allclose(new, cent):
                break
            cent = new
        cost = ((x - cent[lab]) ** 2).sum()
        if best is None or cost < best[0]:
            best = (cost, cent.copy())
    return best[1]


def test_initialize_centroids_match_kmeans_oracle():
    rng = np.random.default_rng(7)
    means = np.array([[-6.0, 0.0, 4.0], [5.0, -5.0, 0.0], [0.0, 6.0, -5.0]])
    x = np.vstack([rng.normal(mu, 0.3, (50, 3)) for mu in means])
    hp = make_hp(3)
    data = Dataset(y=x, domain="real")
    state = vi.initialize(hp, data, 3, seeding.substream(0, seeding.INIT))
    oracle = _lloyd_kmeans(x, 3, np.random.default_rng(99))
    # match factors to oracle centroids greedily by distance
    cent = state.lam_mu_mean
    for j in range(3):
        gaps = np.abs(cent[:, None, :] - oracle[None, :, :]).max(axis=2)
        i, o = np.unravel_index(np.argmin(gaps), gaps.shape)
        assert gaps[i, o] < 0.1
        cent = np.delete(cent, i, axis=0)
        oracle = np.delete(oracle, o, axis=0)


def test_initialize_invariants_all_configs():
    rng = np.random.default_rng(3)
    configs = [
        ("real", "normal", "identity", rng.normal(0, 2, (30, 4))),
        ("positive", "gamma", "soft-plus", rng.gamma(3.0, 2.0, (30, 4))),
        ("integer", "poisson", "exponential", rng.poisson(6.0, (30, 4)).astype(float)),
        ("unit", "beta", "sigmoid", rng.uniform(0.05, 0.95, (30, 4))),
    ]
    for domain, fam, link, y in configs:
        hp = make_hp(4, obs_family=fam, link=link)
        data = Dataset(y=y, domain=domain)
        state = vi.initialize(hp, data, 3, seeding.substream(1, seeding.INIT))
        state.validate()
        assert state.n_factors == 3
        assert state.lam_beta.shape == (4,)
        assert np.allclose(state.lam_p, hp.rho)
        assert np.all(state.lam_xbar_scale >= 1e-3)
        assert state.lam_beta[-1] == 0.1
        assert np.allclose(state.lam_sigma_nu, hp.nu0 + 4 + 1)


def test_initialize_nonparametric_catch_all():
    rng = np.random.default_rng(4)
    y = rng.normal(0, 2, (25, 3))
    hp = make_hp(3)
    data = Dataset(y=y, domain="real")
    state = vi.initialize(hp, data, 2, seeding.substream(2, seeding.INIT),
                          nonparametric=True)
    state.validate()
    assert state.n_factors == 3          # 2 requested + 1 catch-all
    assert state.lam_beta.shape == (4,)
    assert np.allclose(state.lam_beta[-2:], 0.1)
    assert np.allclose(state.lam_pi[:, -1], 0.1)
    # catch-all center is the latent data mean (identity link here)
    assert np.allclose(state.lam_mu_mean[-1], y.mean(axis=0), atol=0.05)


def test_initialize_empty_data_raises():
    hp = make_hp(2)
    data = Dataset(y=np.zeros((0, 2)), domain="real")
    with pytest.raises(DataError):
        vi.initialize(hp, data, 2, seeding.substream(0, seeding.INIT))


def test_initialize_random_valid_and_deterministic():
    rng = np.random.default_rng(5)
    y = rng.normal(0, 2, (20, 3))
    hp = make_hp(3)
    data = Dataset(y=y, domain="real")
    s1 = vi.initialize_random(hp, data, 4, np.random.default_rng(11))
    s2 = vi.initialize_random(hp, data, 4, np.random.default_rng(11))
    s1.validate()
    assert s1.n_factors == 4
    for name in ("lam_beta", "lam_pi", "lam_mu_mean", "lam_xbar_mean"):
        assert np.array_equal(getattr(s1, name), getattr(s2, name))


# ---------------------------------------------------------------------------
# conjugate updates


def test_update_mu_sigma_empty_data_is_prior():
    m = 3
    hp = make_hp(m)
    data = Dataset(y=np.zeros((0, m)), domain="real")
    state = VariationalState(
        lam_beta=np.array([1.0, 1.0]),
        lam_pi=np.zeros((0, 1)),
        lam_mu_mean=np.array([[5.0, -2.0, 1.0]]),
        lam_sigma_psi=np.array([4.0 * np.eye(m)]),
        lam_sigma_nu=np.array([m + 9.0]),
        lam_xbar_mean=np.zeros((0, 1, m)),
        lam_xbar_scale=np.ones((0, 1, m)),
        lam_p=np.zeros(0),
    )
    vi.update_mu_sigma(hp, data, state)
    assert np.allclose(state.lam_mu_mean[0], hp.mu0, atol=1e-12)
    assert np.allclose(state.lam_sigma_psi[0], hp.psi0, atol=1e-12)
    assert state.lam_sigma_nu[0] == hp.nu0


def test_update_mu_sigma_equal_precision_average():
    m = 2
    hp = make_hp(m, sigma0=1.0)
    xbar = np.array([3.0, -1.0])
    y = np.zeros((1, m))
    data = Dataset(y=y, domain="real")
    nu = 50.0
    state = VariationalState(
        lam_beta=np.array([1.0, 1.0]),
        lam_pi=np.full((1, 1), 7.0),      # K=1, E[pi] = 1 regardless
        lam_mu_mean=np.zeros((1, m)),
        lam_sigma_psi=np.array([nu * np.eye(m)]),  # E[Sigma^-1] = nu Psi^-1 = I
        lam_sigma_nu=np.array([nu]),
        lam_xbar_mean=xbar.reshape(1, 1, m),
        lam_xbar_scale=np.full((1, 1, m), 0.3),
        lam_p=np.array([1.0]),
    )
    vi.update_mu_sigma(hp, data, state)
    assert np.allclose(state.lam_mu_mean[0], (hp.mu0 + xbar) / 2.0, atol=1e-12)


def test_update_mu_sigma_scatter_includes_q_variances():
    # all xbar means identical: the point scatter is zero, so Psi must be
    # driven entirely by the prior plus the q variances of xbar and mu
    rng = np.random.default_rng(8)
    n, m = 6, 2
    hp = make_hp(m)
    data = Dataset(y=rng.normal(size=(n, m)), domain="real")
    scale = 0.4
    state = VariationalState(
        lam_beta=np.array([2.0, 1.0]),
        lam_pi=np.full((n, 1), 3.0),
        lam_mu_mean=np.zeros((1, m)),
        lam_sigma_psi=np.array([np.eye(m)]),
        lam_sigma_nu=np.array([m + 4.0]),
        lam_xbar_mean=np.full((n, 1, m), 1.7),
        lam_xbar_scale=np.full((n, 1, m), scale),
        lam_p=np.full(n, 10.0),
    )
    vi.update_mu_sigma(hp, data, state)
    sw = 10.0 * n
    # new mean equals the shared xbar value up to the weak prior pull
    d = 1.7 - state.lam_mu_mean[0]
    expect = hp.psi0 + sw * (np.outer(d, d) + scale**2 * np.eye(m)
                             + MU_Q_SCALE**2 * np.eye(m))
    assert np.allclose(state.lam_sigma_psi[0], expect, rtol=1e-10)
    assert state.lam_sigma_nu[0] == hp.nu0 + n


def _iw_e_log_det_oracle(psi, nu):
    m = psi.shape[0]
    _, ld = np.linalg.slogdet(psi)
    return ld - m * np.log(2.0) - sum(
        sc.digamma((nu + 1.0 - i) / 2.0) for i in range(1, m + 1)
    )


def _restricted_objective(hp, data, state):
    """Analytic ELBO terms that depend on q(mu) means and q(Sigma).

    Independent reimplementation (scipy) of the mu/Sigma part of the
    objective: expected local-center likelihood plus both KL terms.
    """
    n, m = data.y.shape
    w = state.lam_p[:, None] * state.e_pi()
    total = 0.0
    for k in range(state.n_factors):
        psi, nu = state.lam_sigma_psi[k], state.lam_sigma_nu[k]
        e_prec = nu * np.linalg.inv(psi)
        e_ld = _iw_e_log_det_oracle(psi, nu)
        d = state.lam_xbar_mean[:, k, :] - state.lam_mu_mean[k]
        quad = np.einsum("nm,mj,nj->n", d, e_prec, d)
        quad = quad + (state.lam_xbar_scale[:, k, :] ** 2 @ np.diag(e_prec))
        quad = quad + MU_Q_SCALE**2 * np.trace(e_prec)
        total += -0.5 * n * e_ld - 0.5 * float(w[:, k] @ quad)
        # KL(q(mu_k) || prior), fixed q scale
        mean_kl = (
            (np.sum((state.lam_mu_mean[k] - hp.mu0) ** 2) + m * MU_Q_SCALE**2)
            / (2.0 * hp.sigma0)
            - 0.5 * m * (1.0 + np.log(MU_Q_SCALE**2 / hp.sigma0))
        )
        # KL(q(Sigma_k) || prior) for inverse Wishart
        _, ld0 = np.linalg.slogdet(hp.psi0)
        _, ldq = np.linalg.slogdet(psi)
        kl_iw = (
            0.5 * nu * ldq
            - 0.5 * hp.nu0 * ld0
            - 0.5 * (nu - hp.nu0) * m * np.log(2.0)
            - sc.multigammaln(nu / 2.0, m)
            + sc.multigammaln(hp.nu0 / 2.0, m)
            - 0.5 * (nu - hp.nu0) * e_ld
            - 0.5 * nu * m
            + 0.5 * nu * np.trace(hp.psi0 @ np.linalg.inv(psi))
        )
        total -= mean_kl + kl_iw
    return total


def test_update_mu_sigma_is_restricted_argmax():
    rng = np.random.default_rng(12)
    n, k, m = 8, 2, 2
    hp = make_hp(m)
    data = Dataset(y=rng.normal(size=(n, m)), domain="real")
    state = small_state(rng, n, k, m)
    # iterate to the joint fixed point of the two coordinate updates
    for _ in range(200):
        before = state.lam_mu_mean.copy()
        vi.update_mu_sigma(hp, data, state)
        if np.abs(state.lam_mu_mean - before).max() < 1e-13:
            break
    base = _restricted_objective(hp, data, state)
    assert np.isfinite(base)
    # no small perturbation of (mu mean, Psi, nu) may improve the objective
    for rep in range(100):
        prng = np.random.default_rng(1000 + rep)
        trial = state.copy()
        scale = 10.0 ** prng.uniform(-3, -1)
        trial.lam_mu_mean = trial.lam_mu_mean + scale * prng.normal(size=(k, m))
        for j in range(k):
            sym = prng.normal(size=(m, m))
            trial.lam_sigma_psi[j] += scale * (sym + sym.T) / 2.0
        trial.lam_sigma_nu = trial.lam_sigma_nu + scale * prng.normal(size=k)
        if np.any(trial.lam_sigma_nu <= m + 1):
            continue
        try:
            val = _restricted_objective(hp, data, trial)
        except np.linalg.LinAlgError:
            continue
        assert val <= base + 1e-9, "perturbation %d improved by %g" % (rep, val - base)


# ---------------------------------------------------------------------------
# gradient estimator oracles

GL_NODES, GL_WEIGHTS = np.polynomial.legendre.leggauss(240)
UNIT_NODES = 0.5 * (GL_NODES + 1.0)
UNIT_WEIGHTS = 0.5 * GL_WEIGHTS


def _pi_objective_terms(hp, data, state, n_idx, p_grid):
    """Plug-in objective f(pi) for observation n with pi = (p, 1-p)."""
    y = data.y[n_idx]
    m = y.shape[0]
    pis = np.stack([p_grid, 1.0 - p_grid], axis=1)  # (g, 2)
    e_prec = [state.lam_sigma_nu[j] * np.linalg.inv(state.lam_sigma_psi[j])
              for j in range(2)]
    lam_p = state.lam_p[n_idx]
    quads = np.array([
        (state.lam_xbar_mean[n_idx, j] - state.lam_mu_mean[j])
        @ e_prec[j] @ (state.lam_xbar_mean[n_idx, j] - state.lam_mu_mean[j])
        for j in range(2)
    ])
    xterm = (0.5 * m * (np.log(lam_p) + np.log(pis))
             - 0.5 * lam_p * pis * quads[None, :]).sum(axis=1)
    mean = pis @ state.lam_xbar_mean[n_idx]  # (g, m), identity link
    lik = st.norm.logpdf(y[None, :], mean, hp.eta[None, :]).sum(axis=1)
    e_beta = state.lam_beta / state.lam_beta.sum()
    conc = hp.alpha * e_beta[:2]
    prior = st.beta.logpdf(p_grid, conc[0], conc[1])
    logq = st.beta.logpdf(p_grid, state.lam_pi[n_idx, 0], state.lam_pi[n_idx, 1])
    return xterm + lik + prior - logq


def test_pi_gradient_matches_quadrature_oracle():
    rng = np.random.default_rng(21)
    n, k, m = 2, 2, 2
    hp = make_hp(m, eta=0.6)
    data = Dataset(y=rng.normal(0, 1.0, (n, m)), domain="real")
    state = small_state(rng, n, k, m)
    state.lam_pi = rng.uniform(2.0, 5.0, (n, k))  # keep the density off the edges

    def objective(lam_pi_row, n_idx):
        work = state.copy()
        work.lam_pi = state.lam_pi.copy()
        work.lam_pi[n_idx] = lam_pi_row
        dens = st.beta.pdf(UNIT_NODES, lam_pi_row[0], lam_pi_row[1])
        f = _pi_objective_terms(hp, data, work, n_idx, UNIT_NODES)
        return float((UNIT_WEIGHTS * dens * f).sum())

    h = 1e-4
    oracle = np.empty((n, k))
    for i in range(n):
        for j in range(k):
            up = state.lam_pi[i].copy(); up[j] += h
            dn = state.lam_pi[i].copy(); dn[j] -= h
            oracle[i, j] = (objective(up, i) - objective(dn, i)) / (2 * h)

    reps, s = 40, 4000
    ests = np.stack([
        vi.pi_block_gradient(hp, data, state, s, np.random.default_rng(5000 + r))
        for r in range(reps)
    ])
    mean = ests.mean(axis=0)
    se = ests.std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(mean - oracle) < 5 * se + 1e-8), (
        "pi gradient off: %s vs %s (se %s)" % (mean, oracle, se)
    )


def test_xbar_gradient_matches_quadrature_oracle():
    rng = np.random.default_rng(22)
    n, k, m = 1, 1, 1
    hp = make_hp(m, eta=0.5)
    data = Dataset(y=np.array([[1.3]]), domain="real")
    state = small_state(rng, n, k, m)
    state.lam_xbar_mean[0, 0, 0] = 0.4
    state.lam_xbar_scale[0, 0, 0] = 0.5

    gh_x, gh_w = np.polynomial.hermite_e.hermegauss(150)  # weight e^{-t^2/2}

    def objective(m0, s0):
        x = m0 + s0 * gh_x
        e_prec = float(state.lam_sigma_nu[0] / state.lam_sigma_psi[0, 0, 0])
        e_ld = _iw_e_log_det_oracle(state.lam_sigma_psi[0], state.lam_sigma_nu[0])
        c = state.lam_p[0]  # E[pi] = 1 for K=1
        prior = (-0.5 * LOG_2PI + 0.5 * np.log(c) - 0.5 * e_ld
                 - 0.5 * c * e_prec * (x - state.lam_mu_mean[0, 0]) ** 2)
        lik = st.norm.logpdf(data.y[0, 0], x, hp.eta[0])
        logq = st.norm.logpdf(x, m0, s0)
        f = prior + lik - logq
        return float((gh_w * f).sum() / np.sqrt(2 * np.pi))

    h = 1e-5
    m0, s0 = state.lam_xbar_mean[0, 0, 0], state.lam_xbar_scale[0, 0, 0]
    oracle_mean = (objective(m0 + h, s0) - objective(m0 - h, s0)) / (2 * h)
    oracle_scale = (objective(m0, s0 + h) - objective(m0, s0 - h)) / (2 * h)

    reps, s = 60, 3000
    means, scales = [], []
    for r in range(reps):
        gm, gs = vi.xbar_block_gradient(
            hp, data, state, 0, s, np.random.default_rng(6000 + r)
        )
        means.append(gm[0, 0]); scales.append(gs[0, 0])
    means, scales = np.array(means), np.array(scales)
    for est, oracle in ((means, oracle_mean), (scales, oracle_scale)):
        mean = est.mean()
        se = est.std(ddof=1) / np.sqrt(reps)
        assert abs(mean - oracle) < 5 * se + 1e-8, (mean, oracle, se)


def test_p_gradient_matches_sum_oracle():
    rng = np.random.default_rng(23)
    n, k, m = 1, 2, 2
    hp = make_hp(m, rho=20.0)
    data = Dataset(y=rng.normal(0, 1.0, (n, m)), domain="real")
    state = small_state(rng, n, k, m)
    state.lam_p = np.array([25.0])

    xs = np.arange(1, 200)

    def objective(lam):
        work = state.copy()
        work.lam_p = np.array([lam])
        e_pi = work.e_pi()[0]
        quads = np.empty(k)
        e_ld = np.empty(k)
        for j in range(k):
            e_prec = work.lam_sigma_nu[j] * np.linalg.inv(work.lam_sigma_psi[j])
            d = work.lam_xbar_mean[0, j] - work.lam_mu_mean[j]
            quads[j] = d @ e_prec @ d
            e_ld[j] = _iw_e_log_det_oracle(work.lam_sigma_psi[j], work.lam_sigma_nu[j])
        per_k = (
            -0.5 * m * LOG_2PI
            + 0.5 * m * (np.log(xs)[:, None] + np.log(e_pi)[None, :])
            - 0.5 * e_ld[None, :]
            - 0.5 * xs[:, None] * e_pi[None, :] * quads[None, :]
        ).sum(axis=1)
        f = per_k + st.poisson.logpmf(xs, hp.rho) - st.poisson.logpmf(xs, lam)
        return float((st.poisson.pmf(xs, lam) * f).sum())

    h = 1e-3
    oracle = (objective(25.0 + h) - objective(25.0 - h)) / (2 * h)
    reps, s = 60, 2000
    ests = np.array([
        vi.p_block_gradient(hp, data, state, s, np.random.default_rng(7000 + r))[0]
        for r in range(reps)
    ])
    mean, se = ests.mean(), ests.std(ddof=1) / np.sqrt(reps)
    assert abs(mean - oracle) < 5 * se + 1e-8, (mean, oracle, se)


def test_beta_gradient_matches_quadrature_oracle():
    rng = np.random.default_rng(24)
    n, k, m = 5, 2, 2
    hp = make_hp(m, alpha=2.5)
    data = Dataset(y=rng.normal(0, 1.0, (n, m)), domain="real")
    state = small_state(rng, n, k, m)
    state.lam_beta = np.array([3.0, 2.2, 1.8])

    t_k = np.log(state.e_pi()).sum(axis=0)
    a0 = hp.alpha0_vector(k + 1)

    # tensor-product quadrature over the 2-simplex: b2 = (1 - b1) u
    b1 = UNIT_NODES[:, None]
    u = UNIT_NODES[None, :]
    b2 = (1.0 - b1) * u
    jac = 1.0 - b1  # db2 = (1-b1) du
    wgrid = UNIT_WEIGHTS[:, None] * UNIT_WEIGHTS[None, :] * jac

    def objective(conc):
        b3 = 1.0 - b1 - b2
        logdens = (sc.gammaln(conc.sum()) - sc.gammaln(conc).sum()
                   + (conc[0] - 1) * np.log(b1) + (conc[1] - 1) * np.log(b2)
                   + (conc[2] - 1) * np.log(b3))
        prior = (sc.gammaln(a0.sum()) - sc.gammaln(a0).sum()
                 + (a0[0] - 1) * np.log(b1) + (a0[1] - 1) * np.log(b2)
                 + (a0[2] - 1) * np.log(b3))
        lc1, lc2 = hp.alpha * b1, hp.alpha * b2
        local = (n * sc.gammaln(lc1 + lc2) - n * (sc.gammaln(lc1) + sc.gammaln(lc2))
                 + (lc1 - 1) * t_k[0] + (lc2 - 1) * t_k[1])
        f = prior + local - logdens
        return float((wgrid * np.exp(logdens) * f).sum())

    h = 1e-4
    oracle = np.empty(k + 1)
    for j in range(k + 1):
        up = state.lam_beta.copy(); up[j] += h
        dn = state.lam_beta.copy(); dn[j] -= h
        oracle[j] = (objective(up) - objective(dn)) / (2 * h)

    reps, s = 40, 4000
    ests = np.stack([
        vi.beta_block_gradient(hp, data, state, s, np.random.default_rng(8000 + r))
        for r in range(reps)
    ])
    mean = ests.mean(axis=0)
    se = ests.std(axis=0, ddof=1) / np.sqrt(reps)
    assert np.all(np.abs(mean - oracle) < 5 * se + 1e-8), (mean, oracle, se)


def test_control_variate_reduces_variance_same_mean():
    rng = np.random.default_rng(25)
    n, k, m = 3, 2, 2
    hp = make_hp(m)
    data = Dataset(y=rng.normal(0, 1.0, (n, m)), domain="real")
    state = small_state(rng, n, k, m)
    reps, s = 150, 400
    raw = np.stack([
        vi.pi_block_gradient(hp, data, state, s, np.random.default_rng(r), use_cv=False)
        for r in range(reps)
    ])
    cv = np.stack([
        vi.pi_block_gradient(hp, data, state, s, np.random.default_rng(10_000 + r),
                             use_cv=True)
        for r in range(reps)
    ])
    mraw, mcv = raw.mean(axis=0), cv.mean(axis=0)
    se = np.sqrt(raw.var(axis=0, ddof=1) + cv.var(axis=0, ddof=1)) / np.sqrt(reps)
    assert np.all(np.abs(mraw - mcv) < 6 * se + 1e-8)
    assert cv.var(axis=0).sum() < 0.8 * raw.var(axis=0).sum()


def test_rmsprop_step_mechanics():
    est = vi.GradientEstimatorState.zeros(n=3, k=2, m=2, samples=8)
    sched = vi.LearningRateSchedule(16.0, -0.5)
    grad = np.array([4.0, -100.0, 0.5])
    mask = np.array([True, True, False])
    step = vi._rmsprop_apply(est, "p", grad, sched, 0, mask)
    # first step: acc = 0.1 g^2, so step = rho0 * g / sqrt(0.1 g^2) = rho0 * sqrt(10) * sign
    expect = 0.25 * np.sqrt(10.0) * np.sign(grad)
    assert np.allclose(step[:2], expect[:2], rtol=1e-6)
    assert step[2] == 0.0
    assert est.acc["p"][2] == 0.0  # masked entries leave the accumulator alone
    assert np.allclose(est.acc["p"][:2], 0.1 * grad[:2] ** 2)


def test_p_phase_skips_zero_draws_with_warning():
    rng = np.random.default_rng(26)
    n, k, m = 3, 2, 2
    hp = make_hp(m)
    data = Dataset(y=rng.normal(0, 1.0, (n, m)), domain="real")
    state = small_state(rng, n, k, m)
    state.lam_p = np.full(n, PARAM_FLOOR)  # every Poisson draw is 0 -> -inf terms
    est = vi.GradientEstimatorState.zeros(n, k, m, samples=8)
    opts = vi.FitOptions(samples=8)
    sched = opts.resolved_schedules("normal")
    warnings = []
    vi.run_iteration(hp, data, state, est, opts, sched, 0,
                     seeding.substream(3, seeding.ITERATION, 0), warnings)
    assert np.allclose(state.lam_p, PARAM_FLOOR)
    assert any("P block" in w for w in warnings)


# ---------------------------------------------------------------------------
# full fits


def _toy_problem(seed=0, n=30, k=2, m=2):
    rng = np.random.default_rng(seed)
    mu = np.array([[-2.0, 1.0], [2.0, -1.0]])[:k, :m]
    pi = rng.dirichlet([0.8] * k, size=n)
    y = pi @ mu + rng.normal(0, 0.3, (n, m))
    hp = make_hp(m, rho=40.0, eta=0.3)
    return hp, Dataset(y=y, domain="real")


def test_fit_zero_iterations_trace_has_init_value():
    hp, data = _toy_problem()
    rep = vi.fit_parametric(hp, data, 2, vi.FitOptions(max_iters=0, samples=8,
                                                       elbo_samples=16), seed=1)
    assert len(rep.elbo_trace) == 1
    assert rep.iterations == 0
    assert not rep.converged
    assert np.isfinite(rep.elbo_trace[0])


def test_fit_deterministic_given_seed():
    hp, data = _toy_problem()
    opts = vi.FitOptions(max_iters=4, samples=8, elbo_samples=16)
    r1 = vi.fit_parametric(hp, data, 2, opts, seed=7)
    r2 = vi.fit_parametric(hp, data, 2, opts, seed=7)
    assert r1.to_json() == r2.to_json()
    r3 = vi.fit_parametric(hp, data, 2, opts, seed=8)
    assert r1.to_json() != r3.to_json()


def test_fit_resume_from_checkpoint_bit_exact(tmp_path):
    hp, data = _toy_problem(seed=3)
    straight = vi.fit_parametric(
        hp, data, 2, vi.FitOptions(max_iters=6, samples=8, elbo_samples=16), seed=5
    )
    ckdir = str(tmp_path / "ck")
    vi.fit_parametric(
        hp, data, 2,
        vi.FitOptions(max_iters=3, samples=8, elbo_samples=16,
                      checkpoint_every=3, checkpoint_dir=ckdir),
        seed=5,
    )
    payload = load_checkpoint(ckdir)
    assert payload is not None and payload["iterations"] == 3
    resumed = vi.fit_parametric(
        hp, data, 2, vi.FitOptions(max_iters=6, samples=8, elbo_samples=16),
        seed=5, resume=payload,
    )
    assert resumed.to_json() == straight.to_json()


def test_fit_resume_seed_mismatch_raises():
    hp, data = _toy_problem(seed=3)
    payload = {"seed": 4, "iterations": 1, "elbo_trace": [0.0], "warnings": [],
               "monitor": {"hits": 0, "iters": 1, "prev": 0.0},
               "state": None, "acc": None}
    with pytest.raises(ValueError):
        vi.fit_parametric(hp, data, 2, vi.FitOptions(max_iters=2), seed=5,
                          resume=payload)


def test_fit_convergence_triggers_early():
    hp, data = _toy_problem()
    # delta so loose that any finite change counts as converged
    opts = vi.FitOptions(max_iters=50, min_iters=2, delta=1e9, consecutive=3,
                         samples=8, elbo_samples=16)
    rep = vi.fit_parametric(hp, data, 2, opts, seed=2)
    assert rep.converged
    assert rep.iterations == 4  # first comparison needs two values, then 3 hits
    assert len(rep.elbo_trace) == 5


def test_convergence_monitor_unit():
    mon = vi.ConvergenceMonitor(delta=1e-3, needed=2, min_iters=4)
    assert not mon.update(-100.0)          # no previous value yet
    assert not mon.update(-100.0001)       # hit 1
    assert not mon.update(-100.0001)       # hit 2, but iters 3 < min_iters 4
    assert mon.update(-100.0002)           # iters and hits both satisfied
    mon2 = vi.ConvergenceMonitor(delta=1e-3, needed=2, min_iters=3)
    mon2.update(-100.0)
    mon2.update(-100.0001)
    assert mon2.update(-100.0002)
    # non-finite resets the streak
    mon3 = vi.ConvergenceMonitor(delta=1e-3, needed=2, min_iters=0)
    mon3.update(-5.0)
    mon3.update(-5.0)
    mon3.update(np.nan)
    assert mon3.hits == 0
    mon3.update(-5.0)
    assert not mon3.update(np.inf)
    # reset_hits clears the streak
    mon4 = vi.ConvergenceMonitor(delta=1e-3, needed=2, min_iters=0)
    mon4.update(-5.0)
    mon4.update(-5.0)
    mon4.reset_hits()
    assert mon4.hits == 0


def test_single_factor_fit_centers_on_data_mean():
    rng = np.random.default_rng(31)
    y = rng.normal([2.0, -1.0, 0.5], 0.4, (60, 3))
    hp = make_hp(3, rho=40.0, eta=0.4)
    data = Dataset(y=y, domain="real")
    opts = vi.FitOptions(max_iters=40, min_iters=5, samples=16, elbo_samples=24)
    rep = vi.fit_parametric(hp, data, 1, opts, seed=9)
    assert np.allclose(rep.state.e_mu()[0], y.mean(axis=0), atol=0.5)
    assert np.all(np.isfinite(rep.elbo_trace))


def test_fit_report_roundtrip():
    hp, data = _toy_problem()
    rep = vi.fit_parametric(hp, data, 2,
                            vi.FitOptions(max_iters=2, samples=8, elbo_samples=16),
                            seed=3)
    back = FitReport.from_json_dict(rep.to_json_dict())
    assert back.to_json() == rep.to_json()
    exp = rep.expectations()
    assert exp["pi"].shape == (30, 2)
    assert abs(exp["beta"].sum() - 1.0) < 1e-12


def test_beta_gradient_finite_with_collapsed_factor():
    # floor-level concentrations underflow the sampled betas; the block
    # gradient has to stay finite or the optimizer skips beta forever
    rng = np.random.default_rng(33)
    n, k, m = 5, 3, 2
    hp = make_hp(m)
    data = Dataset(rng.normal(size=(n, m)))
    state = small_state(rng, n, k, m)
    state.lam_beta[2] = 1e-10
    g = vi.beta_block_gradient(hp, data, state, 64, np.random.default_rng(7))
    assert g.shape == (k + 1,)
    assert np.all(np.isfinite(g))

"""Simulated convolved-data generators with complete ground truth.

Four procedures, one per row of the design grid:

  1  local centers drawn around the factors, near-point particles
     (factor covariance shrunk by 1e-6), observation noise from f
  2  particles drawn straight from the factor distributions,
     observation noise from f
  3  local centers as in 1, particles drawn from f around them,
     observations set to the particle mean (no extra noise layer)
  4  multi-modal factors: each factor gets S_k >= 1 modes, particles
     drawn from f around a uniformly chosen mode, observations set to
     the particle mean

`f` is the domain-matched emission family (normal / mean-spread gamma /
poisson / mean-spread beta with the fixed sigmoid); see domain_f.

Every observation draws from its own substream, so generation order
cannot change the output and single observations can be reproduced in
isolation. Ground-truth local proportions are exact particle fractions
and local centers are the assigned-particle means; entries where an
observation holds no particle of a factor carry a mask flag and fall
back to the drawn local center (procedures 1 and 3) or the global
center (2 and 4).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.stats

from . import seeding
from .distributions import beta_mean_spread_params, gamma_mean_shape_params
from .links import apply_link
from .model import DOMAINS, Dataset, GroundTruth

PROCEDURES = (1, 2, 3, 4)
MODE_COUNT_RATE = 5.0  # S_k ~ Poisson(5), redrawn until positive


@dataclass(frozen=True)
class SimSpec:
    """Generator settings; everything downstream is a function of these.

    `sigma` is the scale (sd) of the global centers around mu0, `psi`
    scales the identity Wishart scale matrix (or pass a full (M, M)
    array), and (ig_a, ig_b) parameterize the inverse-Gamma the
    per-feature observation spreads sigma_m are drawn from (skipped for
    the integer domain, where f has no spread parameter).
    """

    procedure: int = 1
    domain: str = "real"
    k: int = 10
    n: int = 1000
    m: int = 20
    alpha0: float = 1.0
    alpha: float = 1.0
    mu0: float = 0.0
    sigma: float = 3.0
    psi: object = 1.0
    nu: Optional[float] = None  # default m + 2 (identity-mean covariance)
    rho: float = 100.0
    ig_a: float = 3.0
    ig_b: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.procedure not in PROCEDURES:
            raise ValueError("procedure must be one of %s" % (PROCEDURES,))
        if self.domain not in DOMAINS:
            raise ValueError("unknown domain %r" % (self.domain,))
        if min(self.k, self.n, self.m) < 1:
            raise ValueError("k, n and m must all be >= 1")
        for name in ("alpha0", "alpha", "sigma", "rho", "ig_a", "ig_b"):
            if getattr(self, name) <= 0:
                raise ValueError("%s must be positive" % name)

    def psi_matrix(self):
        psi = self.psi
        if np.isscalar(psi):
            return float(psi) * np.eye(self.m)
        psi = np.asarray(psi, dtype=float)
        if psi.shape != (self.m, self.m):
            raise ValueError("psi must be a scalar or an (M, M) matrix")
        return psi

    def nu_value(self):
        return float(self.m + 2) if self.nu is None else float(self.nu)


@dataclass
class SimOutput:
    dataset: Dataset
    warnings: list = field(default_factory=list)
    particles: Optional[list] = None  # debug: per-n (draws, assignments)


# ---------------------------------------------------------------------------
# the domain-matched emission family


def domain_f(domain, mu, sigma):
    """Parameters of f at latent location mu and spread sigma.

    Returns (params, clamped); params carries the family name and its
    numeric parameters (broadcast over mu), clamped flags beta spreads
    that exceeded the mean-variance bound and were pulled back to
    0.99 sqrt(m (1-m)).
    """
    mu = np.asarray(mu, dtype=float)
    if domain == "real":
        return {"family": "normal", "loc": mu, "scale": np.asarray(sigma, dtype=float)}, False
    if domain == "positive":
        mean = apply_link("soft-plus", mu)
        shape, scale = gamma_mean_shape_params(mean, sigma)
        return {"family": "gamma", "shape": shape, "scale": scale}, False
    if domain == "integer":
        return {"family": "poisson", "rate": apply_link("soft-plus", mu)}, False
    if domain == "unit":
        mean = apply_link("sigmoid", mu)
        a, b, clamped = beta_mean_spread_params(mean, sigma, clamp=True)
        return {"family": "beta", "a": a, "b": b}, clamped
    raise ValueError("unknown domain %r" % (domain,))


def _draw_f(domain, mu, sigma, rng):
    """One draw from f per entry of mu; returns (draws, clamped, floored).

    Gamma draws with a tiny shape can underflow to exactly 0.0, which
    would put the value outside the positive domain; those are floored
    to the smallest positive normal and flagged.
    """
    params, clamped = domain_f(domain, mu, sigma)
    fam = params["family"]
    floored = False
    if fam == "normal":
        return rng.normal(params["loc"], params["scale"]), clamped, floored
    if fam == "gamma":
        draws = rng.gamma(params["shape"], params["scale"])
        zero = draws <= 0.0
        if np.any(zero):
            draws = np.where(zero, np.finfo(float).tiny, draws)
            floored = True
        return draws, clamped, floored
    if fam == "poisson":
        return rng.poisson(params["rate"]).astype(float), clamped, floored
    return rng.beta(params["a"], params["b"]), clamped, floored


# ---------------------------------------------------------------------------
# generation


def _draw_globals(spec, rng):
    """Factor-level draws shared by all observations."""
    k, m = spec.k, spec.m
    beta = rng.dirichlet(np.full(k, spec.alpha0))
    mu = rng.normal(spec.mu0, spec.sigma, (k, m))
    sigma = scipy.stats.invwishart.rvs(
        df=spec.nu_value(), scale=spec.psi_matrix(), size=k, random_state=rng
    ).reshape(k, m, m)
    chol = np.linalg.cholesky(sigma)
    sigma_m = None
    if spec.domain != "integer":
        sigma_m = scipy.stats.invgamma.rvs(
            spec.ig_a, scale=spec.ig_b, size=m, random_state=rng
        )
    modes = None
    if spec.procedure == 4:
        modes = []
        for j in range(k):
            s = 0
            while s == 0:
                s = int(rng.poisson(MODE_COUNT_RATE))
            z = rng.standard_normal((s, m))
            modes.append(mu[j] + z @ chol[j].T)
    return beta, mu, sigma, chol, sigma_m, modes


def _simulate_obs(spec, beta, mu, chol, sigma_m, modes, rng):
    """One observation; returns its row plus all per-observation truth."""
    proc, k, m = spec.procedure, spec.k, spec.m
    piw = rng.dirichlet(beta if proc == 4 else spec.alpha * beta)
    xbar_drawn = None
    if proc in (1, 3):
        xbar_drawn = mu + np.einsum(
            "kij,kj->ki", chol, rng.standard_normal((k, m))
        )
    p = 0
    while p == 0:
        p = int(rng.poisson(spec.rho))
    z = rng.choice(k, size=p, p=piw)

    clamped = floored = False
    if proc == 1:
        noise = np.einsum("pij,pj->pi", chol[z], rng.standard_normal((p, m)))
        particles = xbar_drawn[z] + 1e-3 * noise  # covariance scaled by 1e-6
    elif proc == 2:
        noise = np.einsum("pij,pj->pi", chol[z], rng.standard_normal((p, m)))
        particles = mu[z] + noise
    elif proc == 3:
        particles, clamped, floored = _draw_f(spec.domain, xbar_drawn[z], sigma_m, rng)
    else:
        counts = np.array([mo.shape[0] for mo in modes])
        s = rng.integers(0, counts[z])  # uniform over each factor's modes
        locs = np.stack([modes[zz][ss] for zz, ss in zip(z, s)])
        particles, clamped, floored = _draw_f(spec.domain, locs, sigma_m, rng)

    pm = particles.mean(axis=0)
    if proc in (1, 2):
        y, c2, f2 = _draw_f(spec.domain, pm, sigma_m, rng)
        clamped = clamped or c2
        floored = floored or f2
    else:
        y = pm

    counts = np.bincount(z, minlength=k)
    mask = counts > 0
    xbar = np.where(
        mask[:, None], 0.0, xbar_drawn if xbar_drawn is not None else mu
    )
    for j in np.flatnonzero(mask):
        xbar[j] = particles[z == j].mean(axis=0)
    return {
        "y": y,
        "pi_weights": piw,
        "pi": counts / p,
        "p": p,
        "xbar": xbar,
        "mask": mask,
        "clamped": clamped,
        "floored": floored,
        "particles": (particles, z),
    }


def simulate(spec: SimSpec, debug: bool = False) -> SimOutput:
    """Generate a dataset per the chosen procedure, with full ground truth.

    With debug=True the raw particle draws and assignments are retained
    on the output for bookkeeping checks. Integer-domain data from
    procedures 3 and 4 are particle means, hence rational: the dataset
    is labeled domain "real" and a warning says so.
    """
    rng = seeding.substream(spec.seed, seeding.SIM_GLOBAL)
    beta, mu, sigma, chol, sigma_m, modes = _draw_globals(spec, rng)

    rows = [
        _simulate_obs(
            spec, beta, mu, chol, sigma_m, modes,
            seeding.substream(spec.seed, seeding.SIM_OBS, i),
        )
        for i in range(spec.n)
    ]

    warnings = []
    n_clamped = sum(r["clamped"] for r in rows)
    if n_clamped:
        warnings.append(
            "beta spread exceeded the mean-variance bound and was clamped "
            "for %d of %d observations" % (n_clamped, spec.n)
        )
    n_floored = sum(r["floored"] for r in rows)
    if n_floored:
        warnings.append(
            "gamma draws underflowed to zero and were floored to the "
            "smallest positive float for %d of %d observations"
            % (n_floored, spec.n)
        )
    domain = spec.domain
    if spec.procedure in (3, 4) and domain == "integer":
        domain = "real"
        warnings.append(
            "procedure %d emits particle means, which are not integers; "
            "dataset labeled domain 'real'" % spec.procedure
        )

    truth = GroundTruth(
        beta=beta,
        pi=np.stack([r["pi"] for r in rows]),
        mu=mu,
        sigma=sigma,
        xbar=np.stack([r["xbar"] for r in rows]),
        p=np.array([r["p"] for r in rows], dtype=float),
        sigma_m=sigma_m,
        xbar_mask=np.stack([r["mask"] for r in rows]),
        pi_dirichlet=np.stack([r["pi_weights"] for r in rows]),
        modes=modes,
    )
    dataset = Dataset(
        y=np.stack([r["y"] for r in rows]), domain=domain, ground_truth=truth
    )
    dataset.validate_domain()
    return SimOutput(
        dataset=dataset,
        warnings=warnings,
        particles=[r["particles"] for r in rows] if debug else None,
    )

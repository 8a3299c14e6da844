"""Mean-field variational state for the deconvolution model.

The variational family is fully factored:

    q(beta)     Dirichlet(lam_beta), K+1 entries (last = unused remainder)
    q(pi_n)     Dirichlet(lam_pi[n]), K entries
    q(mu_k)     independent Normals per feature, mean lam_mu_mean[k],
                fixed scale MU_Q_SCALE
    q(Sigma_k)  InverseWishart(lam_sigma_psi[k], lam_sigma_nu[k])
    q(xbar_nk)  independent Normals per feature (mean, scale)
    q(P_n)      Poisson(lam_p[n])
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# q(mu) per-coordinate scale is fixed, not optimized
MU_Q_SCALE = 1e-4

# positive variational parameters never drop below this after an update
PARAM_FLOOR = 1e-10


@dataclass
class VariationalState:
    lam_beta: np.ndarray        # (K+1,) Dirichlet concentrations, remainder last
    lam_pi: np.ndarray          # (N, K)
    lam_mu_mean: np.ndarray     # (K, M)
    lam_sigma_psi: np.ndarray   # (K, M, M)
    lam_sigma_nu: np.ndarray    # (K,)
    lam_xbar_mean: np.ndarray   # (N, K, M)
    lam_xbar_scale: np.ndarray  # (N, K, M)
    lam_p: np.ndarray           # (N,)

    @property
    def n_obs(self) -> int:
        return self.lam_pi.shape[0]

    @property
    def n_factors(self) -> int:
        return self.lam_pi.shape[1]

    @property
    def n_features(self) -> int:
        return self.lam_mu_mean.shape[1]

    # ---- posterior expectations -------------------------------------

    def e_beta(self) -> np.ndarray:
        """E[beta] over the full (K+1)-simplex, remainder included."""
        return self.lam_beta / self.lam_beta.sum()

    def e_pi(self) -> np.ndarray:
        return self.lam_pi / self.lam_pi.sum(axis=1, keepdims=True)

    def e_mu(self) -> np.ndarray:
        return self.lam_mu_mean

    def e_sigma(self) -> np.ndarray:
        m = self.n_features
        denom = self.lam_sigma_nu - m - 1.0
        if np.any(denom <= 0.0):
            bad = int(np.argmax(denom <= 0.0))
            raise ValueError(
                "E[Sigma] undefined for factor %d: needs lam_sigma_nu > M + 1" % bad
            )
        return self.lam_sigma_psi / denom[:, None, None]

    def e_xbar(self) -> np.ndarray:
        return self.lam_xbar_mean

    def e_p(self) -> np.ndarray:
        return self.lam_p

    # ---- bookkeeping -------------------------------------------------

    def copy(self) -> "VariationalState":
        return VariationalState(
            lam_beta=self.lam_beta.copy(),
            lam_pi=self.lam_pi.copy(),
            lam_mu_mean=self.lam_mu_mean.copy(),
            lam_sigma_psi=self.lam_sigma_psi.copy(),
            lam_sigma_nu=self.lam_sigma_nu.copy(),
            lam_xbar_mean=self.lam_xbar_mean.copy(),
            lam_xbar_scale=self.lam_xbar_scale.copy(),
            lam_p=self.lam_p.copy(),
        )

    def validate(self) -> None:
        """Check shape consistency and parameter-domain invariants."""
        n, k = self.lam_pi.shape
        m = self.lam_mu_mean.shape[1]
        if self.lam_beta.shape != (k + 1,):
            raise ValueError("lam_beta must have K+1 entries")
        if self.lam_mu_mean.shape != (k, m):
            raise ValueError("lam_mu_mean shape mismatch")
        if self.lam_sigma_psi.shape != (k, m, m):
            raise ValueError("lam_sigma_psi shape mismatch")
        if self.lam_sigma_nu.shape != (k,):
            raise ValueError("lam_sigma_nu shape mismatch")
        if self.lam_xbar_mean.shape != (n, k, m):
            raise ValueError("lam_xbar_mean shape mismatch")
        if self.lam_xbar_scale.shape != (n, k, m):
            raise ValueError("lam_xbar_scale shape mismatch")
        if self.lam_p.shape != (n,):
            raise ValueError("lam_p shape mismatch")
        for name in ("lam_beta", "lam_pi", "lam_xbar_scale", "lam_p"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0):
                raise ValueError("%s must be strictly positive and finite" % name)
        if not np.all(np.isfinite(self.lam_mu_mean)) or not np.all(
            np.isfinite(self.lam_xbar_mean)
        ):
            raise ValueError("variational means must be finite")
        if np.any(self.lam_sigma_nu <= m - 1.0):
            raise ValueError("lam_sigma_nu must exceed M - 1")
        for idx in range(k):
            psi = self.lam_sigma_psi[idx]
            if not np.allclose(psi, psi.T, atol=1e-8):
                raise ValueError("lam_sigma_psi[%d] must be symmetric" % idx)
            try:
                np.linalg.cholesky(psi)
            except np.linalg.LinAlgError:
                raise ValueError(
                    "lam_sigma_psi[%d] must be positive definite" % idx
                ) from None

"""Recovery metrics: normalized RMSE for centers, cosines for proportions.

Estimated factors carry arbitrary labels, so everything first passes
through align_factors, a greedy maximum-cosine matching of estimated to
true global centers (the matching step is our plumbing; the metric
formulas are standard). With unequal factor counts the metrics cover the
matched subset and the leftovers are reported, not scored.

Proportion comparisons use simplex-normalized expectations; since the
cosine is scale-invariant the normalization is cosmetic, but it keeps
reported vectors interpretable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def nrmse_mu(mu_hat, mu_true):
    """Root mean square error over all K x M entries, divided by the
    spread (max - min) of the true centers."""
    mu_hat = np.asarray(mu_hat, dtype=float)
    mu_true = np.asarray(mu_true, dtype=float)
    if mu_hat.shape != mu_true.shape:
        raise ValueError(
            "shape mismatch: %s vs %s" % (mu_hat.shape, mu_true.shape)
        )
    spread = mu_true.max() - mu_true.min()
    if spread <= 0.0:
        raise ValueError("true centers have zero range, NRMSE undefined")
    return float(np.sqrt(np.mean((mu_hat - mu_true) ** 2)) / spread)


def cosine(v_hat, v_true):
    """Cosine similarity of two vectors."""
    v_hat = np.asarray(v_hat, dtype=float).ravel()
    v_true = np.asarray(v_true, dtype=float).ravel()
    na, nb = np.linalg.norm(v_hat), np.linalg.norm(v_true)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero-norm vectors")
    return float(v_hat @ v_true / (na * nb))


def cosine_beta(beta_hat, beta_true):
    """Single cosine over the global proportion vector (its entries are
    the factors, so this already spans K)."""
    return cosine(_simplex(beta_hat), _simplex(beta_true))


def cosine_pi(pi_hat, pi_true):
    """Mean per-observation cosine of local proportion rows.

    Each row cosine runs across the K factors and the mean runs across
    the N observations; rows with no mass on either side are skipped.
    """
    pi_hat = np.asarray(pi_hat, dtype=float)
    pi_true = np.asarray(pi_true, dtype=float)
    if pi_hat.shape != pi_true.shape:
        raise ValueError(
            "shape mismatch: %s vs %s" % (pi_hat.shape, pi_true.shape)
        )
    vals = []
    for a, b in zip(pi_hat, pi_true):
        if np.linalg.norm(a) == 0.0 or np.linalg.norm(b) == 0.0:
            continue
        vals.append(cosine(a, b))
    if not vals:
        return None
    return float(np.mean(vals))


def nrmse_xbar(xbar_hat, xbar_true, mask=None):
    """NRMSE over local centers, restricted to unmasked (n, k) entries.

    `mask` is True where the true local center is empirical (simulation
    bookkeeping); masked-out entries are excluded from both the error
    and the normalizing range. Returns None if nothing is unmasked.
    """
    xbar_hat = np.asarray(xbar_hat, dtype=float)
    xbar_true = np.asarray(xbar_true, dtype=float)
    if xbar_hat.shape != xbar_true.shape:
        raise ValueError(
            "shape mismatch: %s vs %s" % (xbar_hat.shape, xbar_true.shape)
        )
    if mask is None:
        mask = np.ones(xbar_true.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    diff = xbar_hat[mask] - xbar_true[mask]
    spread = xbar_true[mask].max() - xbar_true[mask].min()
    if spread <= 0.0:
        raise ValueError("true local centers have zero range, NRMSE undefined")
    return float(np.sqrt(np.mean(diff**2)) / spread)


def _simplex(v):
    v = np.asarray(v, dtype=float)
    s = v.sum(axis=-1, keepdims=True)
    return v / s


# ---------------------------------------------------------------------------
# factor alignment


@dataclass
class AlignedFit:
    """Greedy matching of estimated factors to true factors by center cosine."""

    pairs: list  # (estimated index, true index), in acceptance order
    score: float  # sum of matched cosines
    unmatched_estimated: list = field(default_factory=list)
    unmatched_true: list = field(default_factory=list)

    def permutation(self):
        """est index -> true index dict over the matched factors."""
        return {int(e): int(t) for e, t in self.pairs}


def align_factors(mu_hat, mu_true):
    """Match estimated to true factors, most-similar pair first.

    Greedy on the cosine matrix of center vectors with ties broken by
    lower (estimated, true) index; exactly min(K_hat, K_true) pairs come
    out. Greedy is not guaranteed optimal, but at practical factor
    counts it agrees with exact assignment (tests hold it to that).
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    mu_true = np.asarray(mu_true, dtype=float)
    kh, kt = mu_hat.shape[0], mu_true.shape[0]
    c = np.empty((kh, kt))
    for i in range(kh):
        for j in range(kt):
            c[i, j] = cosine(mu_hat[i], mu_true[j])
    free_h = list(range(kh))
    free_t = list(range(kt))
    pairs = []
    score = 0.0
    while free_h and free_t:
        best = None
        for i in free_h:
            for j in free_t:
                if best is None or c[i, j] > c[best]:
                    best = (i, j)  # strict >: ties keep the lowest indices
        pairs.append(best)
        score += c[best]
        free_h.remove(best[0])
        free_t.remove(best[1])
    return AlignedFit(
        pairs=pairs,
        score=float(score),
        unmatched_estimated=free_h,
        unmatched_true=free_t,
    )


# ---------------------------------------------------------------------------
# full evaluation


def evaluate_estimates(truth, mu_hat, beta_hat=None, pi_hat=None, xbar_hat=None):
    """Score estimates against simulation ground truth.

    Factors are aligned on centers first; proportion and local-center
    metrics are computed on the matched subset (proportions renormalized
    over it). Pass expectations for whatever the estimator provides;
    missing pieces yield None entries.
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    aligned = align_factors(mu_hat, truth.mu)
    est_idx = [e for e, _ in aligned.pairs]
    true_idx = [t for _, t in aligned.pairs]

    out = {
        "n_matched": len(aligned.pairs),
        "alignment": {
            "pairs": [[int(e), int(t)] for e, t in aligned.pairs],
            "score": aligned.score,
            "unmatched_estimated": [int(i) for i in aligned.unmatched_estimated],
            "unmatched_true": [int(i) for i in aligned.unmatched_true],
        },
        "nrmse_mu": nrmse_mu(mu_hat[est_idx], truth.mu[true_idx]),
        "cosine_beta": None,
        "cosine_pi": None,
        "nrmse_xbar": None,
    }
    if beta_hat is not None:
        out["cosine_beta"] = cosine_beta(
            np.asarray(beta_hat, dtype=float)[est_idx], truth.beta[true_idx]
        )
    if pi_hat is not None:
        out["cosine_pi"] = cosine_pi(
            np.asarray(pi_hat, dtype=float)[:, est_idx], truth.pi[:, true_idx]
        )
    if xbar_hat is not None:
        mask = truth.xbar_mask
        if mask is not None:
            mask = mask[:, true_idx]
        out["nrmse_xbar"] = nrmse_xbar(
            np.asarray(xbar_hat, dtype=float)[:, est_idx],
            truth.xbar[:, true_idx],
            mask,
        )
    return out


def evaluate_fit(state, truth):
    """Score a fitted variational state against ground truth.

    Uses posterior expectations; the beta remainder entry is dropped
    before comparison (it has no ground-truth counterpart).
    """
    return evaluate_estimates(
        truth,
        mu_hat=state.e_mu(),
        beta_hat=state.e_beta()[:-1],
        pi_hat=state.e_pi(),
        xbar_hat=state.e_xbar(),
    )

"""Link functions mapping latent linear predictors to observation means.

The sigmoid is a fixed squashing map onto (0, 1) chosen so extreme
predictors cannot produce invalid Beta means:

    g(x) = eps + (1 - 2 eps) / (1 + exp(-10 (x - 0.5))),  eps = 1e-6

so g(0.5) = 0.5 exactly and g saturates at eps / 1 - eps.
"""
from __future__ import annotations

import numpy as np

SIGMOID_EPS = 1e-6
SIGMOID_SLOPE = 10.0
SIGMOID_CENTER = 0.5

LINKS = ("identity", "soft-plus", "exponential", "sigmoid", "inverse-exponential")
FAMILIES = ("normal", "poisson", "gamma", "beta")

# which links produce valid means for each observation family
COMPATIBLE = {
    "normal": ("identity",),
    "poisson": ("soft-plus", "exponential"),
    "gamma": ("soft-plus", "exponential"),
    "beta": ("sigmoid",),
}


def apply_link(link: str, x):
    """Apply link `link` elementwise to `x`."""
    x = np.asarray(x, dtype=float)
    if link == "identity":
        return x
    if link == "soft-plus":
        # ln(1 + e^x), overflow safe for large |x|
        return np.logaddexp(0.0, x)
    if link == "exponential":
        return np.exp(x)
    if link == "inverse-exponential":
        return np.exp(-x)
    if link == "sigmoid":
        t = SIGMOID_SLOPE * (x - SIGMOID_CENTER)
        # branch on sign so exp never overflows
        et = np.exp(-np.abs(t))
        expit = np.where(t >= 0, 1.0 / (1.0 + et), et / (1.0 + et))
        return SIGMOID_EPS + (1.0 - 2.0 * SIGMOID_EPS) * expit
    raise ValueError("unknown link %r" % (link,))


def inverse_link(link: str, y):
    """Pull observation-scale values back to the latent scale.

    Inputs are clipped into the open range of the link first, so this is
    safe to call on raw data (used for initialization only).
    """
    y = np.asarray(y, dtype=float)
    if link == "identity":
        return y
    if link == "soft-plus":
        y = np.clip(y, 1e-6, None)
        # inverse of ln(1+e^x); for large y the two agree to machine precision
        return np.where(y > 30.0, y, np.log(np.expm1(np.clip(y, 1e-6, 30.0))))
    if link == "exponential":
        return np.log(np.clip(y, 1e-300, None))
    if link == "inverse-exponential":
        return -np.log(np.clip(y, 1e-300, None))
    if link == "sigmoid":
        lo = SIGMOID_EPS + 1e-12
        hi = 1.0 - SIGMOID_EPS - 1e-12
        p = (np.clip(y, lo, hi) - SIGMOID_EPS) / (1.0 - 2.0 * SIGMOID_EPS)
        return SIGMOID_CENTER + np.log(p / (1.0 - p)) / SIGMOID_SLOPE
    raise ValueError("unknown link %r" % (link,))


def check_compatible(obs_family: str, link: str) -> None:
    if obs_family not in COMPATIBLE:
        raise ValueError("unknown observation family %r" % (obs_family,))
    if link not in LINKS:
        raise ValueError("unknown link %r" % (link,))
    if link not in COMPATIBLE[obs_family]:
        raise ValueError(
            "link %r is not valid for observation family %r (valid: %s)"
            % (link, obs_family, ", ".join(COMPATIBLE[obs_family]))
        )

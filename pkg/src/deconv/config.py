"""Flat key=value run configuration files.

One `key = value` pair per line, `#` comments, blank lines ignored.
Unknown keys are rejected with the offending line number so typos
cannot silently fall back to defaults. Matrix-ish values are kept
simple: `psi0 = 0.5` means a scaled identity, `psi0 = 0.5,0.3,0.2`
a diagonal; `nu0 = auto` resolves to M + 2 once the data is read.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .model import DOMAINS, Hyperparameters
from .simulate import SimSpec
from .vi import BLOCKS, FitOptions, LearningRateSchedule

# default link per observation family, used when `link` is not given
DEFAULT_LINKS = {
    "normal": "identity",
    "poisson": "soft-plus",
    "gamma": "soft-plus",
    "beta": "sigmoid",
}

SIM_KEYS = (
    "procedure", "domain", "k", "n", "m", "alpha0", "alpha", "mu0", "sigma",
    "psi", "nu", "rho", "ig_a", "ig_b", "seed",
)

FIT_KEYS = (
    "k", "obs_family", "link", "alpha0", "alpha", "mu0", "sigma0", "psi0",
    "nu0", "rho", "eta", "samples", "elbo_samples", "max_iters", "min_iters",
    "delta", "consecutive", "batch_max_iters", "max_cycles", "init_noise",
    "init_scale", "seed",
) + tuple("schedule_%s" % b for b in BLOCKS)


def parse_config(path: str) -> dict:
    """Read a key=value file; returns {key: (raw value, line number)}."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ConfigError("cannot read config %s: %s" % (path, e))
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(
                "%s line %d: expected 'key = value', got %r" % (path, lineno, text)
            )
        key, value = (part.strip() for part in text.split("=", 1))
        if not key or not value:
            raise ConfigError(
                "%s line %d: empty key or value" % (path, lineno)
            )
        if key in out:
            raise ConfigError(
                "%s line %d: duplicate key %r (first at line %d)"
                % (path, lineno, key, out[key][1])
            )
        out[key] = (value, lineno)
    return out


def _check_keys(cfg, allowed, path):
    for key, (_, lineno) in cfg.items():
        if key not in allowed:
            raise ConfigError("%s line %d: unknown key %r" % (path, lineno, key))


def _get(cfg, key, convert, kind, path, default=None):
    if key not in cfg:
        return default
    raw, lineno = cfg[key]
    try:
        return convert(raw)
    except ValueError:
        raise ConfigError(
            "%s line %d: value for %r must be %s, got %r"
            % (path, lineno, key, kind, raw)
        )


def _get_int(cfg, key, path, default=None):
    return _get(cfg, key, int, "an integer", path, default)


def _get_float(cfg, key, path, default=None):
    return _get(cfg, key, float, "a number", path, default)


def _get_choice(cfg, key, choices, path, default=None):
    if key not in cfg:
        return default
    raw, lineno = cfg[key]
    if raw not in choices:
        raise ConfigError(
            "%s line %d: value for %r must be one of %s, got %r"
            % (path, lineno, key, "/".join(choices), raw)
        )
    return raw


def _get_floats(cfg, key, path, default=None):
    """Scalar or comma-separated list, returned as a float array."""
    if key not in cfg:
        return default
    raw, lineno = cfg[key]
    try:
        return np.array([float(part) for part in raw.split(",")])
    except ValueError:
        raise ConfigError(
            "%s line %d: value for %r must be a number or comma list, got %r"
            % (path, lineno, key, raw)
        )


def get_seed(cfg: dict, path: str) -> Optional[int]:
    """The config's seed key if present, else None (caller decides fallback)."""
    return _get_int(cfg, "seed", path)


def _get_schedule(cfg, key, path):
    if key not in cfg:
        return None
    raw, lineno = cfg[key]
    parts = raw.split(",")
    try:
        if len(parts) != 2:
            raise ValueError
        return LearningRateSchedule(float(parts[0]), float(parts[1]))
    except ValueError:
        raise ConfigError(
            "%s line %d: value for %r must be 'delay,rate', got %r"
            % (path, lineno, key, raw)
        )


# ---------------------------------------------------------------------------
# simulation configs


def load_sim_spec(path: str, seed: Optional[int] = None) -> SimSpec:
    """Build a SimSpec from a config file; `seed` (if given) wins."""
    cfg = parse_config(path)
    _check_keys(cfg, SIM_KEYS, path)
    base = SimSpec()
    nu_raw = cfg.get("nu", (None, 0))[0]
    psi = _get_floats(cfg, "psi", path)
    if psi is not None:
        psi = float(psi[0]) if psi.size == 1 else np.diag(psi)
    kwargs = dict(
        procedure=_get_int(cfg, "procedure", path, base.procedure),
        domain=_get_choice(cfg, "domain", DOMAINS, path, base.domain),
        k=_get_int(cfg, "k", path, base.k),
        n=_get_int(cfg, "n", path, base.n),
        m=_get_int(cfg, "m", path, base.m),
        alpha0=_get_float(cfg, "alpha0", path, base.alpha0),
        alpha=_get_float(cfg, "alpha", path, base.alpha),
        mu0=_get_float(cfg, "mu0", path, base.mu0),
        sigma=_get_float(cfg, "sigma", path, base.sigma),
        psi=base.psi if psi is None else psi,
        nu=None if nu_raw in (None, "auto") else _get_float(cfg, "nu", path),
        rho=_get_float(cfg, "rho", path, base.rho),
        ig_a=_get_float(cfg, "ig_a", path, base.ig_a),
        ig_b=_get_float(cfg, "ig_b", path, base.ig_b),
        seed=_get_int(cfg, "seed", path, base.seed) if seed is None else seed,
    )
    try:
        return SimSpec(**kwargs)
    except ValueError as e:
        raise ConfigError("%s: %s" % (path, e))


# ---------------------------------------------------------------------------
# fit configs


@dataclass
class FitSettings:
    """Fit configuration with the data-dependent parts left symbolic.

    psi0/nu0/eta may depend on the feature count M, so the actual
    Hyperparameters are built by hyperparameters(m) after the data is
    loaded.
    """

    k: int = 3
    obs_family: str = "normal"
    link: Optional[str] = None
    alpha0: float = 1.0
    alpha: float = 1.0
    mu0: float = 0.0
    sigma0: float = 4.0
    psi0: object = 1.0          # scalar -> psi0 * I, or length-M diagonal
    nu0: Optional[float] = None  # None -> M + 2
    rho: float = 100.0
    eta: object = 1.0           # scalar or length-M spreads
    seed: Optional[int] = None
    options: FitOptions = field(default_factory=FitOptions)

    def hyperparameters(self, m: int) -> Hyperparameters:
        psi0 = np.asarray(self.psi0, dtype=float)
        if psi0.ndim == 0:
            psi0 = float(psi0) * np.eye(m)
        elif psi0.ndim == 1:
            if psi0.shape[0] != m:
                raise ConfigError(
                    "psi0 diagonal has %d entries, data has %d features"
                    % (psi0.shape[0], m)
                )
            psi0 = np.diag(psi0)
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if eta.shape[0] not in (1, m):
            raise ConfigError(
                "eta has %d entries, data has %d features" % (eta.shape[0], m)
            )
        try:
            return Hyperparameters(
                alpha0=self.alpha0,
                alpha=self.alpha,
                mu0=self.mu0,
                sigma0=self.sigma0,
                psi0=psi0,
                nu0=float(m + 2) if self.nu0 is None else self.nu0,
                rho=self.rho,
                eta=float(eta[0]) if eta.shape[0] == 1 else eta,
                obs_family=self.obs_family,
                link=self.link or DEFAULT_LINKS[self.obs_family],
            )
        except ValueError as e:
            raise ConfigError(str(e))


def load_fit_settings(path: str, seed: Optional[int] = None) -> FitSettings:
    """Build FitSettings from a config file; `seed` (if given) wins."""
    cfg = parse_config(path)
    _check_keys(cfg, FIT_KEYS, path)
    base = FitSettings()
    opts_base = FitOptions()
    nu_raw = cfg.get("nu0", (None, 0))[0]
    psi0 = _get_floats(cfg, "psi0", path)
    eta = _get_floats(cfg, "eta", path)
    schedules = {}
    for block in BLOCKS:
        sched = _get_schedule(cfg, "schedule_%s" % block, path)
        if sched is not None:
            schedules[block] = sched
    options = FitOptions(
        samples=_get_int(cfg, "samples", path, opts_base.samples),
        elbo_samples=_get_int(cfg, "elbo_samples", path, opts_base.elbo_samples),
        max_iters=_get_int(cfg, "max_iters", path, opts_base.max_iters),
        min_iters=_get_int(cfg, "min_iters", path, opts_base.min_iters),
        delta=_get_float(cfg, "delta", path, opts_base.delta),
        consecutive=_get_int(cfg, "consecutive", path, opts_base.consecutive),
        batch_max_iters=_get_int(cfg, "batch_max_iters", path, opts_base.batch_max_iters),
        max_cycles=_get_int(cfg, "max_cycles", path, opts_base.max_cycles),
        init_noise=_get_float(cfg, "init_noise", path, opts_base.init_noise),
        init_scale=_get_float(cfg, "init_scale", path, opts_base.init_scale),
        schedules=schedules or None,
    )
    settings = FitSettings(
        k=_get_int(cfg, "k", path, base.k),
        obs_family=_get_choice(
            cfg, "obs_family", tuple(DEFAULT_LINKS), path, base.obs_family
        ),
        link=cfg.get("link", (None, 0))[0],
        alpha0=_get_float(cfg, "alpha0", path, base.alpha0),
        alpha=_get_float(cfg, "alpha", path, base.alpha),
        mu0=_get_float(cfg, "mu0", path, base.mu0),
        sigma0=_get_float(cfg, "sigma0", path, base.sigma0),
        psi0=base.psi0 if psi0 is None else (
            float(psi0[0]) if psi0.size == 1 else psi0
        ),
        nu0=None if nu_raw in (None, "auto") else _get_float(cfg, "nu0", path),
        rho=_get_float(cfg, "rho", path, base.rho),
        eta=base.eta if eta is None else (
            float(eta[0]) if eta.size == 1 else eta
        ),
        seed=_get_int(cfg, "seed", path) if seed is None else seed,
        options=options,
    )
    if settings.k < 1:
        raise ConfigError("%s: k must be >= 1" % path)
    return settings

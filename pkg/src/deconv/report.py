"""Fit results and checkpoint serialization.

Everything here is deterministic: serialized reports contain no wall
clock times or environment detail, so two runs with the same seed and
config produce byte-identical JSON.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .state import VariationalState


@dataclass
class FitReport:
    """Outcome of a fit: final state, ELBO trace, move log, diagnostics."""

    mode: str                      # "parametric" or "nonparametric"
    n_factors: int
    state: VariationalState
    elbo_trace: list
    converged: bool
    iterations: int
    warnings: list
    moves: list                    # dicts: kind, factors, accepted, elbo values
    seed: int
    samples: int
    elbo_samples: int

    def expectations(self) -> dict:
        return {
            "beta": self.state.e_beta(),
            "pi": self.state.e_pi(),
            "mu": self.state.e_mu(),
            "sigma": self.state.e_sigma(),
            "xbar": self.state.e_xbar(),
            "p": self.state.e_p(),
        }

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_factors": int(self.n_factors),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "seed": int(self.seed),
            "samples": int(self.samples),
            "elbo_samples": int(self.elbo_samples),
            "elbo_trace": [float(v) for v in self.elbo_trace],
            "warnings": list(self.warnings),
            "moves": [_jsonable(m) for m in self.moves],
            "state": _state_to_dict(self.state),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=1)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def from_json_dict(cls, d: dict) -> "FitReport":
        return cls(
            mode=d["mode"],
            n_factors=d["n_factors"],
            state=_state_from_dict(d["state"]),
            elbo_trace=list(d["elbo_trace"]),
            converged=d["converged"],
            iterations=d["iterations"],
            warnings=list(d["warnings"]),
            moves=list(d["moves"]),
            seed=d["seed"],
            samples=d["samples"],
            elbo_samples=d["elbo_samples"],
        )

    @classmethod
    def load(cls, path: str) -> "FitReport":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


_STATE_FIELDS = (
    "lam_beta",
    "lam_pi",
    "lam_mu_mean",
    "lam_sigma_psi",
    "lam_sigma_nu",
    "lam_xbar_mean",
    "lam_xbar_scale",
    "lam_p",
)


def _state_to_dict(state: VariationalState) -> dict:
    return {name: getattr(state, name).tolist() for name in _STATE_FIELDS}


def _state_from_dict(d: dict) -> VariationalState:
    return VariationalState(**{name: np.asarray(d[name], dtype=float) for name in _STATE_FIELDS})


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_NAME = "checkpoint.json"


def save_checkpoint(dirpath, seed, state, est, monitor, trace, warnings, iters,
                    extra=None):
    """Write a resumable snapshot of an in-progress fit.

    `monitor` may be None (the nonparametric loop has no global monitor);
    `extra` holds mode-specific loop counters merged into the payload.
    """
    os.makedirs(dirpath, exist_ok=True)
    payload = {
        "seed": int(seed),
        "iterations": int(iters),
        "elbo_trace": [float(v) for v in trace],
        "warnings": list(warnings),
        "monitor": None if monitor is None else {
            "hits": int(monitor.hits),
            "iters": int(monitor.iters),
            "prev": None if monitor.prev is None else float(monitor.prev),
        },
        "state": _state_to_dict(state),
        "acc": {k: v.tolist() for k, v in est.acc.items()},
    }
    if extra:
        payload.update(_jsonable(extra))
    tmp = os.path.join(dirpath, CHECKPOINT_NAME + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
    os.replace(tmp, os.path.join(dirpath, CHECKPOINT_NAME))


def load_checkpoint(dirpath) -> Optional[dict]:
    path = os.path.join(dirpath, CHECKPOINT_NAME)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        payload = json.load(fh)
    payload["state"] = _state_from_dict(payload["state"])
    payload["acc"] = {k: np.asarray(v, dtype=float) for k, v in payload["acc"].items()}
    return payload

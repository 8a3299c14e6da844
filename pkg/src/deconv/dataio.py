"""File formats: dataset CSV + sidecar, ground truth JSON, run manifests.

CSV is the plainest dialect there is: comma separated, '.' decimal,
UTF-8, one header row. Floats are written with repr so files round-trip
bit exact and identical runs produce identical bytes. The dataset CSV
cannot carry its domain, so a small `.manifest.json` sidecar does.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
import time
from typing import Optional

import numpy as np

from . import __version__
from .errors import DataError, ShapeError
from .model import DOMAINS, Dataset, GroundTruth


def _float_str(x) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# matrix CSV


def write_matrix_csv(path: str, matrix, header: list) -> None:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.shape[1] != len(header):
        raise ShapeError(
            "matrix has %d columns, header names %d" % (matrix.shape[1], len(header))
        )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in matrix:
            writer.writerow([_float_str(v) for v in row])


def read_matrix_csv(path: str) -> np.ndarray:
    """Read a header + float rows CSV into an (R, C) array."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise DataError("cannot read %s: %s" % (path, e))
    if len(rows) < 2:
        raise DataError("%s: expected a header row and at least one data row" % path)
    width = len(rows[0])
    out = np.empty((len(rows) - 1, width))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ShapeError(
                "%s line %d: expected %d fields, got %d" % (path, i, width, len(row))
            )
        try:
            out[i - 2] = [float(v) for v in row]
        except ValueError as e:
            raise DataError("%s line %d: %s" % (path, i, e))
    return out


# ---------------------------------------------------------------------------
# dataset CSV + domain sidecar


def dataset_header(m: int) -> list:
    return ["y%d" % j for j in range(m)]


def sidecar_path(data_path: str) -> str:
    base = data_path[:-4] if data_path.endswith(".csv") else data_path
    return base + ".manifest.json"


def write_dataset(path: str, dataset: Dataset, warnings: Optional[list] = None) -> list:
    """Write data CSV plus its domain sidecar; returns the paths written."""
    write_matrix_csv(path, dataset.y, dataset_header(dataset.n_features))
    side = sidecar_path(path)
    payload = {
        "domain": dataset.domain,
        "n_obs": int(dataset.n_obs),
        "n_features": int(dataset.n_features),
        "warnings": list(warnings or []),
    }
    with open(side, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [path, side]


def read_dataset(path: str, domain: Optional[str] = None) -> Dataset:
    """Read a data CSV; domain comes from the sidecar unless given."""
    y = read_matrix_csv(path)
    if domain is None:
        try:
            with open(sidecar_path(path), encoding="utf-8") as fh:
                domain = json.load(fh)["domain"]
        except OSError:
            domain = "real"
        except (KeyError, ValueError) as e:
            raise DataError("%s: bad sidecar manifest: %s" % (sidecar_path(path), e))
    if domain not in DOMAINS:
        raise DataError("unknown domain %r for %s" % (domain, path))
    return Dataset(y=y, domain=domain)


# ---------------------------------------------------------------------------
# ground truth JSON


def _arr(x):
    return None if x is None else np.asarray(x).tolist()


def write_ground_truth(path: str, truth: GroundTruth) -> None:
    payload = {
        "beta": _arr(truth.beta),
        "pi": _arr(truth.pi),
        "mu": _arr(truth.mu),
        "sigma": _arr(truth.sigma),
        "xbar": _arr(truth.xbar),
        "p": _arr(truth.p),
        "sigma_m": _arr(truth.sigma_m),
        "xbar_mask": _arr(truth.xbar_mask),
        "pi_dirichlet": _arr(truth.pi_dirichlet),
        "modes": None if truth.modes is None else [_arr(s) for s in truth.modes],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def read_ground_truth(path: str) -> GroundTruth:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as e:
        raise DataError("cannot read %s: %s" % (path, e))
    except ValueError as e:
        raise DataError("%s is not valid JSON: %s" % (path, e))
    try:
        def opt(key, dtype=float):
            value = payload.get(key)
            return None if value is None else np.asarray(value, dtype=dtype)

        return GroundTruth(
            beta=np.asarray(payload["beta"], dtype=float),
            pi=np.asarray(payload["pi"], dtype=float),
            mu=np.asarray(payload["mu"], dtype=float),
            sigma=np.asarray(payload["sigma"], dtype=float),
            xbar=np.asarray(payload["xbar"], dtype=float),
            p=np.asarray(payload["p"], dtype=float),
            sigma_m=opt("sigma_m"),
            xbar_mask=opt("xbar_mask", bool),
            pi_dirichlet=opt("pi_dirichlet"),
            modes=None if payload.get("modes") is None else [
                np.asarray(s, dtype=float) for s in payload["modes"]
            ],
        )
    except KeyError as e:
        raise DataError("%s: missing ground truth field %s" % (path, e))


# ---------------------------------------------------------------------------
# run manifests


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class RunManifest:
    """Provenance record written next to each command's outputs.

    Wall clock time lives here and only here, so the result files
    themselves stay byte-identical across repeated runs.
    """

    def __init__(self, command: str, seed: Optional[int], config: Optional[dict] = None):
        self.command = command
        self.argv = list(sys.argv[1:])
        self.seed = seed
        self.config = dict(config or {})
        self.inputs = {}
        self.outputs = []
        self._start = time.monotonic()

    def add_input(self, path: str) -> None:
        self.inputs[path] = sha256_file(path)

    def add_outputs(self, paths) -> None:
        self.outputs.extend(paths)

    def write(self, path: str) -> None:
        payload = {
            "command": self.command,
            "argv": self.argv,
            "seed": self.seed,
            "config": self.config,
            "version": __version__,
            "inputs": self.inputs,
            "outputs": list(self.outputs),
            "wall_clock_seconds": round(time.monotonic() - self._start, 3),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

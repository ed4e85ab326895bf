"""Array-in, array-out wrapper around the ``vlgp`` command line tool.

The wrapper holds no numerical logic: arrays are marshalled to the CLI's
CSV/JSON formats (17-significant-digit floats, lossless for doubles), the
tool runs in a subprocess, and its outputs are parsed back into numpy
arrays.  Outputs are therefore bitwise identical to what the CLI writes
for the same seeds.
"""

from __future__ import annotations

import csv
import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

__all__ = [
    "BindingError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "ModelHandle",
    "fit",
    "predict",
    "simulate",
    "neg_log_likelihood",
]

__version__ = "0.1.0"


class BindingError(RuntimeError):
    """Base error; carries the core tool's message verbatim."""


class ConfigError(BindingError):
    pass


class DataError(BindingError):
    pass


class NumericalError(BindingError):
    pass


_EXIT_ERRORS = {2: ConfigError, 3: DataError, 4: NumericalError}

FIT_OPTION_KEYS = {
    "likelihood", "m", "nu", "backend", "optimizer", "seeds", "subsample_size",
}
PREDICT_OPTION_KEYS = {"prediction", "response", "scores"}
SIMULATE_OPTION_KEYS = {"n", "d", "likelihood", "covariance", "fixed_effects", "seeds"}


def _cli_command():
    exe = shutil.which("vlgp")
    if exe is not None:
        return [exe]
    return [sys.executable, "-m", "vlgp.cli"]


def _run(args):
    proc = subprocess.run(
        _cli_command() + args, capture_output=True, text=True, check=False
    )
    if proc.returncode != 0:
        err = _EXIT_ERRORS.get(proc.returncode, BindingError)
        raise err(proc.stderr.strip() or f"vlgp exited with {proc.returncode}")
    return proc


def _fmt(x):
    return f"{float(x):.17g}"


def _write_data_csv(path, coords, y=None, X=None):
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    n, d = coords.shape
    header = [f"s{j + 1}" for j in range(d)]
    cols = [coords[:, j] for j in range(d)]
    if X is not None and X.size:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != n:
            raise DataError(f"X has {X.shape[0]} rows, expected n = {n}")
        header += [f"x{j + 1}" for j in range(X.shape[1])]
        cols += [X[:, j] for j in range(X.shape[1])]
    if y is not None:
        y = np.asarray(y, dtype=float).ravel()
        if y.shape[0] != n:
            raise DataError(f"y has length {y.shape[0]}, expected n = {n}")
        header.append("y")
        cols.append(y)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in zip(*cols):
            writer.writerow([_fmt(v) for v in row])


def _read_csv_columns(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    header = rows[0]
    if len(rows) == 1:
        data = np.empty((0, len(header)))
    else:
        data = np.array([[float(v) for v in row] for row in rows[1:]])
    return {name: np.ascontiguousarray(data[:, j]) for j, name in enumerate(header)}


def _check_options(options, allowed, what):
    unknown = set(options) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} option keys: {sorted(unknown)}")


class ModelHandle:
    """A fitted model plus the training data it needs for prediction.

    The handle owns a temporary directory holding the model file and the
    training CSV; ``close()`` removes it and invalidates the handle.
    """

    def __init__(self, workdir, model_path, data_path):
        self._dir = workdir
        self.model_path = model_path
        self.data_path = data_path
        with open(model_path) as fh:
            self.model = json.load(fh)
        self._closed = False

    @property
    def estimates(self):
        e = self.model["estimates"]
        return {k: np.asarray(v, dtype=float) for k, v in e.items()}

    @property
    def trace(self):
        return self.model["trace"]

    @property
    def objective(self):
        return float(self.model["objective"])

    @property
    def converged(self):
        return bool(self.model["converged"])

    def _check_open(self):
        if self._closed:
            raise BindingError("model handle is closed")

    def predict(self, coords_p, X_p=None, options=None):
        return predict(self, coords_p, X_p=X_p, options=options)

    def close(self):
        if not self._closed:
            shutil.rmtree(self._dir, ignore_errors=True)
            self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def fit(y, X, coords, options):
    """Fit the model on arrays; returns a :class:`ModelHandle`.

    ``options`` mirrors the CLI fit configuration (likelihood, m, backend,
    optimizer, seeds, ...); all randomness must be seeded there.
    """
    _check_options(options, FIT_OPTION_KEYS, "fit")
    workdir = Path(tempfile.mkdtemp(prefix="vlgp-bind-"))
    data_path = workdir / "data.csv"
    _write_data_csv(data_path, coords, y=y, X=X)
    config_path = workdir / "fit.json"
    config_path.write_text(json.dumps(options))
    model_path = workdir / "model.json"
    try:
        _run(["fit", "--config", str(config_path), "--data", str(data_path),
              "--out", str(model_path)])
    except BindingError:
        shutil.rmtree(workdir, ignore_errors=True)
        raise
    return ModelHandle(workdir, str(model_path), str(data_path))


def predict(handle, coords_p, X_p=None, options=None):
    """Predict at new locations; returns dict of arrays.

    Keys: ``omega`` and ``var`` always; ``resp_mean`` / ``resp_var`` when a
    response block was requested in the options.
    """
    handle._check_open()
    options = {"prediction": {"method": "exact"}} if options is None else options
    _check_options(options, PREDICT_OPTION_KEYS, "predict")
    coords_p = np.atleast_2d(np.asarray(coords_p, dtype=float))
    with tempfile.TemporaryDirectory(prefix="vlgp-bind-") as tmp:
        tmp = Path(tmp)
        pred_path = tmp / "pred.csv"
        _write_data_csv(pred_path, coords_p, X=X_p)
        config_path = tmp / "predict.json"
        config_path.write_text(json.dumps(options))
        out_path = tmp / "out.csv"
        _run(["predict", "--config", str(config_path), "--model", handle.model_path,
              "--data", handle.data_path, "--pred", str(pred_path),
              "--out", str(out_path)])
        cols = _read_csv_columns(out_path)
        raw = out_path.read_bytes()
    cols["_raw"] = raw
    return cols


def simulate(options):
    """Simulate a dataset; returns coords, covariates, response and truth."""
    _check_options(options, SIMULATE_OPTION_KEYS, "simulate")
    with tempfile.TemporaryDirectory(prefix="vlgp-bind-") as tmp:
        out = Path(tmp) / "data.csv"
        config_path = Path(tmp) / "sim.json"
        config_path.write_text(json.dumps(options))
        _run(["simulate", "--config", str(config_path), "--out", str(out)])
        data = _read_csv_columns(out)
        truth = _read_csv_columns(Path(tmp) / "data.truth.csv")
    d = sum(1 for k in data if k.startswith("s"))
    p = sum(1 for k in data if k.startswith("x"))
    result = {
        "coords": np.column_stack([data[f"s{j + 1}"] for j in range(d)]),
        "y": data["y"],
        "b": truth["b"],
        "mu": truth["mu"],
    }
    if p:
        result["X"] = np.column_stack([data[f"x{j + 1}"] for j in range(p)])
    return result


def neg_log_likelihood(y, X, coords, theta, beta=None, xi=None, options=None):
    """Objective value at fixed parameters (a zero-iteration fit)."""
    options = {} if options is None else dict(options)
    _check_options(options, FIT_OPTION_KEYS, "fit")
    optimizer = dict(options.get("optimizer", {}))
    optimizer["max_iters"] = 0
    optimizer["init_theta"] = [float(v) for v in theta]
    if beta is not None:
        optimizer["init_beta"] = [float(v) for v in np.atleast_1d(beta)]
    if xi is not None:
        optimizer["init_xi"] = [float(v) for v in np.atleast_1d(xi)]
    options["optimizer"] = optimizer
    handle = fit(y, X, coords, options)
    try:
        return handle.objective
    finally:
        handle.close()

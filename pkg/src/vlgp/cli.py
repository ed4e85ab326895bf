"""Command-line interface: simulate / fit / predict / benchmark.

Data travels as headered CSV, configuration as strict JSON (unknown keys
rejected, every random stage seeded explicitly).  Floats are written with
17 significant digits so files round-trip losslessly and fully seeded runs
are byte-identical.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time

import numpy as np

from .covariance import CovarianceSpec, Locations, cov_matrix
from .errors import ConfigError, DataError, NumericalError, VlgpError
from .estimate import FitConfig, fit, profile_xi
from .laplace import BackendConfig, find_mode, neg_marginal_loglik
from .likelihoods import get_likelihood
from .predict import (
    latent_var_exact,
    latent_var_lanczos,
    latent_var_sim,
    predict_latent,
    response_moments,
    scores,
)
from .vecchia import make_factor, prediction_blocks

MODEL_FORMAT = 1


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return f"{x:.17g}"
    return str(x)


def _write_csv(path, header, rows, comments=()):
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _read_csv(path):
    """Parse a headered CSV of finite reals; row numbers are 1-based data rows."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise DataError(f"{path} is empty")
    header = [c.strip() for c in rows[0]]
    data = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i} has {len(row)} fields, expected {len(header)}")
        try:
            data[i - 1] = [float(v) for v in row]
        except ValueError as exc:
            raise DataError(f"{path}: row {i}: {exc}") from None
    if not np.all(np.isfinite(data)):
        bad = int(np.argwhere(~np.isfinite(data))[0, 0]) + 1
        raise DataError(f"{path}: row {bad} contains a non-finite value")
    return header, data


def _columns(header, data, prefix):
    names = sorted(
        (c for c in header if c.startswith(prefix) and c[len(prefix):].isdigit()),
        key=lambda c: int(c[len(prefix):]),
    )
    if not names:
        return None
    return np.column_stack([data[:, header.index(c)] for c in names])


def _check_keys(obj, allowed, context):
    if not isinstance(obj, dict):
        raise ConfigError(f"{context} must be a JSON object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")


def _require(obj, key, context):
    if key not in obj:
        raise ConfigError(f"{context} requires {key!r}")
    return obj[key]


def _load_config(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None


def _likelihood_from(cfg, context="likelihood"):
    _check_keys(cfg, {"family", "shape"}, context)
    family = _require(cfg, "family", context)
    kwargs = {}
    if "shape" in cfg:
        kwargs["shape"] = float(cfg["shape"])
    return get_likelihood(family, **kwargs)


def _covariance_from(cfg):
    _check_keys(cfg, {"sigma2", "rho", "nu"}, "covariance")
    return CovarianceSpec(
        float(_require(cfg, "sigma2", "covariance")),
        float(_require(cfg, "rho", "covariance")),
        float(cfg.get("nu", 1.5)),
    )


def _backend_from(cfg):
    allowed = {
        "backend", "preconditioner", "t", "cg_tol", "cg_max_iter",
        "logdet_split", "rank",
    }
    _check_keys(cfg, allowed, "backend")
    kw = {k: cfg[k] for k in cfg}
    if "rank" in kw and kw["rank"] is not None:
        kw["rank"] = int(kw["rank"])
    return kw


# ----------------------------------------------------------------- simulate

SIM_KEYS = {"n", "d", "likelihood", "covariance", "fixed_effects", "seeds"}
SIM_DENSE_GUARD = 8192


def cmd_simulate(config, out_path):
    _check_keys(config, SIM_KEYS, "simulate config")
    n = int(_require(config, "n", "simulate config"))
    d = int(config.get("d", 2))
    seeds = _require(config, "seeds", "simulate config")
    _check_keys(seeds, {"simulation"}, "seeds")
    seed = int(_require(seeds, "simulation", "seeds"))
    lik = _likelihood_from(_require(config, "likelihood", "simulate config"))
    spec = _covariance_from(_require(config, "covariance", "simulate config"))
    if n > SIM_DENSE_GUARD:
        raise ConfigError(
            f"simulate draws the latent field from a dense factorization; n <= {SIM_DENSE_GUARD}"
        )

    rng = np.random.default_rng(seed)
    coords = rng.uniform(size=(n, d))
    Sig = cov_matrix(spec, coords)
    b = np.linalg.cholesky(Sig) @ rng.standard_normal(n)

    X, beta = None, None
    fx = config.get("fixed_effects")
    if fx is not None:
        _check_keys(fx, {"beta", "design"}, "fixed_effects")
        beta = np.asarray(_require(fx, "beta", "fixed_effects"), dtype=float)
        design = fx.get("design", "intercept")
        if design == "intercept":
            X = np.ones((n, 1))
        elif design == "coords":
            X = np.column_stack([np.ones(n), coords])
        else:
            raise ConfigError(f"unknown design {design!r}")
        if X.shape[1] != beta.shape[0]:
            raise ConfigError(
                f"beta has length {beta.shape[0]}, design {design!r} needs {X.shape[1]}"
            )
    mu = b if X is None else b + X @ beta
    y = lik.sample(mu, rng)

    header = [f"s{j+1}" for j in range(d)]
    cols = [coords[:, j] for j in range(d)]
    if X is not None:
        header += [f"x{j+1}" for j in range(X.shape[1])]
        cols += [X[:, j] for j in range(X.shape[1])]
    header.append("y")
    cols.append(y)
    _write_csv(out_path, header, zip(*cols))

    truth_path = _truth_path(out_path)
    _write_csv(truth_path, ["b", "mu"], zip(b, mu))
    return out_path, truth_path


def _truth_path(out_path):
    stem = out_path[:-4] if out_path.endswith(".csv") else out_path
    return stem + ".truth.csv"


# ---------------------------------------------------------------------- fit

FIT_KEYS = {"likelihood", "m", "nu", "backend", "optimizer", "seeds", "subsample_size"}
OPT_KEYS = {
    "max_iters", "learning_rate", "grad_tol", "obj_rel_tol", "obj_patience",
    "init_theta", "init_beta", "init_xi", "optimize",
}


def _fit_config(config):
    seeds = _require(config, "seeds", "fit config")
    _check_keys(seeds, {"ordering", "probes", "subsample"}, "seeds")
    ordering_seed = int(_require(seeds, "ordering", "seeds"))
    backend_kw = _backend_from(config.get("backend", {}))
    if backend_kw.get("backend", "iterative") == "iterative":
        backend_kw["probe_seed"] = int(_require(seeds, "probes", "seeds"))
    backend = BackendConfig(**backend_kw)
    opt = config.get("optimizer", {})
    _check_keys(opt, OPT_KEYS, "optimizer")
    kw = {}
    for key in ("max_iters", "obj_patience"):
        if key in opt:
            kw[key] = int(opt[key])
    for key in ("learning_rate", "grad_tol", "obj_rel_tol"):
        if key in opt:
            kw[key] = float(opt[key])
    if opt.get("init_theta") is not None:
        kw["init_theta"] = tuple(float(v) for v in opt["init_theta"])
    if opt.get("init_beta") is not None:
        kw["init_beta"] = np.asarray(opt["init_beta"], dtype=float)
    if opt.get("init_xi") is not None:
        kw["init_xi"] = np.asarray(opt["init_xi"], dtype=float)
    if "optimize" in opt:
        kw["optimize"] = tuple(opt["optimize"])
    return FitConfig(
        m=int(config.get("m", 20)),
        ordering_seed=ordering_seed,
        backend=backend,
        nu=float(config.get("nu", 1.5)),
        **kw,
    )


def cmd_fit(data_path, config, model_out):
    _check_keys(config, FIT_KEYS, "fit config")
    lik = _likelihood_from(_require(config, "likelihood", "fit config"))
    cfg = _fit_config(config)
    header, data = _read_csv(data_path)
    coords = _columns(header, data, "s")
    if coords is None:
        raise DataError(f"{data_path} has no coordinate columns s1..sd")
    if "y" not in header:
        raise DataError(f"{data_path} has no response column y")
    y = data[:, header.index("y")]
    X = _columns(header, data, "x")
    p = 0 if X is None else X.shape[1]
    X_arr = X if X is not None else np.zeros((coords.shape[0], 0))
    locs = Locations(coords)

    sub = config.get("subsample_size")
    if sub is not None:
        seeds = config["seeds"]
        result = profile_xi(
            y, X_arr, locs, lik, cfg,
            subsample_size=int(sub),
            seed=int(_require(seeds, "subsample", "seeds")),
        )
    else:
        result = fit(y, X_arr, locs, lik, cfg)

    model = {
        "format": MODEL_FORMAT,
        "likelihood": config["likelihood"],
        "estimates": {
            "theta": result.theta.tolist(),
            "beta": result.beta.tolist(),
            "xi": result.xi.tolist(),
        },
        "m": cfg.m,
        "nu": cfg.nu,
        "n": int(coords.shape[0]),
        "p": p,
        "seeds": config["seeds"],
        "backend": config.get("backend", {}),
        "objective": result.objective,
        "converged": result.converged,
        "iterations": result.iterations,
        "n_evaluations": result.n_evaluations,
        "trace": result.trace,
        "subsample_size": sub,
    }
    with open(model_out, "w") as fh:
        json.dump(model, fh, indent=1)
        fh.write("\n")
    return result


def _load_model(path):
    try:
        with open(path) as fh:
            model = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read model {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"model {path} is not valid JSON: {exc}") from None
    if model.get("format") != MODEL_FORMAT:
        raise ConfigError(f"unsupported model format {model.get('format')!r}")
    return model


# ------------------------------------------------------------------ predict

PRED_KEYS = {"prediction", "response", "scores"}
PRED_METHOD_KEYS = {"method", "s", "seed", "k", "variant"}


def cmd_predict(model_path, data_path, pred_path, config, out_path):
    _check_keys(config, PRED_KEYS, "predict config")
    model = _load_model(model_path)
    lik = _likelihood_from(model["likelihood"], "model likelihood")
    if lik.n_xi:
        lik = lik.with_xi(np.asarray(model["estimates"]["xi"], dtype=float))
    theta = np.asarray(model["estimates"]["theta"], dtype=float)
    beta = np.asarray(model["estimates"]["beta"], dtype=float)
    spec = CovarianceSpec(theta[0], theta[1], float(model["nu"]))

    header, data = _read_csv(data_path)
    coords = _columns(header, data, "s")
    y = data[:, header.index("y")]
    X = _columns(header, data, "x")
    if coords.shape[0] != model["n"]:
        raise DataError(
            f"training data has {coords.shape[0]} rows, model was fit on {model['n']}"
        )
    ph, pdata = _read_csv(pred_path)
    pcoords = _columns(ph, pdata, "s")
    if pcoords is None:
        raise DataError(f"{pred_path} has no coordinate columns")
    Xp = _columns(ph, pdata, "x")
    if model["p"]:
        if Xp is None or Xp.shape[1] != model["p"]:
            raise DataError(f"{pred_path} must carry {model['p']} covariate columns")
        F_p = Xp @ beta
    else:
        F_p = np.zeros(pcoords.shape[0])

    backend_kw = _backend_from(model.get("backend", {}))
    if backend_kw.get("backend", "iterative") == "iterative":
        backend_kw["probe_seed"] = int(model["seeds"]["probes"])
    bcfg = BackendConfig(**backend_kw)

    factor = make_factor(Locations(coords), spec, int(model["m"]),
                         int(model["seeds"]["ordering"]))
    F = X @ beta if model["p"] else np.zeros(coords.shape[0])
    state = find_mode(factor, lik, y[factor.perm], F[factor.perm], bcfg)
    blocks = prediction_blocks(factor, pcoords)

    pcfg = config.get("prediction", {"method": "simulation", "s": 2000, "seed": 0})
    _check_keys(pcfg, PRED_METHOD_KEYS, "prediction")
    method = pcfg.get("method", "simulation")
    kw = {}
    if method == "simulation":
        kw = {"s": int(pcfg.get("s", 2000)), "seed": int(_require(pcfg, "seed", "prediction"))}
    elif method == "lanczos":
        kw = {"k": int(pcfg.get("k", 100)), "variant": pcfg.get("variant", "none")}
    elif method != "exact":
        raise ConfigError(f"unknown prediction method {method!r}")
    pred = predict_latent(state, factor, blocks, F_p, method=method, cfg=bcfg, **kw)

    rcfg = config.get("response")
    if rcfg is not None:
        _check_keys(rcfg, {"method", "n_s", "seed"}, "response")
        rmethod = rcfg.get("method", "simulation")
        if rmethod == "simulation":
            response_moments(pred, lik, "simulation", n_s=int(rcfg.get("n_s", 2000)),
                             seed=int(_require(rcfg, "seed", "response")))
        else:
            response_moments(pred, lik, rmethod)

    comments = [f"variance_method={_method_tag(method, kw)}"]
    score_values = {}
    for kind in config.get("scores", []):
        col = "y" if kind == "crps" else "b"
        if col not in ph:
            raise DataError(f"score {kind!r} needs a truth column {col!r} in {pred_path}")
        truth = pdata[:, ph.index(col)]
        score_values[kind] = scores(pred, truth, kind)
    for kind, val in score_values.items():
        comments.append(f"score_{kind}={_fmt(val)}")

    header_out = ["omega", "var"]
    cols = [pred.omega, pred.var]
    if pred.response_mean is not None:
        header_out.append("resp_mean")
        cols.append(pred.response_mean)
    if pred.response_var is not None:
        header_out.append("resp_var")
        cols.append(pred.response_var)
    _write_csv(out_path, header_out, zip(*cols), comments=comments)
    return pred, score_values


def _method_tag(method, kw):
    if method == "lanczos":
        return f"lanczos,k={kw['k']},variant={kw['variant']}"
    if method == "simulation":
        return f"simulation,s={kw['s']}"
    return method


# ---------------------------------------------------------------- benchmark

BENCH_KEYS = {
    "suite", "n", "n_p", "m", "replicates", "t_values", "likelihood",
    "covariance", "fixed_effects", "seeds", "backend", "rank", "s_values",
    "k_values",
}
SUITES = ("preconditioners", "likelihood-accuracy", "predvar", "estimation")


def _bench_data(config, seed, n=None):
    sim = {
        "n": n if n is not None else int(_require(config, "n", "benchmark config")),
        "d": 2,
        "likelihood": config["likelihood"],
        "covariance": config["covariance"],
        "seeds": {"simulation": seed},
    }
    n = sim["n"]
    lik = _likelihood_from(config["likelihood"])
    spec = _covariance_from(config["covariance"])
    rng = np.random.default_rng(seed)
    coords = rng.uniform(size=(n, 2))
    Sig = cov_matrix(spec, coords)
    b = np.linalg.cholesky(Sig) @ rng.standard_normal(n)
    y = lik.sample(b, rng)
    return coords, b, y, lik, spec


def cmd_benchmark(config, out_path):
    _check_keys(config, BENCH_KEYS, "benchmark config")
    suite = _require(config, "suite", "benchmark config")
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")
    seeds = _require(config, "seeds", "benchmark config")
    _check_keys(seeds, {"simulation", "ordering", "probes_base", "fit_base"}, "seeds")
    replicates = int(config.get("replicates", 0))
    m = int(config.get("m", 20))
    rows = []

    if suite == "preconditioners":
        coords, b, y, lik, spec = _bench_data(config, int(seeds["simulation"]))
        factor = make_factor(Locations(coords), spec, m, int(seeds["ordering"]))
        yf = y[factor.perm]
        base = BackendConfig(backend="iterative", preconditioner="vadu",
                             probe_seed=0, rank=config.get("rank"))
        state = find_mode(factor, lik, yf, np.zeros(factor.n), base)
        header = ["suite", "preconditioner", "t", "replicate", "nll", "wall_time"]
        from dataclasses import replace as _rep

        for pname in ("vadu", "lva", "lrac", "diag", "pchol-precision", "rowsel"):
            for t in config.get("t_values", [5, 50]):
                for r in range(replicates):
                    cfg_r = _rep(base, preconditioner=pname, t=int(t),
                                 probe_seed=int(seeds["probes_base"]) + r)
                    t0 = time.perf_counter()
                    nll = neg_marginal_loglik(state, factor, cfg_r)
                    rows.append(
                        ["preconditioners", pname, t, r, nll, time.perf_counter() - t0]
                    )
    elif suite == "likelihood-accuracy":
        header = ["suite", "replicate", "nll_cholesky", "nll_iterative", "rel_diff"]
        for r in range(replicates):
            coords, b, y, lik, spec = _bench_data(config, int(seeds["simulation"]) + r)
            factor = make_factor(Locations(coords), spec, m, int(seeds["ordering"]))
            yf = y[factor.perm]
            chol = BackendConfig(backend="cholesky")
            it = BackendConfig(backend="iterative", preconditioner="vadu",
                               probe_seed=int(seeds["probes_base"]) + r)
            st = find_mode(factor, lik, yf, np.zeros(factor.n), chol)
            nll_c = neg_marginal_loglik(st, factor, chol)
            st_i = find_mode(factor, lik, yf, np.zeros(factor.n), it)
            nll_i = neg_marginal_loglik(st_i, factor, it)
            rows.append(["likelihood-accuracy", r, nll_c, nll_i, (nll_i - nll_c) / nll_c])
    elif suite == "predvar":
        coords, b, y, lik, spec = _bench_data(config, int(seeds["simulation"]))
        n = coords.shape[0]
        rng = np.random.default_rng(int(seeds["simulation"]) + 1)
        pcoords = rng.uniform(size=(int(config.get("n_p", n)), 2))
        factor = make_factor(Locations(coords), spec, m, int(seeds["ordering"]))
        cfg0 = BackendConfig(backend="iterative", preconditioner="vadu", probe_seed=0)
        state = find_mode(factor, lik, y[factor.perm], np.zeros(n), cfg0)
        blocks = prediction_blocks(factor, pcoords)
        exact = latent_var_exact(state, factor, blocks)
        header = ["suite", "method", "param", "replicate", "rmse", "wall_time"]
        for s in config.get("s_values", [100, 400]):
            for r in range(replicates):
                t0 = time.perf_counter()
                v = latent_var_sim(state, factor, blocks, s=int(s),
                                   seed=int(seeds["probes_base"]) + r, cfg=cfg0)
                rows.append([
                    "predvar", "simulation", s, r,
                    float(np.sqrt(np.mean((v - exact) ** 2))),
                    time.perf_counter() - t0,
                ])
        for variant in ("none", "l1", "l2"):
            for k in config.get("k_values", [10, 25, 50]):
                t0 = time.perf_counter()
                v, _ = latent_var_lanczos(state, factor, blocks, int(k), variant, cfg0)
                rows.append([
                    "predvar", f"lanczos-{variant}", k, 0,
                    float(np.sqrt(np.mean((v - exact) ** 2))),
                    time.perf_counter() - t0,
                ])
    else:  # estimation
        header = [
            "suite", "replicate", "sigma2_hat", "rho_hat", "objective",
            "converged", "wall_time",
        ]
        for r in range(replicates):
            coords, b, y, lik, spec = _bench_data(config, int(seeds["simulation"]) + r)
            cfg = FitConfig(
                m=m,
                ordering_seed=int(seeds["ordering"]) + r,
                backend=BackendConfig(
                    backend="iterative", preconditioner="vadu",
                    probe_seed=int(seeds["probes_base"]) + r,
                ),
            )
            t0 = time.perf_counter()
            res = fit(y, np.ones((coords.shape[0], 1)), Locations(coords), lik, cfg)
            rows.append([
                "estimation", r, res.theta[0], res.theta[1], res.objective,
                int(res.converged), time.perf_counter() - t0,
            ])

    _write_csv(out_path, header, rows)
    return rows


# --------------------------------------------------------------------- main

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="vlgp",
        description="Latent GP models with Vecchia-Laplace approximations",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "fit", "predict", "benchmark"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        if name in ("fit", "predict"):
            p.add_argument("--data", required=True)
        if name == "predict":
            p.add_argument("--model", required=True)
            p.add_argument("--pred", required=True)
    return parser


def _apply_thread_limit(config):
    """Honor the optional "threads" config key / VLGP_THREADS override."""
    import os

    raw = os.environ.get("VLGP_THREADS", config.pop("threads", None))
    if raw is None:
        return
    try:
        n = int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"threads must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("threads must be >= 1")
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:
        pass


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        config = _load_config(args.config)
        if isinstance(config, dict):
            _apply_thread_limit(config)
        if args.command == "simulate":
            cmd_simulate(config, args.out)
        elif args.command == "fit":
            cmd_fit(args.data, config, args.out)
        elif args.command == "predict":
            cmd_predict(args.model, args.data, args.pred, config, args.out)
        else:
            cmd_benchmark(config, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except VlgpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

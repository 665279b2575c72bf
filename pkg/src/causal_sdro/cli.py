"""Command line driver: data generation, training, benchmarks, worst cases, interpretation, portfolio backtests."""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import experiments as ex
from .data import (DataError, Dataset, InventoryGenConfig, NewsvendorGenConfig, PortfolioGenConfig,
                   generate_inventory, generate_newsvendor, generate_portfolio, group_conditionals, load_csv,
                   train_test_split)
from .interpret import eig, global_importance, permutation_importance, route_csv_rows, trace_routes
from .io import atomic_write_text, fmt, write_csv
from .kernels import SinkhornConfig
from .losses import Inventory, Newsvendor, Portfolio, pt_weights
from .optimizer import TrainConfig, TrainingError, train_causal_sdro, train_gd, train_sdro
from .policies import SoftRegressionForest, init_policy, load_policy, save_policy
from .worstcase import causal_wc_density, hard_dual_solve, kl_wc_weights, sdro_wc_density


class ConfigError(ValueError):
    pass


# Every accepted key with its default; the default's type fixes the parse.
SCHEMA: dict[str, dict[str, object]] = {
    "experiment": {"application": "newsvendor", "model": "causal-sdro", "policy": "srf", "seed": 0},
    "data": {"source": "generator", "path": "", "N": 200, "d_x": 5, "features": "", "outcomes": "",
             "c_amp": 1.7, "n_assets": 10, "test_size": 5000},
    "costs": {"h": 0.6, "b": 1.0, "omega": 5.0},
    "sinkhorn": {"p": 2, "eps": 0.2, "lam": 1.0, "B": 1e3, "n1": "", "n2": 16, "n3": 16},
    "train": {"K": 10000, "c_alpha": 1.0, "c_beta": 1.0, "radius": 1e3, "cadence": 500, "tracker_scope": "size",
              "record_timing": False, "gd_steps": 3000, "gd_rate": 5.0, "batch_size": ""},
    "policy": {"n_trees": 20, "depth": "", "width": "", "tau": 1.0},
    "benchmark": {"N": "200", "d_x": "5", "p": "2", "lambda": "1.0", "eps": "0.2", "models": "causal-sdro",
                  "seeds": "0", "selection": "holdout", "val_frac": 0.25, "K": 6000, "c_alpha": 80.0,
                  "c_beta": 30.0, "tracker_scope": "group", "n2": 8, "n3": 8, "erm_steps": 3000,
                  "erm_rate": 5.0, "kl_steps": 3000, "kl_rate": 5.0},
    "worstcase": {"model": "causal-sdro", "policy_file": "", "data_file": "", "lam": 1.0, "x_min": "",
                  "x_max": "", "y_min": "", "y_max": "", "gx": 200, "gy": 200, "rho": "", "lam_lo": 0.1,
                  "lam_hi": 10.0, "n_curve": 20},
    "interpret": {"policy_file": "", "data_file": "", "row": 0, "M": 64, "top_k": 3, "repeats": 1},
    "portfolio": {"path": "", "N": 1200, "n_assets": 20, "d_x": 3, "window": 504, "hold": 60, "step": 21,
                  "sample_assets": 10, "models": "ew,mv,cmv,causal-sdro,pt", "max_rebalances": ""},
}

APPLICATIONS = ("newsvendor", "inventory", "portfolio")


def _parse_value(section, key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def load_config(path=None, text: str | None = None) -> dict:
    """Read an INI file into a fully populated nested dict; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        parser.read(p)
    elif text is not None:
        parser.read_string(text)
    cfg = {sec: dict(keys) for sec, keys in SCHEMA.items()}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, val in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            cfg[sec][key] = _parse_value(sec, key, val, SCHEMA[sec][key])
    return cfg


def config_hash(cfg: dict, command: str) -> str:
    blob = json.dumps({"command": command, "config": cfg}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance(cfg: dict, command: str) -> str:
    return f"seed={cfg['experiment']['seed']}, config-hash={config_hash(cfg, command)}"


def _floats(text) -> list[float]:
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


def _names(text) -> list[str]:
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _opt(v, kind=int):
    return None if v == "" else kind(v)


# ---------------------------------------------------------------- builders


def make_app(cfg: dict, d_y: int | None = None):
    name = cfg["experiment"]["application"]
    if name == "newsvendor":
        return Newsvendor(cfg["costs"]["h"], cfg["costs"]["b"])
    if name == "inventory":
        return Inventory()
    if name == "portfolio":
        return Portfolio(d_y or cfg["portfolio"]["n_assets"], cfg["costs"]["omega"])
    raise ConfigError(f"unknown application {name!r}; choose from {', '.join(APPLICATIONS)}")


def generate(cfg: dict, n: int | None = None, d_x: int | None = None, seed: int | None = None) -> Dataset:
    d, app = cfg["data"], cfg["experiment"]["application"]
    n = d["N"] if n is None else n
    d_x = d["d_x"] if d_x is None else d_x
    seed = cfg["experiment"]["seed"] if seed is None else seed
    if app == "newsvendor":
        return generate_newsvendor(NewsvendorGenConfig(n, d_x, d["c_amp"], cfg["costs"]["h"], cfg["costs"]["b"], seed))
    if app == "inventory":
        return generate_inventory(InventoryGenConfig(n, d_x, seed))
    if app == "portfolio":
        return generate_portfolio(PortfolioGenConfig(n, d_x, d["n_assets"], seed))
    raise ConfigError(f"unknown application {app!r}")


def dataset_columns(ds: Dataset):
    return [f"x{j}" for j in range(ds.d_x)], [f"y{k}" for k in range(ds.d_y)]


def _auto_columns(path):
    with open(path) as fh:
        for line in fh:
            if not line.lstrip().startswith("#"):
                header = [h.strip() for h in line.strip().split(",")]
                break
        else:
            raise DataError(f"{path}: no header row")
    feats = [h for h in header if h.startswith("x")]
    outs = [h for h in header if h.startswith("y")]
    return feats, outs


def read_dataset(path, features: str = "", outcomes: str = "") -> Dataset:
    if not Path(path).exists():
        raise DataError(f"dataset not found: {path}")
    feats, outs = _auto_columns(path)
    feats = _names(features) or feats
    outs = _names(outcomes) or outs
    if not feats or not outs:
        raise DataError(f"{path}: cannot infer feature/outcome columns; set data.features and data.outcomes")
    return load_csv(path, feats, outs)


def load_training_data(cfg: dict) -> Dataset:
    d = cfg["data"]
    if d["source"] == "csv":
        if not d["path"]:
            raise ConfigError("[data] source=csv needs a path")
        return read_dataset(d["path"], d["features"], d["outcomes"])
    if d["source"] != "generator":
        raise ConfigError(f"[data] source must be 'generator' or 'csv', got {d['source']!r}")
    return generate(cfg)


def make_policy(cfg: dict, d_x: int, d_z: int, leaf_value, seed: int):
    pc = cfg["policy"]
    rng = np.random.default_rng([seed, 7])
    kind = cfg["experiment"]["policy"]
    if kind not in ("srf", "nn2"):
        raise ConfigError(f"unknown policy {kind!r}")
    return init_policy(kind, d_x, d_z, rng, leaf_value=leaf_value, n_trees=pc["n_trees"],
                       depth=_opt(pc["depth"]), width=_opt(pc["width"]), tau=pc["tau"])


def sinkhorn_config(cfg: dict) -> SinkhornConfig:
    s = cfg["sinkhorn"]
    return SinkhornConfig(s["p"], s["eps"], s["lam"], s["B"], _opt(s["n1"]), s["n2"], s["n3"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(t["K"], t["c_alpha"], t["c_beta"], t["radius"], False, t["cadence"],
                       cfg["experiment"]["seed"], t["record_timing"], t["tracker_scope"])


def bench_settings(cfg: dict) -> ex.BenchSettings:
    b, pc = cfg["benchmark"], cfg["policy"]
    return ex.BenchSettings(policy=cfg["experiment"]["policy"], n_trees=pc["n_trees"],
                            depth=_opt(pc["depth"]) if pc["depth"] != "" else 4, width=_opt(pc["width"]),
                            tau=pc["tau"], erm_steps=b["erm_steps"], erm_rate=b["erm_rate"],
                            kl_steps=b["kl_steps"], kl_rate=b["kl_rate"], K=b["K"], c_alpha=b["c_alpha"],
                            c_beta=b["c_beta"], tracker_scope=b["tracker_scope"], n2=b["n2"], n3=b["n3"],
                            val_frac=b["val_frac"])


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: dict, out: Path) -> list[Path]:
    ds = generate(cfg)
    xs, ys = dataset_columns(ds)
    rows = [list(x) + list(y) for x, y in zip(ds.X, ds.Y)]
    path = out / "data.csv"
    write_csv(path, xs + ys, rows, comments=[provenance(cfg, "generate")])
    side = {"seed": cfg["experiment"]["seed"], "application": cfg["experiment"]["application"],
            "generator": cfg["data"], "costs": cfg["costs"], "config_hash": config_hash(cfg, "generate")}
    atomic_write_text(out / "data.provenance.json", json.dumps(side, indent=2, sort_keys=True) + "\n")
    return [path, out / "data.provenance.json"]


def cmd_train(cfg: dict, out: Path) -> list[Path]:
    ds = load_training_data(cfg)
    app = make_app(cfg, ds.d_y)
    seed = cfg["experiment"]["seed"]
    policy = make_policy(cfg, ds.d_x, app.d_z, ds.Y.mean(axis=0) if app.d_z == ds.d_y else None, seed)
    model = cfg["experiment"]["model"]
    t = cfg["train"]
    nonneg = bool(getattr(app, "nonneg_decisions", False))
    try:
        if model in ("erm", "kl-dro"):
            res = train_gd("erm" if model == "erm" else "kl", policy, app, ds, t["gd_steps"], t["gd_rate"],
                           lam=cfg["sinkhorn"]["lam"] if model == "kl-dro" else None,
                           batch_size=_opt(t["batch_size"]), seed=seed, radius=t["radius"],
                           nonneg_leaves=nonneg, cadence=t["cadence"])
        elif model in ("causal-sdro", "sdro"):
            tcfg = TrainConfig(t["K"], t["c_alpha"], t["c_beta"], t["radius"], nonneg, t["cadence"], seed,
                               t["record_timing"], t["tracker_scope"])
            trainer = train_causal_sdro if model == "causal-sdro" else train_sdro
            data = group_conditionals(ds) if model == "causal-sdro" else ds
            res = trainer(data, policy, app, sinkhorn_config(cfg), tcfg)
        else:
            raise ConfigError(f"unknown model {model!r}")
    except TrainingError as e:
        raise TrainingError(f"training {model} on {ds.n} rows failed: {e}") from e
    save_policy(res.policy, out / "policy.txt")
    rows = [(r.iter, r.objective, r.grad_norm_est, "" if r.wallclock_ms is None else r.wallclock_ms)
            for r in res.trace]
    write_csv(out / "trace.csv", ["iter", "objective", "grad_norm_est", "wallclock_ms"], rows,
              comments=[provenance(cfg, "train")])
    return [out / "policy.txt", out / "trace.csv"]


BENCH_HEADER = ["N", "d_x", "p", "lambda", "eps", "model", "policy", "seed", "test_loss", "prescriptiveness",
                "oracle_loss", "status"]


@dataclass(frozen=True)
class BenchTask:
    cfg_json: str
    N: int
    d_x: int
    p: int
    seed: int


def _bench_task(task: BenchTask) -> list[list]:
    cfg = json.loads(task.cfg_json)
    b = cfg["benchmark"]
    models = _names(b["models"])
    settings = bench_settings(cfg)
    try:
        full = generate(cfg, n=task.N + cfg["data"]["test_size"], d_x=task.d_x, seed=task.seed)
        train, test = train_test_split(full, task.N)
        app = make_app(cfg, full.d_y)
        rows = ex.run_seed(app, train, test, models, settings, task.seed, task.p, _floats(b["lambda"]),
                           _floats(b["eps"]), select=b["selection"] == "holdout")
    except (TrainingError, FloatingPointError, ValueError, ArithmeticError) as e:
        msg = f"error: {type(e).__name__}: {e}".replace(",", ";").replace("\n", " ")
        return [[task.N, task.d_x, task.p, "", "", m, cfg["experiment"]["policy"], task.seed, "nan", "nan", "nan",
                 msg] for m in ["erm"] + [m for m in models if m != "erm"]]
    out = []
    for r in rows:
        status = "ok" if np.isfinite(r.test_loss) else "error: training failed"
        out.append([r.N, r.d_x, r.p, "" if r.lam is None else r.lam, "" if r.eps is None else r.eps, r.model,
                    r.policy, r.seed, r.test_loss, r.prescriptiveness, r.oracle_loss, status])
    return out


def benchmark_tasks(cfg: dict, seeds) -> list[BenchTask]:
    b = cfg["benchmark"]
    if b["selection"] not in ("holdout", "all"):
        raise ConfigError("[benchmark] selection must be 'holdout' or 'all'")
    for m in _names(b["models"]):
        if m not in ex.MODELS:
            raise ConfigError(f"[benchmark] unknown model {m!r}")
    blob = json.dumps(cfg, sort_keys=True)
    tasks = [BenchTask(blob, n, d, p, s) for n in _ints(b["N"]) for d in _ints(b["d_x"]) for p in _ints(b["p"])
             for s in seeds]
    if not tasks:
        raise ConfigError("[benchmark] grid is empty")
    return tasks


def cmd_benchmark(cfg: dict, out: Path, workers: int = 1, seeds=None) -> list[Path]:
    seeds = _ints(cfg["benchmark"]["seeds"]) if seeds is None else seeds
    tasks = benchmark_tasks(cfg, seeds)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_bench_task, tasks))
    else:
        results = [_bench_task(t) for t in tasks]
    rows = [r for res in results for r in res]
    path = out / "benchmark.csv"
    write_csv(path, BENCH_HEADER, rows, comments=[provenance(cfg, "benchmark")], footer=summary_lines(rows))
    return [path]


def summary_lines(rows) -> list[str]:
    """Median, mean and interquartile range of prescriptiveness per model."""
    lines = []
    by_model: dict[str, list[float]] = {}
    for r in rows:
        try:
            v = float(r[9])
        except (TypeError, ValueError):
            continue
        if r[5] != "erm" and math.isfinite(v):
            by_model.setdefault(r[5], []).append(v)
    for m, vals in by_model.items():
        a = np.array(vals)
        q1, med, q3 = np.percentile(a, [25, 50, 75])
        lines.append(f"summary model={m} n={a.size} mean={fmt(float(a.mean()))} median={fmt(float(med))} "
                     f"iqr={fmt(float(q3 - q1))} positive={int((a > 0).sum())}")
    return lines


def _grid_bounds(cfg, ds, scfg):
    w = cfg["worstcase"]
    sd = 6.0 * (math.sqrt(scfg.eps / 2.0) if scfg.p == 2 else math.sqrt(2.0) * scfg.eps)
    lo_x = float(w["x_min"]) if w["x_min"] != "" else float(ds.X.min()) - sd
    hi_x = float(w["x_max"]) if w["x_max"] != "" else float(ds.X.max()) + sd
    lo_y = float(w["y_min"]) if w["y_min"] != "" else float(ds.Y.min()) - sd
    hi_y = float(w["y_max"]) if w["y_max"] != "" else float(ds.Y.max()) + sd
    return np.linspace(lo_x, hi_x, w["gx"]), np.linspace(lo_y, hi_y, w["gy"])


def _load_policy_file(path):
    if not path:
        raise ConfigError("a policy_file is required")
    if not Path(path).exists():
        raise DataError(f"policy file not found: {path}")
    return load_policy(path)


def _data_for(cfg, section):
    path = cfg[section]["data_file"]
    if path:
        return read_dataset(path, cfg["data"]["features"], cfg["data"]["outcomes"])
    return load_training_data(cfg)


def cmd_worstcase(cfg: dict, out: Path) -> list[Path]:
    w = cfg["worstcase"]
    policy = _load_policy_file(w["policy_file"])
    ds = _data_for(cfg, "worstcase")
    app = make_app(cfg, ds.d_y)
    scfg = sinkhorn_config(cfg)
    prov = provenance(cfg, "worstcase")
    paths = []
    if w["model"] == "kl-dro":
        weights = kl_wc_weights(w["lam"], policy, app, ds)
        rows = [list(x) + list(y) + [wt] for x, y, wt in zip(ds.X, ds.Y, weights)]
        xs, ys = dataset_columns(ds)
        write_csv(out / "kl_weights.csv", xs + ys + ["weight"], rows, comments=[prov])
        paths.append(out / "kl_weights.csv")
    elif w["model"] in ("causal-sdro", "sdro"):
        grid = _grid_bounds(cfg, ds, scfg)
        if w["model"] == "causal-sdro":
            res = causal_wc_density(w["lam"], policy, app, group_conditionals(ds), grid, scfg)
        else:
            res = sdro_wc_density(w["lam"], policy, app, ds, grid, scfg)
        write_csv(out / "density.csv", ["x", "y", "density"], list(res.rows()), comments=[prov],
                  footer=[f"integral={fmt(res.integral())}"])
        paths.append(out / "density.csv")
    else:
        raise ConfigError(f"[worstcase] unknown model {w['model']!r}")
    if w["rho"] != "":
        rng = np.random.default_rng([cfg["experiment"]["seed"], 3])
        dual = hard_dual_solve(policy, app, group_conditionals(ds), float(w["rho"]), scfg,
                               (w["lam_lo"], w["lam_hi"]), rng, n_curve=w["n_curve"])
        footer = [f"lambda_star={fmt(dual.lam)}", f"dual_value={fmt(dual.value)}",
                  f"at_bound={str(dual.at_bound).lower()}", f"convex={str(dual.curve.convex).lower()}"]
        footer += dual.curve.notes
        write_csv(out / "dual_curve.csv", ["lambda", "value"], list(zip(dual.curve.lambdas, dual.curve.values)),
                  comments=[prov], footer=footer)
        paths.append(out / "dual_curve.csv")
    return paths


def cmd_interpret(cfg: dict, out: Path) -> list[Path]:
    it = cfg["interpret"]
    policy = _load_policy_file(it["policy_file"])
    ds = _data_for(cfg, "interpret")
    if ds.d_x != policy.d_x:
        raise DataError(f"dataset has {ds.d_x} features but the policy expects {policy.d_x}")
    if not 0 <= it["row"] < ds.n:
        raise ConfigError(f"[interpret] row {it['row']} out of range")
    prov = provenance(cfg, "interpret")
    names = dataset_columns(ds)[0]
    x = ds.X[it["row"]]
    paths = []
    rng = np.random.default_rng([cfg["experiment"]["seed"], 5])
    for rep in (global_importance(policy, ds), permutation_importance(policy, ds, rng, it["repeats"])):
        p = out / f"importance_{rep.method}.csv"
        write_csv(p, ["feature", "score", "normalized"], rep.csv_rows(names), comments=[prov],
                  footer=[f"degenerate={str(rep.degenerate).lower()}"])
        paths.append(p)
    att = eig(policy, x, ds, it["M"])
    footer = [f"baseline={' '.join(fmt(float(v)) for v in att.baseline)}",
              f"prescription={' '.join(fmt(float(v)) for v in att.prescription)}",
              f"residual={' '.join(fmt(float(v)) for v in att.residual())}"]
    write_csv(out / "eig.csv", ["feature", "contribution"], att.csv_rows(names), comments=[prov], footer=footer)
    paths.append(out / "eig.csv")
    if isinstance(policy, SoftRegressionForest):
        trace = trace_routes(policy, x, it["top_k"])
        write_csv(out / "routes.csv", ["tree", "rank", "leaf", "prob", "path"], route_csv_rows(trace),
                  comments=[prov])
        H = policy.hessian_x(x, 0)
        rows = [(names[i], names[j], H[i, j]) for i in range(ds.d_x) for j in range(ds.d_x)]
        write_csv(out / "hessian.csv", ["feature_i", "feature_j", "value"], rows, comments=[prov])
        paths += [out / "routes.csv", out / "hessian.csv"]
    return paths


# ---------------------------------------------------------------- portfolio


def portfolio_metrics(returns: np.ndarray, losses: np.ndarray) -> dict:
    """Mean, standard deviation, annualised Sharpe, CVaR at 5% (on negated returns) and mean loss."""
    r = np.asarray(returns, float)
    mean = float(r.mean())
    std = float(r.std(ddof=1)) if r.size > 1 and np.ptp(r) > 0 else 0.0
    sharpe = math.sqrt(252.0) * mean / std if std > 0 else math.nan
    tail = math.ceil(0.05 * r.size)
    cvar = float(np.sort(-r)[::-1][:tail].mean())
    return {"mean": mean, "std": std, "sharpe": sharpe, "sharpe_flag": "zero-std" if std == 0 else "",
            "cvar5": cvar, "loss": float(np.mean(losses))}


def load_portfolio_data(cfg: dict) -> Dataset:
    pf = cfg["portfolio"]
    if pf["path"]:
        feats = _names(cfg["data"]["features"])
        outs = _names(cfg["data"]["outcomes"])
        if not feats or not outs:
            feats, outs = _auto_columns(pf["path"])
        if not feats or not outs:
            raise DataError("portfolio CSV needs data.features and data.outcomes (or x*/y* column names)")
        return load_csv(pf["path"], feats, outs)
    return generate_portfolio(PortfolioGenConfig(pf["N"], pf["d_x"], pf["n_assets"], cfg["experiment"]["seed"]))


PORTFOLIO_HEADER = ["rebalance", "start_row", "model", "mean", "std", "sharpe", "sharpe_flag", "cvar5", "loss"]


def cmd_portfolio(cfg: dict, out: Path) -> list[Path]:
    pf = cfg["portfolio"]
    ds = load_portfolio_data(cfg)
    window, hold, step = pf["window"], pf["hold"], pf["step"]
    if min(window, hold, step) < 1:
        raise ConfigError("[portfolio] window, hold and step must be positive")
    models = _names(pf["models"])
    for m in models:
        if m not in ("ew", "mv", "cmv", "causal-sdro", "pt"):
            raise ConfigError(f"[portfolio] unknown model {m!r}")
    seed = cfg["experiment"]["seed"]
    rng = np.random.default_rng([seed, 13])
    omega = cfg["costs"]["omega"]
    starts = list(range(window, ds.n - hold + 1, step))
    if pf["max_rebalances"] != "":
        starts = starts[:int(pf["max_rebalances"])]
    if not starts:
        warnings.warn(f"series of {ds.n} rows is shorter than window + hold; nothing to backtest", RuntimeWarning)
    rows = []
    t = cfg["train"]
    for k, s0 in enumerate(starts):
        n_pick = min(pf["sample_assets"], ds.d_y)
        assets = np.sort(rng.choice(ds.d_y, size=n_pick, replace=False))
        train = Dataset(ds.X[s0 - window:s0], ds.Y[s0 - window:s0][:, assets])
        Yh = ds.Y[s0:s0 + hold][:, assets]
        x_now = ds.X[s0]
        app = Portfolio(n_pick, omega)
        for m in models:
            if m == "ew":
                w_eq = np.full(n_pick, 1.0 / n_pick)
                z = np.concatenate([[float((train.Y @ w_eq).mean())], w_eq])
            elif m == "mv":
                z = pt_weights(train.Y, omega)[0]
            elif m == "pt":
                z = pt_weights(Yh, omega)[0]
            else:
                pol = make_policy(cfg, ds.d_x, app.d_z, None, seed + k)
                try:
                    if m == "cmv":
                        train_gd("erm", pol, app, train, t["gd_steps"], t["gd_rate"],
                                 batch_size=_opt(t["batch_size"]), seed=seed + k, radius=t["radius"])
                    else:
                        tcfg = TrainConfig(t["K"], t["c_alpha"], t["c_beta"], t["radius"], False, t["K"],
                                           seed + k, False, t["tracker_scope"])
                        train_causal_sdro(group_conditionals(train), pol, app, sinkhorn_config(cfg), tcfg)
                except TrainingError as e:
                    warnings.warn(f"rebalance {k}: {m} failed ({e}); skipped", RuntimeWarning)
                    continue
                z = app.decision(pol.forward(x_now))
            ret = Yh @ z[1:]
            met = portfolio_metrics(ret, app.loss(np.broadcast_to(z, (hold, z.size)), Yh))
            rows.append([k, s0, m, met["mean"], met["std"], met["sharpe"], met["sharpe_flag"], met["cvar5"],
                         met["loss"]])
    path = out / "portfolio.csv"
    write_csv(path, PORTFOLIO_HEADER, rows, comments=[provenance(cfg, "portfolio")])
    return [path]


# ---------------------------------------------------------------- entry point

COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "benchmark": cmd_benchmark,
    "worstcase": cmd_worstcase,
    "interpret": cmd_interpret,
    "portfolio": cmd_portfolio,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="causal-sdro", description=__doc__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="INI configuration file")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--workers", type=int, default=1, help="parallel benchmark tasks")
    ap.add_argument("--seed", type=int, help="override the experiment seed")
    return ap


def validate(cfg: dict) -> None:
    """Build every typed config once so that bad values fail before any work or output."""
    if cfg["experiment"]["application"] not in APPLICATIONS:
        raise ConfigError(f"unknown application {cfg['experiment']['application']!r}")
    if cfg["experiment"]["model"] not in ex.MODELS:
        raise ConfigError(f"unknown model {cfg['experiment']['model']!r}")
    try:
        sinkhorn_config(cfg)
        train_config(cfg)
        bench_settings(cfg)
        for key in ("N", "d_x", "p"):
            _ints(cfg["benchmark"][key])
        _floats(cfg["benchmark"]["lambda"])
        _floats(cfg["benchmark"]["eps"])
        _ints(cfg["benchmark"]["seeds"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg["data"]["N"] < 1 or cfg["data"]["d_x"] < 1:
        raise ConfigError("[data] N and d_x must be positive")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seeds = None
        if args.seed is not None:
            cfg["experiment"]["seed"] = args.seed
            seeds = [args.seed]
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        validate(cfg)
        out = Path(args.out)
        if args.command == "benchmark":
            paths = cmd_benchmark(cfg, out, args.workers, seeds)
        else:
            paths = COMMANDS[args.command](cfg, out)
    except (ConfigError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, FloatingPointError, ArithmeticError, RuntimeError, ValueError, OSError) as e:
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    for p in paths:
        print(p)
    return 0


def main() -> None:
    sys.exit(run())

"""``cffair`` command-line driver.

Every command takes the same JSON run configuration (``--config``) plus
``--set dotted.key=value`` overrides, and writes into ``output_dir`` with one
``seed_<k>`` directory per seed. Each JSON output carries ``config_hash``
and each CSV starts with a ``# config_hash=...`` line.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import torch

from .causal_vae import CausalModel, reconstruction_losses, train_step1
from .config import RunConfig
from .data import BINARY, CsvSchema, Dataset, gen_synthetic_binary, gen_synthetic_continuous, load_csv, split_80_20, write_csv
from .errors import CapabilityError, CfFairError, ConfigError, DataError, NonFiniteError, SchemaError, UnsupportedVariantError
from .metrics import cf_metric, default_count, evaluate, predictive_metric
from .numerics import Rng
from .predictor import DynSampler, Predictor, delta_for, dyn_sampler_draw, predict, sampler_best_response, train_step2

log = logging.getLogger("cffair")

EXIT_OK, EXIT_CONFIG, EXIT_UNSUPPORTED, EXIT_NUMERIC = 0, 2, 3, 4
PLOT_KINDS = ("scatter_cf", "lambda_curve", "dyn_sampling")


# -- file helpers ---------------------------------------------------------------------


def _seed_dir(cfg: RunConfig, seed: int) -> Path:
    d = Path(cfg.output_dir) / f"seed_{seed}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path: Path, doc: dict, cfg: RunConfig) -> None:
    doc = {"config_hash": cfg.config_hash(), **doc}
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"missing input {path}; run the earlier pipeline step first") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _write_csv(path: Path, header: list[str], rows, cfg: RunConfig) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.config_hash()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_history(path: Path, history: list[dict], cfg: RunConfig) -> None:
    keys = ["epoch"] + sorted({k for row in history for k in row} - {"epoch"})
    _write_csv(path, keys, ([row.get(k, "") for k in keys] for row in history), cfg)


# -- pipeline pieces ------------------------------------------------------------------


def load_dataset(cfg: RunConfig, seed: int) -> Dataset:
    spec = cfg.dataset
    if spec.kind == "synthetic_continuous":
        return gen_synthetic_continuous(spec.n, seed)
    if spec.kind == "synthetic_binary":
        return gen_synthetic_binary(spec.n, seed)
    try:
        schema = CsvSchema.load(spec.schema_path)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot read CSV schema {spec.schema_path}: {exc}") from exc
    try:
        return load_csv(spec.path, schema)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {spec.path}: {exc}") from exc


def _splits(cfg: RunConfig, seed: int):
    return split_80_20(load_dataset(cfg, seed), seed)


def _step1_cfg(cfg: RunConfig, seed: int):
    return dataclasses.replace(cfg.step1, seed=seed)


def _step2_cfg(cfg: RunConfig, seed: int, **kw):
    return dataclasses.replace(cfg.step2, seed=seed, **kw)


def _load_inference(cfg: RunConfig, seed: int) -> CausalModel:
    doc = _read_json(_seed_dir(cfg, seed) / "inference.json")
    return CausalModel.from_dict(doc["model"])


def _load_predictor(cfg: RunConfig, seed: int):
    doc = _read_json(_seed_dir(cfg, seed) / "predictor.json")
    sampler = DynSampler.from_dict(doc["sampler"]) if doc.get("sampler") else None
    return Predictor.from_dict(doc["predictor"]), sampler


def _evaluate(cfg: RunConfig, seed: int, p: Predictor, cm: CausalModel, test: Dataset):
    return evaluate(p, cm, test, count=cfg.eval.count_per_individual, seed=seed,
                    hgr_cfg=cfg.eval.hgr_config, factual=cfg.eval.factual)


@contextlib.contextmanager
def _seed_context(seed: int):
    """Prefix training failures with the seed that raised them."""
    try:
        yield
    except NonFiniteError as exc:
        raise NonFiniteError(f"seed {seed}: {exc}") from exc
    except CfFairError as exc:
        raise type(exc)(f"seed {seed}: {exc}") from exc


# -- per-seed workers (top level so they can run in worker processes) ---------------


def _gen_data_one(cfg: RunConfig, seed: int) -> str:
    ds = load_dataset(cfg, seed)
    path = _seed_dir(cfg, seed) / "data.csv"
    try:
        write_csv(ds, path, header_comment=f"config_hash={cfg.config_hash()}")
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc
    return str(path)


def _train_inference_one(cfg: RunConfig, seed: int) -> str:
    train, test = _splits(cfg, seed)
    with _seed_context(seed):
        cm, history = train_step1(train, _step1_cfg(cfg, seed), cfg.scheme, cfg.variant)
    out = _seed_dir(cfg, seed)
    _write_json(out / "inference.json", {"seed": seed, "model": cm.to_dict(),
                                         "test_reconstruction": reconstruction_losses(cm, test)}, cfg)
    _write_history(out / "inference_history.csv", history, cfg)
    return str(out / "inference.json")


def _train_predictor_one(cfg: RunConfig, seed: int) -> str:
    train, _ = _splits(cfg, seed)
    cm = _load_inference(cfg, seed)
    with _seed_context(seed):
        p, sampler, history = train_step2(train, cm, _step2_cfg(cfg, seed))
    out = _seed_dir(cfg, seed)
    _write_json(out / "predictor.json", {"seed": seed, "predictor": p.to_dict(),
                                         "sampler": sampler.to_dict() if sampler else None}, cfg)
    _write_history(out / "predictor_history.csv", history, cfg)
    return str(out / "predictor.json")


def _evaluate_one(cfg: RunConfig, seed: int) -> dict:
    _, test = _splits(cfg, seed)
    cm = _load_inference(cfg, seed)
    p, _ = _load_predictor(cfg, seed)
    rep = _evaluate(cfg, seed, p, cm, test)
    out = _seed_dir(cfg, seed)
    _write_json(out / "eval.json", {"seed": seed, **rep.to_dict()}, cfg)
    header = ["index", "cf"] + (["real_cf"] if rep.real_cf is not None else [])
    cols = [test.index, rep.cf_per_individual] + ([rep.real_cf_per_individual] if rep.real_cf is not None else [])
    _write_csv(out / "eval_individuals.csv", header, zip(*cols), cfg)
    return {"seed": seed, **rep.to_dict()}


def _sweep_one(cfg: RunConfig, seed: int) -> list[tuple]:
    """One Step-1 model per seed, then one predictor per lambda."""
    train, test = _splits(cfg, seed)
    cm, _ = train_step1(train, _step1_cfg(cfg, seed), cfg.scheme, cfg.variant)
    count = cfg.eval.count_per_individual or default_count(test)
    rows = []
    for lam in cfg.lambda_grid:
        p, _, _ = train_step2(train, cm, _step2_cfg(cfg, seed, lam=lam))
        cf = cf_metric(p, cm, test, count, Rng(seed).spawn(1), factual=cfg.eval.factual).value
        rows.append((lam, seed, predictive_metric(p, test), cf))
    return rows


def _map_seeds(fn, cfg: RunConfig, jobs: int):
    if jobs <= 1 or len(cfg.seeds) == 1:
        return [fn(cfg, s) for s in cfg.seeds]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, [cfg] * len(cfg.seeds), cfg.seeds))


# -- commands -------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> dict:
    return {"files": _map_seeds(_gen_data_one, cfg, args.jobs)}


def cmd_train_inference(cfg: RunConfig, args) -> dict:
    return {"checkpoints": _map_seeds(_train_inference_one, cfg, args.jobs)}


def cmd_train_predictor(cfg: RunConfig, args) -> dict:
    return {"checkpoints": _map_seeds(_train_predictor_one, cfg, args.jobs)}


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    reports = _map_seeds(_evaluate_one, cfg, args.jobs)
    summary = {}
    for key in ("cf", "real_cf", "accuracy", "mse", "hgr_u_a", "dp_gap"):
        vals = [r[key] for r in reports if key in r]
        if vals:
            summary[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    out = Path(cfg.output_dir)
    _write_json(out / "eval_summary.json", {"seeds": list(cfg.seeds), "summary": summary}, cfg)
    return {"summary": summary}


def _metric_name(cfg: RunConfig) -> str:
    return "accuracy" if load_dataset(cfg, cfg.seeds[0]).schema.y_kind == BINARY else "mse"


def cmd_sweep_lambda(cfg: RunConfig, args) -> dict:
    rows = sorted(r for chunk in _map_seeds(_sweep_one, cfg, args.jobs) for r in chunk)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metric = _metric_name(cfg)
    _write_csv(out / "sweep_runs.csv", ["lambda", "seed", metric, "cf"], rows, cfg)
    table = []
    for lam in cfg.lambda_grid:
        sel = np.array([(m, c) for l, _, m, c in rows if l == lam])
        table.append((lam, len(sel), sel[:, 0].mean(), sel[:, 0].std(), sel[:, 1].mean(), sel[:, 1].std()))
    _write_csv(out / "sweep_lambda.csv",
               ["lambda", "runs", f"{metric}_mean", f"{metric}_std", "cf_mean", "cf_std"], table, cfg)
    return {"rows": len(table), "runs": len(rows), "file": str(out / "sweep_lambda.csv")}


def _continuous_only(test: Dataset, what: str):
    if test.schema.a_kind == BINARY:
        raise UnsupportedVariantError(f"{what} needs a continuous sensitive attribute")


def plot_scatter_cf(cfg: RunConfig, seed: int) -> Path:
    """(a', h(x', a')) for 1000 uniform a' plus the factual point of one test individual."""
    _, test = _splits(cfg, seed)
    _continuous_only(test, "scatter_cf")
    i = cfg.plot.individual
    if not 0 <= i < test.n:
        raise ConfigError(f"plot.individual must lie in [0, {test.n}), got {i}")
    cm = _load_inference(cfg, seed)
    p, _ = _load_predictor(cfg, seed)
    x, a, y = (t[i:i + 1] for t in test.tensors())
    rng = Rng(seed).spawn(4)
    k = 1000
    sup = test.a_support
    with torch.no_grad():
        q = cm.encode(x, y, a)
        u = q.mean + torch.exp(0.5 * q.log_variance) * rng.normal(k, cm.latent_dim)
        ap = rng.uniform(k, low=sup.lower, high=sup.upper)
        h_cf = predict(p, cm.decode_x(u, ap).sample(rng.normal(k, cm.schema.p)), ap)
        h_f = predict(p, x, a)
    to_raw_a, to_raw_y = test.scaler.a_inverse, _y_inverse(test)
    rows = [(float(to_raw_a(ap[j].item())), float(to_raw_y(h_cf[j].item())), 0) for j in range(k)]
    rows.append((float(test.a_raw[i]), float(to_raw_y(h_f.item())), 1))
    path = _seed_dir(cfg, seed) / "plot_scatter_cf.csv"
    _write_csv(path, ["a", "prediction", "is_factual"], rows, cfg)
    return path


def _y_inverse(ds: Dataset):
    if ds.schema.y_kind == BINARY:
        return lambda v: v
    return ds.scaler.y_inverse


def plot_dyn_sampling(cfg: RunConfig, seed: int, sampler_source: str) -> Path:
    """Counterfactual error on a uniform a' grid plus sampler draws, for one test individual."""
    train, test = _splits(cfg, seed)
    _continuous_only(test, "dyn_sampling")
    i = cfg.plot.individual
    if not 0 <= i < test.n:
        raise ConfigError(f"plot.individual must lie in [0, {test.n}), got {i}")
    cm = _load_inference(cfg, seed)
    p, run_sampler = _load_predictor(cfg, seed)
    s2 = _step2_cfg(cfg, seed, shared_noise=True)
    if sampler_source == "run":
        if run_sampler is None:
            raise CapabilityError("the predictor checkpoint has no dynamic sampler (mitigation is not DynCF)")
        sampler = run_sampler
    else:
        sampler = sampler_best_response(p, cm, train, s2, steps=cfg.plot.sampler_steps, seed=seed)
    x, a, y = (t[i:i + 1] for t in test.tensors())
    rng = Rng(seed).spawn(5)
    sup = test.a_support
    delta = delta_for(p)
    g, m = cfg.plot.grid_points, cfg.plot.sampler_draws
    with torch.no_grad():
        q = cm.encode(x, y, a)
        u = q.mean + torch.exp(0.5 * q.log_variance) * rng.normal(1, cm.latent_dim)
        noise = rng.normal(1, cm.schema.p)  # shared between factual and counterfactual decodes
        h_f = predict(p, cm.decode_x(u, a).sample(noise), a)

        def err(ap):
            n = len(ap)
            x_cf = cm.decode_x(u.expand(n, -1), ap).sample(noise.expand(n, -1))
            return delta(h_f.expand(n), predict(p, x_cf, ap))

        grid = torch.linspace(sup.lower, sup.upper, g, dtype=u.dtype)
        draws = dyn_sampler_draw(sampler, u.expand(m, -1), rng)
        e_grid, e_draw = err(grid), err(draws)
    raw = test.scaler.a_inverse
    rows = [("grid", float(raw(grid[j].item())), float(e_grid[j])) for j in range(g)]
    rows += [("sampler", float(raw(draws[j].item())), float(e_draw[j])) for j in range(m)]
    rows.append(("factual", float(test.a_raw[i]), 0.0))
    path = _seed_dir(cfg, seed) / "plot_dyn_sampling.csv"
    _write_csv(path, ["source", "a", "cf_error"], rows, cfg)
    return path


def plot_lambda_curve(cfg: RunConfig) -> Path:
    """Seed-averaged (lambda, metric, CF) with CF also scaled by its lambda = 0 value."""
    src = Path(cfg.output_dir) / "sweep_lambda.csv"
    try:
        with open(src, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(ln for ln in fh if not ln.startswith("#")))
    except FileNotFoundError:
        raise ConfigError(f"missing {src}; run sweep-lambda first") from None
    if not rows:
        raise DataError(f"{src} has no rows")
    metric = [k for k in rows[0] if k.endswith("_mean") and k != "cf_mean"][0][:-5]
    base = float(rows[0]["cf_mean"]) or 1.0
    out = [(float(r["lambda"]), float(r[f"{metric}_mean"]), float(r[f"{metric}_std"]), float(r["cf_mean"]),
            float(r["cf_std"]), float(r["cf_mean"]) / base) for r in rows]
    path = Path(cfg.output_dir) / "plot_lambda_curve.csv"
    _write_csv(path, ["lambda", f"{metric}_mean", f"{metric}_std", "cf_mean", "cf_std", "cf_relative"], out, cfg)
    return path


def cmd_plot_data(cfg: RunConfig, args) -> dict:
    if args.kind == "lambda_curve":
        return {"file": str(plot_lambda_curve(cfg))}
    seed = cfg.seeds[0]
    if args.kind == "scatter_cf":
        return {"file": str(plot_scatter_cf(cfg, seed))}
    return {"file": str(plot_dyn_sampling(cfg, seed, args.sampler))}


COMMANDS = {
    "gen-data": (cmd_gen_data, "write each seed's dataset as CSV"),
    "train-inference": (cmd_train_inference, "Step 1: fit the causal model per seed"),
    "train-predictor": (cmd_train_predictor, "Step 2: fit the predictor per seed"),
    "evaluate": (cmd_evaluate, "CF, RealCF, accuracy/MSE, HGR and DP gap per seed"),
    "sweep-lambda": (cmd_sweep_lambda, "train and score one predictor per (lambda, seed)"),
    "plot-data": (cmd_plot_data, "emit plot-ready CSVs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cffair", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", type=Path, help="JSON run configuration (defaults apply when omitted)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. step2.lam=2 or seeds=[0,1]")
        sp.add_argument("--out", help="output directory (same as --set output_dir=...)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes across seeds")
        if name == "plot-data":
            sp.add_argument("--kind", choices=PLOT_KINDS, required=True)
            sp.add_argument("--sampler", choices=("best", "run"), default="best",
                            help="dyn_sampling: fit a best-response sampler at the stored predictor, "
                                 "or use the sampler saved with it")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(args.overrides) + ([f"output_dir={args.out}"] if args.out else [])
    return cfg.with_overrides(overrides).with_env()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        _write_json(Path(cfg.output_dir) / f"config_{args.command}.json", {"config": cfg.to_dict()}, cfg)
        log.info("effective config %s: %s", cfg.config_hash(), cfg.canonical_json())
        result = COMMANDS[args.command][0](cfg, args)
    except (ConfigError, SchemaError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnsupportedVariantError, CapabilityError) as exc:
        print(f"unsupported: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps({"command": args.command, "config_hash": cfg.config_hash(), **result}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: generate, train, evaluate, predict, curves.

Every failure is reported on stderr as a single line starting with
``ddr: error:`` followed by an error class tag, and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields

import numpy as np

from . import inference, metrics
from .data import (FAMILIES, DataError, SyntheticSpec, generate, load_csv, load_features,
                   oracle_quantile, standardize, write_csv)
from .network import FixedQuantileNet, ModelFormatError, QuantileNetSet, load_model
from .sampler import DECILES
from .training import TRAIN_MODES, TrainConfig, train

log = logging.getLogger("ddr")

ERROR_PREFIX = "ddr: error:"
ORACLE_SUFFIX = ".oracle.json"
EXIT_USAGE, EXIT_FAILURE = 2, 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def level_name(tau):
    """0.1 -> 'q10', 0.025 -> 'q2.5'."""
    return "q" + format(round(float(tau) * 100, 10), "g")


def parse_floats(text, what):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be a comma-separated list of numbers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{what} is empty")
    return vals


def parse_taus(text):
    taus = parse_floats(text, "--tau")
    bad = [t for t in taus if not 0 < t < 1]
    if bad:
        raise UsageError(f"--tau values must lie strictly inside (0, 1), got {bad}")
    return taus


# ---------------------------------------------------------------------------
# Config layering: flags > config file > dataclass defaults.

TRAIN_FLAGS = {  # flag dest -> TrainConfig field
    "mode": "mode", "epochs": "epochs", "lr": "lr", "batch_size": "batch_size",
    "seed": "seed", "patience": "patience", "val_fraction": "val_fraction",
    "update_ratio": "update_ratio", "injection": "injection", "alpha": "alpha",
    "tau_prior": "tau_prior", "max_steps": "max_steps",
}
RUN_KEYS = ("data", "out", "target", "jobs", "seeds")


def read_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


def train_config(args, file_cfg):
    names = {f.name for f in fields(TrainConfig)}
    base = {k: v for k, v in file_cfg.items() if k in names}
    unknown = set(file_cfg) - names - set(RUN_KEYS)
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    for dest, key in TRAIN_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            base[key] = v
    if args.widths is not None:
        ws = [int(w) for w in parse_floats(args.widths, "--widths")]
        if len(ws) < 2:
            raise UsageError("--widths needs at least one feature and one regression width")
        base["feature_widths"], base["regression_widths"] = ws[:-1], ws[-1:]
    if args.weights is not None:
        try:
            base["loss_weights"] = {**base.get("loss_weights", {}), **json.loads(args.weights)}
        except json.JSONDecodeError as exc:
            raise UsageError(f"--weights must be a JSON object: {exc}") from None
    if args.select_inference:
        base["select_inference"] = True
    return TrainConfig.from_dict(base)


def layered(args, file_cfg, key, default=None):
    v = getattr(args, key, None)
    if v is not None:
        return v
    return file_cfg.get(key, default)


# ---------------------------------------------------------------------------
# Model and data helpers.

def fixed_paths(path):
    return [f"{path}.{level_name(t)}" for t in DECILES]


def load_predictor(path):
    """A saved model, or the nine per-decile files written for ``fcnn``."""
    if os.path.exists(path):
        return load_model(path)
    parts = fixed_paths(path)
    if all(os.path.exists(p) for p in parts):
        return QuantileNetSet([FixedQuantileNet.load(p) for p in parts])
    raise ModelFormatError(f"{path}: no such model file (nor {os.path.basename(parts[0])} ... set)")


def has_cdf(model):
    return hasattr(model, "f_forward")


def feature_matrix(model, path):
    names = model.stats.feature_names
    if not names:
        raise ModelFormatError("model carries no feature names; cannot match CSV columns")
    x_raw, rejected = load_features(path, names)
    if rejected:
        log.warning("%s: rejected %d unparseable row(s)", path, rejected)
    return x_raw


def load_oracle(path):
    with open(path, encoding="utf-8") as fh:
        spec = SyntheticSpec.from_dict(json.load(fh))
    return lambda tau, x: oracle_quantile(spec.family, tau, np.asarray(x).reshape(-1), spec.sigma)


def inference_mode(args, model):
    mode = "dual" if args.dual else (args.infer or "q")
    if mode != "q" and not has_cdf(model):
        raise UsageError(f"inference mode {mode!r} needs a CDF head; this model only predicts quantiles")
    if mode != "q" and not model_has_f_training(model):
        raise UsageError(f"inference mode {mode!r} needs a model trained with a CDF loss (ddr-joint or ddr-disjoint)")
    return mode


def model_has_f_training(model):
    return getattr(model, "trained_mode", None) != "ddr-q"


def write_table(path, header, rows):
    fh = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
    finally:
        if path:
            fh.close()


# ---------------------------------------------------------------------------
# Commands.

def cmd_generate(args):
    if args.family not in FAMILIES:
        raise UsageError(f"unknown family {args.family!r}; choose one of {', '.join(FAMILIES)}")
    spec = SyntheticSpec(args.family, args.n, args.seed if args.seed is not None else 0, args.sigma)
    ds, _ = generate(spec)
    write_csv(args.out, ds.x, ds.y, ds.columns, "y")
    with open(args.out + ORACLE_SUFFIX, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(args.out)
    return 0


def _train_one(data, target, cfg_dict, out):
    cfg = TrainConfig.from_dict(cfg_dict)
    ds = standardize(load_csv(data, target))
    model, report = train(ds, cfg)
    if isinstance(model, QuantileNetSet):
        for net, p in zip(model.nets, fixed_paths(out)):
            net.save(p)
    else:
        model.save(out)
    with open(out + ".log.json", "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    with open(out + ".epochs.csv", "w", encoding="utf-8") as fh:
        fh.write(report.epochs_csv())
    return out


def cmd_train(args):
    file_cfg = read_config(args.config)
    data = layered(args, file_cfg, "data")
    out = layered(args, file_cfg, "out")
    if data is None:
        raise UsageError("train needs --data (or 'data' in the config file)")
    if out is None:
        raise UsageError("train needs --out (or 'out' in the config file)")
    cfg = train_config(args, file_cfg)
    target = layered(args, file_cfg, "target")
    seeds = layered(args, file_cfg, "seeds")
    jobs = int(layered(args, file_cfg, "jobs", 1))
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if seeds is None:
        runs = [(cfg.to_dict(), out)]
    else:
        seed_list = [int(s) for s in (parse_floats(seeds, "--seeds") if isinstance(seeds, str) else seeds)]
        runs = [({**cfg.to_dict(), "seed": s}, f"{out}.seed{s}") for s in seed_list]
    if jobs == 1 or len(runs) == 1:
        done = [_train_one(data, target, c, o) for c, o in runs]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_train_one, [data] * len(runs), [target] * len(runs),
                                 [c for c, _ in runs], [o for _, o in runs]))
    for o in done:
        print(o)
    return 0


def _evaluate_one(path, args):
    model = load_predictor(path)
    mode = inference_mode(args, model)
    ds = load_csv(args.data, args.target)
    x_raw = feature_matrix(model, args.data)
    if x_raw.shape[0] != len(ds):
        raise DataError(f"{args.data}: rows with unusable feature or target cells differ; clean the file first")
    x = model.stats.transform_x(x_raw)
    y = model.stats.transform_y(ds.y)
    oracle_path = args.oracle or (args.data + ORACLE_SUFFIX if os.path.exists(args.data + ORACLE_SUFFIX) else None)
    oracle = load_oracle(oracle_path) if oracle_path else None
    if oracle is not None and x_raw.shape[1] != 1:
        raise DataError("oracle comparison supports one-feature synthetic data only")
    return metrics.evaluate(model, x, y, mode, args.alpha, args.original_units, oracle, x_raw)


def cmd_evaluate(args):
    paths = [p for p in args.model.split(",") if p]
    reports = [_evaluate_one(p, args) for p in paths]
    if len(reports) == 1:
        text = reports[0].to_json()
    else:
        text = json.dumps({"models": paths, "summary": metrics.summarize(reports),
                           "reports": [json.loads(r.to_json()) for r in reports]}, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        with open(os.path.splitext(args.out)[0] + ".csv", "w", encoding="utf-8") as fh:
            fh.write("".join(r.csv_row() if i == 0 else r.csv_row().split("\n", 1)[1]
                             for i, r in enumerate(reports)))
    print(text)
    return 0


def _quantile_columns(model, taus, x, mode, alpha):
    if mode == "q":
        return inference.quantile_curves(model, taus, x, destandardize=True)
    return np.column_stack([inference.quantile(model, t, x, mode, alpha, destandardize=True) for t in taus])


def cmd_predict(args):
    model = load_predictor(args.model)
    mode = inference_mode(args, model)
    x = model.stats.transform_x(feature_matrix(model, args.data))
    header, cols = [], []
    taus = parse_taus(args.tau) if args.tau else (list(DECILES) if not (args.cdf or args.mean) else [])
    if taus:
        header += [level_name(t) for t in taus]
        cols.append(_quantile_columns(model, taus, x, mode, args.alpha))
    if args.cdf:
        if not has_cdf(model):
            raise UsageError("--cdf needs a model with a CDF head")
        for v in parse_floats(args.cdf, "--cdf"):
            header.append(f"cdf_{format(v, 'g')}")
            cols.append(inference.predict_cdf(model, np.full(x.shape[0], v), x, original_units=True).reshape(-1, 1))
    if args.mean:
        if hasattr(model, "taus"):
            raise UsageError("--mean needs an arbitrary-level model; fixed-level baselines cannot integrate Q")
        header.append("mean_trapz")
        cols.append(inference.predict_mean(model, x, args.n, mode, args.alpha, destandardize=True).reshape(-1, 1))
    write_table(args.out, header, np.hstack(cols))
    return 0


def cmd_curves(args):
    model = load_predictor(args.model)
    mode = inference_mode(args, model)
    names = model.stats.feature_names or [f"x{i + 1}" for i in range(model.stats.dim)]
    feat = args.feature or names[0]
    if feat not in names:
        raise UsageError(f"unknown feature {feat!r}; model features: {', '.join(names)}")
    j = names.index(feat)
    if args.grid < 2:
        raise UsageError("--grid must be >= 2")
    mu, sd = model.stats.x_mean[j], model.stats.x_std[j]
    lo = args.xmin if args.xmin is not None else mu - 2.0 * sd
    hi = args.xmax if args.xmax is not None else mu + 2.0 * sd
    x_raw = np.tile(model.stats.x_mean, (args.grid, 1))
    x_raw[:, j] = np.linspace(lo, hi, args.grid)
    taus = parse_taus(args.tau) if args.tau else list(DECILES)
    q = _quantile_columns(model, taus, model.stats.transform_x(x_raw), mode, args.alpha)
    write_table(args.out, [feat] + [level_name(t) for t in taus], np.column_stack([x_raw[:, j], q]))
    return 0


# ---------------------------------------------------------------------------

def _add_inference_flags(p):
    p.add_argument("--model", required=True,
                   help="model file or fcnn prefix; evaluate accepts a comma-separated list of seed replicates")
    p.add_argument("--mode", dest="infer", choices=inference.MODES, default=None,
                   help="q (direct), f (invert the CDF) or dual (blend)")
    p.add_argument("--dual", action="store_true", help="shorthand for --mode dual")
    p.add_argument("--alpha", type=float, default=0.5, help="dual blend weight on Q")


def build_parser():
    ap = _Parser(prog="ddr", description="Distributional regression with paired quantile/CDF networks.")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset and its oracle sidecar")
    g.add_argument("--family", required=True, help=f"one of {', '.join(FAMILIES)}")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--sigma", type=float, default=0.3)
    g.add_argument("--out", default="data.csv")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a CSV")
    t.add_argument("--config", default=None, help="JSON file with TrainConfig fields and run keys")
    t.add_argument("--data", default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--target", default=None, help="target column (default: last column)")
    t.add_argument("--mode", choices=TRAIN_MODES, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--seeds", default=None, help="comma-separated seed replicates")
    t.add_argument("--jobs", type=int, default=None, help="parallel processes for seed replicates")
    t.add_argument("--patience", type=int, default=None)
    t.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    t.add_argument("--update-ratio", dest="update_ratio", type=int, default=None)
    t.add_argument("--widths", default=None, help="e.g. 256,256,256: feature widths then one regression width")
    t.add_argument("--injection", choices=("linear", "mlp"), default=None)
    t.add_argument("--weights", default=None, help='JSON loss-weight overrides, e.g. {"recover_F": 0.5}')
    t.add_argument("--tau-prior", dest="tau_prior", choices=("uniform", "beta"), default=None)
    t.add_argument("--alpha", type=float, default=None)
    t.add_argument("--select-inference", action="store_true",
                   help="pick dual inference when it scores better on validation")
    t.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a model on a labelled CSV")
    _add_inference_flags(e)
    e.add_argument("--data", required=True)
    e.add_argument("--target", default=None)
    e.add_argument("--oracle", default=None, help="oracle sidecar (default: <data>.oracle.json if present)")
    e.add_argument("--original-units", action="store_true")
    e.add_argument("--out", default=None, help="JSON report path; a one-row CSV is written alongside")
    e.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="quantile, CDF or mean predictions for feature rows")
    _add_inference_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--tau", default=None, help="comma-separated levels (default: deciles)")
    p.add_argument("--cdf", default=None, help="comma-separated target values (original units)")
    p.add_argument("--mean", action="store_true", help="add the trapezoid mean column mean_trapz")
    p.add_argument("--n", type=int, default=99, help="interior grid points for --mean")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_predict)

    c = sub.add_parser("curves", help="quantile curves along one feature")
    _add_inference_flags(c)
    c.add_argument("--grid", type=int, default=101)
    c.add_argument("--tau", default=None)
    c.add_argument("--feature", default=None)
    c.add_argument("--xmin", type=float, default=None)
    c.add_argument("--xmax", type=float, default=None)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_curves)
    return ap


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; choose generate, train, evaluate, predict or curves")
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        sys.stdout = open(os.devnull, "w")
        return 0
    except UsageError as exc:
        print(f"{ERROR_PREFIX} usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelFormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"{ERROR_PREFIX} {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

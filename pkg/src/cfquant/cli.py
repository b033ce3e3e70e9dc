"""Command-line entry point: ``cfquant gen|train|infer|eval``.

Exit codes: 0 success, 1 acceptance failure, 2 usage or configuration error,
3 numeric abort during training.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import os
import sys
from dataclasses import asdict, fields, replace

import numpy as np

from . import scm
from .bilevel import BilevelConfig, load_bundle, reconstruction_mae, save_bundle, train_bilevel, write_log_csv
from .counterfactual import QUERY_COLUMNS, extrapolated
from .errors import ConfigurationError, DomainError, NumericError, ShapeError, TrainingError
from .eval import (
    ACCEPTANCE,
    DESK_PRESET,
    MONO_PRESET,
    STUDIES,
    AcceptanceConfig,
    ModelCache,
    run_study,
    study_preset,
    write_study,
)
from .nn import dumps

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
HYPERGRADIENT_FLAGS = {"first-order": "first_order", "finite-diff": "finite_diff_darts"}
PRESETS = {"full": BilevelConfig(), "desk": DESK_PRESET, "mono": MONO_PRESET}


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------
# config files
# ----------------------------------------------------------------------

def _coerce(name, raw, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise UsageError(f"field {name!r}: cannot read {raw!r} as {type(default).__name__}") from None


def read_config(path):
    """Parse an INI file; syntax errors carry the offending line number."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh, source=path)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    return cp


def _section(cp, name):
    return dict(cp[name]) if cp is not None and cp.has_section(name) else {}


def bilevel_config(base: BilevelConfig, block: dict) -> BilevelConfig:
    known = {f.name: getattr(base, f.name) for f in fields(BilevelConfig)}
    kw = {}
    for key, raw in block.items():
        if key not in known:
            raise UsageError(f"[train] unknown field {key!r}")
        kw[key] = _coerce(key, raw, known[key])
    try:
        return replace(base, **kw)
    except ConfigurationError as exc:
        raise UsageError(f"[train] {exc}") from None


def acceptance_config(block: dict) -> AcceptanceConfig:
    known = asdict(ACCEPTANCE)
    kw = {}
    for key, raw in block.items():
        if key not in known:
            raise UsageError(f"[acceptance] unknown field {key!r}")
        kw[key] = _coerce(key, raw, known[key])
    return replace(ACCEPTANCE, **kw)


def defaults_text():
    cp = configparser.ConfigParser(interpolation=None)
    cp["gen"] = {"scenario": "linear", "n": "100000", "seed": "0"}
    cp["train"] = {k: str(v) for k, v in asdict(BilevelConfig()).items()}
    cp["train.desk"] = {k: str(v) for k, v in asdict(DESK_PRESET).items()}
    cp["train.mono"] = {k: str(v) for k, v in asdict(MONO_PRESET).items()}
    cp["acceptance"] = {k: (" ".join(map(str, v)) if isinstance(v, tuple) else str(v))
                        for k, v in asdict(ACCEPTANCE).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# ----------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_path, command, config, seed, outputs):
    config_text = dumps(config)
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": seed,
        "outputs": {os.path.basename(p): sha256_file(p) for p in outputs},
    }
    text = dumps(manifest)
    with open(out_path, "w") as fh:
        fh.write(text + "\n")
    print(text)
    return manifest


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def _spec(name):
    try:
        return scm.scenario_spec(name)
    except (KeyError, ConfigurationError):
        raise UsageError(f"unknown scenario {name!r}; choose from {sorted(scm.SCENARIOS)}") from None


def _pick(args_value, block, key, default, cast=str):
    if args_value is not None:
        return args_value
    if key in block:
        return _coerce(key, block[key], cast(default) if default is not None else "")
    if default is None:
        raise UsageError(f"missing required setting {key!r}")
    return default


def cmd_gen(args, cp):
    block = _section(cp, "gen")
    scenario = _pick(args.scenario, block, "scenario", "linear")
    n = _pick(args.n, block, "n", 100000, int)
    seed = _pick(args.seed, block, "seed", 0, int)
    out = _pick(args.out, block, "out", None)
    spec = _spec(scenario)
    try:
        ds = scm.sample_dataset(spec, n, seed)
    except DomainError as exc:
        raise UsageError(str(exc)) from None
    ds.to_csv(out, hidden=not args.no_hidden)
    write_manifest(out + ".manifest.json", "gen",
                   {"scenario": scenario, "n": n, "seed": seed, "hidden": not args.no_hidden}, seed, [out])
    return EXIT_OK


def cmd_train(args, cp):
    block = _section(cp, "train")
    data = _pick(args.data, block, "data", None)
    out = _pick(args.out, block, "out", None)
    scenario = _pick(args.scenario, block, "scenario", "linear")
    seed = _pick(args.seed, block, "seed", 0, int)
    for k in ("data", "out", "scenario", "seed"):
        block.pop(k, None)
    config = bilevel_config(PRESETS[args.preset], block)
    if args.hypergradient is not None:
        config = replace(config, hypergradient=HYPERGRADIENT_FLAGS[args.hypergradient])
    if args.outer_steps is not None:
        config = replace(config, outer_steps=args.outer_steps)
    spec = _spec(scenario)
    try:
        ds = scm.read_dataset_csv(data, spec=spec, seed=seed)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read dataset {data}: {exc}") from None
    try:
        model = train_bilevel(ds, config, seed=seed)
    except TrainingError as exc:
        msg = f"numeric abort: {exc}"
        if exc.checkpoint is not None:
            path = out + ".last-good.json"
            save_bundle(exc.checkpoint, path)
            msg += f"; last good checkpoint written to {path}"
        print(msg, file=sys.stderr)
        return EXIT_NUMERIC
    save_bundle(model, out)
    log_path = out + ".log.csv"
    write_log_csv(model, log_path)
    mae = reconstruction_mae(model, ds.x, ds.z, ds.y)
    write_manifest(out + ".manifest.json", "train",
                   {"data_sha256": sha256_file(data), "scenario": scenario, "bilevel": asdict(config)},
                   seed, [out, log_path])
    print(f"reconstruction MAE (standardised, training split): {mae:.6f}")
    return EXIT_OK


def _read_query(path, z_dim):
    try:
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read query {path}: {exc}") from None
    col = {h: i for i, h in enumerate(header)}
    zcols = [col[h] for h in header if h.startswith("z")]
    missing = [c for c in ("x", "y", "x_prime") if c not in col]
    if missing or not zcols:
        raise UsageError(f"query {path} lacks column(s) {missing or ['z']}; header was {header}")
    if len(zcols) != z_dim:
        raise UsageError(f"query {path} has {len(zcols)} z columns, model expects {z_dim}")
    if data.shape[0] == 0:
        raise UsageError(f"query {path} has no rows")
    y_true = data[:, col["y_true"]] if "y_true" in col else None
    return data[:, col["x"]], data[:, zcols], data[:, col["y"]], data[:, col["x_prime"]], y_true


def cmd_infer(args, cp):
    try:
        model = load_bundle(args.model)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load model {args.model}: {exc}") from None
    z_dim = model.g.scaler.z_mean.size
    x, z, y, xp, y_true = _read_query(args.query, z_dim)
    tau = model.h(x, z, y)
    y_hat = model.g.predict(xp, z, tau)
    flags = extrapolated(model, xp)
    rows = []
    for i in range(x.size):
        rows.append([
            format(float(xp[i]), ".17g"), format(float(y_hat[i]), ".17g"),
            "" if y_true is None else format(float(y_true[i]), ".17g"),
            format(float(tau[i]), ".17g"), str(int(flags[i])),
        ])
    with open(args.out, "w") as fh:
        fh.write(",".join(QUERY_COLUMNS) + "\n")
        fh.writelines(",".join(r) + "\n" for r in rows)
    write_manifest(args.out + ".manifest.json", "infer",
                   {"model_sha256": sha256_file(args.model), "query_sha256": sha256_file(args.query)},
                   model.seed, [args.out])
    return EXIT_OK


def cmd_eval(args, cp):
    if args.study not in STUDIES:
        raise UsageError(f"unknown study {args.study!r}; choose from {list(STUDIES)}")
    block = _section(cp, "train")
    base = PRESETS[args.preset] if args.preset else study_preset(args.study)
    config = bilevel_config(base, block)
    acceptance = acceptance_config(_section(cp, "acceptance"))
    try:
        result = run_study(args.study, seeds=args.seeds, config=config, acceptance=acceptance, cache=ModelCache())
    except TrainingError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    paths = write_study(result, args.out)
    write_manifest(os.path.join(args.out, "manifest.json"), f"eval {args.study}",
                   {"study": args.study, "seeds": args.seeds, "bilevel": asdict(config),
                    "acceptance": asdict(acceptance)}, None, paths)
    print(result.summary())
    return EXIT_OK if result.passed else EXIT_FAIL


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="cfquant", description=__doc__.splitlines()[0])
    p.add_argument("--print-defaults", action="store_true", help="print every default setting as INI and exit")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen", help="sample a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--scenario")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--no-hidden", action="store_true", help="omit the hidden noise/confounder columns")

    t = sub.add_parser("train", help="train h and g on a dataset CSV")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--scenario", help="scenario the data came from (sets binary-x routing)")
    t.add_argument("--out", help="model bundle path")
    t.add_argument("--seed", type=int)
    t.add_argument("--preset", choices=sorted(PRESETS), default="full")
    t.add_argument("--hypergradient", choices=sorted(HYPERGRADIENT_FLAGS))
    t.add_argument("--outer-steps", type=int)

    i = sub.add_parser("infer", help="counterfactual predictions for a query CSV")
    i.add_argument("--config")
    i.add_argument("--model", required=True)
    i.add_argument("--query", required=True, help="CSV with columns x, z0.., y, x_prime[, y_true]")
    i.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="run a study and check it against the acceptance settings")
    e.add_argument("--config")
    e.add_argument("--study", required=True)
    e.add_argument("--seeds", type=int)
    e.add_argument("--preset", choices=sorted(PRESETS),
                   help="training preset (default: desk, or mono for the monotonicity study)")
    e.add_argument("--out", default="results")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        print(defaults_text(), end="")
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cp = read_config(args.config) if getattr(args, "config", None) else None
        return COMMANDS[args.command](args, cp)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ShapeError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

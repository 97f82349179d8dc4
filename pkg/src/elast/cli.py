"""``elast`` command-line interface.

Every command reads a JSON config (``--config``); ``--seed`` and ``--out``
override the config's ``seed`` and ``out`` fields.  Exit codes: 0 success,
2 invalid input or configuration, 3 numerical or estimator failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import coverage, dgp
from ._rng import derive_seed
from .baseline import FitResult
from .data import Dataset, read_table
from .exceptions import ConvergenceError, DivergenceError, ElastError, UserInputError
from .inference import TABLE_COLUMNS, batch_to_csv, compare, compare_discrete, summarize_batch
from .learners import LearnerConfig
from .report import EstimateReport, _jsonable

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3

# field -> (accepted types, default); a default of ``REQUIRED`` must be supplied
REQUIRED = object()
_COMMON = {"schema_version": (int, REQUIRED), "seed": (int, 0), "out": (str, None)}
CONFIG_FIELDS = {
    "simulate": {**_COMMON, "spec": (dict, REQUIRED), "n": (int, REQUIRED), "oracle_draws": (int, 400_000)},
    "estimate": {**_COMMON, "data": (str, REQUIRED), "method": (str, REQUIRED), "y": (str, "y"),
                 "x": (str, "x"), "controls": (list, None), "instruments": (list, None), "K": (int, 5),
                 "level": (float, 0.05), "learner": (dict, {}), "n_jobs": (int, 1),
                 "include_scores": (bool, True)},
    "compare": {**_COMMON, "a": (str, None), "b": (str, None), "pairs": (list, None),
                "convention": (str, "continuous"), "level": (float, 0.05)},
    "coverage": {**_COMMON, "spec": (dict, REQUIRED), "n": (int, REQUIRED), "R": (int, REQUIRED),
                 "methods": (list, ["dream", "ols"]), "K": (int, 5), "level": (float, 0.05),
                 "learner": (dict, {}), "oracle_draws": (int, 400_000), "n_jobs": (int, 1)},
}


class ConfigError(UserInputError):
    pass


def validate_config(command: str, raw: dict) -> dict:
    """Fill defaults and check types; unknown fields and version mismatches are errors."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    fields = CONFIG_FIELDS[command]
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config field(s) for {command}: {', '.join(unknown)}")
    out = {}
    for name, (kind, default) in fields.items():
        if name not in raw:
            if default is REQUIRED:
                raise ConfigError(f"config field {name!r} is required")
            out[name] = default
            continue
        value = raw[name]
        ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value, ok = float(value), True
        if not ok and not (value is None and default is None):
            raise ConfigError(f"config field {name!r} must be of type {kind.__name__}")
        out[name] = value
    if out["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {out['schema_version']} is not supported (expected {SCHEMA_VERSION})")
    return out


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc


def _out_path(cfg: dict, command: str) -> Path:
    if not cfg["out"]:
        raise ConfigError(f"{command} needs an output path (--out or config field 'out')")
    return Path(cfg["out"])


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _sidecar(out: Path) -> Path:
    return _sibling(out, ".json") if out.suffix != ".json" else _sibling(out, ".meta.json")


def _header(command: str, cfg: dict, dataset_hash: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, "seed": cfg["seed"],
            "config_hash": config_hash(cfg), "dataset_hash": dataset_hash}


def _learner(cfg: dict, seed: int) -> LearnerConfig:
    try:
        return LearnerConfig.from_dict({**cfg["learner"], "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid learner settings: {exc}") from exc


def _spec(cfg: dict) -> dgp.Spec:
    try:
        return dgp.spec_from_dict(cfg["spec"])
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"invalid spec: {exc}") from exc


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(cfg: dict) -> dict:
    """Write a simulated dataset and a sidecar JSON with the spec and oracle."""
    spec = _spec(cfg)
    out = _out_path(cfg, "simulate")
    data = coverage.simulate(spec, cfg["n"], derive_seed(cfg["seed"], "simulate"))
    oracle = None
    if cfg["oracle_draws"] > 0:
        est = coverage.oracle_theta(spec, cfg["oracle_draws"], cfg["seed"])
        oracle = {"theta0": est.value, "se": est.se, "draws": est.draws}
    side = {**_header("simulate", cfg, data.content_hash()), "spec": spec.to_dict(), "n": data.n,
            "oracle": oracle, "data": out.name, "convention": spec.convention}
    _write(out, data.to_csv_text())
    _write(_sidecar(out), _dumps(side))
    return side


def _load_dataset(cfg: dict) -> Dataset:
    table = read_table(cfg["data"])
    return Dataset.from_table(table, y=cfg["y"], x=cfg["x"], controls=cfg["controls"],
                              instruments=cfg["instruments"])


def cmd_estimate(cfg: dict) -> dict:
    """Estimate with one method and write the report JSON."""
    data = _load_dataset(cfg)
    if cfg["method"] not in coverage.METHODS:
        raise ConfigError(f"unknown method {cfg['method']!r}; choose from {', '.join(coverage.METHODS)}")
    out = _out_path(cfg, "estimate")
    learner = _learner(cfg, cfg["seed"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = coverage.run_method(cfg["method"], data, K=cfg["K"], level=cfg["level"], config=learner,
                                  n_jobs=cfg["n_jobs"])
    for w in caught:
        print(f"elast: notice: {w.message}", file=sys.stderr)
    body = {**_header("estimate", cfg, data.content_hash()), "method": cfg["method"],
            "theta": res["theta"], "se": res["se"], "ci": list(res["ci"]), "level": cfg["level"],
            "n": data.n, "notices": sorted({str(w.message) for w in caught})}
    if res["fit"] is not None:
        body["fit"] = res["fit"].to_json(include_influence=False)
        body["diagnostics"] = {}
    else:
        rep: EstimateReport = res["report"]
        body["reported_method"] = rep.method
        body["diagnostics"] = rep.diagnostics
        body["learner"] = learner.to_dict()
    if cfg["include_scores"]:
        body["scores"] = res["scores"]
    _write(out, _dumps(body))
    return body


def _read_report(path: str) -> dict:
    try:
        blob = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {path}: {exc}") from exc
    if blob.get("command") != "estimate" or "scores" not in blob:
        raise ConfigError(f"{path} is not an estimate report with per-observation scores")
    return blob


def _as_estimate(blob: dict, role: str):
    scores = np.asarray(blob["scores"], dtype=float)
    if "fit" in blob:
        names = tuple(blob["fit"]["names"])
        coef = np.zeros(len(names))
        coef[names.index("x")] = blob["theta"]
        infl = np.zeros((scores.shape[0], len(names)))
        infl[:, names.index("x")] = scores
        return FitResult(coefficients=coef, vcov_robust=np.eye(len(names)), influence=infl,
                         estimator_tag=blob["method"], names=names)
    if role == "a_discrete":
        raise ConfigError("the discrete convention needs a log-linear fit (ols, ppml or 2sls) as report 'a'")
    return EstimateReport.from_scores(blob["method"], blob["theta"], scores, blob.get("level", 0.05))


def _compare_pair(a_path: str, b_path: str, convention: str, level: float):
    a, b = _read_report(a_path), _read_report(b_path)
    if a["dataset_hash"] != b["dataset_hash"]:
        raise ConfigError(f"reports {a_path} and {b_path} were computed on different datasets")
    if convention == "continuous":
        res = compare(_as_estimate(a, "a"), _as_estimate(b, "b"), level)
    elif convention == "discrete":
        res = compare_discrete(_as_estimate(a, "a_discrete"), _as_estimate(b, "b"), level)
    else:
        raise ConfigError(f"convention must be 'continuous' or 'discrete', got {convention!r}")
    return res, a, b


def cmd_compare(cfg: dict) -> dict:
    """Compare two estimate reports, or a batch of pairs with a summary table."""
    out = _out_path(cfg, "compare")
    single = cfg["a"] is not None or cfg["b"] is not None
    if single == (cfg["pairs"] is not None) or (single and not (cfg["a"] and cfg["b"])):
        raise ConfigError("give either both 'a' and 'b' or a list of 'pairs'")
    pairs = [{"a": cfg["a"], "b": cfg["b"]}] if single else cfg["pairs"]
    results, hashes, entries = [], [], []
    for p in pairs:
        if not isinstance(p, dict) or set(p) - {"a", "b", "convention"} or not {"a", "b"} <= set(p):
            raise ConfigError("each pair must be an object with 'a', 'b' and optionally 'convention'")
        res, a, b = _compare_pair(p["a"], p["b"], p.get("convention", cfg["convention"]), cfg["level"])
        results.append(res)
        hashes.append(a["dataset_hash"])
        entries.append({"a": p["a"], "b": p["b"], "method_a": a["method"], "method_b": b["method"],
                        **res.to_json(), "significant": res.significant})
    dataset_hash = hashes[0] if single else hashlib.sha256("".join(hashes).encode()).hexdigest()
    head = _header("compare", cfg, dataset_hash)
    if single:
        body = {**head, **entries[0]}
    else:
        table = summarize_batch(results)
        body = {**head, "results": entries, "table": table, "table_columns": list(TABLE_COLUMNS)}
        csv_text = batch_to_csv(table)
        lines = csv_text.splitlines()
        meta = [head[k] for k in ("schema_version", "seed", "config_hash", "dataset_hash")]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(next(csv.reader([lines[0]])) + ["schema_version", "seed", "config_hash", "dataset_hash"])
        w.writerow(next(csv.reader([lines[1]])) + meta)
        _write(_sibling(out, ".csv"), buf.getvalue())
    _write(out, _dumps(body))
    return body


def cmd_coverage(cfg: dict) -> dict:
    """Replication study: summary JSON plus a long-format CSV of every replication."""
    spec = _spec(cfg)
    out = _out_path(cfg, "coverage")
    learner = _learner(cfg, cfg["seed"])
    res = coverage.run_coverage(spec, cfg["n"], cfg["R"], tuple(cfg["methods"]), seed=cfg["seed"], K=cfg["K"],
                                level=cfg["level"], config=learner, oracle_draws=cfg["oracle_draws"],
                                n_jobs=cfg["n_jobs"])
    dataset_hash = hashlib.sha256("".join(res.data_hashes).encode()).hexdigest()
    head = _header("coverage", cfg, dataset_hash)
    failures = sum(v["failures"] for v in res.summary.values())
    body = {**head, "theta0": res.theta0, "theta0_se": res.theta0_se, "n": cfg["n"], "R": cfg["R"],
            "methods": res.summary, "failures": failures}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rep", "method", "theta", "se", "ci_lo", "ci_hi", "covered", "status", "theta0",
                "schema_version", "seed", "config_hash", "dataset_hash"])
    for row in res.rows:
        w.writerow([row.rep, row.method, repr(row.theta), repr(row.se), repr(row.ci_lo), repr(row.ci_hi),
                    int(row.covered), row.status, repr(res.theta0), SCHEMA_VERSION, cfg["seed"],
                    head["config_hash"], res.data_hashes[row.rep]])
    _write(_sibling(out, "_replications.csv"), buf.getvalue())
    _write(out, _dumps(body))
    return body


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "compare": cmd_compare,
            "coverage": cmd_coverage}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elast", description="Average elasticities from log-linear data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0])
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output path (overrides the config)")
        if name == "estimate":
            p.add_argument("--y", help="outcome column")
            p.add_argument("--x", help="treatment column")
            p.add_argument("--controls", help="comma-separated control columns")
            p.add_argument("--instruments", help="comma-separated instrument columns")
    return parser


def _split(names: str) -> list[str]:
    return [c.strip() for c in names.split(",") if c.strip()]


def _load_config(args) -> dict:
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if isinstance(raw, dict):
        if args.seed is not None:
            raw["seed"] = args.seed
        if args.out is not None:
            raw["out"] = args.out
        for flag in ("y", "x"):
            if getattr(args, flag, None):
                raw[flag] = getattr(args, flag)
        for flag in ("controls", "instruments"):
            if getattr(args, flag, None) is not None:
                raw[flag] = _split(getattr(args, flag))
    return validate_config(args.command, raw)


def _failure(cfg: dict | None, command: str, exc: Exception) -> None:
    if not cfg or not cfg.get("out"):
        return
    info = {"status": "failed", "error_type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConvergenceError):
        info["iterations"] = exc.iterations
    if isinstance(exc, DivergenceError):
        info["epoch"], info["fold"] = exc.epoch, exc.fold
    body = {"schema_version": SCHEMA_VERSION, "command": command, "seed": cfg["seed"],
            "config_hash": config_hash(cfg), **info}
    # simulate's primary output is the CSV; its failure record goes where the sidecar would
    path = _sidecar(Path(cfg["out"])) if command == "simulate" else Path(cfg["out"])
    try:
        _write(path, _dumps(body))
    except ConfigError:
        pass


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    cfg = None
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](cfg)
    except UserInputError as exc:
        print(f"elast: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ElastError, ArithmeticError, FloatingPointError) as exc:
        print(f"elast: estimation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        _failure(cfg, args.command, exc)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

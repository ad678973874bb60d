"""Command-line entry point.

Each subcommand validates its configuration, then runs
load -> filter -> impute -> encode -> cross-fit -> analysis and writes a JSON
result (plus optional CSV plot data). Exit codes: 0 success, 2 configuration
error, 3 data error, 4 numerical failure.

Options may also come from an INI file (``--config``); keys in its
``[dratt]`` section use the long option names with dashes or underscores and
are overridden by flags given on the command line.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import operator
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .crossfit import assign_folds, fit_nuisances
from .data_model import (CovariateSchema, RoleMap, encode, impute_covariates, infer_schema, load_csv,
                         partition_by_age, partition_by_labels)
from .errors import ConfigError, DataError, DrattError
from .estimators import (estimate_att, estimate_otr, homogeneity_test, influence_values, overlap_diagnostic,
                         subgroup_estimates)
from .learners import parse_learners
from .sensitivity import (DEFAULT_GRID, calibrate_delta, otr_additive_bounds, random_subsets,
                          sensitivity_curve)

logger = logging.getLogger("dratt")

SCHEMA_VERSION = 1
COMMANDS = ("estimate", "otr", "heterogeneity", "sensitivity", "calibrate", "overlap", "simulate")
_OPS = {"==": operator.eq, "!=": operator.ne, "<=": operator.le, ">=": operator.ge,
        "<": operator.lt, ">": operator.gt, "=": operator.eq}


# --------------------------------------------------------------------------
# argument parsing

def _data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--input", help="CSV file with a header row")
    g.add_argument("--covariates", help="'name:kind, ...' schema, or plain names to infer kinds")
    g.add_argument("--treatment", help="treatment column (0/1)")
    g.add_argument("--outcome", help="outcome column")
    g.add_argument("--followup", help="follow-up indicator column (0/1)")
    g.add_argument("--id", help="row identifier column")
    g.add_argument("--lenient", action="store_true", default=None,
                   help="mask treatment/outcome values present where follow-up is 0")
    g.add_argument("--filter", action="append", default=None, metavar="COL<op>VALUE",
                   help="keep rows satisfying the predicate; repeatable; applied before folding")
    f = p.add_argument_group("fitting")
    f.add_argument("--folds", type=int, help="cross-fitting folds (default 10)")
    f.add_argument("--seed", type=int, help="seed for folds and learners (default 0)")
    f.add_argument("--learners", help="comma list: logistic, forest, constant; several -> super learner")
    f.add_argument("--learner-param", action="append", default=None, metavar="KIND.KEY=VALUE")
    f.add_argument("--clip", type=float, help="propensity clip bound epsilon (default 0.01)")
    f.add_argument("--nuisance-csv", help="also write the out-of-fold nuisances here")


def _common_args(p):
    p.add_argument("--config", help="INI file supplying defaults for any option")
    p.add_argument("--output", help="JSON result path (default: standard output)")
    p.add_argument("--print-config", action="store_true", default=None,
                   help="print the resolved configuration and exit")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dratt", description="Doubly robust ATT under attrition.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="cross-fitted one-step ATT")
    _data_args(p)
    _common_args(p)

    p = sub.add_parser("otr", help="overall treatment removal effect")
    _data_args(p)
    _common_args(p)
    p.add_argument("--delta-add", type=float, action="append", default=None,
                   help="additive sensitivity bound; repeatable")

    p = sub.add_parser("heterogeneity", help="subgroup ATTs and homogeneity test")
    _data_args(p)
    _common_args(p)
    p.add_argument("--group", help="column holding group labels")
    p.add_argument("--age-column", help="group by pooled age instead")
    p.add_argument("--pool-low", type=int, help="ages at or below pool together (default 12)")
    p.add_argument("--pool-high", type=int, help="ages at or above pool together (default 19)")
    p.add_argument("--min-group-size", type=int, help="drop smaller groups (default 30)")

    p = sub.add_parser("sensitivity", help="ratio bounds over a delta grid")
    _data_args(p)
    _common_args(p)
    p.add_argument("--delta-grid", help="lo:hi:step or comma list (default 1:2:0.01)")
    p.add_argument("--curve-csv", help="write the curve here as CSV")

    p = sub.add_parser("calibrate", help="estimate delta from covariate subsets")
    _data_args(p)
    _common_args(p)
    p.add_argument("--subsets", action="append", default=None, metavar="A,B,...",
                   help="covariate subset; repeatable")
    p.add_argument("--random-subsets", help="sizes for random subsets, e.g. '1-21' or '1,5,10'")
    p.add_argument("--per-size", type=int, help="random subsets per size (default 1)")
    p.add_argument("--sup", action="store_true", default=None, help="also report the per-row maximum ratio")

    p = sub.add_parser("overlap", help="treatment propensity histogram")
    _data_args(p)
    _common_args(p)
    p.add_argument("--bins", type=int, help="histogram bins (default 50)")
    p.add_argument("--threshold", type=float, help="low-propensity threshold (default 0.02)")
    p.add_argument("--histogram-csv", help="write bin counts here as CSV")

    p = sub.add_parser("simulate", help="Monte Carlo experiment on a synthetic process")
    _common_args(p)
    p.add_argument("--dgp", help="reference, confounded, smooth, hidden or grouped")
    p.add_argument("--task", help="att (default), convergence or homogeneity")
    p.add_argument("--n", type=int, help="sample size per replication")
    p.add_argument("--n-grid", help="comma list of sizes for a convergence study")
    p.add_argument("--reps", type=int, help="replications (default 100)")
    p.add_argument("--seed", type=int)
    p.add_argument("--learners", help="learner list, or 'oracle' for the true nuisances")
    p.add_argument("--learner-param", action="append", default=None, metavar="KIND.KEY=VALUE")
    p.add_argument("--folds", type=int, help="cross-fitting folds (default 5)")
    p.add_argument("--clip", type=float)
    p.add_argument("--break", dest="break_", help="comma list of nuisances to misspecify")
    p.add_argument("--mechanism", help="constant-fit (default) or drop-covariates")
    p.add_argument("--effects", help="comma list of group effects for the grouped process")
    p.add_argument("--jobs", type=int, help="worker processes (default 1)")
    p.add_argument("--table-csv", help="write the convergence table here as CSV")
    return parser


DEFAULTS = {
    "folds": 10, "seed": 0, "learners": "logistic", "learner_param": [], "clip": 0.01, "filter": [],
    "lenient": False, "print_config": False, "delta_add": [], "pool_low": 12, "pool_high": 19,
    "min_group_size": 30, "delta_grid": "1:2:0.01", "per_size": 1, "sup": False, "bins": 50,
    "threshold": 0.02, "subsets": [],
}
SIM_DEFAULTS = {"task": "att", "reps": 100, "folds": 5, "learners": "oracle", "mechanism": "constant-fit",
                "jobs": 1, "break_": ""}
_LIST_KEYS = {"filter", "learner_param", "delta_add", "subsets"}
_BOOL_KEYS = {"lenient", "print_config", "sup"}


def _read_config(path: str, parser_dests: dict) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(f"bad config {path}: {exc}") from None
    out = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            dest = key.replace("-", "_")
            if dest == "break":
                dest = "break_"
            if dest not in parser_dests:
                raise ConfigError(f"{path}: unknown key {key!r}")
            action = parser_dests[dest]
            if dest in _LIST_KEYS:
                out[dest] = [v.strip() for v in value.splitlines() if v.strip()]
                if action.type is float:
                    out[dest] = [_num(float, dest, v) for v in out[dest]]
            elif dest in _BOOL_KEYS:
                out[dest] = value.strip().lower() in ("1", "true", "yes", "on")
            elif action.type in (int, float):
                out[dest] = _num(action.type, dest, value)
            else:
                out[dest] = value.strip()
    return out


def _num(kind, key, value):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"option {key}: cannot parse {value!r}") from None


def resolve_config(argv) -> dict:
    """Merge defaults, the config file and explicit flags (in that order)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest: a for a in sub._actions}
    cfg = dict(SIM_DEFAULTS if args.command == "simulate" else DEFAULTS)
    cfg = {k: v for k, v in cfg.items() if k in dests}
    if args.config:
        cfg.update(_read_config(args.config, dests))
    for dest in dests:
        if dest in ("help", "config", "verbose"):
            continue
        v = getattr(args, dest, None)
        if v is not None:
            cfg[dest] = v
    cfg["command"] = args.command
    cfg["verbose"] = args.verbose
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    """Check every command-specific requirement before any data is read."""
    cmd = cfg["command"]
    if "clip" in cfg and not 0 < cfg["clip"] < 0.5:
        raise ConfigError(f"--clip must lie in (0, 0.5), got {cfg['clip']}")
    if cfg.get("folds") is not None and cfg["folds"] < 2:
        raise ConfigError("--folds must be >= 2")
    if cmd == "simulate":
        if not cfg.get("dgp"):
            raise ConfigError("simulate needs --dgp (or dgp in the config file)")
        if cfg["task"] not in ("att", "convergence", "homogeneity"):
            raise ConfigError(f"unknown simulate task {cfg['task']!r}")
        if cfg["task"] == "convergence" and not cfg.get("n_grid"):
            raise ConfigError("convergence task needs --n-grid")
        if cfg["task"] != "convergence" and not cfg.get("n"):
            raise ConfigError("simulate needs --n")
        if cfg["reps"] < 1:
            raise ConfigError("--reps must be >= 1")
        _sim_spec(cfg)
        return
    for key in ("input", "treatment", "outcome", "followup", "covariates"):
        if not cfg.get(key):
            raise ConfigError(f"{cmd} needs --{key}")
    parse_learners(cfg["learners"], cfg["learner_param"])
    for f in cfg["filter"]:
        parse_filter(f)
    if cmd == "heterogeneity":
        if bool(cfg.get("group")) == bool(cfg.get("age_column")):
            raise ConfigError("heterogeneity needs exactly one of --group or --age-column")
    if cmd == "sensitivity":
        parse_grid(cfg["delta_grid"])
    if cmd == "calibrate" and not (cfg["subsets"] or cfg.get("random_subsets")):
        raise ConfigError("calibrate needs --subsets or --random-subsets")
    if cmd == "calibrate" and cfg.get("random_subsets"):
        parse_sizes(cfg["random_subsets"])
    if cmd == "otr" and any(d < 0 for d in cfg["delta_add"]):
        raise ConfigError("--delta-add must be >= 0")


def parse_filter(text: str):
    """``"col<op>value"`` with op one of == != <= >= < > =."""
    for op in ("==", "!=", "<=", ">=", "<", ">", "="):
        col, sep, value = text.partition(op)
        if sep and col.strip() and value.strip():
            return col.strip(), op, value.strip()
    raise ConfigError(f"bad filter {text!r}; expected COLUMN<op>VALUE")


def parse_grid(text: str) -> np.ndarray:
    try:
        if ":" in text:
            lo, hi, step = (float(v) for v in text.split(":"))
            if step <= 0 or hi < lo:
                raise ValueError
            k = int(np.floor((hi - lo) / step + 1e-9))
            grid = np.round(lo + step * np.arange(k + 1), 12)
        else:
            grid = np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise ConfigError(f"bad delta grid {text!r}") from None
    if grid.size == 0 or np.any(grid < 1) or np.any(np.diff(grid) < 0):
        raise ConfigError("delta grid must be sorted values >= 1")
    return grid


def parse_sizes(text: str) -> list[int]:
    try:
        if "-" in text:
            lo, hi = (int(v) for v in text.split("-"))
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad subset sizes {text!r}") from None


def _sim_spec(cfg):
    if cfg["learners"] == "oracle":
        return None
    return parse_learners(cfg["learners"], cfg.get("learner_param") or [])


# --------------------------------------------------------------------------
# pipeline

def _load(cfg):
    text = cfg["covariates"]
    if ":" in text:
        schema = CovariateSchema.parse(text)
    else:
        try:
            schema = infer_schema(cfg["input"], [c.strip() for c in text.split(",") if c.strip()])
        except OSError as exc:
            raise DataError(f"cannot read {cfg['input']}: {exc}") from None
    group = cfg.get("group")
    roles = RoleMap(cfg["treatment"], cfg["outcome"], cfg["followup"], group=group, id=cfg.get("id"))
    try:
        ds = load_csv(cfg["input"], schema, roles, lenient=cfg["lenient"])
    except OSError as exc:
        raise DataError(f"cannot read {cfg['input']}: {exc}") from None
    for text in cfg["filter"]:
        ds = apply_filter(ds, *parse_filter(text))
    if ds.n == 0:
        raise DataError("no rows left after filtering")
    logger.info("loaded %d rows (%d dropped, %d masked)", ds.n,
                len(ds.load_report.dropped_rows) if ds.load_report else 0,
                ds.load_report.masked_cells if ds.load_report else 0)
    return ds, encode(impute_covariates(ds))


def apply_filter(ds, column, op, value):
    """Keep rows whose ``column`` satisfies ``op value``; missing cells fail.

    Comparison is numeric when both sides parse as numbers, else textual.
    """
    vals = ds.raw_column(column)
    fn = _OPS[op]
    try:
        target = float(value)
    except ValueError:
        target = None
    keep = np.zeros(ds.n, dtype=bool)
    for i, v in enumerate(vals):
        if v is None:
            continue
        if target is not None:
            try:
                keep[i] = fn(float(v), target)
                continue
            except ValueError:
                pass
        keep[i] = fn(str(v), value)
    logger.info("filter %s%s%s keeps %d of %d rows", column, op, value, int(keep.sum()), ds.n)
    return ds.subset(keep)


def _surface(cfg, ds, want_mu_y=False):
    spec = parse_learners(cfg["learners"], cfg["learner_param"])
    folds = assign_folds(ds.n, cfg["folds"], cfg["seed"])
    surface = fit_nuisances(ds, spec, folds, cfg["clip"], want_mu_y)
    if cfg.get("nuisance_csv"):
        surface.to_csv(cfg["nuisance_csv"], ds.ids)
    return spec, folds, surface


def cmd_estimate(cfg):
    _, ds = _load(cfg)
    _, _, surface = _surface(cfg, ds)
    est = estimate_att(influence_values(ds, surface), cfg["clip"])
    return {**est.to_dict(), "clipped": dict(surface.clip_counts)}


def cmd_otr(cfg):
    _, ds = _load(cfg)
    _, _, surface = _surface(cfg, ds, want_mu_y=True)
    out = estimate_otr(ds, surface).to_dict()
    if cfg["delta_add"]:
        out["bounds"] = [otr_additive_bounds(ds, surface, d).to_dict() for d in cfg["delta_add"]]
    return out


def cmd_heterogeneity(cfg):
    raw, ds = _load(cfg)
    _, _, surface = _surface(cfg, ds)
    if cfg.get("age_column"):
        part = partition_by_age(raw, cfg["age_column"], cfg["pool_low"], cfg["pool_high"])
    else:
        part = partition_by_labels(ds.group)
    groups = subgroup_estimates(ds, surface, part, cfg["min_group_size"], cfg["clip"])
    out = groups.to_dict()
    out["excluded"] = part.excluded
    out["test"] = homogeneity_test(groups).to_dict()
    return out


def cmd_sensitivity(cfg):
    _, ds = _load(cfg)
    _, _, surface = _surface(cfg, ds)
    rec = influence_values(ds, surface)
    curve = sensitivity_curve(rec, parse_grid(cfg["delta_grid"]), cfg["clip"])
    if cfg.get("curve_csv"):
        curve.to_csv(cfg["curve_csv"])
    return {"estimate": estimate_att(rec, cfg["clip"]).to_dict(), "curve": curve.to_dict(),
            "lower_crosses_zero_at": curve.crossing()}


def cmd_calibrate(cfg):
    raw, ds = _load(cfg)
    spec, folds, surface = _surface(cfg, ds)
    subsets = [tuple(s.strip() for s in item.split(",") if s.strip()) for item in cfg["subsets"]]
    if cfg.get("random_subsets"):
        subsets += random_subsets(raw.schema.names, parse_sizes(cfg["random_subsets"]), cfg["per_size"],
                                  cfg["seed"])
    return {"calibrations": [calibrate_delta(ds, surface, s, spec, folds, eps=cfg["clip"],
                                             with_sup=cfg["sup"]).to_dict() for s in subsets]}


def cmd_overlap(cfg):
    _, ds = _load(cfg)
    _, _, surface = _surface(cfg, ds)
    rep = overlap_diagnostic(surface, cfg["bins"], cfg["threshold"])
    if cfg.get("histogram_csv"):
        rep.to_csv(cfg["histogram_csv"])
    return {**rep.to_dict(), "counts": rep.counts.tolist(), "edges": rep.edges.tolist()}


def cmd_simulate(cfg):
    from . import sim

    kwargs = {}
    if cfg.get("effects"):
        if cfg["dgp"] != "grouped":
            raise ConfigError("--effects applies to the grouped process only")
        kwargs["effects"] = [_num(float, "effects", v) for v in cfg["effects"].split(",")]
    dgp = sim.make_dgp(cfg["dgp"], **kwargs)
    spec = _sim_spec(cfg)
    broken = [b.strip() for b in cfg["break_"].split(",") if b.strip()]
    flags = sim.MisspecFlags.breaking(broken, cfg["mechanism"])
    common = dict(folds=cfg["folds"], eps=cfg.get("clip") or 0.01, n_jobs=cfg["jobs"])
    if cfg["task"] == "homogeneity":
        if flags.broken:
            raise ConfigError("the homogeneity task does not take --break")
        rep = sim.homogeneity_experiment(dgp, cfg["n"], cfg["reps"], spec, cfg.get("seed") or 0, **common)
        return rep.to_dict()
    if cfg["task"] == "convergence":
        n_grid = [_num(int, "n_grid", v) for v in cfg["n_grid"].split(",")]
        table = sim.convergence_study(dgp, n_grid, cfg["reps"], spec, cfg.get("seed") or 0, flags, **common)
        if cfg.get("table_csv"):
            table.to_csv(cfg["table_csv"])
        return {**table.to_dict(), "reports": [_stable(r.to_dict()) for r in table.reports]}
    rep = sim.run_experiment(dgp, cfg["n"], cfg["reps"], spec, flags, cfg.get("seed") or 0, **common)
    logger.info("simulation took %.2fs", rep.wall_time)
    return {**_stable(rep.to_dict()), "consistent_branch": flags.consistent()}


def _stable(d: dict) -> dict:
    # wall time would make otherwise identical runs differ byte for byte
    return {k: v for k, v in d.items() if k != "wall_time"}


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def _public_config(cfg: dict) -> dict:
    out = {k: v for k, v in cfg.items() if k not in ("verbose", "print_config", "config")}
    if "break_" in out:
        out["break"] = out.pop("break_")
    return out


def _emit(obj, path):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def main(argv=None) -> int:
    try:
        cfg = resolve_config(argv)
    except ConfigError as exc:
        print(f"dratt: configuration error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=logging.WARNING - 10 * min(cfg["verbose"], 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    public = _public_config(cfg)
    if cfg.get("print_config"):
        _emit(public, None)
        return 0
    try:
        result = HANDLERS[cfg["command"]](cfg)
        _emit({"schema_version": SCHEMA_VERSION, "command": cfg["command"], "config": public,
               "result": result}, cfg.get("output"))
    except DrattError as exc:
        kind = {2: "configuration", 3: "data", 4: "numerical"}.get(exc.exit_code, "")
        print(f"dratt: {kind} error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line entry point: ``drdidsc <subcommand> [flags]``.

Every run writes one JSON report with top-level keys
{version, command, config, results, warnings, timing}.  Exit codes: 0 ok,
1 data error, 2 estimation error, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    PanelSchema,
    RCSchema,
    StaggeredDesign,
    assign_folds,
    load_panel_csv,
    load_rc_csv,
    validate,
)
from .errors import ConfigError, DrDidScError
from .estimator import EstimatorConfig, estimate_att_panel, estimate_att_rc, estimate_att_staggered, event_study
from .inference import MULTIPLIERS, bootstrap_att, diagnostics
from .kernel_regression import LocalPolyConfig
from .weights import WeightOptions

# flag defaults; None on the parser lets a --config file fill the gaps
DEFAULTS = {
    "data": None,
    "design": "panel",
    "unit_col": "unit_id",
    "group_col": "group",
    "time_col": "time",
    "outcome_col": "y",
    "continuous": None,
    "discrete": None,
    "treated_group": None,
    "folds": 2,
    "seed": 0,
    "kernel": "gaussian",
    "order": 1,
    "bandwidth": "auto",
    "nonneg": False,
    "min_eig_floor": 1e-8,
    "ridge": None,
    "allow_partial": False,
    "pt_only": False,
    "by_discrete": False,
    "threads": 1,
    "reps": 500,
    "alpha": 0.05,
    "weight_dist": "exponential",
    "diagnostics": True,
    "adoption": None,
    "group": None,
    "event_time": 0,
    "e_bar": None,
    "dgp": 1,
    "n": 1000,
    "boot": 0,
    "calibration": None,
    "output": None,
    "timing": False,
}


def _csv_list(s):
    return [c.strip() for c in s.split(",") if c.strip()]


def _add_common(p):
    p.add_argument("--config", help="JSON file of flag values; explicit flags win")
    p.add_argument("--output", "-o", help="write the JSON report here as well as stdout")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker cap (runs are single-threaded)")
    p.add_argument("--timing", action="store_true", default=None, help="record wall-clock timing in the report")


def _add_data(p):
    p.add_argument("--data", help="long-format CSV")
    p.add_argument("--design", choices=["panel", "rc", "staggered"])
    p.add_argument("--unit-col", dest="unit_col")
    p.add_argument("--group-col", dest="group_col")
    p.add_argument("--time-col", dest="time_col")
    p.add_argument("--outcome-col", dest="outcome_col")
    p.add_argument("--continuous", type=_csv_list, help="comma-separated continuous covariates")
    p.add_argument("--discrete", type=_csv_list, help="comma-separated discrete covariates")
    p.add_argument("--treated-group", dest="treated_group")
    p.add_argument("--adoption", help="staggered adoption as JSON {group: period|'inf'} or a path to one")


def _add_estimator(p):
    p.add_argument("--folds", type=int)
    p.add_argument("--kernel", choices=["gaussian", "epanechnikov"])
    p.add_argument("--order", type=int)
    p.add_argument("--bandwidth", help="'auto' or a positive number")
    p.add_argument("--nonneg", action="store_true", default=None)
    p.add_argument("--min-eig-floor", dest="min_eig_floor", type=float)
    p.add_argument("--ridge", type=float)
    p.add_argument("--allow-partial", dest="allow_partial", action="store_true", default=None)
    p.add_argument("--pt-only", dest="pt_only", action="store_true", default=None)
    p.add_argument("--by-discrete", dest="by_discrete", action="store_true", default=None)
    p.add_argument("--group", help="staggered: cohort label for a single ATT(g, gamma+e)")
    p.add_argument("--event-time", dest="event_time", type=int)
    p.add_argument("--e-bar", dest="e_bar", type=int)
    p.add_argument("--no-diagnostics", dest="diagnostics", action="store_false", default=None)


def _add_bootstrap(p):
    p.add_argument("--reps", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--weight-dist", dest="weight_dist", choices=list(MULTIPLIERS))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drdidsc", description="Doubly robust DiD / synthetic control ATT estimation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="point estimate of the ATT")
    _add_common(p), _add_data(p), _add_estimator(p)
    p = sub.add_parser("bootstrap", help="point estimate plus multiplier-bootstrap CI")
    _add_common(p), _add_data(p), _add_estimator(p), _add_bootstrap(p)
    p = sub.add_parser("event-study", help="ES(e) for a staggered design")
    _add_common(p), _add_data(p), _add_estimator(p)
    p = sub.add_parser("validate", help="overlap and identifiability checks")
    _add_common(p), _add_data(p)
    p.add_argument("--e-bar", dest="e_bar", type=int)
    p = sub.add_parser("simulate", help="Monte Carlo study on a synthetic DGP")
    _add_common(p), _add_estimator(p), _add_bootstrap(p)
    p.add_argument("--dgp", type=int, choices=[1, 2, 3])
    p.add_argument("--n", type=int)
    p.add_argument("--boot", type=int, help="bootstrap replications per Monte Carlo draw (0: none)")
    p.add_argument("--calibration", help="calibration JSON (default: built-in surrogate)")
    return parser


# ------------------------------------------------------------------ config


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(k.replace("-", "_") for k in loaded) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {unknown}")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    for k, v in vars(args).items():
        if k in DEFAULTS and v is not None:
            cfg[k] = v
    _check_config(cfg)
    return cfg


def _check_config(cfg):
    if int(cfg["folds"]) < 2:
        raise ConfigError("--folds must be at least 2")
    if not 0 < float(cfg["alpha"]) < 1:
        raise ConfigError("--alpha must lie in (0, 1)")
    if int(cfg["threads"]) < 1:
        raise ConfigError("--threads must be at least 1")
    if int(cfg["reps"]) < 1:
        raise ConfigError("--reps must be positive")
    if cfg["order"] is not None and not 0 <= int(cfg["order"]) <= 3:
        raise ConfigError("--order must be between 0 and 3")
    bw = cfg["bandwidth"]
    if bw != "auto":
        try:
            bw = float(bw)
        except (TypeError, ValueError):
            raise ConfigError(f"--bandwidth must be 'auto' or a number, got {bw!r}") from None
        if not bw > 0:
            raise ConfigError("--bandwidth must be positive")
        cfg["bandwidth"] = bw
    cols = [cfg["unit_col"], cfg["group_col"], cfg["time_col"], cfg["outcome_col"]]
    cols += list(cfg["continuous"] or []) + list(cfg["discrete"] or [])
    if len(set(cols)) != len(cols):
        raise ConfigError("schema columns must be distinct")
    if cfg["weight_dist"] not in MULTIPLIERS:
        raise ConfigError(f"unknown weight distribution {cfg['weight_dist']!r}")


def estimator_config(cfg) -> EstimatorConfig:
    poly = LocalPolyConfig(order=int(cfg["order"]), bandwidth=cfg["bandwidth"], kernel=cfg["kernel"])
    wopts = WeightOptions(
        min_eig_floor=float(cfg["min_eig_floor"]),
        ridge=None if cfg["ridge"] is None else float(cfg["ridge"]),
        nonneg=bool(cfg["nonneg"]),
        allow_partial=bool(cfg["allow_partial"]),
        pt_only=bool(cfg["pt_only"]),
    )
    return EstimatorConfig(folds=int(cfg["folds"]), seed=int(cfg["seed"]), poly=poly, weights=wopts)


def _load(cfg):
    if not cfg["data"]:
        raise ConfigError("--data is required")
    if cfg["design"] == "rc":
        schema = RCSchema(
            group=cfg["group_col"],
            time=cfg["time_col"],
            outcome=cfg["outcome_col"],
            continuous=cfg["continuous"],
            discrete=cfg["discrete"],
            treated=cfg["treated_group"],
        )
        return load_rc_csv(cfg["data"], schema)
    schema = PanelSchema(
        unit=cfg["unit_col"],
        group=cfg["group_col"],
        time=cfg["time_col"],
        outcome=cfg["outcome_col"],
        continuous=cfg["continuous"],
        discrete=cfg["discrete"],
        treated=None if cfg["design"] == "staggered" else cfg["treated_group"],
    )
    return load_panel_csv(cfg["data"], schema)


def _adoption(cfg, dataset) -> StaggeredDesign:
    spec = cfg["adoption"]
    if spec is None:
        raise ConfigError("staggered design needs --adoption")
    if isinstance(spec, str):
        path = Path(spec)
        try:
            spec = json.loads(path.read_text() if path.exists() else spec)
        except ValueError as err:
            raise ConfigError(f"cannot parse --adoption: {err}") from None
    if not isinstance(spec, dict):
        raise ConfigError("--adoption must be a JSON object")
    return StaggeredDesign.from_labels(dataset, spec)


def _cells(dataset, by_discrete):
    """(label, dataset) pairs: the whole sample, or one per discrete stratum."""
    if not by_discrete:
        return [("all", dataset)]
    if not dataset.discrete.shape[1]:
        raise ConfigError("--by-discrete needs at least one discrete covariate")
    out = []
    for s in dataset.strata():
        out.append((s.label, _subset(dataset, s.members)))
    return out


def _subset(dataset, idx):
    if hasattr(dataset, "unit_ids"):
        return dataset.subset(idx)
    from .data import RepeatedCrossSection

    return RepeatedCrossSection(
        y=dataset.y[idx],
        group=dataset.group[idx],
        time=dataset.time[idx],
        x=dataset.x[idx],
        discrete=dataset.discrete[idx],
        group_labels=dataset.group_labels,
        periods=dataset.periods,
        continuous_names=dataset.continuous_names,
        discrete_names=dataset.discrete_names,
        discrete_levels=dataset.discrete_levels,
    )


# --------------------------------------------------------------- commands


def _point(dataset, cfg, ecfg):
    if cfg["design"] == "rc":
        return estimate_att_rc(dataset, ecfg)
    if cfg["design"] == "staggered":
        design = _adoption(cfg, dataset)
        if cfg["group"] is None:
            raise ConfigError("staggered estimate needs --group (or use event-study)")
        codes = {str(lab): g + 1 for g, lab in enumerate(dataset.group_labels)}
        if str(cfg["group"]) not in codes:
            raise ConfigError(f"unknown cohort {cfg['group']!r}")
        return estimate_att_staggered(dataset, design, codes[str(cfg["group"])], int(cfg["event_time"]), cfg["e_bar"], ecfg)
    return estimate_att_panel(dataset, ecfg)


def _estimate_result(est, cfg, warn):
    out = est.to_dict()
    warn.extend(est.diagnostics.get("notes", []))
    if cfg["diagnostics"]:
        diag = diagnostics(est)
        out["influence"] = diag.to_dict(n=est.n)
        warn.extend(diag.notes)
    return out


def cmd_estimate(cfg, warn):
    dataset = _load(cfg)
    ecfg = estimator_config(cfg)
    cells = {}
    for label, data in _cells(dataset, cfg["by_discrete"]):
        cells[label] = _estimate_result(_point(data, cfg, ecfg), cfg, warn)
    return cells if cfg["by_discrete"] else cells["all"]


def cmd_bootstrap(cfg, warn):
    dataset = _load(cfg)
    ecfg = estimator_config(cfg)
    cells = {}
    for label, data in _cells(dataset, cfg["by_discrete"]):
        est = _point(data, cfg, ecfg)
        res = bootstrap_att(
            estimate=est, B=int(cfg["reps"]), alpha=float(cfg["alpha"]), spec=cfg["weight_dist"], seed=int(cfg["seed"])
        )
        out = _estimate_result(est, cfg, warn)
        out.update(res.summary())
        if res.failures:
            warn.append(f"{res.failures} bootstrap replication(s) failed after a retry")
        cells[label] = out
    return cells if cfg["by_discrete"] else cells["all"]


def cmd_event_study(cfg, warn):
    if cfg["design"] != "staggered":
        raise ConfigError("event-study needs --design staggered")
    dataset = _load(cfg)
    design = _adoption(cfg, dataset)
    es = event_study(dataset, design, int(cfg["event_time"]), cfg["e_bar"], estimator_config(cfg))
    for s in es.skipped:
        warn.append(f"cohort {s['group']!r} skipped: {s['reason']}")
    return es.to_dict()


def cmd_validate(cfg, warn):
    dataset = _load(cfg)
    design = _adoption(cfg, dataset) if cfg["design"] == "staggered" else None
    report = validate(dataset, cfg["design"], design, cfg["e_bar"])
    warn.extend(report.warnings)
    out = report.to_dict()
    try:
        assign_folds(dataset, int(cfg["folds"]), int(cfg["seed"]))
        out["folds_ok"] = True
    except DrDidScError as err:
        out["folds_ok"] = False
        warn.append(str(err))
    return out


def cmd_simulate(cfg, warn):
    from .simulation import Calibration, DgpSpec, default_estimator_config, monte_carlo

    kind = f"dgp{int(cfg['dgp'])}"
    cal = Calibration.load(cfg["calibration"]) if cfg["calibration"] else None
    spec = DgpSpec(kind=kind, n=int(cfg["n"]), calibration=cal)
    ecfg = estimator_config(cfg)
    if kind == "dgp2" and not ecfg.weights.pt_only:
        warn.append("dgp2 has no identified synthetic control weights; using pt-only weights")
        ecfg = replace(ecfg, weights=replace(ecfg.weights, pt_only=True))
    report = monte_carlo(
        spec,
        reps=int(cfg["reps"]),
        B=int(cfg["boot"]),
        alpha=float(cfg["alpha"]),
        seed=int(cfg["seed"]),
        cfg=ecfg,
        multiplier=cfg["weight_dist"],
    )
    if report.failures:
        warn.append(f"{report.failures} Monte Carlo replication(s) failed")
    out = report.to_dict()
    out["table"] = report.table()
    return out


COMMANDS = {
    "estimate": cmd_estimate,
    "bootstrap": cmd_bootstrap,
    "event-study": cmd_event_study,
    "validate": cmd_validate,
    "simulate": cmd_simulate,
}


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def render(report: dict) -> str:
    return json.dumps(_clean(report), indent=2, sort_keys=False) + "\n"


def run(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors are configuration errors
        return 0 if exc.code == 0 else 3
    report = {"version": __version__, "command": args.command, "config": {}, "results": None, "warnings": [], "timing": {}}
    code = 0
    cfg = {"output": getattr(args, "output", None)}
    start = time.perf_counter()
    try:
        cfg = resolve_config(args)
        report["config"] = {k: v for k, v in cfg.items() if k not in ("output", "timing")}
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            report["results"] = COMMANDS[args.command](cfg, report["warnings"])
        report["warnings"].extend(str(w.message) for w in caught)
    except DrDidScError as err:
        code = err.exit_code
        report["error"] = {"type": type(err).__name__, "message": str(err), "exit_code": code}
        print(f"error: {err}", file=stderr)
    timed = bool(getattr(args, "timing", None))
    report["timing"] = {"seconds": round(time.perf_counter() - start, 3)} if timed else {"recorded": False}
    text = render(report)
    stdout.write(text)
    if cfg.get("output"):
        try:
            Path(cfg["output"]).write_text(text)
        except OSError as err:
            print(f"error: cannot write report: {err}", file=stderr)
            return code or ConfigError.exit_code
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

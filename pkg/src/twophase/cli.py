"""Command-line interface: ``twophase {fit,simulate,subsample,validate}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 every
requested estimator failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys

import numpy as np

from .exceptions import ConfigError, DataError, InputError, TwoPhaseError
from .io import (
    DatasetSchema,
    apply_transforms,
    atomic_write,
    dump_json,
    load_csv,
    quantile_cuts,
    strata_intervals,
    stratified_subsample,
    write_csv,
)
from .models import ModelSpec, OutcomeModel, SelectionModel, WorkingModel
from .schemas import RESULTS_SCHEMA, SIMREPORT_SCHEMA, validate, validate_config

log = logging.getLogger("twophase")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ALL_FAILED = 0, 2, 3, 4


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out-dir", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, help="worker processes for simulations")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="twophase", parents=[common],
                                description="Empirical-likelihood estimation for two-phase outcome-dependent samples.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common], help="fit estimators to a two-phase CSV file")
    sp = sub.add_parser("simulate", parents=[common], help="run a simulation study")
    sp.add_argument("--preset", help="built-in scenario (table1 ... table5)")
    sp.add_argument("--replications", type=int)
    sp.add_argument("--estimators", help="comma-separated estimator names")
    sub.add_parser("subsample", parents=[common], help="draw a stratified Phase-2 subsample from complete data")
    sub.add_parser("validate", parents=[common], help="check a configuration (and its data file)")
    return p


def _load_config(path):
    if path is None:
        return None
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None


def _resolve(args) -> dict:
    config = _load_config(args.config)
    if config is None:
        if args.command == "simulate" and args.preset:
            config = {"mode": "simulate", "scenario": {"preset": args.preset}}
        else:
            raise ConfigError("--config is required")
    config = dict(config)
    config.setdefault("mode", args.command if args.command != "validate" else None)
    if args.command != "validate" and config["mode"] != args.command:
        raise ConfigError(f"config mode {config['mode']!r} does not match command {args.command!r}")
    if args.seed is not None:
        config["seed"] = args.seed
    if args.out_dir is not None:
        config["out_dir"] = args.out_dir
    if args.threads is not None:
        config["threads"] = args.threads
    if args.command == "simulate":
        if args.preset:
            config["scenario"] = {**config.get("scenario", {}), "preset": args.preset}
        if args.replications is not None:
            config["replications"] = args.replications
        if args.estimators:
            config["estimators"] = [e.strip() for e in args.estimators.split(",") if e.strip()]
    config.setdefault("seed", 0)
    config.setdefault("out_dir", ".")
    validate_config(config)
    return config


def _echo(config) -> dict:
    """Resolved config without fields that cannot change results (output location, worker count)."""
    return {k: v for k, v in config.items() if k not in ("out_dir", "threads")}


def _config_comment(config) -> str:
    return "config: " + json.dumps(_echo(config), sort_keys=True, separators=(",", ":"))


# --------------------------------------------------------------------------
# fit


def _columns(names, available, role):
    idx = []
    for nm in names:
        if nm not in available:
            raise ConfigError(f"{role} column {nm!r} is not among the data columns {list(available)}")
        idx.append(available.index(nm))
    return tuple(idx)


def _selection(spec: dict, data, default_form=None, base: SelectionModel | None = None) -> SelectionModel:
    form = spec.get("form", default_form or (base.form if base else None))
    if form is None:
        raise ConfigError("selection needs a 'form'")
    if "strata" in spec:
        strata = strata_intervals(spec["strata"])
    elif "strata_quantiles" in spec:
        cuts = quantile_cuts(data.y, spec["strata_quantiles"])
        edges = (None, *cuts, None)
        pieces = list(zip(edges[:-1], edges[1:]))
        sampled = spec.get("sampled_strata", [0, len(pieces) - 1])
        if any(s >= len(pieces) for s in sampled):
            raise ConfigError("sampled_strata index out of range")
        strata = strata_intervals([pieces[s] for s in sampled])
    else:
        strata = base.strata if base else ()
    x_col = cuts_x = None
    x_linear = ()
    if "x" in spec:
        x_col = _columns([spec["x"]], data.x_names, "selection")[0]
        if "x_cuts" in spec:
            cuts_x = tuple(float(c) for c in spec["x_cuts"])
        elif "x_quantiles" in spec:
            cuts_x = quantile_cuts(data.x[:, x_col], spec["x_quantiles"])
        else:
            raise ConfigError("selection 'x' needs x_cuts or x_quantiles")
    if "x_linear" in spec:
        x_linear = _columns(spec["x_linear"], data.x_names, "selection x_linear")
    alpha = np.asarray(spec["alpha"], dtype=float) if "alpha" in spec else None
    try:
        return SelectionModel(form, strata=strata, x_col=x_col, x_cuts=cuts_x or (), x_linear=x_linear, alpha=alpha)
    except InputError as exc:
        raise ConfigError(f"selection model: {exc}") from None


def _fit_models(config, data) -> ModelSpec:
    o, w = config["outcome"], config["working"]
    outcome = OutcomeModel(o["family"], _columns(o.get("x", []), data.x_names, "outcome"),
                           _columns(o.get("z", []), data.z_names, "outcome"))
    working = WorkingModel(w["family"], _columns(w.get("x", []), data.x_names, "working"))
    selection = _selection(config["selection"], data)
    ps = _selection(config["selection_ps"], data, base=selection) if "selection_ps" in config else None
    return ModelSpec(outcome, working, selection, ps)


def _diag(res) -> dict:
    d = {"iterations": int(res.iterations), "grad_norm": float(res.grad_norm)}
    if res.residual is not None:
        d["constraint_residual"] = float(res.residual)
    for k in ("status", "variance", "zero_prob", "multimodal", "condition_warnings"):
        if k in res.diagnostics:
            d[k] = res.diagnostics[k]
    if res.alpha is not None:
        d["alpha"] = [float(a) for a in np.atleast_1d(res.alpha)]
    if res.theta is not None:
        d["theta"] = [float(t) for t in np.atleast_1d(res.theta)]
    if res.p is not None:
        d["sum_p"] = float(np.sum(res.p))
    return d


def run_fit(config) -> int:
    from .estimators import ESTIMATORS, run_estimator
    from .inference import wald_summary

    unknown = [e for e in config["estimators"] if e not in ESTIMATORS]
    if unknown:
        raise ConfigError(f"unknown estimators {unknown}; choose from {sorted(ESTIMATORS)}")
    dconf = config["data"]
    raw_schema = DatasetSchema.from_dict({k: v for k, v in dconf.items() if k != "path"} | {"strata": ()})
    raw = load_csv(dconf["path"], raw_schema)
    data, record = apply_transforms(raw, raw_schema)
    models = _fit_models(config, data)
    if "strata" in dconf and tuple(strata_intervals(dconf["strata"])) != tuple(models.selection.support):
        raise ConfigError("data strata and selection strata disagree")
    try:
        data = data.with_support(models.selection.support)
    except InputError as exc:
        raise DataError(str(exc)) from None
    level = config.get("level", 0.95)
    el_opts = {"multimodal_check": config.get("multimodal_check", True), "seed": int(config["seed"])}
    results = {}
    for name in config["estimators"]:
        try:
            res = run_estimator(name, data, models, **el_opts)
            rows = wald_summary(res, level=level)
            results[name] = {
                "status": "ok",
                "parameters": list(res.beta_names),
                "estimate": [float(v) for v in res.beta],
                "se": [float(v) for v in res.se],
                "p_value": [None if not math.isfinite(r.p_value) else float(r.p_value) for r in rows],
                "covariance": np.asarray(res.covariance, dtype=float).tolist(),
                "diagnostics": _diag(res),
            }
        except TwoPhaseError as exc:
            log.warning("%s failed: %s", name, exc)
            results[name] = {"status": "failed", "error_type": type(exc).__name__, "message": str(exc)}
    report = {
        "config": _echo(config),
        "seed": int(config["seed"]),
        "transforms": record.to_dict(),
        "data_summary": {"n": int(data.n), "phase2": int(data.m)},
        "selection": {"support": [[_bound(iv.lo), _bound(iv.hi)] for iv in models.selection.support],
                      "ps_cuts": list(models.selection_ps.x_cuts) if models.selection_ps else None},
        "results": results,
    }
    report = json.loads(json.dumps(report, default=_jsonable))
    validate(report, RESULTS_SCHEMA)
    out = config["out_dir"]
    atomic_write(os.path.join(out, "results.json"), dump_json(report))
    atomic_write(os.path.join(out, "results.csv"), _results_csv(config, results))
    if all(r["status"] == "failed" for r in results.values()):
        return EXIT_ALL_FAILED
    return EXIT_OK


def _bound(v):
    return None if math.isinf(v) else float(v)


def _jsonable(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _results_csv(config, results) -> str:
    buf = io.StringIO()
    buf.write(f"# {_config_comment(config)}\n")
    w = csv.writer(buf, lineterminator="\n")
    names = next((r["parameters"] for r in results.values() if r["status"] == "ok"), [])
    w.writerow(["method", "statistic", *names])
    for method, r in results.items():
        if r["status"] != "ok":
            continue
        w.writerow([method, "Estimate", *(f"{v:.6g}" for v in r["estimate"])])
        w.writerow([method, "S.E.", *(f"{v:.6g}" for v in r["se"])])
        w.writerow([method, "p-value", *("" if v is None else f"{v:.3g}" for v in r["p_value"])])
    return buf.getvalue()


# --------------------------------------------------------------------------
# simulate


def _scenario(config):
    from .simulation import PRESETS, ScenarioConfig, preset

    sc = dict(config["scenario"])
    name = sc.pop("preset", None)
    for k in ("beta0", "alpha0", "x_cuts", "strata"):
        if k in sc:
            sc[k] = tuple(sc[k])
    extra = {"master_seed": int(config["seed"])}
    if "replications" in config:
        extra["replications"] = int(config["replications"])
    if "estimators" in config:
        extra["estimators"] = tuple(config["estimators"])
    try:
        if name is not None:
            if name not in PRESETS:
                raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
            return preset(name, **sc, **extra)
        return ScenarioConfig(**sc, **extra)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _cell(s, j):
    def f(a):
        return "NA" if a is None else f"{a[j]:.4f}"

    return f"{f(s.bias)} ({f(s.ese)}) {{{f(s.ase)}}} <{f(s.coverage)}>"


def simreport_csv(config, report) -> str:
    buf = io.StringIO()
    buf.write(f"# {_config_comment(config)}\n")
    buf.write("# cells: bias (empirical SE) {average estimated SE} <95% coverage>\n")
    w = csv.writer(buf, lineterminator="\n")
    first = next(iter(report.summaries.values()))
    w.writerow(["estimator", *(f"{p}={t:g}" for p, t in zip(first.names, first.truth)), "n_success", "n_failed"])
    for name, s in report.summaries.items():
        w.writerow([name, *(_cell(s, j) for j in range(len(s.names))), s.n_success, s.n_failed])
    return buf.getvalue()


def run_simulate(config) -> int:
    from .estimators import ESTIMATORS
    from .simulation import run_replications

    scenario = _scenario(config)
    unknown = [e for e in scenario.estimators if e not in ESTIMATORS]
    if unknown:
        raise ConfigError(f"unknown estimators {unknown}; choose from {sorted(ESTIMATORS)}")
    report = run_replications(scenario, workers=int(config.get("threads", 1)))
    payload = {"run_config": _echo(config), **report.to_dict()}
    validate(payload, SIMREPORT_SCHEMA)
    out = config["out_dir"]
    atomic_write(os.path.join(out, "simreport.json"), dump_json(payload))
    atomic_write(os.path.join(out, "simreport.csv"), simreport_csv(config, report))
    if all(s.n_success == 0 for s in report.summaries.values()):
        return EXIT_ALL_FAILED
    return EXIT_OK


# --------------------------------------------------------------------------
# subsample


def run_subsample(config) -> int:
    dconf = config["data"]
    schema = DatasetSchema.from_dict({k: v for k, v in dconf.items() if k != "path"})
    raw = load_csv(dconf["path"], schema)
    data, record = apply_transforms(raw, schema)
    res = stratified_subsample(data, config.get("strata_quantiles", [0.25, 0.75]), config["alpha"],
                               config.get("sampled_strata"), int(config["seed"]))
    out = config["out_dir"]
    r_name = dconf.get("r") or "r"
    write_csv(res.dataset, os.path.join(out, "twophase.csv"), r_column=r_name, comments=[_config_comment(config)])
    meta = {
        "config": _echo(config),
        "seed": int(config["seed"]),
        "transforms": record.to_dict(),
        "cuts": list(res.cuts),
        "sampled_strata": list(res.sampled),
        "support": [[_bound(lo), _bound(hi)] for lo, hi in (res.strata[s] for s in res.sampled)],
        "alpha": list(res.alpha),
        "counts": res.counts,
    }
    atomic_write(os.path.join(out, "subsample.json"), dump_json(meta))
    return EXIT_OK


def run_validate(config) -> int:
    mode = config["mode"]
    if mode in ("fit", "subsample"):
        dconf = config["data"]
        schema = DatasetSchema.from_dict({k: v for k, v in dconf.items() if k != "path"} | (
            {"strata": ()} if mode == "fit" else {}))
        data, _ = apply_transforms(load_csv(dconf["path"], schema), schema)
        if mode == "fit":
            _fit_models(config, data)
    else:
        _scenario(config)
    return EXIT_OK


COMMANDS = {"fit": run_fit, "simulate": run_simulate, "subsample": run_subsample, "validate": run_validate}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _resolve(args)
        mode = "validate" if args.command == "validate" else config["mode"]
        code = COMMANDS[mode](config)
    except (ConfigError, InputError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if code == EXIT_OK and args.command == "validate":
        print("ok")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

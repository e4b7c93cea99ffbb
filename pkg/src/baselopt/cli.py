"""Command-line front end.

Subcommands::

    baselopt simulate    write a simulated scenario panel CSV
    baselopt risk        evaluate every risk measure at given weights
    baselopt optimize    run an ADM driver, write a JSON report and weights CSV
    baselopt oracle      convex / enumeration / prox-grid references
    baselopt export-mip  write an LP-format model and print its size

Exit codes: 0 success, 1 usage or I/O error, 2 ADM hit ``max_iter``,
3 infeasible setup, 4 oracle budget exceeded.

Every run is described by a JSON config (``"schema": "baselopt.config/1"``);
command-line flags override file values. JSON outputs are written with
sorted keys and without wall-clock times (unless ``--timing``), so fixed
seeds give byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import oracles as orc
from . import prox as px
from . import risk_measures as rm
from .adm import AdmParams, make_problem, solve_max_return, solve_mean_rho, solve_mean_rho_basel
from .market_sim import SimulationError, build_panel, load_params, preset
from .qp import InfeasibleModel
from .scenario_data import (PanelError, Partition, ScenarioPanel, dedup_rows, load_panel_csv,
                            loss_vector, write_panel_csv)

EXIT_OK, EXIT_USAGE, EXIT_MAX_ITER, EXIT_INFEASIBLE, EXIT_BUDGET = 0, 1, 2, 3, 4
CONFIG_SCHEMA = "baselopt.config/1"

DEFAULTS = {
    "schema": CONFIG_SCHEMA,
    "problem": "mean_rho_basel",
    "rho": "variance",
    "basel": None,
    "alpha": 0.99,
    "alpha3": 0.98,
    "k": 3.0,
    "ell": None,
    "C0": 0.2,
    "b0": None,
    "r0": None,
    "r0_quantile": 0.8,
    "panel": None,
    "m1": None,
    "m2": None,
    "simulate": None,
    "adm": {},
    "seed": 0,
    "out": None,
    "weights_out": None,
}
SIMULATE_DEFAULTS = {"normal": "normal", "stressed": "stressed", "d": 10, "m1": 3, "m2": 3,
                     "window_len": 30}


class CliError(Exception):
    """Error that maps to a process exit code."""

    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


# --- I/O helpers -------------------------------------------------------------

def _schema(name: str) -> dict:
    text = resources.files("baselopt").joinpath(f"schemas/{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate(doc: dict, name: str) -> None:
    """Validate ``doc`` against a shipped schema; raises :class:`CliError`."""
    try:
        jsonschema.validate(doc, _schema(name))
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise CliError(f"{name} document invalid at {where}: {exc.message}") from exc


def dumps(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_atomic(path, text: str) -> None:
    """Write ``text`` to a temporary sibling, then rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(doc: dict, schema: str, path=None) -> None:
    validate(doc, schema)
    text = dumps(doc)
    if path:
        write_atomic(path, text)
    else:
        sys.stdout.write(text)


def _floats(text: str, what: str) -> np.ndarray:
    try:
        vals = np.array([float(t) for t in text.split(",") if t.strip()], dtype=float)
    except ValueError as exc:
        raise CliError(f"{what}: expected comma-separated numbers ({exc})") from exc
    if vals.size == 0 or not np.all(np.isfinite(vals)):
        raise CliError(f"{what}: expected finite comma-separated numbers")
    return vals


def read_weights(path) -> np.ndarray:
    """Weights from a CSV with header ``asset,weight``."""
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise CliError(f"cannot read weights {path}: {exc}") from exc
    if not rows or [h.strip() for h in rows[0]] != ["asset", "weight"]:
        raise CliError(f"weights file {path} must have header 'asset,weight'")
    try:
        return np.array([float(r[1]) for r in rows[1:]], dtype=float)
    except (ValueError, IndexError) as exc:
        raise CliError(f"malformed weights file {path}: {exc}") from exc


def weights_csv(u, names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["asset", "weight"])
    for name, val in zip(names, u):
        w.writerow([name, f"{val:.17g}"])
    return buf.getvalue()


# --- configuration -----------------------------------------------------------

def _layer(cfg: dict, layer: dict, source: str) -> None:
    """Merge one config layer; an explicit ``r0`` replaces the quantile rule and vice versa."""
    layer = {k: v for k, v in layer.items() if v is not None or k in ("r0", "r0_quantile", "ell")}
    if layer.get("r0") is not None and layer.get("r0_quantile") is not None:
        raise CliError(f"{source}: give exactly one of r0 and r0_quantile")
    if layer.get("r0") is not None:
        cfg["r0_quantile"] = None
    if layer.get("r0_quantile") is not None:
        cfg["r0"] = None
    for key, val in layer.items():
        if key in ("adm", "simulate") and isinstance(val, dict):
            cfg[key] = {**(cfg.get(key) or {}), **val}
        elif val is not None or key not in ("r0", "r0_quantile"):
            cfg[key] = val


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the config file (schema-checked), then flag overrides."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}") from exc
        validate(doc, "config")
        _layer(cfg, doc, str(path))
    if overrides:
        _layer(cfg, {k: v for k, v in overrides.items() if v is not None}, "command line")
    return resolve(cfg)


def resolve(cfg: dict) -> dict:
    """Fill dependent defaults and check that the choices fit together."""
    validate(cfg, "config")
    problem, rho, basel = cfg["problem"], cfg["rho"], cfg["basel"]
    if problem == "mean_rho_basel":
        basel = basel or "basel3"
        if basel == "none":
            raise CliError("problem mean_rho_basel needs basel = basel25 or basel3")
        if rho not in ("variance", "var", "cvar"):
            raise CliError("mean_rho_basel takes rho in {variance, var, cvar}")
        if cfg["C0"] is None:
            raise CliError("mean_rho_basel needs a capital bound C0")
    elif basel not in (None, "none"):
        raise CliError(f"basel = {basel} only applies to problem mean_rho_basel")
    else:
        basel = "none"
    if problem == "max_return":
        if cfg["b0"] is None:
            raise CliError("max_return needs a risk budget b0")
        cfg["r0"] = cfg["r0_quantile"] = None
    elif (cfg["r0"] is None) == (cfg["r0_quantile"] is None):
        raise CliError("give exactly one of r0 and r0_quantile")
    cfg["basel"] = basel
    if cfg["ell"] is None:
        # the Basel III experiments use ell = 6, Basel 2.5 ones ell = 3
        cfg["ell"] = 6.0 if "basel3" in (basel, rho) else 3.0
    if cfg["panel"] is None:
        cfg["simulate"] = {**SIMULATE_DEFAULTS, **(cfg["simulate"] or {})}
    elif cfg["simulate"]:
        raise CliError("give either a panel file or a simulate section, not both")
    elif cfg["m1"] is None or cfg["m2"] is None:
        raise CliError("a panel file needs m1 and m2")
    try:
        AdmParams(**cfg["adm"])
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid adm settings: {exc}") from exc
    validate(cfg, "config")
    return cfg


def risk_params(cfg: dict) -> rm.RiskParams:
    try:
        return rm.RiskParams(alpha=cfg["alpha"], k=cfg["k"], ell=cfg["ell"], alpha3=cfg["alpha3"])
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _kou(source: str, d: int):
    if source.endswith(".json") or os.path.sep in source:
        try:
            params = load_params(source)
        except OSError as exc:
            raise CliError(f"cannot read parameters {source}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"parameters {source} are not valid JSON: {exc}") from exc
        if params.d != d:
            raise CliError(f"parameters {source} describe {params.d} assets, expected d = {d}")
        return params
    return preset(source, d)


def simulate_panel(sim: dict, seed: int) -> ScenarioPanel:
    d = sim["d"]
    names = tuple(f"asset_{j + 1}" for j in range(d))
    return build_panel(_kou(sim["normal"], d), _kou(sim["stressed"], d), sim["m1"], sim["m2"],
                       sim["window_len"], seed, names)


def panel_of(cfg: dict) -> ScenarioPanel:
    if cfg["panel"] is not None:
        return load_panel_csv(cfg["panel"], cfg["m1"], cfg["m2"])
    return simulate_panel(cfg["simulate"], cfg["seed"])


def target_return(cfg: dict, panel: ScenarioPanel):
    """``r0`` as given, or the configured quantile of the asset sample means."""
    if cfg["problem"] == "max_return":
        return None
    if cfg["r0"] is not None:
        return float(cfg["r0"])
    return float(np.quantile(panel.column_means(), cfg["r0_quantile"]))


# --- subcommands -------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if cfg["panel"] is not None:
        raise CliError("simulate builds a panel; drop the panel setting")
    panel = simulate_panel(cfg["simulate"], cfg["seed"])
    buf = Path(args.out)
    buf.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=buf.parent, prefix=f".{buf.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write_panel_csv(panel, tmp)
        os.replace(tmp, buf)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    _emit({"schema": "baselopt.simulate/1", "n": panel.n, "n_s": list(panel.sizes), "d": panel.d,
           "m1": panel.m1, "m2": panel.m2, "seed": cfg["seed"], "path": str(args.out)}, "simulate")
    return EXIT_OK


def risk_report(panel: ScenarioPanel, u, params: rm.RiskParams, ell3: float | None = None) -> dict:
    """Every risk measure of ``x(u)`` plus the tail indices used.

    ``params.ell`` enters Basel 2.5; Basel III uses ``ell3`` when given.
    """
    u = np.asarray(u, dtype=float)
    if u.size != panel.d:
        raise CliError(f"weights have {u.size} entries, panel has {panel.d} assets")
    x = loss_vector(panel, u)
    p3 = params if ell3 is None else rm.RiskParams(params.alpha, params.k, ell3, params.alpha3)
    out = {
        "schema": "baselopt.risk/1",
        "weights": [float(v) for v in u],
        "variance": rm.variance(x.values),
        "var": rm.var_at(x.values, params.alpha),
        "cvar": rm.cvar_at(x.values, params.alpha),
        "basel2": rm.basel2(x, params) if panel.m1 >= 1 else None,
        "basel25": rm.basel25(x, params) if panel.m1 >= 1 and panel.m2 >= 1 else None,
        "basel3": rm.basel3(x, p3) if panel.m2 >= 1 else None,
        "p": rm.tail_index(params.alpha, panel.n),
        "p_s": rm.block_tail_indices(panel.sizes, params.alpha),
        "p_s3": rm.block_tail_indices(panel.sizes, params.alpha3),
        "params": {"alpha": params.alpha, "alpha3": params.alpha3, "k": params.k,
                   "ell": params.ell, "ell3": p3.ell},
    }
    return out


def cmd_risk(args) -> int:
    panel = load_panel_csv(args.panel, args.m1, args.m2)
    if args.weights and args.u:
        raise CliError("give at most one of --weights and --u")
    if args.weights:
        u = read_weights(args.weights)
    elif args.u:
        u = _floats(args.u, "--u")
    else:
        u = np.full(panel.d, 1.0 / panel.d)
    try:
        params = rm.RiskParams(alpha=args.alpha, k=args.k, ell=args.ell, alpha3=args.alpha3)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    _emit(risk_report(panel, u, params, args.ell3), "risk", args.out)
    return EXIT_OK


def check_bound(cfg: dict, panel: ScenarioPanel, params: rm.RiskParams, r0) -> None:
    """Raise :class:`InfeasibleModel` when a convex capital/risk bound is out of reach.

    Covers the Basel III cap and the variance/CVaR/Basel III budgets, whose
    smallest attainable value is a convex program. The VaR-based bounds
    are not checked.
    """
    if cfg["problem"] == "mean_rho_basel" and cfg["basel"] == "basel3":
        what, bound = "capital bound C0", cfg["C0"]
        low = orc.mean_rho_reference(panel, "basel3", params, r0).objective
    elif cfg["problem"] == "max_return" and cfg["rho"] in ("variance", "cvar", "basel3"):
        what, bound = "risk budget b0", cfg["b0"]
        low = orc.mean_rho_reference(panel, cfg["rho"], params, None).objective
    else:
        return
    if low > bound + 1e-9 * max(1.0, abs(bound)):
        raise InfeasibleModel(f"{what} = {bound:.6g} is below the smallest attainable value {low:.6g}")


def solve(cfg: dict, panel: ScenarioPanel | None = None):
    """Check the bound, run the configured driver; returns ``(report, r0, panel)``."""
    panel = panel if panel is not None else panel_of(cfg)
    params = risk_params(cfg)
    r0 = target_return(cfg, panel)
    check_bound(cfg, panel, params, r0)
    adm = AdmParams(**cfg["adm"])
    if cfg["problem"] == "mean_rho_basel":
        rep = solve_mean_rho_basel(panel, cfg["rho"], cfg["basel"], params, cfg["C0"], r0, adm)
    elif cfg["problem"] == "mean_rho":
        rep = solve_mean_rho(panel, cfg["rho"], params, r0, adm)
    else:
        rep = solve_max_return(panel, cfg["rho"], params, cfg["b0"], adm)
    return rep, r0, panel


def report_document(rep, r0, cfg, timing=False) -> dict:
    doc = rep.to_dict()
    if not timing:
        doc.pop("wall_time")
    doc["schema"] = "baselopt.report/1"
    doc["r0"] = r0
    doc["config"] = cfg
    return doc


def _optimize_one(cfg: dict, timing: bool) -> tuple:
    """One optimisation; returns ``(exit code, message)``. Used directly and by the batch pool."""
    try:
        rep, r0, panel = solve(cfg)
    except InfeasibleModel as exc:
        return EXIT_INFEASIBLE, _infeasible(exc)
    except (PanelError, SimulationError, ValueError) as exc:
        return EXIT_USAGE, str(exc)
    except CliError as exc:
        return exc.code, str(exc)
    doc = report_document(rep, r0, cfg, timing)
    validate(doc, "report")
    if cfg["out"]:
        write_atomic(cfg["out"], dumps(doc))
    else:
        sys.stdout.write(dumps(doc))
    if cfg["weights_out"]:
        names = panel.asset_names or [f"asset_{j + 1}" for j in range(panel.d)]
        write_atomic(cfg["weights_out"], weights_csv(rep.weights, names))
    code = EXIT_OK if rep.converged else EXIT_MAX_ITER
    return code, None if rep.converged else f"ADM stopped at max_iter = {rep.iterations}"


def _seeds(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = (int(t) for t in part.split("-", 1))
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError as exc:
            raise CliError(f"--seeds: cannot parse {part!r}") from exc
    if not out:
        raise CliError("--seeds is empty")
    return out


def cmd_optimize(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    if not args.seeds:
        code, msg = _optimize_one(cfg, args.timing)
        if msg:
            _warn(msg)
        return code
    seeds = _seeds(args.seeds)
    for key in ("out", "weights_out"):
        if cfg[key] and "{seed}" not in cfg[key]:
            raise CliError(f"batch runs need '{{seed}}' in the {key} path")
    if not cfg["out"]:
        raise CliError("batch runs need an --out path containing '{seed}'")
    jobs = []
    for seed in seeds:
        c = {**cfg, "seed": seed}
        c["out"] = cfg["out"].replace("{seed}", str(seed))
        if cfg["weights_out"]:
            c["weights_out"] = cfg["weights_out"].replace("{seed}", str(seed))
        jobs.append(c)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_optimize_one, jobs, [args.timing] * len(jobs)))
    else:
        results = [_optimize_one(c, args.timing) for c in jobs]
    for seed, (code, msg) in zip(seeds, results):
        if msg:
            _warn(f"seed {seed}: {msg}")
    return max(code for code, _ in results)


def _gap(problem, oracle_obj, report_obj):
    scale = max(abs(oracle_obj), 1e-300)
    if problem == "max_return":
        return (oracle_obj - report_obj) / scale
    return (report_obj - oracle_obj) / scale


def _compare(doc, cfg, panel, r0, params, u_oracle, report_path):
    """Objective gap and feasibility deltas of a saved report against the oracle point."""
    try:
        rep = json.loads(Path(report_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read report {report_path}: {exc}") from exc
    validate(rep, "report")
    u = np.asarray(rep["weights"], dtype=float)
    if u.size != panel.d:
        raise CliError("report weights do not match the panel")
    basel = cfg["basel"] if cfg["problem"] == "mean_rho_basel" else None
    bound = cfg["C0"] if basel else cfg["b0"]
    prob = make_problem(cfg["problem"], panel, cfg["rho"], params, basel=basel, bound=bound,
                        r0=r0)
    obj = prob.objective(u)
    doc["report_objective"] = obj
    doc["gap"] = _gap(cfg["problem"], doc["objective"], obj)
    c = prob.constraint(u)
    doc["report_constraint_excess"] = None if c is None else c - bound
    c = prob.constraint(u_oracle)
    doc["oracle_constraint_excess"] = None if c is None else c - bound
    doc["return_delta"] = None if r0 is None else float(prob.mu @ u - r0)


def cmd_oracle(args) -> int:
    if args.which == "prox-grid":
        return _prox_grid(args)
    cfg = load_config(args.config, _overrides(args))
    panel = panel_of(cfg)
    params = risk_params(cfg)
    r0 = target_return(cfg, panel)
    problem, rho, basel = cfg["problem"], cfg["rho"], cfg["basel"]
    doc = {"schema": "baselopt.oracle/1", "oracle": args.which}
    if args.which == "convex":
        if problem == "mean_rho_basel":
            if basel != "basel3":
                raise CliError("the convex reference needs basel = basel3")
            ref = orc.convex_reference(panel, rho=rho, params=params, C0=cfg["C0"], r0=r0)
        elif problem == "mean_rho":
            ref = orc.mean_rho_reference(panel, rho, params, r0)
        else:
            ref = orc.max_return_reference(panel, rho, params, cfg["b0"])
        u, doc["objective"] = ref.u, float(ref.objective)
    else:
        if rho != "var" or problem == "max_return":
            raise CliError("enumeration covers mean-VaR problems (rho = var)")
        if problem == "mean_rho_basel":
            res = orc.mean_var_enumerate(dedup_rows(panel), params.alpha, r0, panel.column_means(),
                                         panel, basel, params, cfg["C0"])
        else:
            res = orc.mean_var_enumerate(panel.matrix, params.alpha, r0, panel.column_means(),
                                         params=params)
        u, doc["objective"], doc["n_lps"] = res["u"], float(res["objective"]), res["n_lps"]
    doc["weights"] = [float(v) for v in u]
    if args.report:
        _compare(doc, cfg, panel, r0, params, u, args.report)
    _emit(doc, "oracle", args.out)
    return EXIT_OK


def _prox_grid(args) -> int:
    if not args.operator:
        raise CliError("prox-grid needs --operator")
    if args.operator not in orc.OPERATORS:
        raise CliError(f"unknown operator {args.operator!r}; choose from {sorted(orc.OPERATORS)}")
    if args.anchor is None:
        raise CliError("prox-grid needs --anchor")
    v = _floats(args.anchor, "--anchor")
    try:
        params = rm.RiskParams(alpha=args.alpha or 0.99, k=3.0 if args.k is None else args.k,
                               ell=3.0 if args.ell is None else args.ell, alpha3=args.alpha3 or 0.98)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    partition = None
    if args.sizes:
        sizes = tuple(int(s) for s in _floats(args.sizes, "--sizes"))
        if args.m1 is None or args.m2 is None:
            raise CliError("--sizes needs --m1 and --m2")
        partition = Partition(sizes, args.m1, args.m2)
    measure, mode = orc.OPERATORS[args.operator]
    if mode == "ball" and args.b0 is None:
        raise CliError(f"{args.operator} needs a bound --b0")
    req = orc.ProxRequest(v, args.sigma, params, partition, args.b0)
    point, value = orc.prox_grid_oracle(req, args.operator)
    if mode == "prox":
        if measure in ("basel25", "basel3"):
            op = px.prox_basel(v, partition, params, args.sigma, measure)
        else:
            op = px.prox(measure, v, args.sigma, params, partition)
    elif measure in ("basel25", "basel3"):
        op = px.project_basel(v, partition, params, args.b0, measure)
    else:
        op = px.project_ball(measure, v, args.b0, params, partition)
    op_value = float(orc.subproblem_objective(req, args.operator, op)[0])
    doc = {"schema": "baselopt.oracle/1", "oracle": "prox-grid", "operator": args.operator,
           "point": [float(t) for t in point], "objective": float(value),
           "operator_point": [float(t) for t in op], "operator_objective": op_value,
           "max_coord_error": float(np.max(np.abs(np.asarray(op) - point)))}
    _emit(doc, "oracle", args.out)
    return EXIT_OK


def cmd_export_mip(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    variant = args.variant
    if variant is None:
        if cfg["problem"] != "mean_rho_basel":
            raise CliError("export-mip needs --variant or a mean_rho_basel config")
        variant = f"{cfg['rho']}_{cfg['basel']}"
    if variant not in orc.VARIANTS:
        raise CliError(f"unsupported variant {variant!r}; choose from {orc.VARIANTS}")
    panel = panel_of(cfg)
    r0 = target_return(cfg, panel) if cfg["problem"] != "max_return" else None
    model = orc.export_mip(variant, panel, args.lp, params=risk_params(cfg), C0=cfg["C0"], r0=r0,
                           cheap_eta=args.cheap_eta)
    doc = {"schema": "baselopt.mip/1", **model.to_dict(), "path": args.lp}
    _emit(doc, "mip", args.out)
    return EXIT_OK


# --- argument parsing --------------------------------------------------------

_CONFIG_FLAGS = ("problem", "rho", "basel", "alpha", "alpha3", "k", "ell", "C0", "b0", "r0",
                 "r0_quantile", "panel", "m1", "m2", "seed", "out", "weights_out")
_SIM_FLAGS = ("normal", "stressed", "d", "window_len", "sim_m1", "sim_m2")
_ADM_FLAGS = ("sigma1", "sigma2", "beta1", "beta2", "tol_feas", "tol_u", "max_iter", "rule")


def _overrides(args) -> dict:
    out = {k: getattr(args, k, None) for k in _CONFIG_FLAGS}
    sim = {}
    for key in _SIM_FLAGS:
        val = getattr(args, key, None)
        if val is not None:
            sim[key.replace("sim_", "")] = val
    if sim:
        out["simulate"] = sim
    adm = {k: getattr(args, k) for k in _ADM_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "published", False):
        adm = {**asdict(AdmParams.published()), **adm}
    if getattr(args, "no_normalise", False):
        adm["normalise"] = False
    if adm:
        out["adm"] = adm
    return out


def _add_config_flags(p, solver=True):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--problem", choices=["mean_rho_basel", "mean_rho", "max_return"])
    p.add_argument("--rho", choices=["variance", "var", "cvar", "basel25", "basel3"])
    p.add_argument("--basel", choices=["basel25", "basel3", "none"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--alpha3", type=float)
    p.add_argument("--k", type=float)
    p.add_argument("--ell", type=float, help="Basel multiplier (default 6 with Basel III, else 3)")
    p.add_argument("--C0", type=float, help="capital bound")
    p.add_argument("--b0", type=float, help="risk budget of max_return")
    p.add_argument("--r0", type=float, help="target return")
    p.add_argument("--r0-quantile", dest="r0_quantile", type=float,
                   help="target return as a quantile of the asset sample means (default 0.8)")
    p.add_argument("--panel", help="panel CSV; otherwise a panel is simulated")
    p.add_argument("--m1", type=int, help="normal blocks in the panel file")
    p.add_argument("--m2", type=int, help="stressed blocks in the panel file")
    p.add_argument("--seed", type=int)
    g = p.add_argument_group("simulation")
    g.add_argument("--normal", help="preset name or parameter JSON for the normal regime")
    g.add_argument("--stressed", help="preset name or parameter JSON for the stressed regime")
    g.add_argument("--d", type=int, help="number of assets")
    g.add_argument("--window-len", dest="window_len", type=int)
    g.add_argument("--sim-m1", dest="sim_m1", type=int, help="simulated normal windows")
    g.add_argument("--sim-m2", dest="sim_m2", type=int, help="simulated stressed windows")
    if solver:
        a = p.add_argument_group("ADM")
        for name in ("sigma1", "sigma2", "beta1", "beta2"):
            a.add_argument(f"--{name}", type=float)
        a.add_argument("--tol-feas", dest="tol_feas", type=float)
        a.add_argument("--tol-u", dest="tol_u", type=float)
        a.add_argument("--max-iter", dest="max_iter", type=int)
        a.add_argument("--rule", choices=["both", "either"])
        a.add_argument("--no-normalise", dest="no_normalise", action="store_true")
        a.add_argument("--published", action="store_true",
                       help="use the original fixed penalties and stopping rule")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="baselopt", description="Portfolio selection under Basel capital rules.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a simulated panel CSV")
    _add_config_flags(p, solver=False)
    p.add_argument("--out", required=True, help="panel CSV path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("risk", help="risk measures at given weights")
    p.add_argument("--panel", required=True)
    p.add_argument("--m1", type=int, required=True)
    p.add_argument("--m2", type=int, required=True)
    p.add_argument("--weights", help="weights CSV (asset,weight)")
    p.add_argument("--u", help="comma-separated weights; default equal weights")
    p.add_argument("--alpha", type=float, default=0.99)
    p.add_argument("--alpha3", type=float, default=0.98)
    p.add_argument("--k", type=float, default=3.0)
    p.add_argument("--ell", type=float, default=3.0, help="Basel 2.5 multiplier")
    p.add_argument("--ell3", type=float, default=6.0, help="Basel III multiplier")
    p.add_argument("--out", help="JSON path (default stdout)")
    p.set_defaults(func=cmd_risk)

    p = sub.add_parser("optimize", help="run an ADM driver")
    _add_config_flags(p)
    p.add_argument("--out", help="report JSON path (default stdout); may contain {seed}")
    p.add_argument("--weights-out", dest="weights_out", help="weights CSV path; may contain {seed}")
    p.add_argument("--timing", action="store_true", help="include wall_time in the report")
    p.add_argument("--seeds", help="batch over seeds, e.g. 0-19 or 1,4,7")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for --seeds")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("oracle", help="reference solutions")
    p.add_argument("--which", choices=["convex", "enumerate", "prox-grid"], required=True)
    _add_config_flags(p, solver=False)
    p.add_argument("--report", help="report JSON to compare against")
    p.add_argument("--operator", help="prox-grid: operator name, e.g. prox_var")
    p.add_argument("--anchor", help="prox-grid: comma-separated anchor vector")
    p.add_argument("--sigma", type=float, default=1.0, help="prox-grid: penalty")
    p.add_argument("--sizes", help="prox-grid: comma-separated block sizes")
    p.add_argument("--out", help="JSON path (default stdout)")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("export-mip", help="write an LP-format model")
    _add_config_flags(p, solver=False)
    p.add_argument("--variant", choices=list(orc.VARIANTS))
    p.add_argument("--lp", help="LP file path; omit to count only")
    p.add_argument("--cheap-eta", dest="cheap_eta", action="store_true",
                   help="big-M from the data range instead of per-row LPs")
    p.add_argument("--out", help="summary JSON path (default stdout)")
    p.set_defaults(func=cmd_export_mip)
    return parser


def _infeasible(exc) -> str:
    msg = str(exc)
    return msg if msg.startswith("target return infeasible") else f"infeasible setup: {msg}"


def _warn(msg: str) -> None:
    print(f"baselopt: {msg}", file=sys.stderr)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise CliError("--jobs must be at least 1")
        return args.func(args)
    except CliError as exc:
        _warn(f"error: {exc}")
        return exc.code
    except InfeasibleModel as exc:
        _warn(f"error: {_infeasible(exc)}")
        return EXIT_INFEASIBLE
    except orc.OracleBudgetExceeded as exc:
        _warn(f"error: oracle budget exceeded: {exc}")
        return EXIT_BUDGET
    except (PanelError, SimulationError, ValueError, OSError) as exc:
        _warn(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

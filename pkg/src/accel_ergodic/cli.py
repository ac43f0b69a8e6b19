"""Command-line front end.

Subcommands read one YAML or JSON config, validate it and write CSV tables,
JSON reports and a manifest into the output directory::

    accel-ergodic ergodic-constant config.yaml --output-dir out
    accel-ergodic mfg-ergodic config.yaml
    accel-ergodic mfg-longtime config.yaml
    accel-ergodic validate-config config.yaml
    accel-ergodic selftest

Exit codes: 0 pass, 2 config error, 3 non-convergence, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import platform
import re
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np
import scipy
import yaml

from . import __version__
from .core import GridMeasure, PhaseGrid
from .fixtures import run_fixtures
from .costs import (MeanFieldCoupling, TerminalCost, TrigKernel, check_monotonicity, field_names,
                    make_field)
from .hjb import solve_discounted, solve_finite_horizon
from .measure_lp import build_ergodic_lp, solve_ergodic, write_mps
from .mfg import (SCHEDULES, energy_diagnostic, long_time_average_experiment, oscillation_report,
                  solve_ergodic_mfg)

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_INVARIANT = 0, 2, 3, 4

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_LIST = {"type": "array", "items": _POS, "minItems": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["problem"],
    "properties": {
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "required": ["field"],
            "properties": {
                "field": {"type": "string"},
                "params": {"type": "object"},
                "coupling": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "strength": {"type": "number", "minimum": 0},
                        "modes": {"type": "array", "items": {"type": "array",
                                                             "items": {"type": "integer"}}},
                        "amplitudes": {"type": "array", "items": _NUM, "minItems": 1},
                    },
                },
                "terminal": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"strength": _NUM},
                },
                "initial": {
                    "oneOf": [
                        {"enum": ["uniform", "rest"]},
                        {"type": "object", "additionalProperties": False, "required": ["x", "v"],
                         "properties": {"x": {"type": "array", "items": _NUM},
                                        "v": {"type": "array", "items": _NUM}}},
                    ],
                },
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d": {"enum": [1, 2]},
                "n_x": {"type": "integer", "minimum": 2},
                "v_max": _POS,
                "n_v": {"type": "integer", "minimum": 3},
                "w_max": _POS,
                "n_w": {"type": "integer", "minimum": 3},
                "h": _POS,
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lp_tol": _POS,
                "vi_tol": _POS,
                "mfg_tol": _POS,
                "time_tol": _POS,
                "max_iter": {"type": "integer", "minimum": 1},
                "damping": {"enum": list(SCHEDULES)},
                "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "horizons": _POS_LIST,
                "deltas": _POS_LIST,
                "radii": _POS_LIST,
                "v_max_sweep": {"type": "array", "items": _POS},
                "threshold": _POS,
                "inits": {"type": "array", "items": {"enum": ["uniform", "rest"]}, "minItems": 1},
                "pair_count": {"type": "integer", "minimum": 1},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["json", "csv", "mps"]}},
            },
        },
    },
}

DEFAULTS = {
    "grid": PhaseGrid().to_dict(),
    "solver": {"lp_tol": 1e-9, "vi_tol": 1e-10, "mfg_tol": 1e-4, "time_tol": 1e-3,
               "max_iter": 200, "damping": "fully_corrective", "beta": 0.5,
               "horizons": [8, 16, 32], "deltas": [0.2, 0.1, 0.05], "radii": [1.0],
               "v_max_sweep": [], "threshold": 0.15, "inits": ["uniform", "rest"],
               "pair_count": 100},
    "output": {"directory": "out", "formats": ["json", "csv"]},
}


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-9`` (no dot) as a float, as JSON and YAML 1.2 do."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"))


class ConfigError(ValueError):
    """A config failed validation; the message names the offending location."""


def _where(path) -> str:
    return ".".join(str(p) for p in path) or "<root>"


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML/JSON: {exc}") from None
    return normalize_config(data)


def normalize_config(data) -> dict:
    """Validate ``data`` and fill defaults; raises :class:`ConfigError`."""
    if not isinstance(data, dict):
        raise ConfigError("<root>: config must be a mapping")
    errors = sorted(jsonschema.Draft7Validator(CONFIG_SCHEMA).iter_errors(data),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigError("; ".join(f"{_where(e.absolute_path)}: {e.message}" for e in errors))
    cfg = copy.deepcopy(DEFAULTS)
    cfg["problem"] = copy.deepcopy(data["problem"])
    for key in ("grid", "solver", "output"):
        cfg[key].update(copy.deepcopy(data.get(key, {})))
    name = cfg["problem"]["field"]
    if name not in field_names():
        raise ConfigError(f"problem.field: unknown field {name!r}; known: {field_names()}")
    for key in ("n_v", "n_w"):
        if cfg["grid"][key] % 2 == 0:
            raise ConfigError(f"grid.{key}: {cfg['grid'][key]} must be odd")
    horizons = cfg["solver"]["horizons"]
    if any(b <= a for a, b in zip(horizons, horizons[1:])):
        raise ConfigError("solver.horizons: must be increasing")
    h = cfg["grid"]["h"]
    for i, T in enumerate(horizons):
        if abs(round(T / h) * h - T) > 1e-9 * T:
            raise ConfigError(f"solver.horizons.{i}: {T} is not a multiple of grid.h={h}")
    for i, delta in enumerate(cfg["solver"]["deltas"]):
        if not 0 < delta * h < 1:
            raise ConfigError(f"solver.deltas.{i}: delta*h must lie in (0, 1)")
    try:
        build_problem(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"problem: {exc}") from None
    return cfg


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON config; the output directory is left out."""
    body = copy.deepcopy(cfg)
    body.get("output", {}).pop("directory", None)
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def build_problem(cfg: dict):
    """``(grid, field, coupling_or_None, terminal, m0)`` from a normalized config."""
    grid = PhaseGrid.from_dict(cfg["grid"])
    prob = cfg["problem"]
    params = dict(prob.get("params", {}))
    params.setdefault("d", grid.d)
    field = make_field(prob["field"], **params)
    coupling = None
    if "coupling" in prob:
        cp = prob["coupling"]
        amps = tuple(float(a) for a in cp.get("amplitudes", (2.0, 2.0)))
        modes = cp.get("modes")
        if modes is None:
            modes = [[0] * grid.d] + [[1] + [0] * (grid.d - 1)] * (len(amps) > 1)
            modes = modes[: len(amps)]
        kernel = TrigKernel(tuple(tuple(int(c) for c in k) for k in modes), amps)
        coupling = MeanFieldCoupling(field, kernel, float(cp.get("strength", 1.0)),
                                     name=prob["field"] + "+coupling")
    terminal = TerminalCost()
    if "terminal" in prob and coupling is not None:
        s = float(prob["terminal"].get("strength", 0.0))
        if s != 0.0:
            terminal = TerminalCost(kernel=coupling.kernel, strength=s,
                                    bound=abs(s) * sum(abs(a) for a in coupling.kernel.amplitudes))
    init = prob.get("initial", "uniform")
    if isinstance(init, dict):
        m0 = GridMeasure.dirac(grid, init["x"], init["v"])
    elif init == "rest":
        m0 = GridMeasure.dirac(grid, np.zeros(grid.d), np.zeros(grid.d))
    else:
        m0 = GridMeasure.uniform(grid)
    return grid, field, coupling, terminal, m0


# --- output helpers ---------------------------------------------------------------

class Writer:
    """Collects report files, writes them in a fixed order plus a manifest."""

    def __init__(self, directory: Path, cfg: dict, command: str):
        self.directory = Path(directory)
        self.cfg = cfg
        self.command = command
        self.files: dict[str, str] = {}

    def json(self, name: str, payload) -> None:
        self.files[name] = json.dumps(_plain(payload), sort_keys=True, indent=2) + "\n"

    def csv(self, name: str, header: list[str], rows) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])
        self.files[name] = buf.getvalue()

    def text(self, name: str, content: str) -> None:
        self.files[name] = content

    def flush(self, grid: PhaseGrid, status: int) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        for name in sorted(self.files):
            (self.directory / name).write_text(self.files[name], encoding="utf-8")
        manifest = {
            "command": self.command,
            "config_sha256": config_hash(self.cfg),
            "config": {**self.cfg, "output": {k: v for k, v in self.cfg["output"].items()
                                              if k != "directory"}},
            "exit_code": status,
            "versions": {"accel_ergodic": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "grid": {**grid.to_dict(), "n_states": grid.n_states, "n_controls": grid.n_controls,
                     "admissible_pairs": int(grid.chain.admissible.sum())},
            "files": {n: hashlib.sha256(self.files[n].encode()).hexdigest()
                      for n in sorted(self.files)},
        }
        (self.directory / "manifest.json").write_text(
            json.dumps(_plain(manifest), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else str(x)
    return obj


def _pool(threads: int):
    return ThreadPoolExecutor(max_workers=max(1, threads))


def _probe(grid: PhaseGrid) -> int:
    return grid.node_index(np.zeros(grid.d), np.zeros(grid.d))


# --- commands ---------------------------------------------------------------------

def cmd_ergodic_constant(cfg: dict, out: Writer, threads: int = 1) -> int:
    """Horizon, discounted and LP routes to the ergodic constant."""
    grid, field, _, _, _ = build_problem(cfg)
    sv = cfg["solver"]
    probe = _probe(grid)
    with _pool(threads) as pool:
        fh = list(pool.map(lambda T: solve_finite_horizon(field, grid, T), sv["horizons"]))
        disc = list(pool.map(lambda d: solve_discounted(field, d, grid, sv["vi_tol"]),
                             sv["deltas"]))
        lp = solve_ergodic(field, grid, sv["lp_tol"])
        sweep = list(pool.map(lambda vm: solve_ergodic(
            make_field(cfg["problem"]["field"], **{"d": grid.d, **cfg["problem"].get("params", {})}),
            PhaseGrid.from_dict({**grid.to_dict(), "v_max": vm}), sv["lp_tol"]), sv["v_max_sweep"]))
    rows = []
    for T, res in zip(sv["horizons"], fh):
        val = res.value.values[probe] / T
        rows.append(["horizon", float(T), val, abs(val - lp.lambda_)])
    for d, rep in zip(sv["deltas"], disc):
        rows.append(["discounted_inf", float(d), rep.min_delta_v, abs(rep.min_delta_v - lp.lambda_)])
        probe_val = d * rep.field.values[probe]
        rows.append(["discounted_probe", float(d), probe_val, abs(probe_val - lp.lambda_)])
    rows.append(["lp", 0.0, lp.lambda_, 0.0])
    lam_h = fh[-1].value.values[probe] / sv["horizons"][-1]
    lam_d = disc[-1].min_delta_v
    gaps = {"horizon_lp": abs(lam_h - lp.lambda_), "discounted_lp": abs(lam_d - lp.lambda_),
            "horizon_discounted": abs(lam_h - lam_d)}
    s, a = np.nonzero(lp.mu.weights)
    x, v = grid.states
    support = [{"x": x[i].tolist(), "v": v[i].tolist(), "w": grid.controls[j].tolist(),
                "weight": float(lp.mu.weights[i, j])} for i, j in zip(s, a)]
    converged = all(r.converged for r in disc)
    dual_ok = lp.relative_gap <= 1e-6
    passed = all(g <= sv["threshold"] for g in gaps.values())
    status = EXIT_OK
    if not converged:
        status = EXIT_NONCONVERGED
    elif not dual_ok:
        status = EXIT_INVARIANT
    elif not passed:
        status = EXIT_INVARIANT
    if "csv" in cfg["output"]["formats"]:
        out.csv("routes.csv", ["route", "parameter", "lambda", "gap_to_lp"], rows)
        if sv["v_max_sweep"]:
            out.csv("v_max_sweep.csv", ["v_max", "lambda_lp", "duality_gap"],
                    [[vm, sol.lambda_, sol.duality_gap] for vm, sol in zip(sv["v_max_sweep"], sweep)])
    if "mps" in cfg["output"]["formats"]:
        lpi = build_ergodic_lp(field, grid)
        buf = io.StringIO()
        _write_mps_text(buf, lpi)
        out.text("ergodic_lp.mps", buf.getvalue())
    out.json("report.json", {
        "field": field.name, "lambda_lp": lp.lambda_, "lambda_dual": lp.lambda_dual,
        "duality_gap": lp.duality_gap, "closedness_residual": lp.residual,
        "lambda_horizon": lam_h, "lambda_discounted": lam_d, "pairwise_gaps": gaps,
        "threshold": sv["threshold"], "pass": passed, "lp_support": support,
        "discounted_iterations": [r.iterations for r in disc],
        "discounted_residual_histories": [r.residual_history for r in disc],
    })
    return status


def _write_mps_text(buf, lp) -> None:
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "lp.mps"
        write_mps(path, lp.cost, lp.A_eq, lp.b_eq)
        buf.write(path.read_text(encoding="ascii"))


def cmd_mfg_ergodic(cfg: dict, out: Writer, threads: int = 1, seed: int = 0) -> int:
    grid, field, coupling, _, _ = build_problem(cfg)
    if coupling is None:
        raise ConfigError("problem.coupling: required for mfg-ergodic")
    sv = cfg["solver"]
    mono = check_monotonicity(coupling, grid, sv["pair_count"], seed)
    with _pool(threads) as pool:
        sols = list(pool.map(lambda init: solve_ergodic_mfg(
            coupling, grid, sv["damping"], sv["mfg_tol"], sv["max_iter"], init, sv["beta"],
            sv["lp_tol"]), sv["inits"]))
    lams = [s.lambda_bar for s in sols]
    spread = max(lams) - min(lams)
    agree = spread <= 2 * sv["mfg_tol"]
    if "csv" in cfg["output"]["formats"]:
        out.csv("mfg_ergodic.csv", ["init", "lambda_bar", "exploitability", "fixed_point_residual",
                                    "iterations", "converged"],
                [[i, s.lambda_bar, s.exploitability, s.fixed_point_residual, s.iterations,
                  s.converged] for i, s in zip(sv["inits"], sols)])
    out.json("report.json", {
        "monotonicity": {**mono, "warning": not mono["pass"]},
        "runs": [{"init": i, "lambda_bar": s.lambda_bar, "exploitability": s.exploitability,
                  "fixed_point_residual": s.fixed_point_residual, "iterations": s.iterations,
                  "converged": s.converged, "lambda_history": s.lambda_history,
                  "gap_history": s.gap_history, "closedness": s.closedness}
                 for i, s in zip(sv["inits"], sols)],
        "lambda_spread": spread, "agreement": agree, "tol": sv["mfg_tol"],
    })
    if not all(s.converged for s in sols):
        return EXIT_NONCONVERGED
    return EXIT_OK if agree else EXIT_INVARIANT


def _non_increasing(values, slack: float = 1.0, floor: float = 1e-12) -> bool:
    """``b <= slack * a + floor`` for consecutive entries."""
    return all(b <= slack * a + floor for a, b in zip(values, values[1:]))


def cmd_mfg_longtime(cfg: dict, out: Writer, threads: int = 1) -> int:
    grid, field, coupling, terminal, m0 = build_problem(cfg)
    if coupling is None:
        coupling = MeanFieldCoupling(field, TrigKernel(((0,) * grid.d,), (0.0,)), 0.0,
                                     name=field.name)
    sv = cfg["solver"]
    erg = solve_ergodic_mfg(coupling, grid, sv["damping"], sv["mfg_tol"], sv["max_iter"],
                            "uniform", sv["beta"], sv["lp_tol"])
    radius = sv["radii"][0]
    with _pool(threads) as pool:
        rows = list(pool.map(lambda T: long_time_average_experiment(
            coupling, m0, [T], grid, erg.lambda_bar, terminal, radius, tol=sv["time_tol"],
            max_iter=sv["max_iter"], damping=sv["damping"])[0], sv["horizons"]))
    d = grid.d
    expo = (4 * d + 3) / (4 * (d + 1))
    table, energy_ratio, osc_ratio = [], [], []
    for r in rows:
        sol = r["solution"]
        e = energy_diagnostic(sol, erg.m_bar, coupling)
        osc = oscillation_report(sol, radius)
        energy_ratio.append(e["weighted_sup_integral"] / r["T"] ** 0.5)
        osc_ratio.append(osc / r["T"] ** expo)
        table.append([r["T"], r["value0_over_T"], r["gap"], r["sup_probe_gap"],
                      r["rest_probe_gap"], e["E"],
                      e["weighted_sup_integral"], osc, r["iterations"], r["converged"]])
    verdicts = {"gap_decreasing": _non_increasing([r["gap"] for r in rows]),
                "energy_ratio_non_increasing": _non_increasing(energy_ratio, 1.1, 1e-6),
                "oscillation_ratio_non_increasing": _non_increasing(osc_ratio, 1.1, 1e-6)}
    if "csv" in cfg["output"]["formats"]:
        out.csv("longtime.csv", ["T", "value0_over_T", "gap", "sup_probe_gap",
                                 "rest_probe_gap", "energy",
                                 "weighted_sup_integral", "oscillation", "iterations", "converged"],
                table)
        last = rows[-1]["solution"]
        x, v = grid.states
        frames = [[t * grid.h, *x[i], *v[i], last.m_flow[t, i]]
                  for t in range(last.m_flow.shape[0]) for i in np.flatnonzero(last.m_flow[t] > 0)]
        out.csv("m_flow_frames.csv", ["t"] + [f"x{i + 1}" for i in range(d)]
                + [f"v{i + 1}" for i in range(d)] + ["weight"], frames)
    out.json("report.json", {
        "lambda_bar": erg.lambda_bar, "ergodic_converged": erg.converged,
        "rows": [{k: v for k, v in r.items() if k != "solution"} for r in rows],
        "energy_ratio": energy_ratio, "oscillation_ratio": osc_ratio, "verdicts": verdicts,
        "residual_histories": [r["solution"].residual_history for r in rows],
    })
    if not erg.converged or not all(r["converged"] for r in rows):
        return EXIT_NONCONVERGED
    return EXIT_OK if all(verdicts.values()) else EXIT_INVARIANT


# --- entry point ------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="accel-ergodic", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("ergodic-constant", "mfg-ergodic", "mfg-longtime", "validate-config"):
        s = sub.add_parser(name)
        s.add_argument("config", help="YAML or JSON config file")
        s.add_argument("--output-dir", default=None, help="overrides output.directory")
        s.add_argument("--threads", type=int, default=1, help="workers for independent sub-runs")
        s.add_argument("--seed", type=int, default=0, help="seed for sampled checks")
    sub.add_parser("selftest")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "selftest":
        checks = run_fixtures()
        for name, ok in checks:
            print(f"{'PASS' if ok else 'FAIL'}  {name}")
        return EXIT_OK if all(ok for _, ok in checks) else EXIT_INVARIANT
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate-config":
        print(json.dumps(cfg, sort_keys=True, indent=2))
        return EXIT_OK
    if args.output_dir is not None:
        cfg["output"]["directory"] = args.output_dir
    out = Writer(Path(cfg["output"]["directory"]), cfg, args.command)
    grid = PhaseGrid.from_dict(cfg["grid"])
    try:
        if args.command == "ergodic-constant":
            status = cmd_ergodic_constant(cfg, out, args.threads)
        elif args.command == "mfg-ergodic":
            status = cmd_mfg_ergodic(cfg, out, args.threads, args.seed)
        else:
            status = cmd_mfg_longtime(cfg, out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out.flush(grid, status)
    print(f"{args.command}: exit {status}; results in {out.directory}")
    return status


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``legodom simulate|estimate|evaluate|sweep``.

Errors are printed to stderr as one JSON object and the process exits
nonzero (2 for bad input, 1 for runtime failures).
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import jsonschema
import numpy as np

from . import evaluation as ev
from . import logio, runner, sim
from .config import ConfigError, resolve_scenario
from .eskf import FilterError
from .imm import ConfigurationError

TRAJECTORY_FILE = "trajectory.csv"
DIAGNOSTICS_FILE = "diagnostics.csv"
MU_FILE = "mu.csv"
DIAGNOSTICS_COLUMNS = ["t[s]", "trace_P[-]", "innovation_norm[-]", "update_ok[0/1]"]
DEFAULT_TIMING_REPEATS = 1
METRIC_COLUMNS = ("ate_pos[m]", "ate_att[rad]", "rpe_pos[m]", "rpe_att[rad]")

MANIFEST_SCHEMA = {
    "type": "object",
    "properties": {
        "scenarios": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "estimators": {"type": "array", "items": {"enum": list(runner.ESTIMATORS)}, "minItems": 1},
        "seed": {"type": "integer", "minimum": 0},
        "align": {"enum": ["none", "rigid"]},
        "rpe_distance": {"type": "number", "exclusiveMinimum": 0},
        "modes": {"type": "integer", "minimum": 1},
        "alpha": {"type": "array", "items": {"type": "number"}},
        "transition": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "timing_repeats": {"type": "integer", "minimum": 1},
    },
    "required": ["scenarios", "estimators"],
    "additionalProperties": False,
}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _error_payload(exc) -> dict:
    d = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("field", "t"):
        if getattr(exc, attr, None) is not None:
            d[attr] = getattr(exc, attr)
    return d


def parse_alpha(text):
    if text is None:
        return None
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--alpha expects comma-separated numbers, got {text!r}") from None


def parse_transition(text, modes=None):
    """``identity``, a JSON matrix, or a path to a JSON file holding one."""
    if text is None:
        return None
    if text == "identity":
        if modes is None:
            raise UsageError("--transition identity needs --modes or --alpha")
        return np.eye(modes)
    p = Path(text)
    raw = p.read_text(encoding="utf-8") if p.is_file() else text
    try:
        return np.array(json.loads(raw), dtype=float)
    except (json.JSONDecodeError, ValueError):
        raise UsageError(f"--transition expects 'identity', a JSON matrix or a JSON file, got {text!r}") from None


def estimator_options(modes=None, alpha=None, transition=None) -> runner.EstimatorOptions:
    if alpha is not None and modes is None:
        modes = len(alpha)
    if alpha is not None and len(alpha) != modes:
        raise UsageError(f"--alpha has {len(alpha)} values but --modes is {modes}")
    if isinstance(transition, str) or transition is None:
        transition = parse_transition(transition, modes)
    return runner.EstimatorOptions(modes=modes, alpha=alpha, transition=transition)


# simulate ---------------------------------------------------------------

def simulate_to(config_ref, out_dir, seed=None):
    cfg = resolve_scenario(config_ref)
    log = sim.simulate(cfg, seed=seed)
    if seed is not None:
        log.config.seed = seed
    return logio.write_log(log, out_dir)


def cmd_simulate(args):
    paths = simulate_to(args.config, args.out, args.seed)
    print(json.dumps({k: str(v) for k, v in paths.items()}))


# estimate ---------------------------------------------------------------

def estimate_to(log_dir, name, out_dir, options=None, config_ref=None):
    if name not in runner.ESTIMATORS:
        raise runner.UnknownEstimator(name)
    log = logio.read_log(log_dir)
    cfg = resolve_scenario(config_ref) if config_ref else log.config
    if cfg is None:
        raise FileNotFoundError(f"missing log file {Path(log_dir) / logio.SCENARIO_FILE} (or pass --config)")
    res = runner.run_estimator(name, log.imu, log.legs, log.truth, cfg, options)
    write_estimate(res, out_dir)
    return res


def write_estimate(res: runner.EstimateResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    logio.write_table(out / TRAJECTORY_FILE, logio.POSE_COLUMNS,
                      logio.pose_table(res.t, res.p, res.G, res.v))
    logio.write_table(out / DIAGNOSTICS_FILE, DIAGNOSTICS_COLUMNS,
                      np.column_stack([res.t, res.trace_P, res.innovation_norm,
                                       res.update_ok.astype(float)]))
    if res.mu is not None:
        cols = ["t[s]"] + [f"mu_{i}[-]" for i in range(res.mu.shape[1])]
        logio.write_table(out / MU_FILE, cols, np.column_stack([res.t, res.mu]))


def cmd_estimate(args):
    opts = estimator_options(args.modes, parse_alpha(args.alpha), args.transition)
    res = estimate_to(args.log_dir, args.estimator, args.out, opts, args.config)
    print(json.dumps({"estimator": res.name, "steps": len(res.t), "out": str(args.out),
                      "skipped_updates": int((~res.update_ok).sum())}))


# evaluate ---------------------------------------------------------------

def load_trajectory(path) -> ev.Trajectory:
    t, p, G, _ = logio.read_pose(path)
    return ev.Trajectory(t, p, G)


def evaluate_files(est_csv, truth_csv, align="rigid", rpe_distance=ev.DEFAULT_RPE_DISTANCE):
    return ev.evaluate(load_trajectory(est_csv), load_trajectory(truth_csv), align, rpe_distance)


def cmd_evaluate(args):
    rep = evaluate_files(args.estimate, args.truth, args.align, args.rpe_distance)
    label = Path(args.estimate).parent.name or "estimate"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(rep.to_json(), encoding="utf-8")
        (out / "metrics.txt").write_text(rep.to_text(label), encoding="utf-8")
    sys.stdout.write(rep.to_text(label))


# sweep ------------------------------------------------------------------

def load_manifest(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"{path}: invalid JSON ({exc})") from exc
    errors = sorted(jsonschema.Draft202012Validator(MANIFEST_SCHEMA).iter_errors(data),
                    key=lambda e: list(e.absolute_path))
    if errors:
        path_ = ".".join(str(p) for p in errors[0].absolute_path) or "<root>"
        raise ConfigError(path_, errors[0].message)
    return data


def run_sweep(manifest: dict, out_dir, check_invariants: bool = True) -> dict:
    """simulate -> estimate -> evaluate for every (scenario, estimator) cell.

    Writes ``sweep.csv`` (metrics only, deterministic), ``timing.json``
    (median per-step wall time) and ``cells.json`` (status, invariants and
    errors per cell). A failing cell is recorded and the sweep continues.

    Step times come from separate timing runs in which all estimators of a
    scenario advance in lockstep; each cell reports the median over
    ``timing_repeats`` such runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(manifest["estimators"])
    seed = manifest.get("seed")
    align = manifest.get("align", "rigid")
    dist = manifest.get("rpe_distance", ev.DEFAULT_RPE_DISTANCE)
    opts_kw = {"modes": manifest.get("modes"),
               "alpha": tuple(manifest["alpha"]) if "alpha" in manifest else None,
               "transition": np.array(manifest["transition"]) if "transition" in manifest else None}
    repeats = manifest.get("timing_repeats", DEFAULT_TIMING_REPEATS)
    rows, cells, timing = [], {}, {n: [] for n in names}
    logs = {}
    for scen in manifest["scenarios"]:
        label = Path(scen).stem
        row = {"scenario": label}
        log_dir = out / label / "log"
        try:
            simulate_to(scen, log_dir, seed)
            log = logio.read_log(log_dir)
        except Exception as exc:        # recorded per cell, the sweep goes on
            for n in names:
                cells[f"{label}/{n}"] = {"status": "failed", **_error_payload(exc)}
                row.update({f"{n}_{c}": np.nan for c in METRIC_COLUMNS})
            rows.append(row)
            continue
        logs[label] = log
        for n in names:
            key = f"{label}/{n}"
            try:
                opts = _cell_options(n, opts_kw)
                res = runner.run_estimator(n, log.imu, log.legs, log.truth, log.config, opts,
                                           check_invariants=check_invariants)
                write_estimate(res, out / label / n)
                rep = evaluate_files(out / label / n / TRAJECTORY_FILE, log_dir / logio.TRUTH_FILE,
                                     align, dist)
                (out / label / n / "metrics.json").write_text(rep.to_json(), encoding="utf-8")
                row.update(dict(zip((f"{n}_{c}" for c in METRIC_COLUMNS),
                                    (rep.ate_pos, rep.ate_att, rep.rpe_pos, rep.rpe_att))))
                cells[key] = {"status": "ok", "step_time_s": None, "invariants": res.invariants,
                              "flags": len(res.flags)}
            except Exception as exc:
                row.update({f"{n}_{c}": np.nan for c in METRIC_COLUMNS})
                cells[key] = {"status": "failed", **_error_payload(exc)}
        rows.append(row)
    for label, log in logs.items():
        ok = [n for n in names if cells[f"{label}/{n}"]["status"] == "ok"]
        opts = {n: _cell_options(n, opts_kw) for n in ok}
        runs = [runner.lockstep_step_times(ok, log.imu, log.legs, log.truth, log.config, opts)
                for _ in range(repeats)]
        for n in ok:
            step = float(np.median([r[n] for r in runs]))
            cells[f"{label}/{n}"]["step_time_s"] = step
            timing[n].append(step)
    cols = ["scenario"] + [f"{n}_{c}" for n in names for c in METRIC_COLUMNS]
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in rows:
            fh.write(",".join([row["scenario"]] + [logio.FMT % row[c] for c in cols[1:]]) + "\n")
    summary = {n: (float(np.median(v)) if v else None) for n, v in timing.items()}
    (out / "timing.json").write_text(json.dumps({"median_step_time_s": summary, "cells": {
        k: c.get("step_time_s") for k, c in cells.items()}}, indent=2) + "\n", encoding="utf-8")
    (out / "cells.json").write_text(json.dumps(cells, indent=2, default=float) + "\n", encoding="utf-8")
    return {"rows": rows, "cells": cells, "timing": summary}


def _cell_options(name, opts_kw):
    return estimator_options(**opts_kw) if name.startswith("imm") or name == "eskf-l" else None


def cmd_sweep(args):
    manifest = load_manifest(args.config)
    if args.seed is not None:
        manifest["seed"] = args.seed
    result = run_sweep(manifest, args.out)
    failed = [k for k, c in result["cells"].items() if c["status"] != "ok"]
    print(json.dumps({"cells": len(result["cells"]), "failed": failed,
                      "median_step_time_s": result["timing"]}))
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="legodom", description="Leg-inertial odometry simulation and evaluation.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate imu/legs/truth CSV logs from a scenario")
    p.add_argument("--config", required=True, help="scenario JSON file or bundled scenario name")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="run one estimator over a log directory")
    p.add_argument("log_dir")
    p.add_argument("--estimator", required=True, help=", ".join(runner.ESTIMATORS))
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="scenario overriding the log's scenario.json")
    p.add_argument("--modes", type=int)
    p.add_argument("--alpha", help="comma-separated noise scales, first must be 1")
    p.add_argument("--transition", help="'identity', JSON matrix or JSON file")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("evaluate", help="ATE/RPE of an estimate against truth")
    p.add_argument("estimate")
    p.add_argument("truth")
    p.add_argument("--align", choices=("none", "rigid"), default="rigid")
    p.add_argument("--rpe-distance", type=float, default=ev.DEFAULT_RPE_DISTANCE)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="scenario x estimator comparison table")
    p.add_argument("--config", required=True, help="sweep manifest JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)
    return ap


INPUT_ERRORS = (UsageError, ConfigError, ConfigurationError, runner.UnknownEstimator,
                FileNotFoundError, logio.LogFormatError, ev.EvaluationError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args) or 0
    except INPUT_ERRORS as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return 2
    except (FilterError, sim.SimulationError, OSError, ValueError) as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return 1
    except Exception as exc:
        payload = _error_payload(exc)
        payload["traceback"] = traceback.format_exc(limit=5)
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

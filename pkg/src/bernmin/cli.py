"""Reproducible experiment runner.

Verbs:

* ``solve <config.json>``      run one minimization + analysis pipeline
* ``suite <dir>``              run every config in a directory, aggregate
* ``radial-scan <config.json>`` tabulate the radial-family energies
* ``report <run-dir>``         re-print the summary of a finished run

A config is a single JSON document; unknown keys are rejected and the
fully resolved config (defaults included) is echoed into the output
directory for provenance.  Identical inputs produce byte-identical
outputs: all seeds are fixed, no timestamps are written.

Exit codes: 0 converged, 1 config error, 2 solver did not converge.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from bernmin import analyze, radial
from bernmin.field import (
    CoefficientField,
    Grid,
    ScalarField,
    make_region,
    weak_lq_norm,
    write_field,
    write_field_csv,
)
from bernmin.minimize import MinimizeProblem, SolverSettings, solve
from bernmin.weights import (
    BernoulliWeight,
    constant_weight,
    custom_table_weight,
    manifold_distance_weight,
    one_sided_weight,
    point_singularity_weight,
    singular_shell_weight,
    sum_weight,
    weight_weak_lq_norm,
)


class ConfigError(ValueError):
    pass


def _take(d: dict, allowed: dict, where: str) -> dict:
    """Pop known keys with defaults; reject unknown keys."""
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    out = {}
    for key, default in allowed.items():
        if key in d:
            out[key] = d[key]
        elif default is ...:
            raise ConfigError(f"missing required key {key!r} in {where}")
        else:
            out[key] = default
    return out


def build_weight(spec: dict, grid: Grid) -> BernoulliWeight:
    kind = spec.get("kind")
    if kind == "constant":
        s = _take(spec, {"kind": ..., "c": ...}, "weight")
        return constant_weight(s["c"])
    if kind == "point_singularity":
        s = _take(spec, {"kind": ..., "center": ..., "exponent": ..., "amplitude": 1.0}, "weight")
        return point_singularity_weight(s["center"], s["exponent"], s["amplitude"])
    if kind == "manifold_distance":
        s = _take(spec, {"kind": ..., "point": ..., "free_axes": ..., "exponent": ..., "amplitude": 1.0}, "weight")
        return manifold_distance_weight(s["point"], s["free_axes"], s["exponent"], s["amplitude"])
    if kind == "singular_shell":
        s = _take(
            spec,
            {"kind": ..., "r_inner": ..., "r_outer": ..., "q": ..., "plateau": None,
             "plateau_rule": None, "m": None, "d": None, "amplitude": 1.0, "center": None},
            "weight",
        )
        plateau = s["plateau"]
        if plateau is None:
            if s["m"] is None or s["d"] is None:
                raise ConfigError("shell weight needs either plateau or (m, d, plateau_rule)")
            rule = s["plateau_rule"] or "tau_consistent"
            cfg = radial.RadialConfig(int(s["d"]), s["q"], s["m"], rule)
            plateau = radial.plateau_value(cfg)
        return singular_shell_weight(s["r_inner"], s["r_outer"], s["q"], plateau, s["amplitude"], s["center"])
    if kind == "one_sided":
        s = _take(spec, {"kind": ..., "vertex": ..., "normal": ..., "exponent": ..., "amplitude": 1.0, "base": 0.0}, "weight")
        return one_sided_weight(s["vertex"], s["normal"], s["exponent"], s["amplitude"], s["base"])
    if kind == "custom_table":
        s = _take(spec, {"kind": ..., "averages": ...}, "weight")
        return custom_table_weight(grid, np.asarray(s["averages"], dtype=float))
    if kind == "sum":
        s = _take(spec, {"kind": ..., "components": ...}, "weight")
        return sum_weight(*(build_weight(c, grid) for c in s["components"]))
    raise ConfigError(f"unknown weight kind {kind!r}")


def build_coefficient(spec: dict, region) -> CoefficientField:
    kind = spec.get("kind", "identity")
    if kind == "identity":
        _take(spec, {"kind": "identity"}, "coefficient")
        return CoefficientField.identity(region)
    if kind == "diagonal":
        s = _take(spec, {"kind": ..., "entries": ...}, "coefficient")
        return CoefficientField.diagonal(region, s["entries"])
    if kind == "random_symmetric":
        s = _take(spec, {"kind": ..., "lambda": ..., "Lambda": ..., "seed": 0}, "coefficient")
        return CoefficientField.random_symmetric(region, s["lambda"], s["Lambda"], int(s["seed"]))
    raise ConfigError(f"unknown coefficient kind {kind!r}")


def build_boundary(spec: dict, region) -> ScalarField:
    kind = spec.get("kind", "constant")
    if kind == "constant":
        s = _take(spec, {"kind": "constant", "value": ...}, "boundary")
        return ScalarField.constant(region, s["value"])
    if kind == "radial_profile":
        s = _take(spec, {"kind": ..., "r": ..., "m": ..., "d": ..., "q": 2.0}, "boundary")
        cfg = radial.RadialConfig(int(s["d"]), s["q"], s["m"])
        return radial.radial_profile(s["r"], cfg).field(region)
    if kind == "table":
        s = _take(spec, {"kind": ..., "values": ...}, "boundary")
        return ScalarField(region, np.asarray(s["values"], dtype=float))
    raise ConfigError(f"unknown boundary kind {kind!r}")


_CONFIG_SCHEMA = {
    "name": ...,
    "criterion": None,
    "mode": "minimize",  # minimize | radial_scan
    "grid": ...,
    "region": ...,
    "coefficient": {"kind": "identity"},
    "weight": ...,
    "boundary": None,
    "gamma": 0.0,
    "solver": "exact",
    "settings": {},
    "radial": None,  # for radial_scan: {d, q, m, plateau_rule}
    "analysis": {},
    "checks": [],
    "seed": 0,
}

_SETTINGS_SCHEMA = {
    "eta_pos_rel": 1e-9,
    "eta_dec_rel": 1e-10,
    "dirichlet_tol": 1e-8,
    "outer_max": 200,
    "collapse_levels": 16,
    "smoothed_levels": 12,
    "smoothed_eps0": None,
    "smoothed_tol": 1e-7,
    "smoothed_inner_max": None,
    "exact_init": "auto",
    "one_phase_checks": False,
    "seed": 0,
}

_ANALYSIS_SCHEMA = {
    "exponent_points": None,  # "auto" or list of points
    "exponent_r_max": 0.25,
    "exponent_r_min": 0.0,
    "max_points": 16,
    "density_radii": None,
    "q_minus": None,
    "q_plus": None,
    "bmo_balls": 0,
    "bmo_seed": 0,
}


def load_config(path_or_dict, plateau_rule: str | None = None, seed: int | None = None) -> dict:
    if isinstance(path_or_dict, (str, Path)):
        with open(path_or_dict) as fh:
            raw = json.load(fh)
    else:
        raw = dict(path_or_dict)
    cfg = _take(raw, _CONFIG_SCHEMA, "config")
    cfg["settings"] = _take(cfg["settings"] or {}, _SETTINGS_SCHEMA, "settings")
    cfg["analysis"] = _take(cfg["analysis"] or {}, _ANALYSIS_SCHEMA, "analysis")
    if seed is not None and "seed" not in raw:
        cfg["seed"] = seed
    if plateau_rule and isinstance(cfg.get("weight"), dict):
        w = cfg["weight"]
        if w.get("kind") == "singular_shell" and w.get("plateau") is None:
            w.setdefault("plateau_rule", plateau_rule.replace("-", "_"))
    return cfg


def build_problem(cfg: dict) -> MinimizeProblem:
    gspec = _take(cfg["grid"], {"extents": ..., "resolution": ...}, "grid")
    grid = Grid(tuple(tuple(e) for e in gspec["extents"]), tuple(gspec["resolution"]))
    rspec = dict(cfg["region"])
    kind = rspec.pop("kind", "box")
    region = make_region(grid, kind, **rspec)
    A = build_coefficient(dict(cfg["coefficient"]), region)
    w = build_weight(dict(cfg["weight"]), grid)
    if cfg["boundary"] is None:
        raise ConfigError("minimize mode needs a boundary spec")
    g = build_boundary(dict(cfg["boundary"]), region)
    st_args = dict(cfg["settings"])
    st_args["seed"] = int(st_args.get("seed", 0)) or int(cfg["seed"])
    settings = SolverSettings(**st_args)
    return MinimizeProblem(region, A, w, g, cfg["gamma"], cfg["solver"], settings)


_CHECK_OPS = {
    "le": lambda v, t: v <= t,
    "ge": lambda v, t: v >= t,
    "lt": lambda v, t: v < t,
    "gt": lambda v, t: v > t,
    "eq": lambda v, t: v == t,
    "in": lambda v, t: t[0] <= v <= t[1],
    "abs_le": lambda v, t: abs(v) <= t,
}


def evaluate_checks(checks: list, metrics: dict) -> list:
    out = []
    for chk in checks:
        spec = _take(dict(chk), {"metric": ..., "op": ..., "value": ...}, "check")
        val = metrics.get(spec["metric"])
        ok = val is not None and bool(_CHECK_OPS[spec["op"]](val, spec["value"]))
        out.append({"metric": spec["metric"], "op": spec["op"], "value": spec["value"], "measured": val, "passed": ok})
    return out


def _fmt(x) -> str:
    return format(float(x), ".17g")


def run_experiment(config_path, output_dir, plateau_rule=None, seed=None) -> int:
    """Solve + analyze one config; writes solution field (binary + CSV),
    state sidecars, free-boundary report, summary, and the resolved config."""
    out = Path(output_dir)
    try:
        cfg = load_config(config_path, plateau_rule, seed)
        if cfg["mode"] == "radial_scan":
            return run_radial_scan(cfg, out)
        problem = build_problem(cfg)
    except (ConfigError, ValueError, KeyError, OSError, TypeError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config_resolved.json", "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True, default=str)

    states = solve(problem)
    metrics = {"name": cfg["name"]}
    all_converged = True
    for tag, state in states.items():
        all_converged &= state.converged
        write_field(state.u, out / f"solution_{tag}.bin")
        write_field_csv(state.u, out / f"solution_{tag}.csv")
        side = {
            "energy": state.energy,
            "iterations": state.iterations,
            "converged": state.converged,
            "positive_cells": int(state.positivity.sum()),
            "energy_trace": [float(e) for e in state.energy_trace],
            "settings": cfg["settings"],
            "gamma": cfg["gamma"],
            "solver": tag,
        }
        with open(out / f"state_{tag}.json", "w") as fh:
            json.dump(side, fh, indent=1, sort_keys=True)
        metrics[f"energy_{tag}"] = state.energy
        metrics[f"converged_{tag}"] = state.converged

    primary = states.get("exact", states.get("smoothed"))
    u = primary.u
    fb = analyze.extract_free_boundary(u, problem.gamma, problem.eta_pos)
    metrics["fb_points"] = int(len(fb))
    metrics["zero_cells"] = int((~primary.positivity & problem.free).sum())
    metrics["zero_fraction"] = metrics["zero_cells"] / problem.region.cell_count
    if len(fb):
        rr = np.linalg.norm(fb, axis=1)
        metrics["fb_radius_min"] = float(rr.min())  # r1
        metrics["fb_radius_max"] = float(rr.max())  # r2
    if len(states) == 2:
        e_s, e_x = states["smoothed"].energy, states["exact"].energy
        if e_x != 0:
            metrics["solver_gap_rel"] = abs(e_s - e_x) / abs(e_x)

    an = cfg["analysis"]
    rep_points = None
    if an["exponent_points"] == "auto":
        rep_points = None  # subsample of the computed boundary
    elif an["exponent_points"]:
        rep_points = np.asarray(an["exponent_points"], dtype=float)
    if an["exponent_points"] is not None:
        report = analyze.build_report(
            u,
            problem.gamma,
            points=rep_points,
            r_min=an["exponent_r_min"],
            r_max=an["exponent_r_max"],
            density_radii=an["density_radii"],
            q_minus=an["q_minus"],
            q_plus=an["q_plus"],
            bmo_balls=an["bmo_balls"],
            seed=an["bmo_seed"],
            max_points=an["max_points"],
        )
        report.write_json(out / "free_boundary.json")
        report.write_csv(out / "free_boundary.csv")
        alphas = [rec["alpha_hat"] for rec in report.fits if "alpha_hat" in rec]
        if alphas:
            metrics["alpha_hat_mean"] = float(np.mean(alphas))
            metrics["alpha_hat_min"] = float(np.min(alphas))
            metrics["alpha_hat_max"] = float(np.max(alphas))
        if report.bmo is not None:
            from bernmin.field import l2_norm

            metrics["bmo"] = report.bmo
            metrics["bmo_over_l2"] = report.bmo / max(l2_norm(u), 1e-300)

    checks = evaluate_checks(cfg["checks"], metrics)
    metrics["checks_passed"] = all(c["passed"] for c in checks) if checks else True
    summary = {"metrics": metrics, "checks": checks, "criterion": cfg["criterion"]}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True, default=str)
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for k in sorted(metrics):
            v = metrics[k]
            writer.writerow([k, _fmt(v) if isinstance(v, float) else v])
    if not all_converged:
        return 2
    return 0 if metrics["checks_passed"] else 2


def run_radial_scan(cfg: dict, out: Path) -> int:
    spec = _take(cfg["radial"] or {}, {"d": ..., "q": ..., "m": ..., "plateau_rule": "tau_consistent"}, "radial")
    rc = radial.RadialConfig(int(spec["d"]), spec["q"], spec["m"], spec["plateau_rule"])
    w = build_weight(dict(cfg["weight"]), None) if cfg.get("weight") else radial.make_shell_weight(rc)
    scan = radial.minimize_radial(rc, w)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "radial_scan.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r", "energy"])
        for r, e in zip(scan.r, scan.energy):
            writer.writerow([_fmt(r), _fmt(e)])
    summary = {
        "metrics": {
            "name": cfg["name"],
            "r_opt": scan.r_opt,
            "energy_opt": scan.energy_opt,
            "at_bound": scan.at_bound,
            "m_threshold": radial.m_threshold(rc.d, rc.q),
            "constant_energy": radial.constant_state_energy(rc, w),
        },
        "checks": [],
        "criterion": cfg["criterion"],
    }
    summary["checks"] = evaluate_checks(cfg["checks"], summary["metrics"])
    summary["metrics"]["checks_passed"] = all(c["passed"] for c in summary["checks"]) if summary["checks"] else True
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True, default=str)
    return 0 if summary["metrics"]["checks_passed"] else 2


def run_suite(config_dir, output_dir, jobs: int = 1, plateau_rule=None, seed=None) -> int:
    """Run every *.json config in the directory; aggregate metrics into one
    CSV and a pass/fail JSON keyed by criterion identifiers."""
    cfg_dir = Path(config_dir)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = sorted(cfg_dir.glob("*.json"))
    results = {}
    worst = 0

    def one(path):
        run_out = out / path.stem
        code = run_experiment(path, run_out, plateau_rule, seed)
        summary_path = run_out / "summary.json"
        summary = None
        if summary_path.exists():
            with open(summary_path) as fh:
                summary = json.load(fh)
        return path.stem, code, summary

    if jobs > 1 and len(paths) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            for stem, code, summary in pool.map(_suite_worker, [(str(p), str(out / p.stem), plateau_rule, seed) for p in paths]):
                results[stem] = (code, summary)
                worst = max(worst, code)
    else:
        for path in paths:
            stem, code, summary = one(path)
            results[stem] = (code, summary)
            worst = max(worst, code)

    by_criterion: dict = {}
    rows = []
    for stem, (code, summary) in sorted(results.items()):
        crit = (summary or {}).get("criterion")
        metrics = (summary or {}).get("metrics", {})
        passed = code == 0 and metrics.get("checks_passed", code == 0)
        rows.append((stem, crit, code, passed, metrics))
        if crit:
            agg = by_criterion.setdefault(crit, {"passed": True, "configs": []})
            agg["passed"] = agg["passed"] and passed
            agg["configs"].append(stem)
    with open(out / "aggregate.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "criterion", "exit_code", "passed", "energy_exact", "energy_smoothed"])
        for stem, crit, code, passed, metrics in rows:
            writer.writerow(
                [stem, crit or "", code, passed,
                 metrics.get("energy_exact", ""), metrics.get("energy_smoothed", "")]
            )
    with open(out / "acceptance.json", "w") as fh:
        json.dump(by_criterion, fh, indent=1, sort_keys=True)
    return worst


def _suite_worker(args):
    path, run_out, plateau_rule, seed = args
    code = run_experiment(path, run_out, plateau_rule, seed)
    summary_path = Path(run_out) / "summary.json"
    summary = None
    if summary_path.exists():
        with open(summary_path) as fh:
            summary = json.load(fh)
    return Path(path).stem, code, summary


def report(run_dir) -> int:
    run = Path(run_dir)
    summary = run / "summary.json"
    if not summary.exists():
        print(f"no summary.json under {run}", file=sys.stderr)
        return 1
    with open(summary) as fh:
        data = json.load(fh)
    for key in sorted(data.get("metrics", {})):
        print(f"{key}: {data['metrics'][key]}")
    for chk in data.get("checks", []):
        status = "PASS" if chk["passed"] else "FAIL"
        print(f"check {chk['metric']} {chk['op']} {chk['value']}: measured {chk['measured']} -> {status}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="bernmin", description="Bernoulli free-boundary energy lab")
    parser.add_argument("--output", default="runs", help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="concurrent configs for suite")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--plateau-rule",
        choices=["tau-consistent", "as-printed"],
        default="tau-consistent",
        help="default plateau rule for shell weights that do not pin one",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("solve").add_argument("config")
    sub.add_parser("suite").add_argument("config_dir")
    sub.add_parser("radial-scan").add_argument("config")
    sub.add_parser("report").add_argument("run_dir")
    args = parser.parse_args(argv)

    if args.verb == "solve":
        return run_experiment(args.config, Path(args.output), args.plateau_rule, args.seed)
    if args.verb == "suite":
        return run_suite(args.config_dir, Path(args.output), args.jobs, args.plateau_rule, args.seed)
    if args.verb == "radial-scan":
        try:
            cfg = load_config(args.config, args.plateau_rule, args.seed)
        except (ConfigError, ValueError, OSError) as err:
            print(f"config error: {err}", file=sys.stderr)
            return 1
        if cfg["mode"] != "radial_scan":
            cfg["mode"] = "radial_scan"
        return run_radial_scan(cfg, Path(args.output))
    if args.verb == "report":
        return report(args.run_dir)
    return 1


if __name__ == "__main__":
    sys.exit(main())

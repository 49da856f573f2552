"""Command-line front end.

Exit codes: 0 all checks passed; 1 a conclusion check failed with passing
hypotheses (theorem contradiction, halts the suite); 2 configuration or
parse error; 3 numerical failure; 4 hypotheses not met (vacuous run).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .curvature import certify_nakano, chern_curvature, nakano_matrix, real_curvature
from .errors import ConfigError, NakanoLabError, NumericalError, ParseError
from .fields import Axis, Coords, EntrywiseMetric, metric_eval
from .scenarios import Scenario, ScenarioReport, field_from_config, run_suite

EXIT_OK = 0
EXIT_CONCLUSION_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VACUOUS = 4

_COMMON_SCENARIO_KEYS = {"kind", "name", "seed", "tolerance", "hypothesis_grid", "conclusion_grid",
                         "quad_order", "hypothesis_margin"}

_SCENARIO_KEYS = {
    "prekopa_scalar": {"phi", "t_vars", "x_vars", "base_box", "fiber_box", "decay_alpha"},
    "prekopa_matrix": {"metric", "t_vars", "x_vars", "base_box", "fiber_box", "decay_alpha"},
    "berndtsson_reinhardt": {"phi", "t_axes", "z_axes", "base_box", "annulus"},
    "berndtsson_tube": {"phi", "t_axes", "z_axes", "base_box", "u_box", "im_extent"},
    "invariant_direct_image_torus": {"metric", "t_axes", "z_axes", "base_box", "annulus",
                                     "average_order", "invariance_tol"},
    "kiselman": {"phi", "t_axes", "z_axes", "base_box", "u_box", "im_extent", "submean",
                 "grid_res", "descent_steps", "expected_inf", "expected_inf_tol"},
    "exp_reduction": {"metric", "x_vars", "u_box", "w_samples", "integral_rtol", "curvature_tol"},
    "l2_flat_benchmark": {"h", "psi", "f", "N", "grid_shape", "ratio_bound"},
    "l2_violation_search": {"h", "psi_family", "f_family", "N", "grid_shape", "budget", "margin"},
}

_CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "version": {"type": "string"},
        "seed": {"type": "integer"},
        "output": {
            "type": "object",
            "properties": {"dir": {"type": "string"}},
            "additionalProperties": False,
        },
        "tolerances": {"type": "object"},
        "scenarios": {"type": "array", "items": {"type": "object"}, "minItems": 1},
    },
    "required": ["version", "scenarios"],
    "additionalProperties": False,
}


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(cfg, _CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config schema violation: {exc.message}") from exc
    for i, sc in enumerate(cfg["scenarios"]):
        kind = sc.get("kind")
        if kind not in _SCENARIO_KEYS:
            raise ConfigError(f"scenario {i}: unknown kind {kind!r}")
        allowed = _SCENARIO_KEYS[kind] | _COMMON_SCENARIO_KEYS
        unknown = set(sc) - allowed
        if unknown:
            raise ConfigError(f"scenario {i} ({kind}): unknown keys {sorted(unknown)}")


def _config_digest(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(canon).hexdigest()[:16]


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_tables(report: ScenarioReport, out_dir: Path) -> None:
    for table_name, rows in report.tables.items():
        path = out_dir / f"{report.name}_{table_name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            for row in rows:
                writer.writerow(row)


def _suite_exit_code(reports: list[ScenarioReport]) -> int:
    if any(r.conclusion_failed for r in reports):
        return EXIT_CONCLUSION_FAILED
    if any(r.vacuous for r in reports):
        return EXIT_VACUOUS
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    workers = args.workers or int(os.environ.get("NAKANO_LAB_WORKERS", "1"))
    default_seed = int(cfg.get("seed", 0))
    scenarios = []
    for sc_cfg in cfg["scenarios"]:
        sc_cfg = dict(sc_cfg)
        sc_cfg.setdefault("seed", default_seed)
        scenarios.append(Scenario.from_config(sc_cfg))
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        raise ConfigError("scenario names must be unique")

    reports = run_suite(scenarios, workers=workers)

    out_dir = Path(args.out or cfg.get("output", {}).get("dir", "nakano_out"))
    payload = {
        "version": cfg.get("version", "1"),
        "config_digest": _config_digest(cfg),
        "workers_invariant": True,
        "scenarios": [r.to_dict(normalize_timings=args.normalize_timings) for r in reports],
        "summary": {
            "total": len(reports),
            "passed": sum(1 for r in reports if not r.vacuous and not r.conclusion_failed),
            "vacuous": sum(1 for r in reports if r.vacuous),
            "failed": sum(1 for r in reports if r.conclusion_failed),
        },
    }
    code = _suite_exit_code(reports)
    payload["summary"]["exit_code"] = code
    _dump_json(payload, out_dir / "report.json")
    for r in reports:
        _write_tables(r, out_dir)

    for r in reports:
        status = "FAIL" if r.conclusion_failed else ("VACUOUS" if r.vacuous else "PASS")
        print(f"[{status}] {r.name} ({r.kind})")
        if r.conclusion_failed:
            print("conclusion failure with passing hypotheses; dump follows", file=sys.stderr)
            print(json.dumps(r.conclusion, indent=2, sort_keys=True, default=str), file=sys.stderr)
    print(f"report written to {out_dir / 'report.json'}")
    return code


def _parse_at(at: str) -> dict[str, float]:
    env = {}
    for part in at.split(","):
        if not part.strip():
            continue
        name, _, val = part.partition("=")
        env[name.strip()] = float(val)
    if not env:
        raise ConfigError("--at needs at least one assignment like x1=0")
    return env


def _coords_from_env(env: dict[str, float], is_complex: bool) -> Coords:
    if not is_complex:
        return Coords.real(list(env))
    axis_names = []
    for name in env:
        if name.endswith("re") or name.endswith("im"):
            base = name[:-2]
            if base not in axis_names:
                axis_names.append(base)
        else:
            raise ConfigError("complex mode expects variables named like z1re, z1im")
    return Coords.complex(axis_names)


def cmd_curvature(args) -> int:
    env = _parse_at(args.at)
    coords = _coords_from_env(env, args.complex_coords)
    if args.metric.startswith("@"):
        with open(args.metric[1:], "r", encoding="utf-8") as fh:
            mcfg = json.load(fh)
        metric = field_from_config(mcfg, coords)
    else:
        metric = EntrywiseMetric([[args.metric]], coords)
    point = np.array([env[v] for v in coords.var_names])
    theta = chern_curvature(metric, point) if args.complex_coords else real_curvature(metric, point)
    G = metric_eval(metric, point)
    big = nakano_matrix(theta, G)
    report = certify_nakano(metric, point[None])
    out = {
        "point": {v: env[v] for v in coords.var_names},
        "flavor": theta.flavor,
        "theta": _complex_nested(theta.blocks),
        "metric": _complex_nested(G),
        "nakano_matrix": _complex_nested(big),
        "lambda_min": report.lambda_min,
        "passed": report.passed,
        "tolerance": report.tolerance,
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK if report.passed else EXIT_VACUOUS


def _complex_nested(arr: np.ndarray):
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        return {"re": np.real(arr).tolist(), "im": np.imag(arr).tolist()}
    return arr.tolist()


def cmd_pushforward(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    from .geometry import Fibered
    from .scenarios import _coords_from_config, domain_from_config
    from .direct_image import PushforwardMetric

    coords = _coords_from_config(cfg["coords"])
    total = field_from_config(cfg["metric"], coords)
    base = domain_from_config(cfg["base_domain"])
    fiber = domain_from_config(cfg["fiber_domain"])
    omega = Fibered(base, lambda _t, _d=fiber: _d, t_independent=True)
    pf = PushforwardMetric(total, omega, cfg["fiber_axes"], order=int(cfg.get("order", 48)))

    lo, hi, n = args.t_grid
    ts = np.linspace(lo, hi, int(n))
    if base.dim != 1:
        raise ConfigError("--t-grid drives a one-dimensional base")
    rows = []
    for t in ts:
        val = pf.raw_values(np.array([[t]]))[0]
        rows.append([float(t), *np.real(val).reshape(-1).tolist()])
    writer = csv.writer(sys.stdout)
    writer.writerow(["t", *[f"h_{i}{j}" for i in range(pf.rank) for j in range(pf.rank)]])
    for row in rows:
        writer.writerow(row)
    return EXIT_OK


def cmd_l2(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    from .scenarios import Scenario, run

    kind = cfg.get("kind", "l2_flat_benchmark")
    if kind not in ("l2_flat_benchmark", "l2_violation_search"):
        raise ConfigError("l2 subcommand accepts l2_flat_benchmark or l2_violation_search configs")
    sc = Scenario.from_config(dict(cfg, kind=kind))
    rep = run(sc)
    print(json.dumps(rep.to_dict(normalize_timings=args.normalize_timings), indent=2, sort_keys=True))
    if rep.vacuous:
        return EXIT_VACUOUS
    return EXIT_OK if not rep.conclusion_failed else EXIT_CONCLUSION_FAILED


def _t_grid(text: str) -> tuple[float, float, int]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected lo:hi:count")
    return float(parts[0]), float(parts[1]), int(parts[2])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nakano-lab",
                                 description="curvature positivity laboratory for direct-image metrics")
    sub = ap.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario suite from a JSON config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory (default from config or ./nakano_out)")
    p_run.add_argument("--workers", type=int, default=None,
                       help="worker count (default: NAKANO_LAB_WORKERS or 1)")
    p_run.add_argument("--normalize-timings", action="store_true",
                       help="zero out timings in the report for byte-stable comparisons")
    p_run.set_defaults(fn=cmd_run)

    p_curv = sub.add_parser("curvature", help="curvature and Nakano form of a metric at a point")
    p_curv.add_argument("--metric", required=True, help="scalar expression or @field-config.json")
    p_curv.add_argument("--at", required=True, help="comma-separated assignments, e.g. x1=0.5")
    p_curv.add_argument("--complex", dest="complex_coords", action="store_true",
                        help="treat variable pairs <name>re/<name>im as complex axes")
    p_curv.set_defaults(fn=cmd_curvature)

    p_pf = sub.add_parser("pushforward", help="tabulate a fiber-integrated metric over a t grid")
    p_pf.add_argument("--config", required=True)
    p_pf.add_argument("--t-grid", required=True, type=_t_grid, help="lo:hi:count")
    p_pf.set_defaults(fn=cmd_pushforward)

    p_l2 = sub.add_parser("l2", help="run an L2 estimate benchmark or violation search")
    p_l2.add_argument("--config", required=True)
    p_l2.add_argument("--normalize-timings", action="store_true")
    p_l2.set_defaults(fn=cmd_l2)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NakanoLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

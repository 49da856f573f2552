"""Executable scenarios: hypothesis checks, pushforward, conclusion checks.

Each scenario kind wires the modules into one pipeline.  Hypotheses are
sampling-based grid certificates, never proofs; when a hypothesis fails the
scenario reports a vacuous run and asserts nothing about the conclusion.  A
conclusion failure while hypotheses pass is the strongest signal the suite
can produce (it indicates an implementation bug) and halts a suite run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from . import exprlang
from .curvature import (
    PositivityReport,
    certify_nakano,
    chern_curvature,
    convexity_test,
    psh_hessian_test,
    psh_submean_test,
)
from .direct_image import (
    KiselmanInfScalar,
    NegLogPushforwardScalar,
    PushforwardMetric,
    build_rule,
    exp_reduce,
    integrate,
)
from .errors import ConfigError
from .exprlang import BinOp, Num, Var
from .fields import (
    Axis,
    ConstantMetric,
    Coords,
    EntrywiseMetric,
    ExpressionScalar,
    MetricField,
    MexpMetric,
    ScalarField,
    ScaledMetric,
    TorusAveragedMetric,
)
from .geometry import (
    Box,
    Domain,
    Fibered,
    HalfspaceConvex,
    ReinhardtAnnulus,
    SampleGrid,
    TubeOverBase,
    sample_grid,
)

__all__ = [
    "Scenario",
    "ScenarioReport",
    "run",
    "run_suite",
    "random_metric",
    "field_from_config",
    "domain_from_config",
    "SCENARIO_KINDS",
]

HYPOTHESIS_MARGIN = 1e-8  # strict positivity required before a conclusion is asserted


@dataclass
class Scenario:
    kind: str
    name: str
    params: dict
    seed: int = 0

    @staticmethod
    def from_config(cfg: dict) -> "Scenario":
        kind = cfg.get("kind")
        if kind not in SCENARIO_KINDS:
            raise ConfigError(f"unknown scenario kind {kind!r}")
        name = cfg.get("name", kind)
        seed = int(cfg.get("seed", 0))
        params = {k: v for k, v in cfg.items() if k not in ("kind", "name", "seed")}
        return Scenario(kind=kind, name=name, params=params, seed=seed)


@dataclass
class ScenarioReport:
    name: str
    kind: str
    seed: int
    hypotheses: list = dc_field(default_factory=list)
    vacuous: bool = False
    conclusion: dict | None = None
    quadrature: dict = dc_field(default_factory=dict)
    timings: dict = dc_field(default_factory=dict)
    tables: dict = dc_field(default_factory=dict)

    @property
    def conclusion_failed(self) -> bool:
        return (not self.vacuous) and self.conclusion is not None and not self.conclusion.get("passed", True)

    def to_dict(self, normalize_timings: bool = False) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "seed": self.seed,
            "hypotheses": self.hypotheses,
            "vacuous": self.vacuous,
            "conclusion": self.conclusion,
            "quadrature": self.quadrature,
            "timings": {k: 0.0 for k in self.timings} if normalize_timings else self.timings,
        }


# --------------------------------------------------------------------------
# Config builders
# --------------------------------------------------------------------------


def domain_from_config(cfg: dict) -> Domain:
    kind = cfg.get("type")
    if kind == "box":
        return Box(np.asarray(cfg["lo"], float), np.asarray(cfg["hi"], float))
    if kind == "annulus":
        return ReinhardtAnnulus(np.asarray(cfg["r_lo"], float), np.asarray(cfg["r_hi"], float))
    if kind == "halfspace":
        return HalfspaceConvex(
            np.asarray(cfg["normals"], float),
            np.asarray(cfg["offsets"], float),
            np.asarray(cfg["box_lo"], float),
            np.asarray(cfg["box_hi"], float),
            np.asarray(cfg["interior_point"], float),
        )
    if kind == "tube":
        return TubeOverBase(domain_from_config(cfg["base"]), im_extent=float(cfg.get("im_extent", 1.0)))
    raise ConfigError(f"unknown domain type {kind!r}")


def _coords_from_config(cfg: dict) -> Coords:
    axes = []
    for a in cfg["axes"]:
        axes.append(Axis(a["name"], bool(a.get("complex", False))))
    return Coords(axes)


def field_from_config(cfg: dict, coords: Coords) -> MetricField:
    kind = cfg.get("kind")
    if kind == "entrywise":
        return EntrywiseMetric(_entries_from_config(cfg["entries"]), coords)
    if kind == "constant":
        return ConstantMetric(_matrix_from_config(cfg["matrix"]), coords)
    if kind == "mexp":
        q = EntrywiseMetric(_entries_from_config(cfg["exponent"]), coords)
        return MexpMetric(q, terms=int(cfg.get("terms", 20)))
    if kind == "scale":
        base = field_from_config(cfg["base"], coords)
        return ScaledMetric(ExpressionScalar(cfg["scalar"], coords), base)
    if kind == "average":
        base = field_from_config(cfg["base"], coords)
        return TorusAveragedMetric(base, cfg["axes"], order=int(cfg.get("order", 64)))
    if kind == "pushforward":
        total_coords = _coords_from_config(cfg["coords"]) if "coords" in cfg else coords
        total = field_from_config(cfg["total"], total_coords)
        fibered = Fibered(
            domain_from_config(cfg["base_domain"]),
            (lambda _t, _d=domain_from_config(cfg["fiber_domain"]): _d),
            t_independent=True,
        )
        return PushforwardMetric(
            total,
            fibered,
            cfg["fiber_axes"],
            order=int(cfg.get("order", 32)),
            scheme=cfg.get("scheme", "auto"),
        )
    if kind == "random_quadratic":
        return random_metric(
            int(cfg.get("seed", 0)),
            rank=int(cfg.get("rank", 2)),
            n=int(cfg.get("n", 1)),
            m=int(cfg.get("m", 1)),
            coupling=float(cfg.get("coupling", 0.2)),
        )
    raise ConfigError(f"unknown field kind {kind!r}")


def _entries_from_config(entries) -> list:
    out = []
    for row in entries:
        out_row = []
        for cell in row:
            if isinstance(cell, dict):
                out_row.append((cell["re"], cell.get("im")) if cell.get("im") else cell["re"])
            else:
                out_row.append(cell)
        out.append(out_row)
    return out


def _matrix_from_config(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.dtype == object:  # [re, im] pairs
        out = np.empty(arr.shape[:2], dtype=complex)
        for i, row in enumerate(m):
            for j, cell in enumerate(row):
                out[i, j] = complex(cell[0], cell[1]) if isinstance(cell, (list, tuple)) else complex(cell)
        return out
    return arr.astype(complex)


# --------------------------------------------------------------------------
# Random quadratic-exponent family (matrix Prekopa inputs)
# --------------------------------------------------------------------------


def _lincomb(terms: Sequence[tuple[float, exprlang.Expr]]) -> exprlang.Expr:
    expr = None
    for c, basis in terms:
        if c == 0.0:
            continue
        t = BinOp("*", Num(float(c)), basis)
        expr = t if expr is None else BinOp("+", expr, t)
    return expr if expr is not None else Num(0.0)


def random_metric(seed: int, rank: int = 2, n: int = 1, m: int = 1, coupling: float = 0.2) -> MexpMetric:
    """Seeded random metric exp(-Q), Q = A (|t|^2+|x|^2) + s (B tx + C x).

    A is Hermitian with eigenvalues in [0.3, 1.0] (bounded spectrum keeps
    exp(-Q) well conditioned on the truncated fibers), B and C are Hermitian
    with unit spectral scale.  Smooth by construction; Nakano positivity is
    NOT assumed and must be checked downstream.
    """
    rng = np.random.default_rng(seed)

    def hermitian(scale: float) -> np.ndarray:
        x = rng.standard_normal((rank, rank)) + 1j * rng.standard_normal((rank, rank))
        h = 0.5 * (x + x.conj().T)
        nrm = np.linalg.norm(h, 2)
        return h / nrm * scale if nrm > 0 else h

    x = rng.standard_normal((rank, rank)) + 1j * rng.standard_normal((rank, rank))
    gram = x @ x.conj().T
    a = 0.3 * np.eye(rank) + 0.7 * gram / np.linalg.norm(gram, 2)
    b = hermitian(1.0)
    c = hermitian(1.0)

    t_vars = [f"t{j + 1}" for j in range(n)]
    x_vars = [f"x{i + 1}" for i in range(m)]
    coords = Coords.real(t_vars + x_vars)

    def sum_expr(names, power):
        e = None
        for nm in names:
            term = BinOp("^", Var(nm), Num(float(power))) if power != 1 else Var(nm)
            e = term if e is None else BinOp("+", e, term)
        return e

    q1 = BinOp("+", sum_expr(t_vars, 2), sum_expr(x_vars, 2))
    q2 = BinOp("*", sum_expr(t_vars, 1), sum_expr(x_vars, 1))
    q3 = sum_expr(x_vars, 1)

    s = float(coupling)
    entries = []
    for lam in range(rank):
        row = []
        for mu in range(rank):
            re = _lincomb([(a[lam, mu].real, q1), (s * b[lam, mu].real, q2), (s * c[lam, mu].real, q3)])
            im_coef = [(a[lam, mu].imag, q1), (s * b[lam, mu].imag, q2), (s * c[lam, mu].imag, q3)]
            if any(cc != 0.0 for cc, _ in im_coef):
                row.append((re, _lincomb(im_coef)))
            else:
                row.append(re)
        entries.append(row)
    return MexpMetric(EntrywiseMetric(entries, coords))


# --------------------------------------------------------------------------
# Pipeline helpers
# --------------------------------------------------------------------------


def _product_fibered(base: Box, fiber: Domain) -> Fibered:
    return Fibered(base, lambda _t, _d=fiber: _d, t_independent=True)


def _grid(domain: Domain, res) -> SampleGrid:
    return sample_grid(domain, res)


def _hyp_entry(name: str, passed: bool, **metrics) -> dict:
    metrics.pop("passed", None)
    return {"name": name, "passed": bool(passed), **metrics}


def _positivity_conclusion(name: str, report: PositivityReport) -> dict:
    return {"name": name, **report.to_dict()}


def _boundary_ratio(metric: MetricField, base: Box, fiber: Box, samples: int = 9) -> float:
    """Max integrand norm on the truncation boundary over its max inside.

    Diagnostic for fiber truncation: values near machine zero mean the
    declared decay has killed the tail at the box edge.
    """
    t_grid = np.linspace(base.lo, base.hi, samples)
    inner, outer = [], []
    for t in t_grid:
        center = np.concatenate([t, 0.5 * (fiber.lo + fiber.hi)])
        inner.append(np.linalg.norm(metric.raw_values(center[None])[0]))
        for corner in (fiber.lo, fiber.hi):
            edge = np.concatenate([t, corner])
            outer.append(np.linalg.norm(metric.raw_values(edge[None])[0]))
    return float(max(outer) / max(max(inner), 1e-300))


# --------------------------------------------------------------------------
# Scenario runners
# --------------------------------------------------------------------------


def _run_prekopa_scalar(sc: Scenario) -> ScenarioReport:
    p = sc.params
    rep = ScenarioReport(sc.name, sc.kind, sc.seed)
    t_vars = p.get("t_vars", ["t1"])
    x_vars = p.get("x_vars", ["x1"])
    coords = Coords.real(t_vars + x_vars)
    phi = ExpressionScalar(p["phi"], coords)
    base = Box(np.asarray(p["base_box"]["lo"], float), np.asarray(p["base_box"]["hi"], float))
    fiber = Box(np.asarray(p["fiber_box"]["lo"], float), np.asarray(p["fiber_box"]["hi"], float))
    omega = _product_fibered(base, fiber)
    tol = float(p.get("tolerance", 1e-6))

    hyp_grid = _grid(Box(np.concatenate([base.lo, fiber.lo]), np.concatenate([base.hi, fiber.hi])),
                     p.get("hypothesis_grid", 9))
    hyp = convexity_test(phi, hyp_grid, tol=tol)
    rep.hypotheses.append(_hyp_entry("input convex", hyp.min_value >= -tol, min_hessian_eig=hyp.min_value))
    if not rep.hypotheses[-1]["passed"]:
        rep.vacuous = True
        return rep

    phi_tilde = NegLogPushforwardScalar(phi, omega, x_vars, order=int(p.get("quad_order", 64)))
    con_grid = _grid(base, p.get("conclusion_grid", 17))
    con = convexity_test(phi_tilde, con_grid, tol=tol)
    rep.conclusion = {"name": "pushforward convex", **con.to_dict()}
    return rep


def _run_prekopa_matrix(sc: Scenario) -> ScenarioReport:
    p = sc.params
    rep = ScenarioReport(sc.name, sc.kind, sc.seed)
    mcfg = p["metric"]
    if mcfg.get("kind") == "random_quadratic" and "seed" not in mcfg:
        mcfg = dict(mcfg, seed=sc.seed)
    coords = None
    if mcfg.get("kind") != "random_quadratic":
        t_vars = p.get("t_vars", ["t1"])
        x_vars = p.get("x_vars", ["x1"])
        coords = Coords.real(t_vars + x_vars)
    metric = field_from_config(mcfg, coords)
    t_vars = p.get("t_vars", [a.name for a in metric.coords.axes if a.name.startswith("t")])
    x_vars = [a.name for a in metric.coords.axes if a.name not in t_vars]
    nb = sum(1 for a in metric.coords.axes if a.name in t_vars)
    base = Box(np.asarray(p["base_box"]["lo"], float), np.asarray(p["base_box"]["hi"], float))
    fiber = Box(np.asarray(p["fiber_box"]["lo"], float), np.asarray(p["fiber_box"]["hi"], float))
    omega = _product_fibered(base, fiber)
    margin = float(p.get("hypothesis_margin", HYPOTHESIS_MARGIN))

    hyp_grid = _grid(Box(np.concatenate([base.lo, fiber.lo]), np.concatenate([base.hi, fiber.hi])),
                     p.get("hypothesis_grid", 17))
    hyp = certify_nakano(metric, hyp_grid)
    rep.hypotheses.append(
        _hyp_entry("input Nakano positive", hyp.lambda_min >= margin,
                   **{k: v for k, v in hyp.to_dict().items() if k != "passed"})
    )
    rep.quadrature["fiber_boundary_ratio"] = _boundary_ratio(metric, base, fiber)
    if not rep.hypotheses[-1]["passed"]:
        rep.vacuous = True
        return rep

    pf = PushforwardMetric(metric, omega, x_vars, order=int(p.get("quad_order", 48)))
    rep.quadrature["pushforward_error_estimate"] = pf.error_estimate
    con_grid = _grid(base, p.get("conclusion_grid", 17))
    con = certify_nakano(pf, con_grid)
    rep.conclusion = _positivity_conclusion("direct image Nakano positive", con)
    rep.tables["conclusion_eigenvalues"] = con.table()
    return rep


def _rotation_invariance_residual(values_fn, P: np.ndarray, coords: Coords, axes: Sequence[str],
                                  rng: np.random.Generator, samples: int = 8) -> float:
    names = [a.name for a in coords.axes]
    worst = 0.0
    base_vals = np.asarray(values_fn(P))
    scale = float(np.max(np.abs(base_vals))) + 1e-300
    for _ in range(samples):
        Q = P.copy()
        for nm in axes:
            j = names.index(nm)
            xi, yi = coords.axis_vars(j)
            th = rng.uniform(0.0, 2.0 * np.pi)
            c, s = np.cos(th), np.sin(th)
            x, y = P[:, xi].copy(), P[:, yi].copy()
            Q[:, xi] = c * x - s * y
            Q[:, yi] = s * x + c * y
        worst = max(worst, float(np.max(np.abs(np.asarray(values_fn(Q)) - base_vals))))
    return worst / scale


def _run_berndtsson_reinhardt(sc: Scenario) -> ScenarioReport:
    p = sc.params
    rep = ScenarioReport(sc.name, sc.kind, sc.seed)
    rng = np.random.default_rng(sc.seed)
    t_axes = p.get("t_axes", ["t1"])
    z_axes = p.get("z_axes", ["z1"])
    coords = Coords([*(Axis(n, True) for n in t_axes), *(Axis(n, True) for n in z_axes)])
    phi = ExpressionScalar(p["phi"], coords)
    base = Box(np.asarray(p["base_box"]["lo"], float), np.asarray(p["base_box"]["hi"], float))
    annulus = ReinhardtAnnulus(np.asarray(p["annulus"]["r_lo"], float), np.asarray(p["annulus"]["r_hi"], float))
    omega = _product_fibered(base, annulus)
    tol = float(p.get("tolerance", 1e-6))

    total_box = Box(*map(np.concatenate, zip(base.bounding_box(), annulus.bounding_box())))
    hyp_points = _grid(omega, p.get("hypothesis_grid", 5)).points
    hyp = psh_hessian_test(phi, hyp_points, tol=tol)
    rep.hypotheses.append(_hyp_entry("input psh", hyp.passed, min_hessian_eig=hyp.min_value))
    inv = _rotation_invariance_residual(phi.values, hyp_points, coords, z_axes, rng)
    rep.hypotheses.append(_hyp_entry("rotation invariant", inv <= 1e-8, residual=inv))
    if not all(h["passed"] for h in rep.hypotheses):
        rep.vacuous = True
        return rep

    phi_tilde = NegLogPushforwardScalar(phi, omega, z_axes, order=int(p.get("quad_order", 24)))
    con_grid = _grid(base, p.get("conclusion_grid", 9))
    con = psh_hessian_test(phi_tilde, con_grid, tol=tol)
    rep.conclusion = {"name": "pushforward psh", **con.to_dict()}
    return rep


def _run_berndtsson_tube(sc: Scenario) -> ScenarioReport:
    p = sc.params
    rep = ScenarioReport(sc.name, sc.kind, sc.seed)
    t_axes = p.get("t_axes", ["t1"])
    z_axes = p.get("z_axes", ["z1"])
    coords = Coords([*(Axis(n, True) for n in t_axes), *(Axis(n, True) for n in z_axes)])
    phi = ExpressionScalar(p["phi"], coords)
    base = Box(np.asarray(p["base_box"]["lo"], float), np.asarray(p["base_box"]["hi"], float))
    u_box = Box(np.asarray(p["u_box"]["lo"], float), np.asarray(p["u_box"]["hi"], float))
    tube = TubeOverBase(u_box, im_extent=float(p.get("im_extent", 1.0)))
    omega = _product_fibered(base, tube)
    tol = float(p.get("tolerance", 1e-6))

    im_vars = [n + "im" for n in z_axes]
    im_residual = _im_independence_residual(phi, omega, im_vars)
    rep.hypotheses.append(_hyp_entry("Im-independent", im_residual <= 1e-12, residual=im_residual))
    hyp_points = _grid(omega, p.get("hypothesis_grid", 5)).points
    hyp = psh_hessian_test(phi, hyp_points, tol=tol)
    rep.hypotheses.append(_hyp_entry("input psh", hyp.passed, min_hessian_eig=hyp.min_value))
    if not all(h["passed"] for h in rep.hypotheses):
        rep.vacuous = True
        return rep

    phi_tilde = NegLogPushforwardScalar(phi, omega, z_axes, order=int(p.get("quad_order", 48)))
    con_grid = _grid(base, p.get("conclusion_grid", 9))
    con = psh_hessian_test(phi_tilde, con_grid, tol=tol)
    rep.conclusion = {"name": "pushforward psh", **con.to_dict()}
    return rep


def _im_independence_residual(field, omega: Fibered, im_vars: Sequence[str]) -> float:
    coords = field.coords
    P = _grid(omega, 4).points
    vals = np.asarray(field.values(P) if isinstance(field, ScalarField) else field.raw_values(P))
    Q = P.copy()
    for nm in im_vars:
        i = coords.var_names.index(nm)
        Q[:, i] += 0.37
    vals2 = np.asarray(field.values(Q) if isinstance(field, ScalarField) else field.raw_values(Q))
    scale = float(np.max(np.abs(vals))) + 1e-300
    return float(np.max(np.abs(vals2 - vals))) / scale


def _run_invariant_direct_image_torus(sc: Scenario) -> ScenarioReport:
    p = sc.params
    rep = ScenarioReport(sc.name, sc.kind, sc.seed)
    rng = np.random.default_rng(sc.seed)
    t_axes = p.get("t_axes", ["t1"])
    z_axes = p.get("z_axes", ["z1"])
    coords = Coords([*(Axis(n, True) for n in t_axes), *(Axis(n, True) for n in z_axes)])
    metric = field_from_config(p["metric"], coords)
    base = Box(np.asarray(p["base_box"]["lo"], float), np.asarray(p["base_box"]["hi"], float))
    annulus = ReinhardtAnnulus(np.asarray(p["annulus"]["r_lo"], float), np.asarray(p["annulus"]["r_hi"], float))
    omega = _product_fibered(base, annulus)
    margin = float(p.get("hypothesis_margin", HYPOTHESIS_MARGIN))

    averaged = TorusAveragedMetric(metric, z_axes, order=int(p.get("average_order", 32)))
    hyp_points = _grid(omega, p.get("hypothesis_grid", 7)).points
    inv = _rotation_invariance_residual(
        lambda P: np.linalg.norm(averaged.raw_values(P), axis=(-2, -1)), hyp_points, coords, z_axes, rng
    )
    rep.hypotheses.append(_hyp_entry("averaged metric invariant", inv <= float(p.get("invariance_tol", 1e-8)),
                                     residual=inv))
    hyp = certify_nakano(averaged, hyp_points)
    rep.hypotheses.append(_hyp_entry("input Nakano positive", hyp.lambda_min >= margin,
                                     **{k: v for k, v in hyp.to_dict().items() if k != "passed"}))
    if not all(h["passed"] for h in rep.hypotheses):
        rep.vacuous = True
        return rep

    pf = PushforwardMetric(averaged, omega, z_axes, order=int(p.get("quad_order", 16)))
    rep.quadrature["pushforward_error_estimate"] = pf.error_estimate
    con_grid = _grid(base, p.get("conclusion_grid", 7))
    con = certify_nakano(pf, con_grid)
    rep.conclusion = _positivity_conclusion("direct image Nakano positive", con)
    rep.tables["conclusion_eigenvalues"] = con.table()
    return rep


def _run_kiselman(sc: Scenario) -> ScenarioReport:
    p = sc.params
    rep = ScenarioReport(sc.name, sc.kind, sc.seed)
    rng = np.random.default_rng(sc.seed)
    t_axes = p.get("t_axes", ["t1"])
    z_axes = p.get("z_axes", ["z1"])
    coords = Coords([*(Axis(n, True) for n in t_axes), *(Axis(n, True) for n in z_axes)])
    phi = ExpressionScalar(p["phi"], coords)
    base = Box(np.asarray(p["base_box"]["lo"], float), np.asarray(p["base_box"]["hi"], float))
    u_box = Box(np.asarray(p["u_box"]["lo"], float), np.asarray(p["u_box"]["hi"], float))
    tube = TubeOverBase(u_box, im_extent=float(p.get("im_extent", 1.0)))
    omega = _product_fibered(base, tube)
    tol = float(p.get("tolerance", 1e-6))

    im_vars = [n + "im" for n in z_axes]
    im_residual = _im_independence_residual(phi, omega, im_vars)
    rep.hypotheses.append(_hyp_entry("Im-independent", im_residual <= 1e-12, residual=im_residual))
    hyp_points = _grid(omega, p.get("hypothesis_grid", 5)).points
    hyp = psh_hessian_test(phi, hyp_points, tol=tol)
    rep.hypotheses.append(_hyp_entry("input psh", hyp.passed, min_hessian_eig=hyp.min_value))
    if not all(h["passed"] for h in rep.hypotheses):
        rep.vacuous = True
        return rep

    star = KiselmanInfScalar(phi, omega, z_axes,
                             grid_res=int(p.get("grid_res", 33)),
                             descent_steps=int(p.get("descent_steps", 30)))
    sub = p.get("submean", {})
    pairs = int(sub.get("pairs", 50))
    radius_max = float(sub.get("radius_max", 0.2))
    circle_points = int(sub.get("circle_points", 32))
    base_coords = Coords([Axis(n, True) for n in t_axes])
    lo, hi = base.bounding_box()
    centers, radii, dirs = [], [], []
    for _ in range(pairs):
        rho = rng.uniform(0.05, radius_max)
        c = rng.uniform(lo + rho * np.sqrt(2), hi - rho * np.sqrt(2))
        w = rng.standard_normal(base_coords.dim)
        w /= np.linalg.norm(w)
        centers.append(c)
        radii.append(rho)
        dirs.append(w)
    con = psh_submean_test(star, np.array(centers), radii, np.array(dirs),
                           circle_points=circle_points, tol=float(sub.get("tolerance", 1e-8)), domain=base)
    rep.conclusion = {"name": "fiber infimum psh (submean)", **con.to_dict(), "pairs": pairs}

    if "expected_inf" in p:
        exp_field = ExpressionScalar(p["expected_inf"], base_coords)
        sample = _grid(base, 7).points
        err = float(np.max(np.abs(star.values(sample) - exp_field.values(sample))))
        rep.conclusion["expected_inf_max_err"] = err
        rep.conclusion["passed"] = bool(rep.conclusion["passed"] and err <= float(p.get("expected_inf_tol", 1e-6)))
    return rep


def _run_exp_reduction(sc: Scenario) -> ScenarioReport:
    p = sc.params
    rep = ScenarioReport(sc.name, sc.kind, sc.seed)
    rng = np.random.default_rng(sc.seed)
    x_vars = p.get("x_vars", ["x1"])
    coords = Coords.real(x_vars)
    metric = field_from_config(p["metric"], coords)
    u_box = Box(np.asarray(p["u_box"]["lo"], float), np.asarray(p["u_box"]["hi"], float))
    quad_order = int(p.get("quad_order", 32))
    int_rtol = float(p.get("integral_rtol", 1e-6))
    curv_tol = float(p.get("curvature_tol", 1e-8))

    red = exp_reduce(metric, u_box, x_vars)
    tube_val, tube_est, _ = integrate(lambda P: np.asarray(metric.raw_values(P)), u_box,
                                      order=quad_order, rel_tol=int_rtol)
    ann_val, ann_est, _ = integrate(lambda P: np.asarray(red.h_second.raw_values(P)), red.annulus,
                                    order=quad_order, rel_tol=int_rtol)
    rel = float(np.linalg.norm(tube_val - ann_val) / (np.linalg.norm(tube_val) + 1e-300))
    rep.quadrature = {"tube_error_estimate": tube_est, "annulus_error_estimate": ann_est}

    n_w = int(p.get("w_samples", 20))
    worst = 0.0
    for _ in range(n_w):
        w = np.empty(red.w_coords.dim)
        for j in range(len(x_vars)):
            r = rng.uniform(red.annulus.r_lo[j] * 1.05, red.annulus.r_hi[j] * 0.95)
            th = rng.uniform(0.0, 2.0 * np.pi)
            w[2 * j] = r * np.cos(th)
            w[2 * j + 1] = r * np.sin(th)
        t1 = chern_curvature(red.h_prime, w).blocks
        t2 = chern_curvature(red.h_second, w).blocks
        worst = max(worst, float(np.max(np.abs(t1 - t2))))

    passed = rel <= int_rtol and worst <= curv_tol
    rep.conclusion = {
        "name": "exp-map reduction consistency",
        "passed": bool(passed),
        "integral_rel_diff": rel,
        "integral_rtol": int_rtol,
        "curvature_max_diff": worst,
        "curvature_tol": curv_tol,
        "tube_integral_trace": float(np.real(np.trace(np.atleast_2d(tube_val)))),
        "annulus_integral_trace": float(np.real(np.trace(np.atleast_2d(ann_val)))),
    }
    return rep


def _l2_problem_from_params(p: dict, grid_n: int):
    from .l2 import DbarGrid, L2Problem

    cz = Coords.complex(["z1"])
    grid = DbarGrid(grid_n, p.get("grid_shape", "disc"))
    h = field_from_config(p.get("h", {"kind": "entrywise", "entries": [["1"]]}), cz)
    psi = ExpressionScalar(p.get("psi", "z1re^2+z1im^2"), cz)
    fcfg = p.get("f", {"kind": "const_dzbar"})
    rank = h.rank

    def f_fn(z):
        if fcfg.get("kind") == "const_dzbar":
            vec = np.asarray(fcfg.get("vector", [1.0] + [0.0] * (rank - 1)), dtype=complex)
            return np.tile(vec, (z.size, 1))
        if fcfg.get("kind") == "bump_dzbar":
            s = float(fcfg.get("width", 0.5))
            prof = np.exp(-np.abs(z) ** 2 / (s * s))
            vec = np.asarray(fcfg.get("vector", [1.0] + [0.0] * (rank - 1)), dtype=complex)
            return prof[:, None] * vec
        raise ConfigError(f"unknown datum kind {fcfg.get('kind')!r}")

    problem = L2Problem.from_fields(grid, h, psi, f_fn)
    return grid, problem, h


def _run_l2_flat_benchmark(sc: Scenario) -> ScenarioReport:
    from .l2 import check_estimate

    p = sc.params
    rep = ScenarioReport(sc.name, sc.kind, sc.seed)
    sizes = [int(n) for n in p.get("N", [32, 64])]
    bound_cfg = p.get("ratio_bound", {"type": "const", "value": 0.45})
    rows = []
    all_ok = True
    for n in sizes:
        grid, problem, h = _l2_problem_from_params(p, n)
        # metric must be Nakano semi-positive for the estimate direction
        hyp = certify_nakano(h, grid.points[:: max(1, grid.n_points // 512)])
        rep.hypotheses.append(_hyp_entry(f"metric Nakano positive (N={n})", hyp.lambda_min >= -1e-8,
                                         lambda_min=hyp.lambda_min))
        if not rep.hypotheses[-1]["passed"]:
            rep.vacuous = True
            return rep
        report = check_estimate(problem, grid)
        if bound_cfg["type"] == "const":
            bound = float(bound_cfg["value"])
        else:
            bound = 1.0 + float(bound_cfg["c"]) / n
        ok = report.ratio <= bound and report.residual <= 1e-10
        all_ok = all_ok and ok
        rows.append({"N": n, "ratio": report.ratio, "bound": bound, "residual": report.residual,
                     "lhs": report.lhs, "rhs": report.rhs, "iterations": report.iterations,
                     "passed": ok})
    ratios = [r["ratio"] for r in rows]
    spread_ok = (max(ratios) - min(ratios)) <= 0.10 * min(ratios) if len(ratios) > 1 else True
    rep.conclusion = {
        "name": "weighted estimate benchmark",
        "passed": bool(all_ok and spread_ok),
        "rows": rows,
        "ratio_spread_within_10pct": bool(spread_ok),
    }
    rep.tables["l2_rows"] = [[r["N"], r["ratio"], r["residual"]] for r in rows]
    return rep


def _run_l2_violation_search(sc: Scenario) -> ScenarioReport:
    from .l2 import DbarGrid, violation_search

    p = sc.params
    rep = ScenarioReport(sc.name, sc.kind, sc.seed)
    cz = Coords.complex(["z1"])
    n = int(p.get("N", 48))
    grid = DbarGrid(n, p.get("grid_shape", "disc"))
    h = field_from_config(p["h"], cz)
    h_values = np.asarray(h.raw_values(grid.points))

    psi_family = []
    fam = p.get("psi_family", {"s_values": [0.25, 0.5, 1.0, 2.0, 4.0]})
    for s in fam["s_values"]:
        psi = ExpressionScalar(f"{float(s)!r}*(z1re^2+z1im^2)", cz)
        pv = np.asarray(psi.values(grid.points))
        pzz = np.full(grid.n_points, float(s))
        psi_family.append((f"s={s}", pv, pzz))
    f_family = [("dzbar", np.ones((grid.n_points, h.rank), dtype=complex)
                 * np.asarray([1.0] + [0.0] * (h.rank - 1)))]
    result = violation_search(grid, h_values, psi_family, f_family, budget=p.get("budget"))
    margin = float(p.get("margin", 0.05))
    rep.conclusion = {
        "name": "estimate violation search (exploratory)",
        "passed": True,  # exploratory: absence of violation proves nothing
        "found_violation": bool(result["best"]["ratio"] > 1.0 + margin),
        "best": result["best"],
        "n_pairs": result["n_pairs"],
    }
    rep.tables["violation_rows"] = [[r["psi"], r["f"], r["ratio"]] for r in result["results"]]
    return rep


SCENARIO_KINDS = {
    "prekopa_scalar": _run_prekopa_scalar,
    "prekopa_matrix": _run_prekopa_matrix,
    "berndtsson_reinhardt": _run_berndtsson_reinhardt,
    "berndtsson_tube": _run_berndtsson_tube,
    "invariant_direct_image_torus": _run_invariant_direct_image_torus,
    "kiselman": _run_kiselman,
    "exp_reduction": _run_exp_reduction,
    "l2_flat_benchmark": _run_l2_flat_benchmark,
    "l2_violation_search": _run_l2_violation_search,
}


def run(sc: Scenario) -> ScenarioReport:
    """Execute one scenario; hypothesis failures yield a vacuous report."""
    t0 = time.perf_counter()
    report = SCENARIO_KINDS[sc.kind](sc)
    report.timings["total_s"] = time.perf_counter() - t0
    return report


def run_suite(scenarios: Sequence[Scenario], workers: int = 1) -> list[ScenarioReport]:
    """Run scenarios (optionally concurrently) in declaration order.

    Results are ordered like the input regardless of worker count; a
    conclusion failure halts submission of later scenarios.
    """
    if workers <= 1:
        reports = []
        for sc in scenarios:
            rep = run(sc)
            reports.append(rep)
            if rep.conclusion_failed:
                break
        return reports
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run, sc) for sc in scenarios]
        reports = [f.result() for f in futures]
    out = []
    for rep in reports:
        out.append(rep)
        if rep.conclusion_failed:
            break
    return out

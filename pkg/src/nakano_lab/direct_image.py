"""Fiberwise integration: quadrature rules, pushforward metrics and weights.

Rules are deterministic node/weight sets with a doubling-based error
estimate.  Boxes get tensor Gauss-Legendre nodes; Reinhardt annuli integrate
in polar coordinates (radial Gauss-Legendre times periodic trapezoid, with
the radius Jacobian folded into the weights); halfspace slices fall back to
a bounding-box rule with a membership indicator or to seeded quasi-Monte
Carlo; tube fibers integrate over their real base with imaginary parts
pinned to zero.

Pushforward metrics h(t) = integral of h~(t, .) over the fiber carry one of
two derivative schemes: `under_integral` differentiates the integrand at
fixed nodes through hyper-dual evaluation (exact derivative of the
quadrature approximant, available when fibers do not move with t), and
`fixed_node_fd` central-differences the pushforward with the node set
frozen across the whole stencil so quadrature noise cancels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NonconvergenceError, PositivityError
from .exprlang import BinOp, Call, Expr, HyperDual, Num, Var
from .fields import (
    Axis,
    Coords,
    EntrywiseMetric,
    ExpressionScalar,
    HDMatrix,
    MetricField,
    ScalarField,
    ScaledMetric,
    _check_hermitian,
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
from .reduction import pairwise_sum, weighted_sum

__all__ = [
    "QuadratureRule",
    "build_rule",
    "integrate",
    "PushforwardMetric",
    "pushforward_metric",
    "NegLogPushforwardScalar",
    "pushforward_scalar",
    "KiselmanInfScalar",
    "kiselman_inf",
    "ExpReduction",
    "exp_reduce",
    "fubini_consistency",
    "pushforward_derivatives",
]

QMC_SEED = 20210325  # fixed so low-discrepancy runs are bit-reproducible
_FD_STEP = float(np.finfo(float).eps) ** 0.25


@dataclass
class QuadratureRule:
    """Deterministic nodes and positive weights for one fiber domain."""

    points: np.ndarray  # (Q, d)
    weights: np.ndarray  # (Q,)
    kind: str
    order: int

    def __len__(self) -> int:
        return self.points.shape[0]

    def apply(self, f: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return weighted_sum(self.weights, np.asarray(f(self.points)))


def _gauss_segment(lo: float, hi: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), half * w


def _tensor(axes: list[tuple[np.ndarray, np.ndarray]]) -> tuple[np.ndarray, np.ndarray]:
    pts = [a[0] for a in axes]
    wts = [a[1] for a in axes]
    mesh = np.meshgrid(*pts, indexing="ij")
    P = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    W = np.ones(P.shape[0])
    for i, w in enumerate(wts):
        wm = np.meshgrid(*[w if j == i else np.ones_like(wts[j]) for j in range(len(wts))], indexing="ij")[i]
        W = W * wm.reshape(-1)
    return P, W


def build_rule(domain: Domain, order: int, kind: str | None = None) -> QuadratureRule:
    """Construct a rule for a bounded fiber domain.

    `order` is the per-axis node count (total sample count for qmc).
    """
    order = int(order)
    if order < 2:
        raise ConfigError("quadrature order must be >= 2")
    if isinstance(domain, Box):
        if kind not in (None, "gauss"):
            return _mask_rule(domain, order, kind)
        axes = [_gauss_segment(domain.lo[i], domain.hi[i], order) for i in range(domain.dim)]
        P, W = _tensor(axes)
        return QuadratureRule(P, W, "gauss", order)
    if isinstance(domain, ReinhardtAnnulus):
        if kind not in (None, "polar_gauss"):
            return _mask_rule(domain, order, kind)
        axes = []
        for j in range(domain.m):
            r, wr = _gauss_segment(domain.r_lo[j], domain.r_hi[j], order)
            n_ang = max(8, 2 * order)
            th = 2.0 * np.pi * np.arange(n_ang) / n_ang
            wth = np.full(n_ang, 2.0 * np.pi / n_ang)
            axes.append((r, wr * r))  # dV = r dr dtheta
            axes.append((th, wth))
        Ppol, W = _tensor(axes)
        P = np.empty_like(Ppol)
        for j in range(domain.m):
            P[:, 2 * j] = Ppol[:, 2 * j] * np.cos(Ppol[:, 2 * j + 1])
            P[:, 2 * j + 1] = Ppol[:, 2 * j] * np.sin(Ppol[:, 2 * j + 1])
        return QuadratureRule(P, W, "polar_gauss", order)
    if isinstance(domain, TubeOverBase):
        inner = build_rule(domain.base, order, kind)
        P = np.zeros((len(inner), domain.dim))
        P[:, 0::2] = inner.points
        return QuadratureRule(P, inner.weights, "tube_" + inner.kind, order)
    if isinstance(domain, HalfspaceConvex):
        return _mask_rule(domain, order, kind or "boxmask")
    raise ConfigError(f"no quadrature rule for domain type {type(domain).__name__}")


def _mask_rule(domain: Domain, order: int, kind: str) -> QuadratureRule:
    lo, hi = domain.bounding_box()
    if kind == "boxmask":
        axes = [_gauss_segment(lo[i], hi[i], order) for i in range(domain.dim)]
        P, W = _tensor(axes)
        mask = domain.contains_many(P)
        return QuadratureRule(P[mask], W[mask], "boxmask", order)
    if kind == "qmc":
        from scipy.stats import qmc

        engine = qmc.Halton(d=domain.dim, scramble=True, seed=QMC_SEED)
        P = qmc.scale(engine.random(order), lo, hi)
        mask = domain.contains_many(P)
        vol = float(np.prod(hi - lo))
        W = np.full(int(mask.sum()), vol / order)
        return QuadratureRule(P[mask], W, "qmc", order)
    raise ConfigError(f"unknown quadrature kind {kind!r}")


def integrate(
    f: Callable[[np.ndarray], np.ndarray],
    fiber: Domain,
    order: int = 32,
    kind: str | None = None,
    rel_tol: float = 1e-4,
    override: bool = False,
    max_doublings: int = 3,
) -> tuple[np.ndarray, float, list[float]]:
    """Quadrature with an order-doubling error estimate.

    Returns (value, relative error estimate, estimate ladder).  Raises
    NonconvergenceError when the estimate exceeds `rel_tol` and doubling
    stops shrinking it, unless `override` accepts the coarse result.
    """
    cur = build_rule(fiber, order, kind).apply(f)
    ladder: list[float] = []
    est = np.inf
    for step in range(1, max_doublings + 1):
        order *= 2
        nxt = build_rule(fiber, order, kind).apply(f)
        num = float(np.linalg.norm(np.atleast_1d(nxt - cur)))
        den = float(np.linalg.norm(np.atleast_1d(nxt))) + 1e-300
        new_est = num / den
        ladder.append(new_est)
        cur = nxt
        if new_est <= rel_tol:
            return cur, new_est, ladder
        if new_est >= est and not override:
            raise NonconvergenceError(
                f"quadrature estimate not shrinking under doubling ({est:.3e} -> {new_est:.3e})"
            )
        est = new_est
    if est > rel_tol and not override:
        raise NonconvergenceError(
            f"quadrature relative error estimate {est:.3e} exceeds {rel_tol:.1e}; "
            "raise the order or pass override=True"
        )
    return cur, est, ladder


# --------------------------------------------------------------------------
# Pushforward metric
# --------------------------------------------------------------------------


def _split_coords(total: Coords, fiber_axis_names: Sequence[str]) -> tuple[Coords, Coords]:
    names = [a.name for a in total.axes]
    fset = list(fiber_axis_names)
    if names[len(names) - len(fset) :] != fset:
        raise ConfigError("fiber axes must be the trailing axes of the total coordinates")
    base = Coords(total.axes[: len(names) - len(fset)])
    fib = Coords(total.axes[len(names) - len(fset) :])
    return base, fib


def _hd_weighted_sum(h: HyperDual, w: np.ndarray, shape: tuple[int, int]) -> HyperDual:
    n, q = shape

    def red(c):
        arr = np.asarray(c)
        if arr.ndim == 0:
            arr = np.broadcast_to(arr, (n * q,))
        arr = arr.reshape(n, q)
        return weighted_sum(w, arr.T)  # sum over the node axis

    return HyperDual(red(h.v), red(h.d1), red(h.d2), red(h.d12))


class PushforwardMetric(MetricField):
    """h(t) = integral of a total-space metric over the fiber at t."""

    def __init__(
        self,
        total: MetricField,
        domain: Fibered,
        fiber_axis_names: Sequence[str],
        order: int = 32,
        kind: str | None = None,
        scheme: str = "auto",
        rel_tol: float = 1e-4,
        override: bool = False,
    ):
        self.total = total
        self.domain = domain
        base, fib = _split_coords(total.coords, fiber_axis_names)
        self.coords = base
        self.fiber_coords = fib
        self.rank = total.rank
        self.order = int(order)
        self.kind = kind
        if scheme == "auto":
            scheme = "under_integral" if domain.t_independent else "fixed_node_fd"
        if scheme == "under_integral" and not domain.t_independent:
            raise ConfigError("under-integral derivatives require t-independent fibers")
        if scheme not in ("under_integral", "fixed_node_fd"):
            raise ConfigError(f"unknown derivative scheme {scheme!r}")
        self.scheme = scheme
        center = domain._probe_point()
        probe_fiber = domain.fiber(center)
        if probe_fiber.dim != fib.dim:
            raise ConfigError(
                f"fiber domain dimension {probe_fiber.dim} != fiber coordinate dimension {fib.dim}"
            )
        coarse = self._rule_for(center, self.order)
        fine = self._rule_for(center, 2 * self.order)
        a = self._integrate_with(np.atleast_2d(center), coarse)
        b = self._integrate_with(np.atleast_2d(center), fine)
        num = float(np.linalg.norm(a[0] - b[0]))
        den = float(np.linalg.norm(b[0])) + 1e-300
        self.error_estimate = num / den
        if self.error_estimate > rel_tol and not override:
            raise NonconvergenceError(
                f"pushforward quadrature error estimate {self.error_estimate:.3e} exceeds {rel_tol:.1e}"
            )
        self._cached_rule = self._rule_for(center, self.order) if domain.t_independent else None

    def _rule_for(self, t: np.ndarray, order: int) -> QuadratureRule:
        return build_rule(self.domain.fiber(np.asarray(t, dtype=float)), order, self.kind)

    def _total_points(self, P: np.ndarray, nodes: np.ndarray) -> np.ndarray:
        N, Q = P.shape[0], nodes.shape[0]
        out = np.empty((N * Q, self.coords.dim + self.fiber_coords.dim))
        out[:, : self.coords.dim] = np.repeat(P, Q, axis=0)
        out[:, self.coords.dim :] = np.tile(nodes, (N, 1))
        return out

    def _integrate_with(self, P: np.ndarray, rule: QuadratureRule) -> np.ndarray:
        tp = self._total_points(P, rule.points)
        vals = np.asarray(self.total.raw_values(tp))
        vals = vals.reshape(P.shape[0], len(rule), self.rank, self.rank)
        return np.stack([weighted_sum(rule.weights, v) for v in vals])

    def raw_values(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if self._cached_rule is not None:
            return self._integrate_with(P, self._cached_rule)
        return np.stack([self._integrate_with(p[None], self._rule_for(p, self.order))[0] for p in P])

    def raw_values_hd(self, P, dir1, dir2):
        if self.scheme != "under_integral":
            raise NotImplementedError("hyper-dual evaluation requires the under-integral scheme")
        P = np.atleast_2d(np.asarray(P, dtype=float))
        rule = self._cached_rule
        tp = self._total_points(P, rule.points)
        embed = lambda v: None if v is None else np.concatenate([np.asarray(v, float), np.zeros(self.fiber_coords.dim)])
        hd = self.total.raw_values_hd(tp, embed(dir1), embed(dir2))
        N, Q = P.shape[0], len(rule)

        def red(c):
            arr = np.broadcast_to(np.asarray(c), (N * Q, self.rank, self.rank))
            arr = arr.reshape(N, Q, self.rank, self.rank)
            return np.stack([weighted_sum(rule.weights, a) for a in arr])

        return HDMatrix(red(hd.v), red(hd.d1), red(hd.d2), red(hd.d12))

    # finite-difference scheme: nodes frozen across the stencil per point
    def _fd_value(self, t: np.ndarray, rule: QuadratureRule) -> np.ndarray:
        return self._integrate_with(np.atleast_2d(t), rule)[0]

    def d1_batch(self, P, j):
        if self.scheme == "under_integral":
            return super().d1_batch(P, j)
        P = np.atleast_2d(np.asarray(P, dtype=float))
        out = []
        for p in P:
            rule = self._rule_for(p, self.order)
            h = _FD_STEP * (1.0 + abs(p[j]))
            pp, pm = p.copy(), p.copy()
            pp[j] += h
            pm[j] -= h
            out.append((self._fd_value(pp, rule) - self._fd_value(pm, rule)) / (2.0 * h))
        return np.stack(out)

    def d2_batch(self, P, j, k):
        if self.scheme == "under_integral":
            return super().d2_batch(P, j, k)
        P = np.atleast_2d(np.asarray(P, dtype=float))
        out = []
        for p in P:
            rule = self._rule_for(p, self.order)
            hj = _FD_STEP * (1.0 + abs(p[j]))
            hk = _FD_STEP * (1.0 + abs(p[k]))
            if j == k:
                pp, pm = p.copy(), p.copy()
                pp[j] += hj
                pm[j] -= hj
                out.append(
                    (self._fd_value(pp, rule) - 2.0 * self._fd_value(p, rule) + self._fd_value(pm, rule))
                    / (hj * hj)
                )
            else:
                vals = []
                for sj, sk in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    q = p.copy()
                    q[j] += sj * hj
                    q[k] += sk * hk
                    vals.append(self._fd_value(q, rule))
                out.append((vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * hj * hk))
        return np.stack(out)


def pushforward_metric(
    total: MetricField,
    omega: Fibered,
    t: Sequence[float],
    order: int = 32,
    kind: str | None = None,
    rel_tol: float = 1e-4,
    override: bool = False,
) -> tuple[np.ndarray, float]:
    """One-shot Hermitian pushforward value at t with error control."""
    t = np.asarray(t, dtype=float)
    base_dim = omega.base.dim
    fib = omega.fiber(t)

    def f(nodes):
        tp = np.empty((nodes.shape[0], base_dim + nodes.shape[1]))
        tp[:, :base_dim] = t
        tp[:, base_dim:] = nodes
        return np.asarray(total.raw_values(tp))

    val, est, _ = integrate(f, fib, order=order, kind=kind, rel_tol=rel_tol, override=override)
    val = _check_hermitian(val[None], 1e-10, "pushforward metric value")[0]
    evs = np.linalg.eigvalsh(val)
    if evs[0] <= 0.0:
        raise PositivityError(f"pushforward metric not positive definite at {t.tolist()}")
    return val, est


# --------------------------------------------------------------------------
# Scalar pushforward (log-integral weight)
# --------------------------------------------------------------------------


class NegLogPushforwardScalar(ScalarField):
    """phi~(t) = -log integral of exp(-phi(t, .)) over the fiber.

    Overflow is guarded by shifting with the sampled minimum of phi before
    exponentiating; the shift is a constant per base point so hyper-dual
    derivatives pass through exactly.
    """

    def __init__(
        self,
        phi: ScalarField,
        domain: Fibered,
        fiber_axis_names: Sequence[str],
        order: int = 48,
        kind: str | None = None,
        rel_tol: float = 1e-4,
        override: bool = False,
    ):
        self.phi = phi
        self.domain = domain
        base, fib = _split_coords(phi.coords, fiber_axis_names)
        self.coords = base
        self.fiber_coords = fib
        self.order = int(order)
        self.kind = kind
        self._cached_rule = (
            build_rule(domain.fiber(domain._probe_point()), self.order, kind) if domain.t_independent else None
        )
        # doubling probe at the base center, on the integral scale e^{-phi~}
        center = np.atleast_2d(domain._probe_point())
        coarse = float(self.values(center)[0])
        saved, self.order = self.order, 2 * self.order
        saved_rule, self._cached_rule = self._cached_rule, (
            build_rule(domain.fiber(domain._probe_point()), self.order, kind) if domain.t_independent else None
        )
        fine = float(self.values(center)[0])
        self.order, self._cached_rule = saved, saved_rule
        self.error_estimate = abs(-math.expm1(coarse - fine))
        if self.error_estimate > rel_tol and not override:
            raise NonconvergenceError(
                f"scalar pushforward quadrature error estimate {self.error_estimate:.3e} exceeds {rel_tol:.1e}"
            )

    def _rule_for(self, t: np.ndarray) -> QuadratureRule:
        if self._cached_rule is not None:
            return self._cached_rule
        return build_rule(self.domain.fiber(t), self.order, self.kind)

    def _total_points(self, P: np.ndarray, nodes: np.ndarray) -> np.ndarray:
        N, Q = P.shape[0], nodes.shape[0]
        out = np.empty((N * Q, self.coords.dim + self.fiber_coords.dim))
        out[:, : self.coords.dim] = np.repeat(P, Q, axis=0)
        out[:, self.coords.dim :] = np.tile(nodes, (N, 1))
        return out

    def values(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        out = np.empty(P.shape[0])
        for i, p in enumerate(P):
            rule = self._rule_for(p)
            tp = self._total_points(p[None], rule.points)
            vals = np.asarray(self.phi.values(tp))
            shift = float(np.min(vals))
            integral = float(weighted_sum(rule.weights, np.exp(-(vals - shift))))
            out[i] = shift - math.log(integral)
        return out

    def values_hd(self, P, dir1, dir2):
        if not self.domain.t_independent:
            raise NotImplementedError("hyper-dual derivatives require t-independent fibers")
        P = np.atleast_2d(np.asarray(P, dtype=float))
        rule = self._cached_rule
        tp = self._total_points(P, rule.points)
        embed = lambda v: None if v is None else np.concatenate([np.asarray(v, float), np.zeros(self.fiber_coords.dim)])
        hd = self.phi.values_hd(tp, embed(dir1), embed(dir2))
        N, Q = P.shape[0], len(rule)
        vals = np.broadcast_to(np.asarray(hd.v), (N * Q,)).reshape(N, Q)
        shift = vals.min(axis=1)  # (N,)
        shifted = hd - HyperDual.constant(np.repeat(shift, Q))
        expnh = (-shifted).exp()
        summed = _hd_weighted_sum(expnh, rule.weights, (N, Q))
        return HyperDual.constant(shift) - summed.log()


def pushforward_scalar(
    phi: ScalarField,
    omega: Fibered,
    t: Sequence[float],
    order: int = 48,
    kind: str | None = None,
) -> float:
    field = NegLogPushforwardScalar(phi, omega, _fiber_axis_names(phi.coords, omega), order, kind)
    return float(field.values(np.atleast_2d(np.asarray(t, dtype=float)))[0])


def _fiber_axis_names(total: Coords, omega: Fibered) -> list[str]:
    """Trailing axes of `total` whose flattened dimension matches the fiber."""
    want = omega.fiber_dim
    got = 0
    names: list[str] = []
    for a in reversed(total.axes):
        if got >= want:
            break
        names.append(a.name)
        got += len(a.var_names)
    if got != want:
        raise ConfigError("cannot split coordinates to match the fiber dimension")
    return list(reversed(names))


# --------------------------------------------------------------------------
# Kiselman fiberwise infimum
# --------------------------------------------------------------------------


class KiselmanInfScalar(ScalarField):
    """phi*(t) = fiber minimum of phi(t, .), by grid scan plus coordinate descent.

    The descent does parabolic line steps per fiber coordinate; no
    derivative capability is exposed (the infimum need not be smooth), so
    positivity checks use the submean test.
    """

    def __init__(
        self,
        phi: ScalarField,
        domain: Fibered,
        fiber_axis_names: Sequence[str],
        grid_res: int = 33,
        descent_steps: int = 30,
    ):
        self.phi = phi
        self.domain = domain
        base, fib = _split_coords(phi.coords, fiber_axis_names)
        self.coords = base
        self.fiber_coords = fib
        self.grid_res = int(grid_res)
        self.descent_steps = int(descent_steps)

    def minimize(self, t: np.ndarray) -> tuple[float, np.ndarray]:
        t = np.asarray(t, dtype=float)
        fib = self.domain.fiber(t)
        grid = sample_grid(fib, self.grid_res)
        Z = grid.points
        tp = np.empty((Z.shape[0], self.coords.dim + self.fiber_coords.dim))
        tp[:, : self.coords.dim] = t
        tp[:, self.coords.dim :] = Z
        vals = np.asarray(self.phi.values(tp))
        best = int(np.argmin(vals))
        z = Z[best].copy()
        fz = float(vals[best])
        lo, hi = fib.bounding_box()
        steps = 0.25 * (hi - lo)

        def feval(zz):
            q = np.concatenate([t, zz])
            return float(self.phi.values(q[None])[0])

        for _ in range(self.descent_steps):
            improved = False
            for c in range(z.size):
                h = steps[c]
                if h <= 1e-14:
                    continue
                zp, zm = z.copy(), z.copy()
                zp[c] = min(z[c] + h, hi[c])
                zm[c] = max(z[c] - h, lo[c])
                fp, fm = feval(zp), feval(zm)
                # parabola through (z-h, z, z+h); fall back to the best sample
                denom = fp - 2.0 * fz + fm
                cand = None
                if denom > 1e-300:
                    delta = 0.5 * (fm - fp) / denom * h
                    zc = z.copy()
                    zc[c] = float(np.clip(z[c] + delta, lo[c], hi[c]))
                    if fib.contains(zc):
                        cand = (feval(zc), zc)
                options = [(fp, zp), (fm, zm)] + ([cand] if cand else [])
                fbest, zbest = min(options, key=lambda o: o[0])
                if fbest < fz - 1e-300:
                    fz, z = fbest, zbest
                    improved = True
                    steps[c] = min(h * 1.5, 0.5 * (hi[c] - lo[c]))
                else:
                    steps[c] = h * 0.5
            if not improved and np.all(steps <= 1e-12):
                break
        return fz, z

    def values(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return np.array([self.minimize(p)[0] for p in P])


def kiselman_inf(
    phi: ScalarField,
    omega: Fibered,
    t: Sequence[float],
    grid_res: int = 33,
    descent_steps: int = 30,
) -> tuple[float, np.ndarray]:
    """Fiber infimum and its location at base point t."""
    field = KiselmanInfScalar(phi, omega, _fiber_axis_names(phi.coords, omega), grid_res, descent_steps)
    return field.minimize(np.asarray(t, dtype=float))


# --------------------------------------------------------------------------
# Exp-map reduction (tube fiber -> Reinhardt annulus)
# --------------------------------------------------------------------------


@dataclass
class ExpReduction:
    h_prime: MetricField  # pullback h'(., w) = h~(., ln|w|)
    h_second: MetricField  # h'' = (2 pi)^-m prod |w_j|^-2 h'
    annulus: ReinhardtAnnulus
    w_coords: Coords


def _log_modulus_expr(wname: str) -> Expr:
    # x_j = ln|w_j| = 0.5 * log(w_re^2 + w_im^2)
    sq = BinOp("+", BinOp("^", Var(wname + "re"), Num(2.0)), BinOp("^", Var(wname + "im"), Num(2.0)))
    return BinOp("*", Num(0.5), Call("log", sq))


def exp_reduce(
    h_tube: MetricField,
    u_box: Box,
    fiber_axis_names: Sequence[str],
    w_prefix: str = "w",
) -> ExpReduction:
    """Transport a tube metric through w = exp(z) onto a Reinhardt annulus.

    `h_tube` depends on the real fiber variables only (imaginary parts of
    the tube never enter).  The annulus radii are the exponentials of the
    base box bounds, and the density picks up the inverse Jacobian
    (2 pi)^-m prod |w_j|^-2 of the polar change of variables, which keeps
    integral(h~ over U) = integral(h'' over annulus) and leaves the
    curvature unchanged away from the axes (log|w_j| is pluriharmonic).
    """
    names = [a.name for a in h_tube.coords.axes]
    fset = list(fiber_axis_names)
    if names[len(names) - len(fset) :] != fset:
        raise ConfigError("fiber axes must be the trailing axes of the tube metric")
    for nm in fset:
        ax = h_tube.coords.axes[names.index(nm)]
        if ax.is_complex:
            raise ConfigError("tube fiber axes must be real variables")
    m = len(fset)
    if u_box.dim != m:
        raise ConfigError("base box dimension must match the number of fiber axes")
    base_axes = h_tube.coords.axes[: len(names) - m]
    w_axes = [Axis(f"{w_prefix}{j + 1}", is_complex=True) for j in range(m)]
    w_coords = Coords(list(base_axes) + w_axes)
    mapping = {fset[j]: _log_modulus_expr(w_axes[j].name) for j in range(m)}
    if not hasattr(h_tube, "substituted"):
        raise ConfigError(f"{type(h_tube).__name__} does not support coordinate substitution")
    h_prime = h_tube.substituted(mapping, w_coords)

    density: Expr = Num(1.0 / (2.0 * np.pi) ** m)
    for ax in w_axes:
        sq = BinOp("+", BinOp("^", Var(ax.name + "re"), Num(2.0)), BinOp("^", Var(ax.name + "im"), Num(2.0)))
        density = BinOp("*", density, BinOp("^", sq, Num(-1.0)))
    h_second = ScaledMetric(ExpressionScalar(density, w_coords), h_prime)

    annulus = ReinhardtAnnulus(np.exp(u_box.lo), np.exp(u_box.hi))
    return ExpReduction(h_prime=h_prime, h_second=h_second, annulus=annulus, w_coords=w_coords)


# --------------------------------------------------------------------------
# Fubini consistency and pushforward derivatives
# --------------------------------------------------------------------------


def fubini_consistency(
    h_total: MetricField,
    omega: Fibered,
    u,
    psi: ScalarField | None = None,
    base_order: int = 32,
    fiber_order: int = 32,
    kind: str | None = None,
) -> dict:
    """Both sides of the base/total-space norm identity for z-independent sections.

    lhs integrates |u|^2 in the total-space metric (weighted by exp(-psi(t)))
    over the fibered domain; rhs integrates |u|^2 in the pushforward metric
    over the base.  u is a length-r vector or a callable t -> vector.
    """
    base_rule = build_rule(omega.base, base_order, None)
    uf = u if callable(u) else (lambda t, _u=np.asarray(u, dtype=complex): _u)
    base_dim = omega.base.dim

    lhs_parts = []
    rhs_parts = []
    for t in base_rule.points:
        uv = np.asarray(uf(t), dtype=complex)
        fib = omega.fiber(t)
        frule = build_rule(fib, fiber_order, kind)
        tp = np.empty((len(frule), base_dim + frule.points.shape[1]))
        tp[:, :base_dim] = t
        tp[:, base_dim:] = frule.points
        Hvals = np.asarray(h_total.raw_values(tp))
        quad = np.real(np.einsum("l,qlm,m->q", np.conj(uv), Hvals, uv))
        weight = float(np.exp(-psi.value(t))) if psi is not None else 1.0
        lhs_parts.append(weight * float(weighted_sum(frule.weights, quad)))
        hmat = weighted_sum(frule.weights, Hvals)
        rhs_parts.append(weight * float(np.real(np.conj(uv) @ hmat @ uv)))
    w = base_rule.weights
    lhs = float(weighted_sum(w, np.asarray(lhs_parts)))
    rhs = float(weighted_sum(w, np.asarray(rhs_parts)))
    return {"lhs": lhs, "rhs": rhs, "abs_diff": abs(lhs - rhs), "rel_diff": abs(lhs - rhs) / (abs(rhs) + 1e-300)}


def pushforward_derivatives(P: PushforwardMetric, t: Sequence[float], j: int, k: int) -> np.ndarray:
    """Second derivative of the pushforward metric at t along base axes j, k."""
    return np.asarray(P.d2_batch(np.atleast_2d(np.asarray(t, dtype=float)), j, k))[0]

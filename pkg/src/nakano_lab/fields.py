"""Scalar and Hermitian-matrix fields with exact derivatives.

Fields are evaluated on flattened real coordinates described by a `Coords`
object; complex axes contribute a (re, im) pair of variables.  Every field
exposes batched values and batched hyper-dual evaluation along two real
directions, which is all the curvature machinery needs.  Matrix-level
constructors (matrix exponential, conformal scaling, torus averaging,
quadrature pushforwards) sit above the scalar expression language.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import exprlang
from .errors import ConfigError, NumericalError, PositivityError
from .exprlang import Expr, HyperDual
from .reduction import pairwise_sum

__all__ = [
    "Axis",
    "Coords",
    "ScalarField",
    "ExpressionScalar",
    "SumScalar",
    "MetricField",
    "ConstantMetric",
    "EntrywiseMetric",
    "ScaledMetric",
    "MexpMetric",
    "TorusAveragedMetric",
    "HDMatrix",
    "hd_expm",
    "metric_eval",
    "second_derivative",
    "wirtinger2",
    "wirtinger_first",
    "torus_average",
]

HERMITIAN_RTOL = 1e-12


# --------------------------------------------------------------------------
# Coordinates
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Axis:
    name: str
    is_complex: bool = False

    @property
    def var_names(self) -> tuple[str, ...]:
        if self.is_complex:
            return (self.name + "re", self.name + "im")
        return (self.name,)


class Coords:
    """Ordered axes with the flattened real-variable layout."""

    def __init__(self, axes: Sequence[Axis]):
        self.axes = tuple(axes)
        self.var_names: tuple[str, ...] = tuple(v for a in self.axes for v in a.var_names)
        self.dim = len(self.var_names)
        self._starts = []
        pos = 0
        for a in self.axes:
            self._starts.append(pos)
            pos += len(a.var_names)

    @staticmethod
    def real(names: Sequence[str]) -> "Coords":
        return Coords([Axis(n, False) for n in names])

    @staticmethod
    def complex(names: Sequence[str]) -> "Coords":
        return Coords([Axis(n, True) for n in names])

    @property
    def n_axes(self) -> int:
        return len(self.axes)

    @property
    def all_real(self) -> bool:
        return all(not a.is_complex for a in self.axes)

    @property
    def all_complex(self) -> bool:
        return all(a.is_complex for a in self.axes)

    def axis_vars(self, j: int) -> tuple[int, ...]:
        """Flat variable indices belonging to axis j."""
        start = self._starts[j]
        return tuple(range(start, start + len(self.axes[j].var_names)))

    def env(self, P: np.ndarray) -> dict[str, np.ndarray]:
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if P.shape[-1] != self.dim:
            raise ValueError(f"point dimension {P.shape[-1]} != coords dimension {self.dim}")
        return {name: P[..., i] for i, name in enumerate(self.var_names)}

    def direction(self, j: int) -> np.ndarray:
        e = np.zeros(self.dim)
        e[j] = 1.0
        return e

    def concat(self, other: "Coords") -> "Coords":
        return Coords(self.axes + other.axes)

    def subset(self, axis_names: Sequence[str]) -> "Coords":
        by_name = {a.name: a for a in self.axes}
        return Coords([by_name[n] for n in axis_names])

    def __eq__(self, other):
        return isinstance(other, Coords) and self.axes == other.axes

    def __repr__(self):
        return f"Coords({list(self.axes)!r})"


def _dir_env(coords: Coords, vec: np.ndarray | None) -> dict[str, float]:
    if vec is None:
        return {}
    vec = np.asarray(vec, dtype=float)
    return {name: vec[i] for i, name in enumerate(coords.var_names) if vec[i] != 0.0}


# --------------------------------------------------------------------------
# Hyper-dual matrices
# --------------------------------------------------------------------------


class HDMatrix:
    """Matrix (or batch of matrices) with hyper-dual entries.

    Stored as four arrays of equal shape (..., r, r); the product rule for
    matrix multiplication mirrors scalar hyper-dual multiplication.
    """

    __slots__ = ("v", "d1", "d2", "d12")

    def __init__(self, v, d1=None, d2=None, d12=None):
        self.v = np.asarray(v)
        z = np.zeros_like(self.v)
        self.d1 = z if d1 is None else np.asarray(d1)
        self.d2 = z if d2 is None else np.asarray(d2)
        self.d12 = z if d12 is None else np.asarray(d12)

    def __add__(self, other: "HDMatrix") -> "HDMatrix":
        return HDMatrix(self.v + other.v, self.d1 + other.d1, self.d2 + other.d2, self.d12 + other.d12)

    def __sub__(self, other: "HDMatrix") -> "HDMatrix":
        return HDMatrix(self.v - other.v, self.d1 - other.d1, self.d2 - other.d2, self.d12 - other.d12)

    def __neg__(self) -> "HDMatrix":
        return HDMatrix(-self.v, -self.d1, -self.d2, -self.d12)

    def __matmul__(self, other: "HDMatrix") -> "HDMatrix":
        return HDMatrix(
            self.v @ other.v,
            self.d1 @ other.v + self.v @ other.d1,
            self.d2 @ other.v + self.v @ other.d2,
            self.d12 @ other.v + self.d1 @ other.d2 + self.d2 @ other.d1 + self.v @ other.d12,
        )

    def scale_const(self, c) -> "HDMatrix":
        return HDMatrix(self.v * c, self.d1 * c, self.d2 * c, self.d12 * c)

    def scale_hd(self, s: HyperDual) -> "HDMatrix":
        """Multiply by a hyper-dual scalar field value (product rule)."""

        def lift(x):
            return np.asarray(x)[..., None, None] if np.ndim(x) else x

        sv, s1, s2, s12 = lift(s.v), lift(s.d1), lift(s.d2), lift(s.d12)
        return HDMatrix(
            self.v * sv,
            self.d1 * sv + self.v * s1,
            self.d2 * sv + self.v * s2,
            self.d12 * sv + self.d1 * s2 + self.d2 * s1 + self.v * s12,
        )

    def conj_transpose(self) -> "HDMatrix":
        sw = lambda a: np.conj(np.swapaxes(a, -1, -2))
        return HDMatrix(sw(self.v), sw(self.d1), sw(self.d2), sw(self.d12))

    @staticmethod
    def identity_like(v: np.ndarray) -> "HDMatrix":
        eye = np.broadcast_to(np.eye(v.shape[-1], dtype=v.dtype), v.shape).copy()
        return HDMatrix(eye, np.zeros_like(eye), np.zeros_like(eye), np.zeros_like(eye))


def hd_expm(a: HDMatrix, terms: int = 20) -> HDMatrix:
    """Matrix exponential of a hyper-dual matrix by scaling and squaring.

    The truncated series (term `terms`) is applied after scaling the value
    part below norm 1/2, then the result is squared back.  Because the whole
    computation is a polynomial evaluated in hyper-dual arithmetic, the
    derivative components are the exact derivatives of that polynomial.
    """
    norm = float(np.max(np.sum(np.abs(a.v), axis=-1))) if a.v.size else 0.0
    s = max(0, int(np.ceil(np.log2(norm / 0.5))) if norm > 0.5 else 0)
    b = a.scale_const(0.5**s)
    result = HDMatrix.identity_like(b.v)
    term = HDMatrix.identity_like(b.v)
    for k in range(1, terms + 1):
        term = term @ b
        term = term.scale_const(1.0 / k)
        result = result + term
    for _ in range(s):
        result = result @ result
    return result


# --------------------------------------------------------------------------
# Scalar fields
# --------------------------------------------------------------------------


class ScalarField:
    """Real scalar field over `coords` with optional second-derivative support."""

    coords: Coords

    def values(self, P: np.ndarray) -> np.ndarray:
        hd = self.values_hd(np.atleast_2d(P), None, None)
        return np.asarray(hd.v)

    def values_hd(self, P: np.ndarray, dir1: np.ndarray | None, dir2: np.ndarray | None) -> HyperDual:
        raise NotImplementedError(f"{type(self).__name__} has no derivative capability")

    def value(self, p: np.ndarray) -> float:
        return float(self.values(np.atleast_2d(p))[0])

    def d2(self, p: np.ndarray, j: int, k: int) -> float:
        hd = self.values_hd(np.atleast_2d(p), self.coords.direction(j), self.coords.direction(k))
        return float(np.asarray(hd.d12).reshape(-1)[0])


class ExpressionScalar(ScalarField):
    def __init__(self, expr: Expr | str, coords: Coords):
        self.expr = exprlang.parse(expr) if isinstance(expr, str) else expr
        self.coords = coords
        missing = exprlang.free_variables(self.expr) - set(coords.var_names)
        if missing:
            raise ConfigError(f"expression uses unbound variables {sorted(missing)}")

    def values(self, P):
        env = self.coords.env(P)
        vals = exprlang.eval_value(self.expr, env)
        return np.broadcast_to(np.asarray(vals, dtype=float), (np.atleast_2d(P).shape[0],)).copy()

    def values_hd(self, P, dir1, dir2):
        env = self.coords.env(P)
        return exprlang.eval_hyperdual(self.expr, env, _dir_env(self.coords, dir1), _dir_env(self.coords, dir2))


class SumScalar(ScalarField):
    def __init__(self, parts: Sequence[ScalarField]):
        if not parts:
            raise ConfigError("empty sum")
        self.parts = list(parts)
        self.coords = parts[0].coords
        for p in parts[1:]:
            if p.coords != self.coords:
                raise ConfigError("sum terms must share coordinates")

    def values(self, P):
        return pairwise_sum(np.stack([p.values(P) for p in self.parts]))

    def values_hd(self, P, dir1, dir2):
        acc = None
        for p in self.parts:
            h = p.values_hd(P, dir1, dir2)
            acc = h if acc is None else acc + h
        return acc


# --------------------------------------------------------------------------
# Metric fields
# --------------------------------------------------------------------------


class MetricField:
    """Field of Hermitian positive matrices over `coords`.

    Subclasses implement `raw_values` / `raw_values_hd`; validation
    (Hermitian within 1e-12 relative, positive definite) happens in
    `metric_eval`, which is the public single-point surface.
    """

    coords: Coords
    rank: int

    def raw_values(self, P: np.ndarray) -> np.ndarray:
        return self.raw_values_hd(np.atleast_2d(P), None, None).v

    def raw_values_hd(self, P: np.ndarray, dir1, dir2) -> HDMatrix:
        raise NotImplementedError(f"{type(self).__name__} has no derivative capability")

    # derivative surface used by the curvature module; pushforward fields
    # with finite-difference schemes override these
    def d1_batch(self, P: np.ndarray, j: int) -> np.ndarray:
        e = self.coords.direction(j)
        return self.raw_values_hd(P, e, e).d1

    def d2_batch(self, P: np.ndarray, j: int, k: int) -> np.ndarray:
        hd = self.raw_values_hd(P, self.coords.direction(j), self.coords.direction(k))
        return hd.d12

    def d1_d2_pair(self, P: np.ndarray, j: int, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(d/dj, d/dk, d2/djdk) in one evaluation where supported."""
        hd = self.raw_values_hd(P, self.coords.direction(j), self.coords.direction(k))
        return hd.d1, hd.d2, hd.d12


def _check_hermitian(M: np.ndarray, rtol: float, what: str) -> np.ndarray:
    MT = np.conj(np.swapaxes(M, -1, -2))
    scale = np.linalg.norm(M, axis=(-2, -1))
    dev = np.linalg.norm(M - MT, axis=(-2, -1))
    if np.any(dev > rtol * np.maximum(scale, 1e-300)):
        worst = float(np.max(dev / np.maximum(scale, 1e-300)))
        raise PositivityError(f"{what} is not Hermitian (relative deviation {worst:.3e})")
    return 0.5 * (M + MT)


def metric_eval(m: MetricField, p: np.ndarray) -> np.ndarray:
    """Validated Hermitian positive definite value at a single point."""
    M = np.asarray(m.raw_values(np.atleast_2d(p)))[0]
    M = _check_hermitian(M[None], HERMITIAN_RTOL, "metric value")[0]
    evals = np.linalg.eigvalsh(M)
    if evals[0] <= 0.0:
        raise PositivityError(f"metric not positive definite at {np.asarray(p).tolist()}: min eigenvalue {evals[0]:.3e}")
    return M


def second_derivative(m: MetricField, p: np.ndarray, j: int, k: int) -> np.ndarray:
    """Entrywise d^2 m / dx_j dx_k at p (flat real-coordinate indices)."""
    d = m.coords.dim
    if not (0 <= j < d and 0 <= k < d):
        raise ValueError(f"axis out of range for {d}-dimensional coordinates")
    return np.asarray(m.d2_batch(np.atleast_2d(p), j, k))[0]


def _complex_axis_pair(coords: Coords, j: int) -> tuple[int, int]:
    if coords.axes[j].is_complex:
        xi, yi = coords.axis_vars(j)
        return xi, yi
    raise ValueError(f"axis {j} ({coords.axes[j].name}) is not a complex axis")


def wirtinger2(m: MetricField, p: np.ndarray, j: int, k: int) -> np.ndarray:
    """Entrywise d^2 / dz_j dzbar_k from real-pair second derivatives."""
    return wirtinger2_batch(m, np.atleast_2d(p), j, k)[0]


def wirtinger2_batch(m, P: np.ndarray, j: int, k: int) -> np.ndarray:
    xj, yj = _complex_axis_pair(m.coords, j)
    xk, yk = _complex_axis_pair(m.coords, k)
    xx = m.d2_batch(P, xj, xk)
    yy = m.d2_batch(P, yj, yk)
    xy = m.d2_batch(P, xj, yk)
    yx = m.d2_batch(P, yj, xk)
    return 0.25 * (xx + yy) + 0.25j * (xy - yx)


def wirtinger_first(m: MetricField, P: np.ndarray, j: int) -> tuple[np.ndarray, np.ndarray]:
    """(d/dz_j, d/dzbar_j) applied entrywise, batched."""
    xj, yj = _complex_axis_pair(m.coords, j)
    hd = m.raw_values_hd(np.atleast_2d(P), m.coords.direction(xj), m.coords.direction(yj))
    dz = 0.5 * (hd.d1 - 1j * hd.d2)
    dzbar = 0.5 * (hd.d1 + 1j * hd.d2)
    return dz, dzbar


class ConstantMetric(MetricField):
    def __init__(self, matrix: np.ndarray, coords: Coords):
        self.matrix = _check_hermitian(np.asarray(matrix, dtype=complex)[None], HERMITIAN_RTOL, "constant metric")[0]
        self.coords = coords
        self.rank = self.matrix.shape[0]

    def raw_values_hd(self, P, dir1, dir2):
        n = np.atleast_2d(P).shape[0]
        v = np.broadcast_to(self.matrix, (n, self.rank, self.rank)).copy()
        return HDMatrix(v)


class EntrywiseMetric(MetricField):
    """r x r field assembled from scalar expressions for real and imaginary parts.

    `entries[l][m]` is either an Expr/string (real entry) or a pair
    (re, im).  Hermitian symmetry of the resulting values is enforced at
    evaluation time rather than by construction.
    """

    def __init__(self, entries, coords: Coords):
        self.coords = coords
        self.rank = len(entries)
        self._re = []
        self._im = []
        for row in entries:
            if len(row) != self.rank:
                raise ConfigError("entry matrix must be square")
            re_row, im_row = [], []
            for cell in row:
                if isinstance(cell, (tuple, list)):
                    re, im = cell
                else:
                    re, im = cell, None
                re_row.append(self._as_expr(re))
                im_row.append(self._as_expr(im) if im is not None else None)
            self._re.append(re_row)
            self._im.append(im_row)

    def _as_expr(self, e) -> Expr:
        expr = exprlang.parse(e) if isinstance(e, str) else e
        missing = exprlang.free_variables(expr) - set(self.coords.var_names)
        if missing:
            raise ConfigError(f"metric entry uses unbound variables {sorted(missing)}")
        return expr

    def substituted(self, mapping: dict[str, Expr], coords: Coords) -> "EntrywiseMetric":
        entries = []
        for l in range(self.rank):
            row = []
            for mm in range(self.rank):
                re = exprlang.substitute(self._re[l][mm], mapping)
                im = self._im[l][mm]
                row.append((re, exprlang.substitute(im, mapping)) if im is not None else re)
            entries.append(row)
        return EntrywiseMetric(entries, coords)

    def raw_values_hd(self, P, dir1, dir2):
        P = np.atleast_2d(P)
        env = self.coords.env(P)
        e1 = _dir_env(self.coords, dir1)
        e2 = _dir_env(self.coords, dir2)
        n = P.shape[0]
        r = self.rank
        comp = [np.zeros((n, r, r), dtype=complex) for _ in range(4)]
        for l in range(r):
            for mm in range(r):
                h = exprlang.eval_hyperdual(self._re[l][mm], env, e1, e2)
                parts = [h.v, h.d1, h.d2, h.d12]
                if self._im[l][mm] is not None:
                    hi = exprlang.eval_hyperdual(self._im[l][mm], env, e1, e2)
                    parts = [p + 1j * q for p, q in zip(parts, [hi.v, hi.d1, hi.d2, hi.d12])]
                for c, val in zip(comp, parts):
                    c[:, l, mm] = val
        return HDMatrix(*comp)


class ScaledMetric(MetricField):
    """Conformal scale: positive scalar field times a base metric."""

    def __init__(self, scale: ScalarField, base: MetricField):
        if scale.coords != base.coords:
            raise ConfigError("scale and base must share coordinates")
        self.scale = scale
        self.base = base
        self.coords = base.coords
        self.rank = base.rank

    def raw_values_hd(self, P, dir1, dir2):
        s = self.scale.values_hd(np.atleast_2d(P), dir1, dir2)
        return self.base.raw_values_hd(P, dir1, dir2).scale_hd(s)


class MexpMetric(MetricField):
    """exp(-Q) for a Hermitian matrix Q of scalar expressions."""

    def __init__(self, q: EntrywiseMetric, terms: int = 20):
        self.q = q
        self.terms = terms
        self.coords = q.coords
        self.rank = q.rank

    def substituted(self, mapping, coords) -> "MexpMetric":
        return MexpMetric(self.q.substituted(mapping, coords), self.terms)

    def raw_values_hd(self, P, dir1, dir2):
        qhd = self.q.raw_values_hd(P, dir1, dir2)
        return hd_expm(-qhd, terms=self.terms)


class TorusAveragedMetric(MetricField):
    """Average of a metric over independent rotations of complex axes.

    Uses the P-point trapezoid rule per angle, which is spectrally accurate
    for the periodic integrand.  Rotations act linearly on the (re, im)
    pairs, so direction vectors rotate along with the points and hyper-dual
    evaluation stays exact.
    """

    def __init__(self, base: MetricField, rotate_axes: Sequence[str], order: int = 64):
        self.base = base
        self.coords = base.coords
        self.rank = base.rank
        self.order = int(order)
        names = [a.name for a in self.coords.axes]
        self._axis_pairs = []
        for nm in rotate_axes:
            j = names.index(nm)
            if not self.coords.axes[j].is_complex:
                raise ConfigError(f"cannot rotate real axis {nm!r}")
            self._axis_pairs.append(self.coords.axis_vars(j))

    def _rotated(self, arr: np.ndarray, thetas: Sequence[float]) -> np.ndarray:
        out = np.array(arr, dtype=float, copy=True)
        for (xi, yi), th in zip(self._axis_pairs, thetas):
            c, s = np.cos(th), np.sin(th)
            x = np.take(arr, xi, axis=-1)
            y = np.take(arr, yi, axis=-1)
            out[..., xi] = c * x - s * y
            out[..., yi] = s * x + c * y
        return out

    def raw_values_hd(self, P, dir1, dir2):
        P = np.atleast_2d(P)
        m = len(self._axis_pairs)
        grid_1d = 2.0 * np.pi * np.arange(self.order) / self.order
        mesh = np.meshgrid(*([grid_1d] * m), indexing="ij")
        thetas_list = np.stack([g.reshape(-1) for g in mesh], axis=-1)
        parts = []
        for thetas in thetas_list:
            Pr = self._rotated(P, thetas)
            d1r = self._rotated(dir1, thetas) if dir1 is not None else None
            d2r = self._rotated(dir2, thetas) if dir2 is not None else None
            parts.append(self.base.raw_values_hd(Pr, d1r, d2r))
        w = 1.0 / len(thetas_list)
        comps = []
        for attr in ("v", "d1", "d2", "d12"):
            stack = np.stack([getattr(h, attr) for h in parts])
            comps.append(pairwise_sum(stack) * w)
        return HDMatrix(*comps)


def torus_average(m: MetricField, p: np.ndarray, order: int = 64, rotate_axes: Sequence[str] | None = None) -> np.ndarray:
    """Average m over the torus action at a single point."""
    axes = rotate_axes
    if axes is None:
        axes = [a.name for a in m.coords.axes if a.is_complex]
    if not axes:
        raise ConfigError("torus average requires at least one complex axis")
    return TorusAveragedMetric(m, axes, order).raw_values(np.atleast_2d(p))[0]

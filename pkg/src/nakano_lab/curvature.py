"""Curvature tensors, the Nakano form, and positivity certification.

Conventions.  Metric values are Hermitian positive matrices M acting in the
standard way (|u|^2 = u* M u).  For a metric over real coordinates the
curvature is the product-rule expansion of -d_k(M^{-1} d_j M),

    Theta_jk = M^{-1}(d_k M) M^{-1}(d_j M) - M^{-1}(d_j d_k M),

which for M = exp(-phi) with scalar phi reduces to the Hessian of phi.  Over
complex coordinates d_j becomes d/dz_j and d_k becomes d/dzbar_k, and the
rank-one reduction is the complex Hessian of the weight.  The Nakano form on
n-tuples (u_1..u_n) is sum_{j,k} <Theta_jk u_j, u_k>_M; its matrix has r x r
blocks

    N[j,k] = M Theta_kj = (d_j M) M^{-1} (d_k M) - d_j d_k M,

Hermitian by construction up to derivative noise, which is asserted.
Certification solves the generalized problem N u = lambda (I_n (x) M) u so
the verdict is invariant under constant rescaling of the metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericalError, PositivityError
from .fields import Coords, MetricField, ScalarField
from .geometry import SampleGrid

__all__ = [
    "CurvatureTensor",
    "PositivityReport",
    "real_curvature",
    "chern_curvature",
    "nakano_matrix",
    "certify_nakano",
    "griffiths_min",
    "psh_hessian_test",
    "psh_submean_test",
    "convexity_test",
    "scalar_complex_hessian",
]

NAKANO_HERMITIAN_RTOL = 1e-8


@dataclass
class CurvatureTensor:
    """n x n array of r x r matrices at a base point."""

    blocks: np.ndarray  # (n, n, r, r)
    flavor: str  # "real" | "chern"
    point: np.ndarray
    axis_names: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    @property
    def rank(self) -> int:
        return self.blocks.shape[2]


@dataclass
class PositivityReport:
    lambda_min: float
    argmin_point: np.ndarray
    tolerance: float
    passed: bool
    eigenvalues: np.ndarray = field(repr=False)  # (N,) per-point minimum
    points: np.ndarray = field(repr=False)  # (N, d)
    max_form_norm: float = 0.0

    def table(self) -> list[list[float]]:
        """Rows (point coords..., lambda_min) in grid order."""
        return [[*map(float, p), float(l)] for p, l in zip(self.points, self.eigenvalues)]

    def to_dict(self) -> dict:
        return {
            "lambda_min": float(self.lambda_min),
            "argmin_point": [float(x) for x in np.atleast_1d(self.argmin_point)],
            "tolerance": float(self.tolerance),
            "passed": bool(self.passed),
            "max_form_norm": float(self.max_form_norm),
            "n_points": int(len(self.eigenvalues)),
        }


# --------------------------------------------------------------------------
# Batched curvature blocks
# --------------------------------------------------------------------------


def _values_checked(m: MetricField, P: np.ndarray) -> np.ndarray:
    V = np.asarray(m.raw_values(P))
    VH = np.conj(np.swapaxes(V, -1, -2))
    V = 0.5 * (V + VH)
    evs = np.linalg.eigvalsh(V)
    if np.any(evs[..., 0] <= 0.0):
        i = int(np.argmin(evs[..., 0]))
        raise PositivityError(
            f"metric not positive definite at grid point {P[i].tolist()}: min eigenvalue {evs[i, 0]:.3e}"
        )
    return V


def _real_blocks(m: MetricField, P: np.ndarray, Minv: np.ndarray) -> np.ndarray:
    d = m.coords.dim
    N = P.shape[0]
    r = m.rank
    firsts = [np.asarray(m.d1_batch(P, j)) for j in range(d)]
    blocks = np.zeros((N, d, d, r, r), dtype=complex)
    for j in range(d):
        for k in range(j, d):
            second = np.asarray(m.d2_batch(P, j, k))
            tjk = Minv @ firsts[k] @ Minv @ firsts[j] - Minv @ second
            blocks[:, j, k] = tjk
            if k != j:
                blocks[:, k, j] = Minv @ firsts[j] @ Minv @ firsts[k] - Minv @ second
    return blocks


def _chern_blocks(m: MetricField, P: np.ndarray, Minv: np.ndarray) -> np.ndarray:
    coords = m.coords
    n = coords.n_axes
    N = P.shape[0]
    r = m.rank
    adj = lambda a: np.conj(np.swapaxes(a, -1, -2))

    dz = []
    for j in range(n):
        xj, yj = coords.axis_vars(j)
        dx = np.asarray(m.d1_batch(P, xj)).astype(complex)
        dy = np.asarray(m.d1_batch(P, yj)).astype(complex)
        dz.append(0.5 * (dx - 1j * dy))
    dzbar = [adj(a) for a in dz]

    # mixed[j][k] = d^2 M / dz_j dzbar_k; the (k, j) entry is its adjoint
    mixed = [[None] * n for _ in range(n)]
    for j in range(n):
        xj, yj = coords.axis_vars(j)
        for k in range(j, n):
            xk, yk = coords.axis_vars(k)
            xx = np.asarray(m.d2_batch(P, xj, xk)).astype(complex)
            yy = np.asarray(m.d2_batch(P, yj, yk)).astype(complex)
            xy = np.asarray(m.d2_batch(P, xj, yk)).astype(complex)
            yx = xy if k == j else np.asarray(m.d2_batch(P, yj, xk)).astype(complex)
            w = 0.25 * (xx + yy) + 0.25j * (xy - yx)
            mixed[j][k] = w
            if k != j:
                mixed[k][j] = adj(w)

    blocks = np.zeros((N, n, n, r, r), dtype=complex)
    for j in range(n):
        for k in range(n):
            blocks[:, j, k] = Minv @ dzbar[k] @ Minv @ dz[j] - Minv @ mixed[j][k]
    return blocks


def curvature_blocks(m: MetricField, P: np.ndarray, flavor: str | None = None):
    """Batched curvature blocks (N, n, n, r, r) plus the checked metric values."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if flavor is None:
        flavor = _auto_flavor(m.coords)
    V = _values_checked(m, P)
    Minv = np.linalg.inv(V)
    if flavor == "real":
        if not m.coords.all_real:
            raise ValueError("real curvature requires all-real coordinates")
        blocks = _real_blocks(m, P, Minv)
    elif flavor == "chern":
        if not m.coords.all_complex:
            raise ValueError("Chern curvature requires all-complex coordinates")
        blocks = _chern_blocks(m, P, Minv)
    else:
        raise ValueError(f"unknown curvature flavor {flavor!r}")
    return blocks, V


def _auto_flavor(coords: Coords) -> str:
    if coords.all_real:
        return "real"
    if coords.all_complex:
        return "chern"
    raise ValueError("mixed real/complex coordinates: pass an explicit flavor")


def real_curvature(g: MetricField, p: Sequence[float]) -> CurvatureTensor:
    """Curvature of a metric on real coordinates (elementwise differentiation)."""
    P = np.atleast_2d(np.asarray(p, dtype=float))
    blocks, _ = curvature_blocks(g, P, "real")
    return CurvatureTensor(blocks[0], "real", P[0], tuple(a.name for a in g.coords.axes))


def chern_curvature(h: MetricField, p: Sequence[float]) -> CurvatureTensor:
    """Chern curvature from Wirtinger derivatives of the metric."""
    P = np.atleast_2d(np.asarray(p, dtype=float))
    blocks, _ = curvature_blocks(h, P, "chern")
    return CurvatureTensor(blocks[0], "chern", P[0], tuple(a.name for a in h.coords.axes))


# --------------------------------------------------------------------------
# Nakano form
# --------------------------------------------------------------------------


def _assemble_big(blocks: np.ndarray, V: np.ndarray) -> np.ndarray:
    """(N, n*r, n*r) with block (j, k) = V Theta_kj; asserts Hermitian."""
    N, n, _, r, _ = blocks.shape
    big = np.empty((N, n * r, n * r), dtype=complex)
    for j in range(n):
        for k in range(n):
            big[:, j * r : (j + 1) * r, k * r : (k + 1) * r] = V @ blocks[:, k, j]
    bigH = np.conj(np.swapaxes(big, -1, -2))
    scale = np.linalg.norm(big, axis=(-2, -1))
    dev = np.linalg.norm(big - bigH, axis=(-2, -1))
    bad = dev > NAKANO_HERMITIAN_RTOL * np.maximum(scale, 1e-300)
    if np.any(bad):
        i = int(np.argmax(dev / np.maximum(scale, 1e-300)))
        raise NumericalError(
            "assembled Nakano form is not Hermitian "
            f"(relative deviation {dev[i] / max(scale[i], 1e-300):.3e}); derivative inconsistency"
        )
    return 0.5 * (big + bigH)


def nakano_matrix(theta: CurvatureTensor, G: np.ndarray) -> np.ndarray:
    """Hermitian (n*r) x (n*r) matrix of the Nakano form at one point."""
    return _assemble_big(theta.blocks[None], np.asarray(G, dtype=complex)[None])[0]


def _gen_eigvals_batch(A: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Eigenvalues of A u = lambda (I_n (x) V) u, batched over the first axis."""
    N, nr, _ = A.shape
    r = V.shape[-1]
    n = nr // r
    B = np.zeros_like(A)
    for j in range(n):
        B[:, j * r : (j + 1) * r, j * r : (j + 1) * r] = V
    L = np.linalg.cholesky(B)
    X = np.linalg.solve(L, A)
    Y = np.linalg.solve(L, np.conj(np.swapaxes(X, -1, -2)))
    C = np.conj(np.swapaxes(Y, -1, -2))
    C = 0.5 * (C + np.conj(np.swapaxes(C, -1, -2)))
    return np.linalg.eigvalsh(C)


def certify_nakano(
    m: MetricField,
    grid: SampleGrid | np.ndarray,
    tol: float | None = None,
    flavor: str | None = None,
) -> PositivityReport:
    """Minimal generalized eigenvalue of the Nakano form over a sample set.

    Passes iff lambda_min >= -tol with the default
    tol = 1e-6 * (1 + max ||N||_2) mixing absolute and relative scales.
    """
    P = grid.points if isinstance(grid, SampleGrid) else np.atleast_2d(np.asarray(grid, dtype=float))
    if P.shape[0] == 0:
        raise ValueError("empty sample grid")
    blocks, V = curvature_blocks(m, P, flavor)
    big = _assemble_big(blocks, V)
    norms = np.abs(np.linalg.eigvalsh(big)).max(axis=-1)
    lam = _gen_eigvals_batch(big, V)
    per_point = lam[:, 0]
    i = int(np.argmin(per_point))
    lam_min = float(per_point[i])
    max_norm = float(norms.max())
    if tol is None:
        tol = 1e-6 * (1.0 + max_norm)
    return PositivityReport(
        lambda_min=lam_min,
        argmin_point=P[i],
        tolerance=float(tol),
        passed=bool(lam_min >= -tol),
        eigenvalues=per_point,
        points=P,
        max_form_norm=max_norm,
    )


def griffiths_min(
    theta: CurvatureTensor,
    G: np.ndarray,
    samples: int = 8,
    rng: np.random.Generator | None = None,
    steps: int = 20,
) -> float:
    """Minimum of the Nakano form over decomposable tuples u_j = xi_j v.

    Starts from `samples` random decomposable directions and refines each by
    alternating extremal eigenvector updates in xi and v.  Always an upper
    bound for the Griffiths gap and never below the full Nakano minimum.
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    rng = rng or np.random.default_rng(0)
    G = np.asarray(G, dtype=complex)
    big = nakano_matrix(theta, G)
    n, r = theta.n, theta.rank

    def form(xi, v):
        u = np.kron(xi, v)
        denom = float(np.real(np.vdot(xi, xi)) * np.real(np.vdot(v, G @ v)))
        return float(np.real(np.vdot(u, big @ u))) / denom

    def blocks_quadratic(v):
        A = np.empty((n, n), dtype=complex)
        for j in range(n):
            for k in range(n):
                A[j, k] = np.vdot(v, big[j * r : (j + 1) * r, k * r : (k + 1) * r] @ v)
        return 0.5 * (A + A.conj().T)

    def xi_quadratic(xi):
        B = np.zeros((r, r), dtype=complex)
        for j in range(n):
            for k in range(n):
                B += np.conj(xi[j]) * xi[k] * big[j * r : (j + 1) * r, k * r : (k + 1) * r]
        return 0.5 * (B + B.conj().T)

    import scipy.linalg

    best = np.inf
    for _ in range(samples):
        xi = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        v = rng.standard_normal(r) + 1j * rng.standard_normal(r)
        for _ in range(steps):
            A = blocks_quadratic(v) / float(np.real(np.vdot(v, G @ v)))
            w, vecs = np.linalg.eigh(A)
            xi = vecs[:, 0]
            B = xi_quadratic(xi) / float(np.real(np.vdot(xi, xi)))
            w2, vecs2 = scipy.linalg.eigh(B, G)
            v = vecs2[:, 0]
        best = min(best, form(xi, v))
    return best


# --------------------------------------------------------------------------
# Scalar positivity tests
# --------------------------------------------------------------------------


@dataclass
class ScalarTestReport:
    passed: bool
    min_value: float
    argmin_point: np.ndarray
    tolerance: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "passed": bool(self.passed),
            "min_value": float(self.min_value),
            "argmin_point": [float(x) for x in np.atleast_1d(self.argmin_point)],
            "tolerance": float(self.tolerance),
            **self.details,
        }


def scalar_complex_hessian(phi: ScalarField, P: np.ndarray) -> np.ndarray:
    """Batched n x n complex Hessian d^2 phi / dz_j dzbar_k."""
    coords = phi.coords
    if not coords.all_complex:
        raise ValueError("complex Hessian requires all-complex coordinates")
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = coords.n_axes
    N = P.shape[0]
    H = np.zeros((N, n, n), dtype=complex)

    def d2(a, b):
        hd = phi.values_hd(P, coords.direction(a), coords.direction(b))
        return np.broadcast_to(np.asarray(hd.d12, dtype=float), (N,)).astype(float)

    for j in range(n):
        xj, yj = coords.axis_vars(j)
        for k in range(j, n):
            xk, yk = coords.axis_vars(k)
            xx = d2(xj, xk)
            yy = d2(yj, yk)
            xy = d2(xj, yk)
            yx = xy if j == k else d2(yj, xk)
            w = 0.25 * (xx + yy) + 0.25j * (xy - yx)
            H[:, j, k] = w
            if k != j:
                H[:, k, j] = np.conj(w)
    return H


def psh_hessian_test(phi: ScalarField, grid: SampleGrid | np.ndarray, tol: float = 1e-6) -> ScalarTestReport:
    """Plurisubharmonicity for smooth fields: complex Hessian PSD on the grid."""
    P = grid.points if isinstance(grid, SampleGrid) else np.atleast_2d(np.asarray(grid, dtype=float))
    H = scalar_complex_hessian(phi, P)
    evs = np.linalg.eigvalsh(H)[:, 0]
    i = int(np.argmin(evs))
    return ScalarTestReport(
        passed=bool(evs[i] >= -tol),
        min_value=float(evs[i]),
        argmin_point=P[i],
        tolerance=tol,
        details={"kind": "psh_hessian"},
    )


def psh_submean_test(
    phi: ScalarField,
    centers: np.ndarray,
    radii: Sequence[float],
    directions: np.ndarray,
    circle_points: int = 32,
    tol: float = 1e-8,
    domain=None,
) -> ScalarTestReport:
    """Submean test phi(a) <= circle average, for possibly non-smooth fields.

    centers and directions are given in flattened real coordinates of a
    fully complex coordinate system; each (center, radius, direction) triple
    contributes one circle.  Fails on the worst margin.
    """
    coords = phi.coords
    if not coords.all_complex:
        raise ValueError("submean test requires all-complex coordinates")
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    thetas = 2.0 * np.pi * np.arange(circle_points) / circle_points
    worst = -np.inf
    worst_center = centers[0]
    for a, rho, w in zip(centers, radii, directions):
        ring = np.empty((circle_points, coords.dim))
        for it, th in enumerate(thetas):
            ring[it] = a + rho * _rotate_complex_vector(coords, w, th)
        if domain is not None:
            inside = domain.contains_many(ring)
            if not np.all(inside):
                raise ValueError("submean circle leaves the domain")
        mean = float(np.mean(phi.values(ring)))
        margin = phi.value(a) - mean  # psh requires <= 0 up to tol
        if margin > worst:
            worst = margin
            worst_center = a
    return ScalarTestReport(
        passed=bool(worst <= tol),
        min_value=float(-worst),
        argmin_point=worst_center,
        tolerance=tol,
        details={"kind": "psh_submean", "worst_margin": float(worst)},
    )


def _rotate_complex_vector(coords: Coords, w: np.ndarray, theta: float) -> np.ndarray:
    out = np.array(w, dtype=float, copy=True)
    c, s = np.cos(theta), np.sin(theta)
    for j in range(coords.n_axes):
        xi, yi = coords.axis_vars(j)
        out[xi] = c * w[xi] - s * w[yi]
        out[yi] = s * w[xi] + c * w[yi]
    return out


def convexity_test(phi: ScalarField, grid: SampleGrid | np.ndarray, tol: float = 1e-6) -> ScalarTestReport:
    """Convexity of a scalar on real coordinates: real Hessian PSD on the grid."""
    coords = phi.coords
    P = grid.points if isinstance(grid, SampleGrid) else np.atleast_2d(np.asarray(grid, dtype=float))
    d = coords.dim
    N = P.shape[0]
    H = np.zeros((N, d, d))
    for j in range(d):
        for k in range(j, d):
            hd = phi.values_hd(P, coords.direction(j), coords.direction(k))
            val = np.broadcast_to(np.asarray(hd.d12, dtype=float), (N,))
            H[:, j, k] = val
            H[:, k, j] = val
    evs = np.linalg.eigvalsh(H)[:, 0]
    i = int(np.argmin(evs))
    return ScalarTestReport(
        passed=bool(evs[i] >= -tol),
        min_value=float(evs[i]),
        argmin_point=P[i],
        tolerance=tol,
        details={"kind": "convexity"},
    )

"""Desk-scale check of the optimal weighted L2 estimate for dbar in one variable.

A bounded planar domain (box or disc mask) carries a uniform grid and a
discrete dbar = (d/dx + i d/dy)/2.  Constraint rows live on interior points
(full central stencils); the one-sided closure extends the operator to the
rest of the mask for data construction and diagnostics.  Solutions of
dbar u = f are free at the mask boundary, which is the discrete analogue of
solving with no boundary condition, and the reported u is the minimizer of
the weighted squared norm sum |u|^2_h e^{-psi} dA under the interior
constraints, computed from the weighted normal equations by preconditioned
conjugate gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, NonconvergenceError, NumericalError
from .fields import MetricField, ScalarField
from .reduction import pairwise_sum

__all__ = [
    "DbarGrid",
    "L2Problem",
    "L2Report",
    "minimal_solution",
    "check_estimate",
    "violation_search",
]

PSH_FLOOR = 1e-8  # strict plurisubharmonicity floor for the weight


@dataclass
class DbarGrid:
    """Uniform grid on a masked box with discrete dbar operators."""

    n: int
    shape: str = "disc"  # "disc" (unit disc) or "box" ([-1,1]^2)
    half_width: float = 1.0

    def __post_init__(self):
        if self.n < 8:
            raise ConfigError("grid resolution too small")
        xs = np.linspace(-self.half_width, self.half_width, self.n)
        self.delta = xs[1] - xs[0]
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        if self.shape == "disc":
            mask = X * X + Y * Y <= self.half_width**2 + 1e-14
        elif self.shape == "box":
            mask = np.ones_like(X, dtype=bool)
        else:
            raise ConfigError(f"unknown grid shape {self.shape!r}")
        self.mask = mask
        self.index = -np.ones(mask.shape, dtype=int)
        self.index[mask] = np.arange(int(mask.sum()))
        self.points = np.stack([X[mask], Y[mask]], axis=-1)  # (n_pts, 2)
        self.n_points = self.points.shape[0]
        self._build_operators()

    def _neighbors(self, i: int, j: int):
        m = self.mask
        return (
            i + 1 < self.n and m[i + 1, j],
            i - 1 >= 0 and m[i - 1, j],
            j + 1 < self.n and m[i, j + 1],
            j - 1 >= 0 and m[i, j - 1],
        )

    def _build_operators(self):
        m = self.mask
        idx = self.index
        d = self.delta
        int_rows, int_cols, int_vals = [], [], []
        full_rows, full_cols, full_vals = [], [], []
        interior = np.zeros(self.n_points, dtype=bool)
        full_defined = np.zeros(self.n_points, dtype=bool)
        row_i = 0
        for i in range(self.n):
            for j in range(self.n):
                if not m[i, j]:
                    continue
                pid = idx[i, j]
                xp, xm, yp, ym = self._neighbors(i, j)
                if xp and xm and yp and ym:
                    interior[pid] = True
                    int_rows.extend([row_i] * 4)
                    int_cols.extend([idx[i + 1, j], idx[i - 1, j], idx[i, j + 1], idx[i, j - 1]])
                    int_vals.extend([0.5 / (2 * d), -0.5 / (2 * d), 0.5j / (2 * d), -0.5j / (2 * d)])
                    row_i += 1
                # one-sided closure for the full operator
                sx = self._d1_stencil(i, j, axis=0)
                sy = self._d1_stencil(i, j, axis=1)
                if sx is not None and sy is not None:
                    full_defined[pid] = True
                    r = idx[i, j]
                    for col, val in sx:
                        full_rows.append(r)
                        full_cols.append(col)
                        full_vals.append(0.5 * val)
                    for col, val in sy:
                        full_rows.append(r)
                        full_cols.append(col)
                        full_vals.append(0.5j * val)
        self.interior = interior
        self.n_interior = int(interior.sum())
        self.interior_ids = np.where(interior)[0]
        self.D_int = sp.csr_matrix(
            (int_vals, (np.array(int_rows), np.array(int_cols))),
            shape=(self.n_interior, self.n_points),
            dtype=complex,
        )
        self.D_full = sp.csr_matrix(
            (full_vals, (np.array(full_rows), np.array(full_cols))),
            shape=(self.n_points, self.n_points),
            dtype=complex,
        )
        self.full_defined = full_defined

    def _d1_stencil(self, i, j, axis):
        """Central or one-sided first-difference stencil along an axis."""
        idx = self.index
        d = self.delta
        if axis == 0:
            plus = (i + 1, j) if i + 1 < self.n and self.mask[i + 1, j] else None
            minus = (i - 1, j) if i - 1 >= 0 and self.mask[i - 1, j] else None
        else:
            plus = (i, j + 1) if j + 1 < self.n and self.mask[i, j + 1] else None
            minus = (i, j - 1) if j - 1 >= 0 and self.mask[i, j - 1] else None
        here = idx[i, j]
        if plus and minus:
            return [(idx[plus], 1.0 / (2 * d)), (idx[minus], -1.0 / (2 * d))]
        if plus:
            return [(idx[plus], 1.0 / d), (here, -1.0 / d)]
        if minus:
            return [(here, 1.0 / d), (idx[minus], -1.0 / d)]
        return None

    def complex_points(self) -> np.ndarray:
        return self.points[:, 0] + 1j * self.points[:, 1]


@dataclass
class L2Problem:
    """Metric h, strictly psh weight psi, and a (0,1) datum on a DbarGrid."""

    h_values: np.ndarray  # (n_pts, r, r) Hermitian PD
    psi_values: np.ndarray  # (n_pts,)
    psi_zzbar: np.ndarray  # (n_pts,) strictly positive
    f_values: np.ndarray  # (n_pts, r) complex, the dzbar component per bundle index

    def __post_init__(self):
        self.h_values = np.asarray(self.h_values, dtype=complex)
        if self.h_values.ndim == 1:
            self.h_values = self.h_values[:, None, None]
        self.rank = self.h_values.shape[-1]
        self.f_values = np.asarray(self.f_values, dtype=complex)
        if self.f_values.ndim == 1:
            self.f_values = self.f_values[:, None]
        if np.any(self.psi_zzbar < PSH_FLOOR):
            raise ConfigError(
                f"weight is not strictly plurisubharmonic on the grid (floor {PSH_FLOOR:.1e})"
            )

    @staticmethod
    def from_fields(
        grid: DbarGrid,
        h: MetricField,
        psi: ScalarField,
        f_fn,
    ) -> "L2Problem":
        """Sample fields on the grid; psi_zzbar comes from hyper-dual evaluation."""
        P = grid.points
        hv = np.asarray(h.raw_values(P))
        pv = np.asarray(psi.values(P))
        ex = psi.coords.direction(0)
        ey = psi.coords.direction(1)
        dxx = np.asarray(psi.values_hd(P, ex, ex).d12)
        dyy = np.asarray(psi.values_hd(P, ey, ey).d12)
        pzz = 0.25 * (np.broadcast_to(dxx, (P.shape[0],)) + np.broadcast_to(dyy, (P.shape[0],)))
        fv = np.asarray(f_fn(grid.complex_points()), dtype=complex)
        return L2Problem(hv, pv, pzz, fv)


@dataclass
class L2Report:
    lhs: float
    rhs: float
    ratio: float
    residual: float
    iterations: int
    n_points: int
    n_interior: int
    delta: float
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "ratio": self.ratio,
            "residual": self.residual,
            "iterations": self.iterations,
            "n_points": self.n_points,
            "n_interior": self.n_interior,
            "delta": self.delta,
            **self.extras,
        }


def _weights(problem: L2Problem, grid: DbarGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per-point weight blocks W = h e^{-psi} dA and their inverses."""
    area = grid.delta**2
    w = problem.h_values * (np.exp(-problem.psi_values) * area)[:, None, None]
    winv = np.linalg.inv(w)
    return w, winv


def _cg_hermitian(apply_A, b, precond, rtol=1e-12, atol=0.0, max_iter=None):
    """Conjugate gradients for Hermitian positive definite operators.

    Stops on the true residual ||b - A x|| <= max(rtol * ||b||, atol).
    """
    n = b.size
    max_iter = max_iter or 40 * n
    x = np.zeros_like(b)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = np.real(np.vdot(r, z))
    bnorm = float(np.linalg.norm(b))
    target = max(rtol * bnorm, atol)
    it = 0
    while True:
        rnorm = float(np.linalg.norm(r))
        if rnorm <= target:
            return x, rnorm, it
        if it >= max_iter:
            raise NonconvergenceError(
                f"conjugate gradients stalled at residual {rnorm:.3e} (target {target:.3e})"
            )
        Ap = apply_A(p)
        pAp = np.real(np.vdot(p, Ap))
        if pAp <= 0.0:
            raise NumericalError("normal-equation operator is not positive definite (rank deficiency?)")
        alpha = rz / pAp
        x = x + alpha * p
        it += 1
        if it % 50 == 0:
            r = b - apply_A(x)  # periodic recomputation against drift
        else:
            r = r - alpha * Ap
        z = precond(r)
        rz_new = np.real(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new


def minimal_solution(
    problem: L2Problem,
    grid: DbarGrid,
    rtol: float = 1e-12,
    x0_seed: int | None = None,
) -> tuple[np.ndarray, dict]:
    """Least weighted-norm u with dbar u = f on the interior rows.

    Solves (D W^-1 D*) lam = f via CG and sets u = W^-1 D* lam, the unique
    minimizer of sum |u|^2_h e^{-psi} dA subject to the constraints.
    """
    r = problem.rank
    D = grid.D_int
    w, winv = _weights(problem, grid)
    f_int = problem.f_values[grid.interior_ids]  # (m, r)
    m = grid.n_interior

    def apply_winv(u_flat: np.ndarray) -> np.ndarray:
        u = u_flat.reshape(grid.n_points, r)
        return np.einsum("plm,pm->pl", winv, u).reshape(-1)

    def apply_A(lam_flat: np.ndarray) -> np.ndarray:
        lam = lam_flat.reshape(m, r)
        v = np.column_stack([D.conj().T @ lam[:, c] for c in range(r)])
        v = np.einsum("plm,pm->pl", winv, v)
        return np.column_stack([D @ v[:, c] for c in range(r)]).reshape(-1)

    # Jacobi preconditioner from the exact diagonal of D W^-1 D*
    absD2 = sp.csr_matrix((np.abs(D.data) ** 2, D.indices, D.indptr), shape=D.shape)
    diag_w = np.real(np.einsum("pll->pl", winv))  # (n_pts, r)
    diag_A = np.maximum(absD2 @ diag_w, 1e-300)  # (m, r)

    def precond(res_flat: np.ndarray) -> np.ndarray:
        return (res_flat.reshape(m, r) / diag_A).reshape(-1)

    b = f_int.reshape(-1)
    if x0_seed is not None:
        # solve A (lam - lam0) = b - A lam0 from a random start, for the
        # uniqueness property test; same absolute residual target as x0 = 0
        rng = np.random.default_rng(x0_seed)
        lam0 = (rng.standard_normal(b.size) + 1j * rng.standard_normal(b.size)) * 0.1
        target = rtol * float(np.linalg.norm(b))
        dx, _, its = _cg_hermitian(apply_A, b - apply_A(lam0), precond, rtol=0.0, atol=target)
        lam = lam0 + dx
        rnorm = float(np.linalg.norm(b - apply_A(lam)))
    else:
        lam, rnorm, its = _cg_hermitian(apply_A, b, precond, rtol=rtol)
    v = np.column_stack([D.conj().T @ lam.reshape(m, r)[:, c] for c in range(r)])
    u = np.einsum("plm,pm->pl", winv, v)
    du = np.column_stack([D @ u[:, c] for c in range(r)])
    residual = float(np.sqrt(np.real(pairwise_sum(np.sum(np.abs(du - f_int) ** 2, axis=1))) * grid.delta**2))
    info = {"cg_residual": float(rnorm), "iterations": int(its), "constraint_residual": residual}
    return u, info


def weighted_norm_sq(problem: L2Problem, grid: DbarGrid, u: np.ndarray) -> float:
    """sum |u|^2_h e^{-psi} dA over the mask."""
    u = np.asarray(u, dtype=complex)
    if u.ndim == 1:
        u = u[:, None]
    quad = np.real(np.einsum("pl,plm,pm->p", np.conj(u), problem.h_values, u))
    return float(pairwise_sum(quad * np.exp(-problem.psi_values)) * grid.delta**2)


def check_estimate(problem: L2Problem, grid: DbarGrid, rtol: float = 1e-12) -> L2Report:
    """Solve for the minimal u and compare both sides of the weighted estimate.

    rhs uses the inverse complex Hessian of the weight (n = 1, so a scalar
    1/psi_zzbar per point).
    """
    u, info = minimal_solution(problem, grid, rtol=rtol)
    lhs = weighted_norm_sq(problem, grid, u)
    fh = np.real(np.einsum("pl,plm,pm->p", np.conj(problem.f_values), problem.h_values, problem.f_values))
    rhs = float(
        pairwise_sum(fh / problem.psi_zzbar * np.exp(-problem.psi_values)) * grid.delta**2
    )
    if rhs > 0:
        ratio = lhs / rhs
    else:
        ratio = 0.0 if lhs == 0.0 else np.inf  # zero datum satisfies the bound trivially
    return L2Report(
        lhs=lhs,
        rhs=rhs,
        ratio=float(ratio),
        residual=info["constraint_residual"],
        iterations=info["iterations"],
        n_points=grid.n_points,
        n_interior=grid.n_interior,
        delta=float(grid.delta),
    )


def violation_search(
    grid: DbarGrid,
    h_values: np.ndarray,
    psi_family: Sequence[tuple[str, np.ndarray, np.ndarray]],
    f_family: Sequence[tuple[str, np.ndarray]],
    budget: int | None = None,
    rtol: float = 1e-12,
) -> dict:
    """Max estimate ratio over finite (psi, f) families for a fixed metric.

    Exploratory: a ratio above 1 + margin shows the estimate fails for that
    pair; absence of a violation within a finite family proves nothing.
    psi_family entries are (label, psi_values, psi_zzbar); f_family entries
    are (label, f_values).
    """
    pairs = [(pl, pv, pz, fl, fv) for (pl, pv, pz) in psi_family for (fl, fv) in f_family]
    if not pairs:
        raise ConfigError("empty search space")
    if budget is not None:
        pairs = pairs[: int(budget)]
    results = []
    best = None
    for pl, pv, pz, fl, fv in pairs:
        problem = L2Problem(h_values, pv, pz, fv)
        report = check_estimate(problem, grid, rtol=rtol)
        row = {"psi": pl, "f": fl, "ratio": report.ratio, "lhs": report.lhs, "rhs": report.rhs,
               "residual": report.residual}
        results.append(row)
        if best is None or row["ratio"] > best["ratio"]:
            best = row
    return {"best": best, "results": results, "n_pairs": len(pairs)}

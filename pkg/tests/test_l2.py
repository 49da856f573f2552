"""Discrete dbar grid, minimal-norm solver, estimate checks."""

import math

import numpy as np
import pytest

from nakano_lab.errors import ConfigError
from nakano_lab.fields import Coords, EntrywiseMetric, ExpressionScalar
from nakano_lab.l2 import (
    DbarGrid,
    L2Problem,
    check_estimate,
    minimal_solution,
    violation_search,
    weighted_norm_sq,
)

CZ = Coords.complex(["z1"])
PSI = ExpressionScalar("z1re^2+z1im^2", CZ)
H_FLAT = EntrywiseMetric([["1"]], CZ)
H_POS = EntrywiseMetric([["exp(-(z1re^2+z1im^2))"]], CZ)


def flat_problem(grid):
    return L2Problem.from_fields(grid, H_FLAT, PSI, lambda z: np.ones_like(z))


class TestDbarGrid:
    def test_dbar_of_zbar_is_one(self):
        # central stencil is exact on (anti)linear functions
        grid = DbarGrid(24, "disc")
        zbar = np.conj(grid.complex_points())
        np.testing.assert_allclose(grid.D_int @ zbar, 1.0, atol=1e-13)

    def test_dbar_of_holomorphic_small(self):
        # central differences leave exactly delta^2 on z^3
        grid = DbarGrid(48, "disc")
        z = grid.complex_points()
        vals = np.abs(grid.D_int @ (z**3))
        assert np.max(vals) <= 1.5 * grid.delta**2

    def test_one_sided_closure_full_operator(self):
        grid = DbarGrid(24, "disc")
        zbar = np.conj(grid.complex_points())
        full = grid.D_full @ zbar
        np.testing.assert_allclose(full, 1.0, atol=1e-12)

    def test_interior_strictly_smaller(self):
        grid = DbarGrid(24, "disc")
        assert 0 < grid.n_interior < grid.n_points

    def test_box_shape(self):
        grid = DbarGrid(16, "box")
        assert grid.n_points == 256
        assert grid.n_interior == 14 * 14


class TestMinimalSolution:
    def test_residual_and_feasibility(self):
        grid = DbarGrid(32, "disc")
        problem = flat_problem(grid)
        u, info = minimal_solution(problem, grid)
        assert info["constraint_residual"] <= 1e-10

    def test_zero_datum_gives_zero(self):
        grid = DbarGrid(16, "disc")
        problem = L2Problem.from_fields(grid, H_FLAT, PSI, lambda z: np.zeros_like(z))
        u, info = minimal_solution(problem, grid)
        np.testing.assert_allclose(u, 0.0, atol=1e-14)

    def test_minimum_not_above_feasible_candidate(self):
        # u = zbar satisfies dbar u = 1; the minimizer can only be smaller
        grid = DbarGrid(32, "disc")
        problem = flat_problem(grid)
        u, _ = minimal_solution(problem, grid)
        lhs_min = weighted_norm_sq(problem, grid, u)
        lhs_zbar = weighted_norm_sq(problem, grid, np.conj(grid.complex_points()))
        assert lhs_min <= lhs_zbar + 1e-12

    def test_bump_datum_recovered(self):
        grid = DbarGrid(32, "disc")
        z = grid.complex_points()
        bump = np.exp(-np.abs(z) ** 2 / 0.25) * (1 - np.abs(z) ** 2) ** 2
        f = np.asarray(grid.D_full @ bump)
        problem = L2Problem(np.ones((grid.n_points, 1, 1)), np.zeros(grid.n_points),
                            np.ones(grid.n_points), f[:, None])
        u, info = minimal_solution(problem, grid)
        assert info["constraint_residual"] <= 1e-10

    def test_minimality_against_kernel_perturbations(self, rng):
        grid = DbarGrid(24, "disc")
        problem = flat_problem(grid)
        u, _ = minimal_solution(problem, grid)
        base = weighted_norm_sq(problem, grid, u)
        w_diag = problem.h_values[:, 0, 0].real * np.exp(-problem.psi_values) * grid.delta**2
        D = grid.D_int
        for _ in range(10):
            w = rng.standard_normal(grid.n_points) + 1j * rng.standard_normal(grid.n_points)
            # project w onto ker D by removing the normal-equation component
            rhs = np.zeros((grid.n_points, 1), dtype=complex)
            rhs[grid.interior_ids, 0] = D @ w
            problem2 = L2Problem(problem.h_values, problem.psi_values, problem.psi_zzbar, rhs)
            corr, _ = minimal_solution(problem2, grid)
            v = w - corr[:, 0]
            assert np.max(np.abs(D @ v)) <= 1e-8
            perturbed = weighted_norm_sq(problem, grid, u + v[:, None])
            assert perturbed >= base - 1e-10

    def test_uniqueness_from_different_starts(self):
        grid = DbarGrid(24, "disc")
        problem = flat_problem(grid)
        u1, _ = minimal_solution(problem, grid)
        u2, _ = minimal_solution(problem, grid, x0_seed=42)
        assert np.max(np.abs(u1 - u2)) <= 1e-9


class TestCheckEstimate:
    def test_flat_disc_benchmark(self):
        # continuum: lhs -> pi(1 - 2/e), rhs -> pi(1 - 1/e), ratio -> 0.418
        grid = DbarGrid(32, "disc")
        report = check_estimate(flat_problem(grid), grid)
        assert report.residual <= 1e-10
        assert report.ratio <= 0.45
        assert report.rhs == pytest.approx(math.pi * (1 - math.exp(-1)), rel=0.02)
        assert report.lhs <= math.pi * (1 - 2 * math.exp(-1)) + 0.05

    def test_zero_datum_zero_ratio(self):
        grid = DbarGrid(16, "disc")
        problem = L2Problem.from_fields(grid, H_FLAT, PSI, lambda z: np.zeros_like(z))
        report = check_estimate(problem, grid)
        assert report.ratio == 0.0

    def test_positively_curved_ratio_below_one(self):
        grid = DbarGrid(32, "disc")
        problem = L2Problem.from_fields(grid, H_POS, PSI, lambda z: np.ones_like(z))
        report = check_estimate(problem, grid)
        assert report.ratio <= 1.0 + 5.0 / 32

    def test_weight_must_be_strictly_psh(self):
        grid = DbarGrid(16, "disc")
        flat_psi = ExpressionScalar("z1re", CZ)  # harmonic: psi_zzbar = 0
        with pytest.raises(ConfigError, match="strictly plurisubharmonic"):
            L2Problem.from_fields(grid, H_FLAT, flat_psi, lambda z: np.ones_like(z))


class TestViolationSearch:
    def test_negative_curvature_family(self):
        grid = DbarGrid(24, "disc")
        h_neg = EntrywiseMetric([["exp(z1re^2+z1im^2)"]], CZ)
        h_values = np.asarray(h_neg.raw_values(grid.points))
        psi_family = []
        for s in (0.25, 0.5, 1.0, 2.0, 4.0):
            psi = ExpressionScalar(f"{s!r}*(z1re^2+z1im^2)", CZ)
            psi_family.append((f"s={s}", np.asarray(psi.values(grid.points)),
                               np.full(grid.n_points, s)))
        f_family = [("dzbar", np.ones((grid.n_points, 1), dtype=complex))]
        out = violation_search(grid, h_values, psi_family, f_family)
        assert out["n_pairs"] == 5
        assert out["best"]["ratio"] == max(r["ratio"] for r in out["results"])
        # negatively curved metric: small s members should breach the bound
        assert out["best"]["ratio"] > 1.0

    def test_flat_family_stays_bounded(self):
        grid = DbarGrid(24, "disc")
        h_values = np.ones((grid.n_points, 1, 1), dtype=complex)
        psi_family = []
        for s in (0.5, 1.0, 2.0):
            psi = ExpressionScalar(f"{s!r}*(z1re^2+z1im^2)", CZ)
            psi_family.append((f"s={s}", np.asarray(psi.values(grid.points)),
                               np.full(grid.n_points, s)))
        f_family = [("dzbar", np.ones((grid.n_points, 1), dtype=complex))]
        out = violation_search(grid, h_values, psi_family, f_family)
        assert out["best"]["ratio"] <= 1.0 + 10.0 / 24

    def test_empty_family_errors(self):
        grid = DbarGrid(16, "disc")
        with pytest.raises(ConfigError, match="empty search space"):
            violation_search(grid, np.ones((grid.n_points, 1, 1)), [], [])

"""Quadrature, pushforwards, Kiselman infimum, exp-map reduction, Fubini."""

import math

import numpy as np
import pytest

from nakano_lab import exprlang as ex
from nakano_lab.curvature import chern_curvature, real_curvature
from nakano_lab.direct_image import (
    KiselmanInfScalar,
    NegLogPushforwardScalar,
    PushforwardMetric,
    build_rule,
    exp_reduce,
    fubini_consistency,
    integrate,
    kiselman_inf,
    pushforward_derivatives,
    pushforward_metric,
    pushforward_scalar,
)
from nakano_lab.errors import ConfigError, NonconvergenceError
from nakano_lab.fields import (
    ConstantMetric,
    Coords,
    EntrywiseMetric,
    ExpressionScalar,
    ScaledMetric,
    TorusAveragedMetric,
)
from nakano_lab.geometry import Box, Fibered, HalfspaceConvex, ReinhardtAnnulus, TubeOverBase

CO_TX = Coords.real(["t1", "x1"])
GAUSS = EntrywiseMetric([["exp(-(t1^2+x1^2))"]], CO_TX)


def product_domain(base_lo, base_hi, fib_lo, fib_hi):
    fib = Box(np.atleast_1d(fib_lo).astype(float), np.atleast_1d(fib_hi).astype(float))
    return Fibered(Box(np.atleast_1d(base_lo).astype(float), np.atleast_1d(base_hi).astype(float)),
                   lambda _t, _d=fib: _d, t_independent=True)


class TestIntegrate:
    def test_exponential_antiderivative(self):
        val, est, _ = integrate(lambda P: np.exp(-P[:, 0]), Box([0.0], [1.0]), order=8)
        assert val == pytest.approx(1 - math.exp(-1), rel=1e-12)
        assert est < 1e-10

    def test_constant_matrix_volume(self):
        box = Box([0.0, 0.0], [2.0, 3.0])
        ident = np.broadcast_to(np.eye(2), (1, 2, 2))
        val, _, _ = integrate(lambda P: np.broadcast_to(np.eye(2), (P.shape[0], 2, 2)), box, order=4)
        np.testing.assert_allclose(val, 6.0 * np.eye(2), rtol=1e-13)

    def test_annulus_polar_antiderivative(self):
        # integral of exp(-|z|^2) over 1 <= |z| <= 2 is pi (e^-1 - e^-4)
        ann = ReinhardtAnnulus([1.0], [2.0])
        val, est, _ = integrate(lambda P: np.exp(-(P[:, 0] ** 2 + P[:, 1] ** 2)), ann, order=16)
        assert val == pytest.approx(math.pi * (math.exp(-1) - math.exp(-4)), rel=1e-10)

    def test_monotone_error_ladder(self):
        _, _, ladder = integrate(lambda P: np.exp(np.sin(3 * P[:, 0])), Box([0.0], [1.0]),
                                 order=2, rel_tol=1e-14, override=True, max_doublings=3)
        assert all(b <= a for a, b in zip(ladder, ladder[1:]))

    def test_refuses_bad_estimate(self):
        # discontinuous integrand on a box-mask rule: estimate stays large
        tri = HalfspaceConvex([[1.0, 1.0]], [1.0], [0.0, 0.0], [1.0, 1.0], [0.2, 0.2])
        with pytest.raises(NonconvergenceError):
            integrate(lambda P: np.ones(P.shape[0]), tri, order=5, rel_tol=1e-10, max_doublings=2)

    def test_override_accepts_coarse(self):
        tri = HalfspaceConvex([[1.0, 1.0]], [1.0], [0.0, 0.0], [1.0, 1.0], [0.2, 0.2])
        val, est, _ = integrate(lambda P: np.ones(P.shape[0]), tri, order=8, rel_tol=1e-10,
                                override=True, max_doublings=2)
        assert val == pytest.approx(0.5, rel=0.05)
        assert est > 1e-10

    def test_qmc_rule_deterministic(self):
        tri = HalfspaceConvex([[1.0, 1.0]], [1.0], [0.0, 0.0], [1.0, 1.0], [0.2, 0.2])
        r1 = build_rule(tri, 512, "qmc")
        r2 = build_rule(tri, 512, "qmc")
        np.testing.assert_array_equal(r1.points, r2.points)
        val = float(r1.apply(lambda P: np.ones(P.shape[0])))
        assert val == pytest.approx(0.5, rel=0.05)


class TestPushforwardMetric:
    def test_gaussian_matches_closed_form(self):
        om = product_domain(-1, 1, -8, 8)
        pf = PushforwardMetric(GAUSS, om, ["x1"], order=48)
        for t in (-1.0, -0.5, 0.0, 0.5, 1.0):
            got = pf.raw_values(np.array([[t]]))[0, 0, 0].real
            assert got == pytest.approx(math.sqrt(math.pi) * math.exp(-t * t), rel=1e-9)

    def test_constant_gives_volume(self):
        om = product_domain(-1, 1, 0, 3)
        const = ConstantMetric(np.eye(2), CO_TX)
        pf = PushforwardMetric(const, om, ["x1"], order=4)
        np.testing.assert_allclose(pf.raw_values(np.array([[0.2]]))[0], 3.0 * np.eye(2), rtol=1e-13)

    def test_separable_factorizes(self):
        om = product_domain(-1, 1, -8, 8)
        g0 = np.array([[2.0, 0.5], [0.5, 1.0]])
        total = ScaledMetric(ExpressionScalar("exp(-(t1^2+x1^2))", CO_TX), ConstantMetric(g0, CO_TX))
        pf = PushforwardMetric(total, om, ["x1"], order=48)
        got = pf.raw_values(np.array([[0.4]]))[0]
        np.testing.assert_allclose(got, math.sqrt(math.pi) * math.exp(-0.16) * g0, rtol=1e-9)

    def test_one_shot_op_with_error(self):
        om = product_domain(-1, 1, -8, 8)
        val, est = pushforward_metric(GAUSS, om, [0.0], order=48)
        assert val[0, 0].real == pytest.approx(math.sqrt(math.pi), rel=1e-9)
        assert est < 1e-6

    def test_under_integral_curvature(self):
        om = product_domain(-1, 1, -8, 8)
        pf = PushforwardMetric(GAUSS, om, ["x1"], order=48)
        th = real_curvature(pf, [0.0])
        assert th.blocks[0, 0, 0, 0].real == pytest.approx(2.0, abs=1e-9)

    def test_fd_scheme_agrees(self):
        om = product_domain(-1, 1, -8, 8)
        pf_hd = PushforwardMetric(GAUSS, om, ["x1"], order=48)
        pf_fd = PushforwardMetric(GAUSS, om, ["x1"], order=48, scheme="fixed_node_fd")
        for t in (-0.5, 0.0, 0.7):
            a = pf_hd.d2_batch(np.array([[t]]), 0, 0)[0, 0, 0]
            b = pf_fd.d2_batch(np.array([[t]]), 0, 0)[0, 0, 0]
            assert abs(a - b) <= 1e-4 * max(1.0, abs(a))

    def test_derivative_closed_form(self):
        # d2/dt2 of sqrt(pi) exp(-t^2) at 0 is -2 sqrt(pi)
        om = product_domain(-1, 1, -8, 8)
        pf = PushforwardMetric(GAUSS, om, ["x1"], order=48)
        d2 = pushforward_derivatives(pf, [0.0], 0, 0)
        assert d2[0, 0].real == pytest.approx(-2 * math.sqrt(math.pi), rel=1e-9)

    def test_separable_second_derivative(self):
        # a(t) b(x) pushes to a''(t) integral(b)
        co = Coords.real(["t1", "x1"])
        total = EntrywiseMetric([["(1+t1^2)*exp(-(x1^2))"]], co)
        om = product_domain(-1, 1, -8, 8)
        pf = PushforwardMetric(total, om, ["x1"], order=48)
        d2 = pushforward_derivatives(pf, [0.3], 0, 0)
        assert d2[0, 0].real == pytest.approx(2 * math.sqrt(math.pi), rel=1e-9)

    def test_under_integral_requires_product(self):
        def moving(t):
            return Box([-1.0 - float(t[0])], [1.0 + float(t[0])])

        om = Fibered(Box([-0.5], [0.5]), moving, t_independent=False)
        with pytest.raises(ConfigError):
            PushforwardMetric(GAUSS, om, ["x1"], order=16, scheme="under_integral")

    def test_fd_scheme_on_moving_fiber(self):
        def moving(t):
            return Box([-2.0 - float(t[0])], [2.0 + float(t[0])])

        om = Fibered(Box([-0.5], [0.5]), moving, t_independent=False)
        pf = PushforwardMetric(GAUSS, om, ["x1"], order=32, scheme="fixed_node_fd")
        v = pf.raw_values(np.array([[0.0]]))[0, 0, 0].real
        # fiber [-2, 2]: sqrt(pi) erf(2)
        assert v == pytest.approx(math.sqrt(math.pi) * math.erf(2.0), rel=1e-8)
        d1 = pf.d1_batch(np.array([[0.1]]), 0)
        assert np.isfinite(d1).all()

    def test_pushforward_of_average_equals_average_of_pushforward(self):
        # over a full annulus, rotation invariance of the measure makes the
        # pushforward blind to torus averaging
        cz = Coords([*Coords.complex(["t1"]).axes, *Coords.complex(["z1"]).axes])
        h = EntrywiseMetric([["exp(-(t1re^2+t1im^2+z1re^2+z1im^2)) + 0.2*z1re"]], cz)
        ann = ReinhardtAnnulus([1.0], [2.0])
        om = Fibered(Box([-1.0, -1.0], [1.0, 1.0]), lambda _t, _d=ann: _d, t_independent=True)
        pf_raw = PushforwardMetric(h, om, ["z1"], order=16)
        pf_avg = PushforwardMetric(TorusAveragedMetric(h, ["z1"], order=32), om, ["z1"], order=16)
        t = np.array([[0.2, -0.4]])
        np.testing.assert_allclose(pf_avg.raw_values(t), pf_raw.raw_values(t), rtol=1e-10)


class TestPushforwardScalar:
    def test_separable_annulus(self):
        # phi = |t|^2 + |z|^2 over annulus: phi~(t) = |t|^2 - log(pi(e^-1 - e^-4))
        cz = Coords([*Coords.complex(["t1"]).axes, *Coords.complex(["z1"]).axes])
        phi = ExpressionScalar("t1re^2+t1im^2+z1re^2+z1im^2", cz)
        ann = ReinhardtAnnulus([1.0], [2.0])
        om = Fibered(Box([-1.0, -1.0], [1.0, 1.0]), lambda _t, _d=ann: _d, t_independent=True)
        got = pushforward_scalar(phi, om, [0.5, -0.5], order=24)
        expected = 0.5 - math.log(math.pi * (math.exp(-1) - math.exp(-4)))
        assert got == pytest.approx(expected, rel=1e-9)

    def test_z_independent_gives_log_volume(self):
        phi = ExpressionScalar("t1^2", CO_TX)
        om = product_domain(-1, 1, 0, 2)
        got = pushforward_scalar(phi, om, [0.7], order=8)
        assert got == pytest.approx(0.49 - math.log(2.0), rel=1e-12)

    def test_gaussian_completion_of_square(self):
        # phi = t^2 + x^2 + t x: phi~(t) = 3/4 t^2 + const
        phi = ExpressionScalar("t1^2+x1^2+t1*x1", CO_TX)
        om = product_domain(-1, 1, -8, 8)
        field = NegLogPushforwardScalar(phi, om, ["x1"], order=64)
        c = field.values(np.array([[0.0]]))[0]
        for t in (-1.0, 0.5, 1.0):
            got = field.values(np.array([[t]]))[0]
            assert got == pytest.approx(0.75 * t * t + c, abs=1e-10)

    def test_hessian_through_neglog(self):
        phi = ExpressionScalar("t1^2+x1^2+t1*x1", CO_TX)
        om = product_domain(-1, 1, -8, 8)
        field = NegLogPushforwardScalar(phi, om, ["x1"], order=64)
        h = field.values_hd(np.array([[0.3]]), np.array([1.0]), np.array([1.0]))
        assert float(np.asarray(h.d12).reshape(-1)[0]) == pytest.approx(1.5, abs=1e-9)

    def test_overflow_guard(self):
        phi = ExpressionScalar("100*(t1^2+x1^2)", CO_TX)
        om = product_domain(-1, 1, -1.5, 1.5)
        got = pushforward_scalar(phi, om, [1.0], order=96)
        # analytic: 100 t^2 - log(sqrt(pi/100)); erf tail below 1e-40
        assert got == pytest.approx(100.0 - math.log(math.sqrt(math.pi / 100.0)), rel=1e-9)

    def test_underresolved_scalar_pushforward_refused(self):
        phi = ExpressionScalar("100*(t1^2+x1^2)", CO_TX)
        om = product_domain(-1, 1, -8, 8)
        with pytest.raises(NonconvergenceError):
            NegLogPushforwardScalar(phi, om, ["x1"], order=24)


class TestKiselman:
    CZ = Coords([*Coords.complex(["t1"]).axes, *Coords.complex(["z1"]).axes])

    def om(self):
        tube = TubeOverBase(Box([-2.0], [2.0]))
        return Fibered(Box([-1.0, -1.0], [1.0, 1.0]), lambda _t, _d=tube: _d, t_independent=True)

    def test_completing_square(self):
        phi = ExpressionScalar("t1re^2+t1im^2+z1re^2+2*t1re*z1re", self.CZ)
        val, _ = kiselman_inf(phi, self.om(), [0.0, 1.0])
        assert val == pytest.approx(1.0, abs=1e-9)  # (Im t)^2 at t = i

    def test_zero_at_origin(self):
        phi = ExpressionScalar("t1re^2+t1im^2+z1re^2+2*t1re*z1re", self.CZ)
        val, _ = kiselman_inf(phi, self.om(), [0.0, 0.0])
        assert val == pytest.approx(0.0, abs=1e-12)

    def test_z_independent_identity(self):
        phi = ExpressionScalar("t1re^2+t1im^2", self.CZ)
        val, _ = kiselman_inf(phi, self.om(), [0.3, 0.4])
        assert val == pytest.approx(0.25, rel=1e-12)

    def test_field_values_batch(self):
        phi = ExpressionScalar("t1re^2+t1im^2+z1re^2+2*t1re*z1re", self.CZ)
        star = KiselmanInfScalar(phi, self.om(), ["z1"])
        P = np.array([[0.0, 1.0], [0.5, 0.0], [0.3, -0.4]])
        expected = P[:, 1] ** 2
        np.testing.assert_allclose(star.values(P), expected, atol=1e-8)


class TestExpReduce:
    def test_m1_exponential_oracle(self):
        co = Coords.real(["x1"])
        h = EntrywiseMetric([["exp(-x1)"]], co)
        red = exp_reduce(h, Box([0.0], [1.0]), ["x1"])
        np.testing.assert_allclose([red.annulus.r_lo[0], red.annulus.r_hi[0]], [1.0, math.e])
        val, _, _ = integrate(lambda P: red.h_second.raw_values(P)[:, 0, 0].real, red.annulus, order=24)
        assert val == pytest.approx(1 - math.exp(-1), rel=1e-9)

    def test_constant_roundtrip(self):
        co = Coords.real(["x1"])
        h = EntrywiseMetric([["2.5"]], co)
        red = exp_reduce(h, Box([0.0], [1.0]), ["x1"])
        val, _, _ = integrate(lambda P: red.h_second.raw_values(P)[:, 0, 0].real, red.annulus, order=24)
        assert val == pytest.approx(2.5, rel=1e-10)

    def test_diagonal_rank2_roundtrip(self):
        co = Coords.real(["x1"])
        h = EntrywiseMetric([["exp(-x1)", "0"], ["0", "exp(-2*x1)"]], co)
        red = exp_reduce(h, Box([-0.5], [0.5]), ["x1"])
        tube_val, _, _ = integrate(lambda P: np.asarray(h.raw_values(P)), Box([-0.5], [0.5]), order=24)
        ann_val, _, _ = integrate(lambda P: np.asarray(red.h_second.raw_values(P)), red.annulus, order=24)
        np.testing.assert_allclose(ann_val, tube_val, rtol=1e-8)

    def test_curvature_invariance_off_axes(self, rng):
        co = Coords.real(["x1"])
        h = EntrywiseMetric([["exp(-(x1^2)-0.3*x1)"]], co)
        red = exp_reduce(h, Box([-1.0], [1.0]), ["x1"])
        for _ in range(20):
            r = rng.uniform(red.annulus.r_lo[0] * 1.05, red.annulus.r_hi[0] * 0.95)
            th = rng.uniform(0, 2 * np.pi)
            w = np.array([r * np.cos(th), r * np.sin(th)])
            t1 = chern_curvature(red.h_prime, w).blocks
            t2 = chern_curvature(red.h_second, w).blocks
            assert np.max(np.abs(t1 - t2)) <= 1e-8

    def test_m2_product(self):
        co = Coords.real(["x1", "x2"])
        h = EntrywiseMetric([["exp(-x1-0.5*x2)"]], co)
        red = exp_reduce(h, Box([0.0, 0.0], [1.0, 0.5]), ["x1", "x2"])
        tube_val, _, _ = integrate(lambda P: np.exp(-P[:, 0] - 0.5 * P[:, 1]), Box([0.0, 0.0], [1.0, 0.5]),
                                   order=16)
        ann_val, _, _ = integrate(lambda P: red.h_second.raw_values(P)[:, 0, 0].real, red.annulus, order=12)
        assert ann_val == pytest.approx(tube_val, rel=1e-8)


class TestFubini:
    def test_gaussian_iterated(self):
        om = product_domain(-8, 8, -8, 8)
        out = fubini_consistency(GAUSS, om, np.array([1.0]), None, base_order=48, fiber_order=48)
        assert out["lhs"] == pytest.approx(math.pi, rel=1e-9)
        assert out["rel_diff"] <= 1e-12

    def test_zero_section(self):
        om = product_domain(-1, 1, -1, 1)
        out = fubini_consistency(GAUSS, om, np.array([0.0]), None, base_order=8, fiber_order=8)
        assert out["lhs"] == 0.0 and out["rhs"] == 0.0

    def test_basis_selection_rank2(self):
        co = Coords.real(["t1", "x1"])
        h = EntrywiseMetric([["exp(-(t1^2+x1^2))", "0"], ["0", "2*exp(-(t1^2+x1^2))"]], co)
        om = product_domain(-8, 8, -8, 8)
        out = fubini_consistency(h, om, np.array([0.0, 1.0]), None, base_order=48, fiber_order=48)
        assert out["lhs"] == pytest.approx(2 * math.pi, rel=1e-9)
        assert out["rel_diff"] <= 1e-12

    def test_weighted_by_base_psh(self):
        co_t = Coords.real(["t1"])
        psi = ExpressionScalar("t1^2", co_t)
        om = product_domain(-8, 8, -8, 8)
        out = fubini_consistency(GAUSS, om, np.array([1.0]), psi, base_order=96, fiber_order=48)
        # integral exp(-2t^2 - x^2) = pi / sqrt(2)
        assert out["lhs"] == pytest.approx(math.pi / math.sqrt(2), rel=1e-9)
        assert out["rel_diff"] <= 1e-12

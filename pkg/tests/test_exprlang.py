"""Parser and hyper-dual engine tests."""

import math

import numpy as np
import pytest

from nakano_lab import exprlang as ex
from nakano_lab.errors import DomainEvalError, ParseError

from conftest import random_expression, richardson_d1, richardson_d12


class TestParser:
    def test_literal(self):
        assert ex.parse("1") == ex.Num(1.0)
        assert ex.parse("2.5e-3") == ex.Num(0.0025)

    def test_precedence_mul_over_add(self):
        assert ex.parse("a+b*c") == ex.BinOp("+", ex.Var("a"), ex.BinOp("*", ex.Var("b"), ex.Var("c")))

    def test_left_associativity(self):
        assert ex.parse("a-b-c") == ex.BinOp("-", ex.BinOp("-", ex.Var("a"), ex.Var("b")), ex.Var("c"))
        assert ex.parse("a/b/c") == ex.BinOp("/", ex.BinOp("/", ex.Var("a"), ex.Var("b")), ex.Var("c"))

    def test_power_right_associative(self):
        assert ex.parse("a^b^c") == ex.BinOp("^", ex.Var("a"), ex.BinOp("^", ex.Var("b"), ex.Var("c")))

    def test_power_binds_tighter_than_unary_minus(self):
        assert ex.parse("-x^2") == ex.Neg(ex.BinOp("^", ex.Var("x"), ex.Num(2.0)))
        assert ex.parse("x^-2") == ex.BinOp("^", ex.Var("x"), ex.Neg(ex.Num(2.0)))

    def test_call_shape(self):
        e = ex.parse("exp(-(t1^2 + x1^2))")
        expected = ex.Call(
            "exp",
            ex.Neg(ex.BinOp("+", ex.BinOp("^", ex.Var("t1"), ex.Num(2.0)),
                            ex.BinOp("^", ex.Var("x1"), ex.Num(2.0)))),
        )
        assert e == expected

    def test_syntax_error_offset(self):
        with pytest.raises(ParseError) as err:
            ex.parse("1 + * 2")
        assert err.value.offset == 4

    def test_unknown_function(self):
        with pytest.raises(ParseError, match="unknown function"):
            ex.parse("foo(x)")

    def test_empty(self):
        with pytest.raises(ParseError):
            ex.parse("   ")

    def test_trailing_garbage(self):
        with pytest.raises(ParseError):
            ex.parse("1 2")

    @pytest.mark.parametrize("text", ["a+b*c", "-x^2", "x^-2", "a-b-c", "(a+b)*c", "exp(-(x^2))/2",
                                      "sqrt(1.5+abs2(x))", "a^b^c", "1e-3*x"])
    def test_roundtrip_goldens(self, text):
        tree = ex.parse(text)
        assert ex.parse(ex.to_string(tree)) == tree

    def test_roundtrip_random(self, rng):
        for _ in range(200):
            tree = random_expression(rng, ["x1", "x2"], depth=4)
            assert ex.parse(ex.to_string(tree)) == tree


class TestHyperDual:
    def test_polynomial(self):
        h = ex.eval_hyperdual(ex.parse("x1^2"), {"x1": 1.0}, {"x1": 1.0}, {"x1": 1.0})
        assert (h.v, h.d1, h.d2, h.d12) == (1.0, 2.0, 2.0, 2.0)

    def test_exp_at_zero(self):
        h = ex.eval_hyperdual(ex.parse("exp(x1)"), {"x1": 0.0}, {"x1": 1.0}, {"x1": 1.0})
        assert (h.v, h.d1, h.d2, h.d12) == (1.0, 1.0, 1.0, 1.0)

    def test_gaussian_second_derivative(self):
        # hand differentiation: (exp(-x^2))'' = (4x^2 - 2) exp(-x^2)
        h = ex.eval_hyperdual(ex.parse("exp(-(x1^2))"), {"x1": 0.5}, {"x1": 1.0}, {"x1": 1.0})
        expected = (4 * 0.25 - 2.0) * math.exp(-0.25)
        assert h.d12 == pytest.approx(expected, abs=1e-15)
        fd = richardson_d12(ex.parse("exp(-(x1^2))"), {"x1": 0.5}, {"x1": 1.0}, {"x1": 1.0}, h=0.005)
        assert h.d12 == pytest.approx(fd, rel=1e-6)

    def test_mixed_directions(self):
        # f = x*y^2: d^2 f / dx dy = 2y
        e = ex.parse("x1*x2^2")
        h = ex.eval_hyperdual(e, {"x1": 0.7, "x2": 1.3}, {"x1": 1.0}, {"x2": 1.0})
        assert h.d12 == pytest.approx(2 * 1.3, abs=1e-14)

    def test_division_chain(self):
        e = ex.parse("1/(1+x1^2)")
        h = ex.eval_hyperdual(e, {"x1": 0.5}, {"x1": 1.0}, {"x1": 1.0})
        x = 0.5
        d1 = -2 * x / (1 + x * x) ** 2
        d2 = (6 * x * x - 2) / (1 + x * x) ** 3
        assert h.d1 == pytest.approx(d1, abs=1e-14)
        assert h.d12 == pytest.approx(d2, abs=1e-14)

    def test_variable_exponent(self):
        # x^y at (2, 3): df/dx = 12, df/dy = 8 ln 2, d2f/dxdy = 4(3 ln 2 + 1)
        e = ex.parse("x1^x2")
        h = ex.eval_hyperdual(e, {"x1": 2.0, "x2": 3.0}, {"x1": 1.0}, {"x2": 1.0})
        assert h.v == pytest.approx(8.0)
        assert h.d1 == pytest.approx(12.0, rel=1e-13)
        assert h.d2 == pytest.approx(8 * math.log(2), rel=1e-13)
        assert h.d12 == pytest.approx(4 * (3 * math.log(2) + 1), rel=1e-13)

    def test_domain_errors(self):
        with pytest.raises(DomainEvalError):
            ex.eval_hyperdual(ex.parse("log(x1)"), {"x1": -1.0}, {}, {})
        with pytest.raises(DomainEvalError):
            ex.eval_hyperdual(ex.parse("sqrt(x1)"), {"x1": 0.0}, {}, {})
        with pytest.raises(DomainEvalError):
            ex.eval_hyperdual(ex.parse("1/x1"), {"x1": 0.0}, {}, {})

    def test_unbound_variable(self):
        with pytest.raises(DomainEvalError, match="unbound"):
            ex.eval_hyperdual(ex.parse("x1+y9"), {"x1": 0.0}, {}, {})

    def test_batched_env(self):
        e = ex.parse("exp(-(x1^2))")
        xs = np.linspace(-1, 1, 7)
        h = ex.eval_hyperdual(e, {"x1": xs}, {"x1": 1.0}, {"x1": 1.0})
        expected = (4 * xs**2 - 2) * np.exp(-(xs**2))
        np.testing.assert_allclose(h.d12, expected, atol=1e-14)

    def test_negative_base_integer_power(self):
        h = ex.eval_hyperdual(ex.parse("x1^3"), {"x1": -2.0}, {"x1": 1.0}, {"x1": 1.0})
        assert h.v == -8.0 and h.d1 == 12.0 and h.d12 == -12.0
        with pytest.raises(DomainEvalError):
            ex.eval_hyperdual(ex.parse("x1^0.5"), {"x1": -2.0}, {}, {})


class TestRichardsonCorpus:
    def test_fifty_random_expressions(self, rng):
        """Hyper-dual derivatives vs Richardson differences, relative 1e-6."""
        checked = 0
        while checked < 50:
            tree = random_expression(rng, ["x1", "x2"], depth=3)
            if not ex.free_variables(tree):
                continue
            env = {"x1": float(rng.uniform(-0.8, 0.8)), "x2": float(rng.uniform(-0.8, 0.8))}
            d1 = {"x1": 1.0}
            d2 = {"x2": 1.0} if "x2" in ex.free_variables(tree) else {"x1": 1.0}
            h = ex.eval_hyperdual(tree, env, d1, d2)
            fd1 = richardson_d1(tree, env, d1, h=0.005)
            fd12 = richardson_d12(tree, env, d1, d2, h=0.005)
            assert abs(h.d1 - fd1) <= 1e-6 * max(1.0, abs(fd1)), ex.to_string(tree)
            assert abs(h.d12 - fd12) <= 1e-6 * max(1.0, abs(fd12)), ex.to_string(tree)
            checked += 1

    def test_substitute(self):
        tree = ex.parse("exp(-(x1^2))")
        sub = ex.substitute(tree, {"x1": ex.parse("0.5*log(w1re^2+w1im^2)")})
        env = {"w1re": 1.2, "w1im": 0.4}
        x = 0.5 * math.log(1.2**2 + 0.4**2)
        assert ex.eval_value(sub, env) == pytest.approx(math.exp(-(x**2)), rel=1e-15)

"""Shared test helpers: finite-difference oracles and random expression corpus."""

import numpy as np
import pytest

from nakano_lab import exprlang as ex


def eval_at(expr, env):
    return float(ex.eval_value(expr, env))


def richardson_d1(expr, env, direction, h=0.02):
    """Richardson-extrapolated central first derivative along a direction."""

    def shift(s):
        e2 = dict(env)
        for k, v in direction.items():
            e2[k] = e2[k] + s * v
        return eval_at(expr, e2)

    def central(hh):
        return (shift(hh) - shift(-hh)) / (2.0 * hh)

    return (4.0 * central(h / 2) - central(h)) / 3.0


def richardson_d12(expr, env, dir1, dir2, h=0.02):
    """Richardson-extrapolated mixed second derivative along two directions."""

    def shift(s, u):
        e2 = dict(env)
        for k, v in dir1.items():
            e2[k] = e2[k] + s * v
        for k, v in dir2.items():
            e2[k] = e2.get(k, 0.0) + u * v
        return eval_at(expr, e2)

    def cross(hh):
        return (shift(hh, hh) - shift(hh, -hh) - shift(-hh, hh) + shift(-hh, -hh)) / (4.0 * hh * hh)

    return (4.0 * cross(h / 2) - cross(h)) / 3.0


def random_expression(rng, variables, depth=3):
    """Random expression that is smooth and domain-safe near the sample points.

    Arguments of log and sqrt are forced positive, denominators are bounded
    away from zero, and exp arguments are damped, so hyper-dual and
    finite-difference evaluation both stay well defined on [-1, 1]^d.
    """
    if depth == 0 or rng.random() < 0.25:
        if rng.random() < 0.4:
            return ex.Num(round(rng.uniform(0.3, 2.5), 6))
        return ex.Var(str(rng.choice(variables)))
    pick = rng.integers(0, 8)
    sub = lambda: random_expression(rng, variables, depth - 1)
    if pick == 0:
        return ex.BinOp("+", sub(), sub())
    if pick == 1:
        return ex.BinOp("-", sub(), sub())
    if pick == 2:
        return ex.BinOp("*", sub(), sub())
    if pick == 3:  # guarded division
        return ex.BinOp("/", sub(), ex.BinOp("+", ex.Num(1.5), ex.Call("abs2", sub())))
    if pick == 4:  # damped exponential
        return ex.Call("exp", ex.BinOp("*", ex.Num(0.4), ex.Call("sin", sub())))
    if pick == 5:  # guarded log / sqrt
        guarded = ex.BinOp("+", ex.Num(1.2), ex.Call("abs2", sub()))
        return ex.Call("log" if rng.random() < 0.5 else "sqrt", guarded)
    if pick == 6:
        return ex.Call("sin" if rng.random() < 0.5 else "cos", sub())
    return ex.BinOp("^", ex.BinOp("+", ex.Num(1.1), ex.Call("abs2", sub())), ex.Num(float(rng.integers(2, 4))))


@pytest.fixture
def rng():
    return np.random.default_rng(20240211)

"""Finite-difference verification suite for every differentiable op."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TOLERANCE = 1e-4
N_TRIALS = 20


def _scalarize(t: Tensor, probe: np.ndarray) -> Tensor:
    """Reduce an op output to a scalar via a fixed random projection."""
    return ad.tsum(ad.mul(t, Tensor(probe)))


def _cases(rng: np.random.Generator):
    """(name, builder) pairs; builder(rng) -> (f, x) for finite_diff_check."""

    def unary(op, lo=-2.0, hi=2.0, shape=(3, 4)):
        def build(r):
            x = Tensor(r.uniform(lo, hi, shape))
            probe = r.normal(size=shape)
            return (lambda t: _scalarize(op(t), probe)), x
        return build

    def binary(op, lo=-2.0, hi=2.0, shape=(3, 4)):
        def build(r):
            other = Tensor(r.uniform(lo, hi, shape))
            probe = r.normal(size=shape)
            return (lambda t: _scalarize(op(t, other), probe)), \
                Tensor(r.uniform(lo, hi, shape))
        return build

    def conv_case(stride):
        def build(r):
            w = Tensor(r.normal(size=(2, 3, 3, 3)) * 0.5)
            x = Tensor(r.uniform(-1, 1, (2, 3, 8, 8)))
            ho = (8 + 2 - 3) // stride + 1
            probe = r.normal(size=(2, 2, ho, ho))
            return (lambda t: _scalarize(ad.conv2d(t, w, stride=stride, pad=1),
                                         probe)), x
        return build

    def conv_weight(r):
        x = Tensor(r.uniform(-1, 1, (2, 2, 6, 6)))
        probe = r.normal(size=(2, 3, 6, 6))
        return (lambda t: _scalarize(ad.conv2d(x, t, stride=1, pad=1), probe)), \
            Tensor(r.normal(size=(3, 2, 3, 3)) * 0.5)

    def matmul_case(r):
        b = Tensor(r.normal(size=(4, 3)))
        probe = r.normal(size=(3, 3))
        return (lambda t: _scalarize(ad.matmul(t, b), probe)), \
            Tensor(r.normal(size=(3, 4)))

    def upsample_case(r):
        probe = r.normal(size=(1, 2, 8, 8))
        return (lambda t: _scalarize(ad.upsample_nn(t, 2), probe)), \
            Tensor(r.normal(size=(1, 2, 4, 4)))

    def concat_case(r):
        other = Tensor(r.normal(size=(2, 3)))
        probe = r.normal(size=(2, 7))
        return (lambda t: _scalarize(ad.concat([t, other], axis=1), probe)), \
            Tensor(r.normal(size=(2, 4)))

    def narrow_case(r):
        probe = r.normal(size=(2, 2))
        return (lambda t: _scalarize(ad.narrow(t, 1, 1, 2), probe)), \
            Tensor(r.normal(size=(2, 5)))

    def logsoftmax_case(r):
        probe = r.normal(size=(3, 5))
        return (lambda t: _scalarize(ad.log_softmax(t, axis=1), probe)), \
            Tensor(r.normal(size=(3, 5)) * 3)

    def div_case(r):
        other = Tensor(r.uniform(0.5, 2.0, (3, 4)))
        probe = r.normal(size=(3, 4))
        return (lambda t: _scalarize(ad.div(t, other, guard=0.1), probe)), \
            Tensor(r.uniform(-2, 2, (3, 4)))

    def div_denominator(r):
        num = Tensor(r.uniform(-2, 2, (3, 4)))
        probe = r.normal(size=(3, 4))
        return (lambda t: _scalarize(ad.div(num, t, guard=0.1), probe)), \
            Tensor(r.uniform(0.5, 2.0, (3, 4)))

    def norm_case(r):
        return (lambda t: ad.norm(t)), Tensor(r.uniform(0.5, 2.0, (2, 3)))

    def norm_per_sample_case(r):
        probe = r.normal(size=(3,))
        return (lambda t: _scalarize(ad.norm_per_sample(t), probe)), \
            Tensor(r.uniform(0.5, 2.0, (3, 4)))

    def reshape_case(r):
        probe = r.normal(size=(4, 3))
        return (lambda t: _scalarize(ad.reshape(t, (4, 3)), probe)), \
            Tensor(r.normal(size=(3, 4)))

    def gap_case(r):
        probe = r.normal(size=(2, 3))
        return (lambda t: _scalarize(ad.global_avg_pool(t), probe)), \
            Tensor(r.normal(size=(2, 3, 4, 4)))

    def second_order(r):
        n = int(r.integers(2, 7))
        A = r.normal(size=(n, n))
        A = (A + A.T) / 2
        At = Tensor(A)

        def f(t):
            col = ad.reshape(t, (n, 1))
            quad = ad.mul(ad.tsum(ad.mul(col, ad.matmul(At, col))), 0.5)
            g = ad.grad(quad, [t], create_graph=True)[0]
            return ad.mul(ad.tsum(ad.square(g)), 0.5)

        return f, Tensor(r.normal(size=(n,)))

    return [
        ("add", binary(ad.add)),
        ("sub", binary(ad.sub)),
        ("mul", binary(ad.mul)),
        ("scalar_mul", unary(lambda t: ad.mul(t, 3.7))),
        ("div", div_case),
        ("div_denominator", div_denominator),
        ("matmul", matmul_case),
        ("conv2d_stride1", conv_case(1)),
        ("conv2d_stride2", conv_case(2)),
        ("conv2d_weight", conv_weight),
        ("upsample_nn", upsample_case),
        ("relu", unary(ad.relu, lo=0.1, hi=2.0)),  # away from the kink
        ("sigmoid", unary(ad.sigmoid)),
        ("log_softmax", logsoftmax_case),
        ("global_avg_pool", gap_case),
        ("reshape", reshape_case),
        ("concat", concat_case),
        ("narrow", narrow_case),
        ("sum", lambda r: ((lambda t: ad.tsum(t)), Tensor(r.normal(size=(3, 4))))),
        ("mean", lambda r: ((lambda t: ad.mean(t)), Tensor(r.normal(size=(3, 4))))),
        ("square", unary(ad.square)),
        ("sqrt", unary(ad.sqrt, lo=0.5, hi=2.0)),
        ("abs", unary(ad.absval, lo=0.2, hi=2.0)),
        ("exp", unary(ad.exp)),
        ("log", unary(lambda t: ad.log(t, guard=0.0), lo=0.5, hi=2.0)),
        ("l2_norm_global", norm_case),
        ("l2_norm_per_sample", norm_per_sample_case),
        ("second_order_quadratic", second_order),
    ]


def run_gradcheck(seed: int = 0, trials: int = N_TRIALS,
                  tolerance: float = TOLERANCE):
    """Run all cases; returns ([(name, max_err, passed)], all_passed)."""
    rng = np.random.default_rng(seed)
    results = []
    all_ok = True
    for name, builder in _cases(rng):
        worst = 0.0
        for _ in range(trials):
            f, x = builder(rng)
            worst = max(worst, ad.finite_diff_check(f, x))
        passed = worst < tolerance
        all_ok &= passed
        results.append((name, worst, passed))
    return results, all_ok

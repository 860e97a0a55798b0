"""Elementary tape operations paired with inputs away from their kinks."""

from __future__ import annotations

import zlib

import numpy as np

from neusdf import autodiff as ad

from _fd import fd_grad, rel_err

_rng = np.random.default_rng(1234)


def _u(*shape, lo=-1.0, hi=1.0):
    return _rng.uniform(lo, hi, size=shape)


def _away(x, kink, gap=0.05):
    """Push entries at least ``gap`` away from ``kink``."""
    x = np.array(x)
    close = np.abs(x - kink) < gap
    x[close] = kink + np.where(x[close] >= kink, gap, -gap)
    return x


OP_CASES = {
    "add_broadcast": (lambda a, b: ad.add(a, b), [_u(3, 4), _u(4)]),
    "sub_broadcast": (lambda a, b: ad.sub(a, b), [_u(3, 4), _u(3, 1)]),
    "rsub_scalar": (lambda a: 2.5 - a, [_u(5)]),
    "mul_broadcast": (lambda a, b: ad.mul(a, b), [_u(2, 3, 4), _u(3, 1)]),
    "div": (lambda a, b: ad.div(a, b), [_u(3, 4), _u(3, 4, lo=0.5, hi=2.0)]),
    "rtruediv_scalar": (lambda a: 1.5 / a, [_u(6, lo=0.5, hi=2.0)]),
    "neg": (lambda a: -a, [_u(4)]),
    "scale": (lambda a: ad.scale(a, -3.25), [_u(2, 3)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [_u(3, 4), _u(4, 2)]),
    "affine": (lambda x, w, b: ad.affine(x, w, b), [_u(5, 3), _u(3, 4), _u(4)]),
    "exp": (ad.exp, [_u(7)]),
    "log": (ad.log, [_u(7, lo=0.2, hi=3.0)]),
    "sin": (ad.sin, [_u(7, lo=-3, hi=3)]),
    "cos": (ad.cos, [_u(7, lo=-3, hi=3)]),
    "square": (ad.square, [_u(7)]),
    "sqrt": (ad.sqrt, [_u(7, lo=0.2, hi=3.0)]),
    "abs": (ad.abs_, [_away(_u(9), 0.0)]),
    "sigmoid": (ad.sigmoid, [_u(9, lo=-8, hi=8)]),
    "softplus_beta1": (lambda a: ad.softplus(a, 1.0), [_u(9, lo=-6, hi=6)]),
    "softplus_beta100": (lambda a: ad.softplus(a, 100.0), [_u(9, lo=-0.05, hi=0.05)]),
    "softplus_slope": (lambda a: ad.softplus_slope(ad.softplus(a, 100.0), 100.0),
                       [_u(9, lo=-0.03, hi=0.03)]),
    "maximum": (lambda a: ad.maximum(a, 0.1), [_away(_u(9), 0.1)]),
    "clip": (lambda a: ad.clip(a, -0.5, 0.5), [_away(_away(_u(12), -0.5), 0.5)]),
    "sum_all": (lambda a: ad.sum_(a), [_u(3, 4)]),
    "sum_axis": (lambda a: ad.sum_(a, axis=1), [_u(3, 4, 2)]),
    "sum_keepdims": (lambda a: ad.sum_(a, axis=0, keepdims=True), [_u(3, 4)]),
    "mean": (lambda a: ad.mean(a, axis=0), [_u(5, 3)]),
    "norm": (lambda a: ad.norm(a, axis=-1), [_u(6, 3)]),
    "reshape": (lambda a: ad.reshape(a, (4, 3)), [_u(2, 6)]),
    "getitem_slice": (lambda a: a[:, 1:3], [_u(4, 5)]),
    "getitem_fancy_repeat": (lambda a: a[np.array([0, 2, 2, 1, 0])], [_u(3, 2)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=0), [_u(2, 3), _u(4, 3)]),
    "broadcast_to": (lambda a: ad.broadcast_to(a, (4, 3)), [_u(1, 3)]),
    "cumprod_exclusive": (ad.cumprod_exclusive, [_u(3, 6, lo=0.1, hi=1.0)]),
    "cumprod_exclusive_zero": (ad.cumprod_exclusive,
                               [np.array([[0.5, 0.0, 0.7, 0.9], [0.2, 0.3, 0.0, 0.0]])]),
}


def check_case(name: str, h: float = 1e-6) -> float:
    """Largest relative error between tape and finite-difference gradients."""
    fn, inputs = OP_CASES[name]
    tape = ad.Tape()
    out_shape = np.shape(fn(*[tape.var(x) for x in inputs]).value)
    weights = np.random.default_rng(zlib.crc32(name.encode())).uniform(0.5, 1.5, out_shape)

    def scalar(*xs):
        return ad.sum_(ad.mul(fn(*xs), weights))

    _, grads = ad.value_and_grad(scalar, *inputs)
    worst = 0.0
    for i, x in enumerate(inputs):
        def f_i(xi, i=i):
            args = list(inputs)
            args[i] = xi
            tape = ad.Tape()
            return float(scalar(*[tape.var(a) for a in args]).value)

        worst = max(worst, rel_err(grads[i], fd_grad(f_i, x, h)))
    return worst

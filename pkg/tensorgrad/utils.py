"""
tensorgrad/utils.py

Gradient oracles and weight initialisers.
"""
import math

import numpy as np

from tensorgrad.models import Tape, Tensor
from tensorgrad.ops import backward

PRELU_INIT_SLOPE = 0.25


def relative_error(analytic, numeric, floor=1e-12):
    '''max |a - n| / max(|a|, |n|, floor) over all elements'''
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denominator))


def finite_diff_check(f, x, eps=1e-6, floor=1e-12):
    '''Compares the tape gradient of scalar f at x with central
    differences and returns the max relative error.

    f takes one Tensor and returns a scalar Tensor; x may be a Tensor or
    an array and is not modified.'''
    base = np.array(x.values if isinstance(x, Tensor) else x)
    leaf = Tensor(base.copy(), requires_grad=True, dtype=base.dtype)
    with Tape():
        out = f(leaf)
    backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros(base.shape, dtype=np.float64)
    shifted = base.copy()
    flat = shifted.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + eps
        upper = f(Tensor(shifted, dtype=base.dtype)).item()
        flat[index] = original - eps
        lower = f(Tensor(shifted, dtype=base.dtype)).item()
        flat[index] = original
        numeric.reshape(-1)[index] = (upper - lower) / (2 * eps)
    return relative_error(analytic, numeric, floor)


def check_parameter_gradients(loss_fn, params, samples, eps=1e-6, floor=1e-12):
    '''Finite-difference check of d(loss)/d(param) on selected elements.

    loss_fn() rebuilds the scalar loss from the current parameter values;
    samples is a list of (param, flat_index) pairs. Returns the max
    relative error.'''
    for param in params:
        param.zero_grad()
    with Tape():
        loss = loss_fn()
    backward(loss)
    analytic = []
    numeric = []
    for param, index in samples:
        grad = param.grad if param.grad is not None else np.zeros(param.shape)
        analytic.append(grad.reshape(-1)[index])
        flat = param.values.reshape(-1)
        original = flat[index]
        flat[index] = original + eps
        upper = loss_fn().item()
        flat[index] = original - eps
        lower = loss_fn().item()
        flat[index] = original
        numeric.append((upper - lower) / (2 * eps))
    return relative_error(analytic, numeric, floor)


def inner_product(a, b):
    return float(np.sum(np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64)))


def kaiming_uniform(rng, shape, fan_in, slope=PRELU_INIT_SLOPE, dtype=None):
    '''Fan-in scaled uniform init with the gain of a leaky rectifier'''
    gain = math.sqrt(2.0 / (1.0 + slope ** 2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True,
                  dtype=dtype)


def bias_uniform(rng, channels, fan_in, dtype=None):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(channels,)),
                  requires_grad=True, dtype=dtype)


def prelu_slopes(channels, dtype=None):
    return Tensor(np.full((channels,), PRELU_INIT_SLOPE), requires_grad=True,
                  dtype=dtype)

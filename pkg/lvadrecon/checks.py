"""
lvadrecon/checks.py

The self-check suite run by `manage.py selfcheck`: gradient and adjoint
oracles for the tensor engine, projection quality of the flow solver,
sparse-mask exactness and the metric identities.
"""
import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from datapipe.preprocess import make_sparse_mask, sparse_count
from evalkit.metrics import mse, psnr, psnr_from_mse
from flowgen.geometry import tube_domain, voxelize
from flowgen.models import GridSpec, SolverConfig, VentricleGeometry
from flowgen.solver import divergence, flux, simulate
from tensorgrad import kernels
from tensorgrad.models import Tensor, default_dtype
from tensorgrad.ops import (broadcast_scalar, concat_channels, conv3d,
                            conv_transpose3d, huber_loss, instance_norm3d,
                            maxpool3d, prelu)
from tensorgrad.utils import finite_diff_check, inner_product

LOGGER = logging.getLogger('lvadrecon')

GRAD_TOL = 1e-4
ADJOINT_TOL = 1e-10
GRAD_SEEDS = 20

CHECKS = OrderedDict()


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def register(name):
    def decorator(fn):
        CHECKS[name] = fn
        return fn
    return decorator


def _weighted(y, rng):
    return (y * Tensor(rng.standard_normal(y.shape))).sum()


def _op_cases(rng):
    '''(op name, function of one tensor, input) for every differentiable op'''
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
    b = Tensor(rng.standard_normal(3))
    wt = Tensor(rng.standard_normal((2, 3, 2, 2, 2)))
    slope = Tensor(rng.uniform(0.1, 0.4, 2))
    other = Tensor(rng.standard_normal((1, 1, 4, 4, 4)))
    target = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))
    # maxpool ties make the numeric gradient ill-defined; perturb a permutation
    pool_input = rng.permutation(128).reshape(1, 2, 4, 4, 4) * 0.1
    return [
        ('conv3d', lambda t: _weighted(conv3d(t, w, b), rng),
         rng.standard_normal((1, 2, 4, 4, 4))),
        ('conv3d_strided', lambda t: _weighted(conv3d(t, w, b, stride=2), rng),
         rng.standard_normal((1, 2, 4, 4, 4))),
        ('conv_transpose3d', lambda t: _weighted(conv_transpose3d(t, wt), rng),
         rng.standard_normal((1, 2, 2, 2, 2))),
        ('maxpool3d', lambda t: _weighted(maxpool3d(t), rng), pool_input),
        ('instance_norm3d', lambda t: _weighted(instance_norm3d(t), rng),
         rng.standard_normal((1, 2, 3, 3, 3))),
        ('prelu', lambda t: _weighted(prelu(t, slope), rng),
         rng.standard_normal((1, 2, 3, 3, 3)) + 0.05),
        ('concat', lambda t: _weighted(concat_channels([t, other]), rng),
         rng.standard_normal((1, 2, 4, 4, 4))),
        ('broadcast', lambda t: _weighted(broadcast_scalar(t, (2, 3, 2, 2, 2)), rng),
         rng.standard_normal(2)),
        ('huber', lambda t: huber_loss(t, target, 0.5),
         target.values + rng.uniform(-1.5, 1.5, target.shape)),
    ]


@register('gradients')
def check_gradients():
    '''Finite differences for every differentiable op over 20 seeds'''
    worst = {}
    with default_dtype('float64'):
        for seed in range(GRAD_SEEDS):
            rng = np.random.default_rng(seed)
            for name, fn, x in _op_cases(rng):
                # the weight draws inside fn must repeat for every evaluation
                state = rng.bit_generator.state

                def stable(t, fn=fn, state=state):
                    rng.bit_generator.state = state
                    return fn(t)

                error = finite_diff_check(stable, x)
                worst[name] = max(worst.get(name, 0.0), error)
    failed = sorted(n for n, e in worst.items() if not e < GRAD_TOL)
    detail = 'max relative error %.2e' % max(worst.values())
    if failed:
        detail += '; failing: %s' % ', '.join(failed)
    return not failed, detail


@register('adjoint')
def check_adjoint():
    '''<conv(u), v> == <u, conv_transpose(v)> for the model's configurations'''
    worst = 0.0
    with default_dtype('float64'):
        for kernel, stride, padding in ((3, 1, 1), (3, 2, 1), (2, 2, 0), (1, 1, 0)):
            rng = np.random.default_rng(kernel * 10 + stride)
            u = Tensor(rng.standard_normal((1, 2, 8, 8, 8)))
            w = Tensor(rng.standard_normal((3, 2, kernel, kernel, kernel)))
            forward = conv3d(u, w, stride=stride, padding=padding)
            v = Tensor(rng.standard_normal(forward.shape))
            output_padding = 8 - kernels.transpose_output_extent(
                forward.shape[2], kernel, stride, padding)
            adjoint = conv_transpose3d(v, w, stride=stride, padding=padding,
                                       output_padding=output_padding)
            lhs = inner_product(forward.values, v.values)
            rhs = inner_product(u.values, adjoint.values)
            worst = max(worst, abs(lhs - rhs) / abs(lhs))
    return worst < ADJOINT_TOL, 'max relative error %.2e' % worst


@register('divergence')
def check_divergence():
    '''Projected fields are divergence free and conserve tube flux'''
    v_in = 0.3
    spacing = 0.0045
    cfg = SolverConfig(dt=0.004, steps=10, grid=GridSpec(20, spacing))
    geom = VentricleGeometry.create('check', 54.0, 78.0)
    snapshot = simulate(geom, cfg, v_in, domain=voxelize(geom, cfg.grid))[-1]
    bound = 1e-3 * v_in / spacing
    ok = snapshot.converged and snapshot.max_divergence < bound
    detail = 'max divergence %.3g (bound %.3g)' % (snapshot.max_divergence, bound)

    grid = GridSpec(16, spacing)
    domain = tube_domain(grid, radius_voxels=4, length_voxels=12)
    tube_cfg = SolverConfig(dt=0.004, steps=20, grid=grid)
    tube = simulate(None, tube_cfg, 0.2, domain=domain)[-1]
    inlet_layer = np.nonzero(domain.inlet.any(axis=(1, 2)))[0].max()
    outlet_layer = np.nonzero(domain.outlet.any(axis=(1, 2)))[0].max()
    q_in = 0.2 * domain.inlet[inlet_layer].sum() * spacing ** 2
    q_out = flux(tube.velocity, outlet_layer, spacing)
    imbalance = abs(q_out - q_in) / q_in
    interior = np.abs(divergence(tube.velocity, spacing))[domain.interior].max()
    ok = ok and imbalance < 0.01 and interior < 1e-3 * 0.2 / spacing
    return ok, detail + ', tube flux imbalance %.2e' % imbalance


@register('mask_density')
def check_mask_density():
    '''Sparse masks hold exactly floor(0.05 N) ventricle voxels'''
    geom = VentricleGeometry.create('check', 60.0, 90.0)
    mask = voxelize(geom, GridSpec(32, 0.0045)).mask
    failures = 0
    for seed in range(10):
        sparse = make_sparse_mask(mask, 0.05, seed=seed)
        expected = sparse_count(int(np.count_nonzero(mask)), 0.05)
        if np.count_nonzero(sparse) != expected or np.any(sparse[~mask]):
            failures += 1
    return failures == 0, '%d of 10 masks off' % failures


@register('psnr')
def check_psnr():
    '''PSNR identity at unit peak and reference values'''
    rng = np.random.default_rng(0)
    truth = rng.standard_normal((8, 8, 8))
    pred = truth + 0.05 * rng.standard_normal(truth.shape)
    identity = abs(psnr(pred, truth) + 10 * math.log10(mse(pred, truth)))
    table = (round(math.sqrt(1.90e-3), 4) == 0.0436
             and abs(psnr_from_mse(1.90e-3) - 27.22) < 0.02
             and round(psnr_from_mse(5.03e-2), 2) == 12.98
             and psnr_from_mse(0.0) == float('inf'))
    return identity < 1e-9 and table, 'identity error %.1e' % identity


def run_checks(only=None):
    '''Runs the named check (or all) and returns CheckResults; a check
    that raises counts as failed'''
    if only is not None and only not in CHECKS:
        raise KeyError(only)
    results = []
    for name, fn in CHECKS.items():
        if only is not None and name != only:
            continue
        started = time.monotonic()
        try:
            passed, detail = fn()
        except Exception as err:
            LOGGER.error('selfcheck %s raised: %s', name, err)
            passed, detail = False, 'raised %s: %s' % (type(err).__name__, err)
        results.append(CheckResult(name, bool(passed), detail,
                                   time.monotonic() - started))
    return results

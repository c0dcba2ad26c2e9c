"""
evalkit/metrics.py

Voxel-wise error metrics. All take an optional boolean mask restricting
the evaluation to the ventricle; by default the whole grid is scored.
"""
import math

import numpy as np

from evalkit.models import MetricShapeError, EvalError


def _pair(pred, truth, mask=None):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise MetricShapeError('prediction has shape %s, truth %s'
                               % (list(pred.shape), list(truth.shape)))
    if mask is not None:
        mask = np.asarray(mask) != 0
        if mask.shape != pred.shape:
            raise MetricShapeError('mask has shape %s, fields %s'
                                   % (list(mask.shape), list(pred.shape)))
        pred, truth = pred[mask], truth[mask]
    if pred.size == 0:
        raise EvalError('nothing to evaluate: empty domain')
    return pred, truth


def mse(pred, truth, mask=None):
    pred, truth = _pair(pred, truth, mask)
    return float(np.mean((pred - truth) ** 2))


def mae(pred, truth, mask=None):
    pred, truth = _pair(pred, truth, mask)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth, mask=None):
    return math.sqrt(mse(pred, truth, mask))


def psnr_from_mse(value, peak=1.0):
    '''10 log10(peak^2 / mse) in dB; a perfect reconstruction is +inf'''
    if peak <= 0:
        raise EvalError('psnr peak must be positive, got %s' % peak)
    if value == 0:
        return float('inf')
    return 10.0 * math.log10(peak ** 2 / value)


def psnr(pred, truth, peak=1.0, mask=None):
    return psnr_from_mse(mse(pred, truth, mask), peak)


def velocity_magnitude(vx, vy, vz):
    vx, vy, vz = (np.asarray(v, dtype=np.float64) for v in (vx, vy, vz))
    if not vx.shape == vy.shape == vz.shape:
        raise MetricShapeError('component shapes differ: %s, %s, %s'
                               % (list(vx.shape), list(vy.shape), list(vz.shape)))
    return np.sqrt(vx * vx + vy * vy + vz * vz)


def score(pred, truth, peak=1.0, mask=None):
    '''All four metrics as a dict keyed like the report columns'''
    value = mse(pred, truth, mask)
    return {'mse': value,
            'mae': mae(pred, truth, mask),
            'rmse': math.sqrt(value),
            'psnr_db': psnr_from_mse(value, peak)}

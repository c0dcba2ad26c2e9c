"""
trainer/optim.py

Adam and the cosine learning-rate schedule.
"""
import logging
import math

import numpy as np

from trainer.models import NonFiniteGradient, TrainingError

LOGGER = logging.getLogger(__name__)


def cosine_lr(step, total_steps, lr0, lr_min=0.0):
    '''lr_min + (lr0 - lr_min) (1 + cos(pi step / total)) / 2'''
    if total_steps <= 0:
        raise TrainingError('total_steps must be positive')
    if not 0 <= step <= total_steps:
        raise TrainingError('step %d outside [0, %d]' % (step, total_steps))
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    '''One bias-corrected Adam update, in place.

    params maps name -> Tensor, grads name -> array (None is a zero
    gradient). Non-finite gradients reject the whole step before any
    parameter or moment changes.'''
    for name, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NonFiniteGradient('non-finite gradient for %s at step %d'
                                    % (name, state.step + 1))
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(param.values)
        if grad.shape != param.shape:
            raise TrainingError('gradient for %s has shape %s, parameter %s'
                                % (name, grad.shape, param.shape))
        grad = grad.astype(param.dtype, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.values)
            v = np.zeros_like(param.values)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        param.values = param.values - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state

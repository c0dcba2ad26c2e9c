"""
evalkit/evaluate.py

Component-wise evaluation of trained models on test samples, plus the
velocity magnitude composed from the three reconstructions.
"""
import logging

import numpy as np

from datapipe.preprocess import assemble_input
from flowgen.models import COMPONENTS
from networks.builder import forward
from networks.models import INPUT, OFF

from evalkit.metrics import score, velocity_magnitude
from evalkit.models import MAGNITUDE, EvalError, MetricReport, MissingComponentError

LOGGER = logging.getLogger(__name__)


def model_id(cfg):
    '''Report name of a model configuration; skip-less variants are
    suffixed so both halves of the skip ablation stay distinguishable'''
    return cfg.architecture if cfg.skips else cfg.architecture + '-noskip'


def input_flags(cfg):
    return {'sparse': True, 'rdf': cfg.rdf, 'vin': cfg.conditioning != OFF}


def predict(model, sample, component):
    '''Reconstruction [D, H, W] of one component of one sample'''
    inputs, _target = assemble_input(sample, component, rdf=model.cfg.rdf,
                                     v_in_channel=model.cfg.conditioning == INPUT)
    return forward(model, inputs, sample.v_in).values[0]


def evaluate_components(models, samples, fold=0, seed=0, peak=1.0,
                        in_mask=False, require_all=True):
    '''One MetricReport per component in models, plus a magnitude row when
    all three components are present.

    models maps component -> Model. Metrics are voxel means pooled over
    all samples. With require_all, a missing component is an error;
    otherwise the magnitude row is skipped with a warning.'''
    if not samples:
        raise EvalError('no test samples to evaluate')
    missing = [c for c in COMPONENTS if c not in models]
    if missing and require_all:
        raise MissingComponentError('no model for component(s) %s'
                                    % ', '.join(missing))
    if len(missing) == len(COMPONENTS):
        raise MissingComponentError('no component models given')
    masks = np.stack([s.ventricle_mask for s in samples]) if in_mask else None
    predictions, truths = {}, {}
    reports = []
    for component in COMPONENTS:
        model = models.get(component)
        if model is None:
            continue
        predictions[component] = np.stack(
            [predict(model, s, component) for s in samples])
        truths[component] = np.stack([s.component(component) for s in samples])
        metrics = score(predictions[component], truths[component], peak, masks)
        reports.append(MetricReport(model=model_id(model.cfg),
                                    component=component, fold=fold, seed=seed,
                                    **input_flags(model.cfg), **metrics))
    if missing:
        LOGGER.warning('Skipping magnitude rows: no model for %s',
                       ', '.join(missing))
        return reports
    pred_mag = velocity_magnitude(*(predictions[c] for c in COMPONENTS))
    true_mag = velocity_magnitude(*(truths[c] for c in COMPONENTS))
    reference = models[COMPONENTS[0]].cfg
    reports.append(MetricReport(model=model_id(reference), component=MAGNITUDE,
                                fold=fold, seed=seed, **input_flags(reference),
                                **score(pred_mag, true_mag, peak, masks)))
    return reports

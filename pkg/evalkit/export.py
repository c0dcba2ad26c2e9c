"""
evalkit/export.py

Mid-plane slice export of predicted and true fields: PPM images through
Pillow and a CSV of the raw values.
"""
import csv
import logging
import os

import numpy as np
from PIL import Image

from flowgen.models import COMPONENT_AXIS, COMPONENTS
from evalkit.models import MAGNITUDE, EvalError, MetricShapeError

LOGGER = logging.getLogger(__name__)

# blue -> green -> yellow
RAMP = np.array([[0, 0, 255], [0, 255, 0], [255, 255, 0]], dtype=np.float64)


def slice_axis(component):
    '''Array axis normal to the exported plane: the component's own axis,
    the long (z) axis for the magnitude'''
    if component == MAGNITUDE:
        return COMPONENT_AXIS[COMPONENTS.index('z')]
    if component not in COMPONENTS:
        raise EvalError('unknown component %r' % component)
    return COMPONENT_AXIS[COMPONENTS.index(component)]


def mid_slice(volume, axis):
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise MetricShapeError('expected a 3-D volume, got shape %s'
                               % list(volume.shape))
    return np.take(volume, volume.shape[axis] // 2, axis=axis)


def colorize(plane, vmin, vmax):
    '''uint8 RGB image of plane on the blue-green-yellow ramp'''
    span = vmax - vmin
    t = np.zeros(plane.shape) if span <= 0 else (plane - vmin) / span
    t = np.clip(np.nan_to_num(t), 0.0, 1.0) * (len(RAMP) - 1)
    low = np.minimum(t.astype(int), len(RAMP) - 2)
    frac = (t - low)[..., np.newaxis]
    rgb = RAMP[low] * (1.0 - frac) + RAMP[low + 1] * frac
    return np.round(rgb).astype(np.uint8)


def write_ppm(path, plane, vmin, vmax):
    try:
        Image.fromarray(colorize(plane, vmin, vmax)).save(path, format='PPM')
    except OSError as err:
        LOGGER.error('Write failed for %s: %s', path, err)
        raise EvalError('cannot write image %s: %s' % (path, err)) from err
    return path


def export_slices(pred, truth, component, output_dir, prefix='sample'):
    '''Writes <prefix>_<component>_pred.ppm, ..._true.ppm and
    ..._slice.csv; both images share one colour range. Returns the paths.'''
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricShapeError('prediction has shape %s, truth %s'
                               % (list(pred.shape), list(truth.shape)))
    axis = slice_axis(component)
    planes = {'pred': mid_slice(pred, axis), 'true': mid_slice(truth, axis)}
    vmin = float(min(p.min() for p in planes.values()))
    vmax = float(max(p.max() for p in planes.values()))
    os.makedirs(output_dir, exist_ok=True)
    base = os.path.join(output_dir, '%s_%s' % (prefix, component))
    paths = [write_ppm('%s_%s.ppm' % (base, kind), plane, vmin, vmax)
             for kind, plane in planes.items()]
    csv_path = base + '_slice.csv'
    with open(csv_path, 'w', newline='', encoding='utf-8') as fileref:
        writer = csv.writer(fileref)
        writer.writerow(['row', 'col', 'pred', 'true'])
        for (i, j), value in np.ndenumerate(planes['pred']):
            writer.writerow([i, j, repr(float(value)),
                             repr(float(planes['true'][i, j]))])
    paths.append(csv_path)
    LOGGER.info('Wrote %s slices to %s', component, output_dir)
    return paths

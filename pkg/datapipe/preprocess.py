"""
datapipe/preprocess.py

Snapshot -> Sample: resampling, normalization, sparse masking and the
assembly of network inputs.
"""
import logging
import math
from dataclasses import replace

import numpy as np
from scipy.ndimage import map_coordinates

from flowgen.geometry import compute_rdf
from flowgen.models import COMPONENTS
from datapipe.models import (SPARSE_FRACTION, V_IN_SCALE, DataError, MaskError,
                             Normalization, NormalizationError, Sample,
                             check_component)

LOGGER = logging.getLogger(__name__)


def _resample_coordinates(source_shape, target_shape):
    '''Source-grid coordinates of the target voxel centres; both grids
    span the same field of view'''
    axes = [(np.arange(t) + 0.5) * (s / float(t)) - 0.5
            for s, t in zip(source_shape, target_shape)]
    return np.stack(np.meshgrid(*axes, indexing='ij'))


def interpolate_to_grid(volume, shape, order=1):
    '''Trilinear (order 1) or nearest (order 0) resampling of a [D, H, W]
    volume onto a grid of `shape` covering the same field of view'''
    volume = np.asarray(volume, dtype=np.float64)
    shape = tuple(int(n) for n in shape)
    if volume.ndim != 3 or len(shape) != 3:
        raise DataError('cannot resample %s onto %s' % (volume.shape, shape))
    if volume.shape == shape:
        return volume.copy()
    coords = _resample_coordinates(volume.shape, shape)
    return map_coordinates(volume, coords, order=order, mode='nearest')


def snapshot_peak(snapshot):
    '''Largest speed |v| of one snapshot'''
    velocity = snapshot.velocity
    if not np.all(np.isfinite(velocity)):
        raise NormalizationError('snapshot %s t=%d holds non-finite '
                                 'velocities' % (snapshot.geometry_id,
                                                 snapshot.time_index))
    return float(np.sqrt((velocity.astype(np.float64) ** 2).sum(0)).max())


def peak_speed(snapshots):
    '''Largest speed |v| over all snapshots'''
    return max([snapshot_peak(s) for s in snapshots] + [0.0])


def fit_normalization(snapshots, v_in_scale=V_IN_SCALE):
    return normalization_for_peak(peak_speed(snapshots), v_in_scale)


def normalization_for_peak(peak, v_in_scale=V_IN_SCALE):
    if peak == 0.0:
        raise NormalizationError('all velocities are zero; nothing to '
                                 'normalize against')
    return Normalization(velocity_scale=peak, v_in_scale=v_in_scale)


def rescale(sample, source, target):
    '''Re-expresses the velocities of a sample normalized by `source` in
    the units of `target`'''
    factor = source.velocity_scale / target.velocity_scale
    if factor == 1.0:
        return sample
    return replace(sample, vx=(sample.vx * factor).astype(np.float32),
                   vy=(sample.vy * factor).astype(np.float32),
                   vz=(sample.vz * factor).astype(np.float32))


def normalize(snapshot, normalization):
    '''Returns ({component: normalized field}, normalized v_in)'''
    fields = {}
    for name in COMPONENTS:
        values = snapshot.component(name)
        if not np.all(np.isfinite(values)):
            raise NormalizationError('snapshot %s holds non-finite %s values'
                                     % (snapshot.geometry_id, name))
        fields[name] = values / normalization.velocity_scale
    return fields, snapshot.v_in / normalization.v_in_scale


def denormalize(field, normalization):
    return np.asarray(field) * normalization.velocity_scale


def denormalize_v_in(v_in, normalization):
    return v_in * normalization.v_in_scale


def sparse_count(n_inside, fraction=SPARSE_FRACTION):
    # the epsilon absorbs products like 0.05 * 60 landing just under an integer
    return int(math.floor(fraction * n_inside + 1e-9))


def make_sparse_mask(ventricle_mask, fraction=SPARSE_FRACTION, seed=0):
    '''Selects floor(fraction * N_in) in-mask voxels uniformly without
    replacement. Returns a float mask of the input's shape.'''
    if not 0.0 < fraction < 1.0:
        raise MaskError('sparse fraction must lie in (0, 1), got %r' % fraction)
    inside = np.flatnonzero(np.asarray(ventricle_mask) != 0)
    count = sparse_count(inside.size, fraction)
    if count == 0:
        raise MaskError('a %.3g sparse fraction of %d ventricle voxels selects '
                        'nothing' % (fraction, inside.size))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(inside, size=count, replace=False)
    mask = np.zeros(np.shape(ventricle_mask), dtype=np.float32)
    mask.flat[chosen] = 1.0
    return mask


def build_sample(snapshot, normalization, run_id, mask_seed,
                 fraction=SPARSE_FRACTION, shape=None):
    '''Resamples a snapshot onto `shape` (default: the solver grid),
    normalizes it and draws its sparse mask'''
    shape = tuple(shape) if shape is not None else snapshot.mask.shape
    fields, v_in = normalize(snapshot, normalization)
    mask = interpolate_to_grid(snapshot.mask, shape, order=0) > 0.5
    if not mask.any():
        raise MaskError('snapshot %s has an empty ventricle mask on %s'
                        % (run_id, shape))
    resampled = {}
    for name in COMPONENTS:
        values = interpolate_to_grid(fields[name], shape, order=1)
        # velocities live inside the ventricle only
        values[~mask] = 0.0
        resampled[name] = values.astype(np.float32)
    sample = Sample(vx=resampled['x'], vy=resampled['y'], vz=resampled['z'],
                    rdf=compute_rdf(mask).astype(np.float32),
                    ventricle_mask=mask.astype(np.float32),
                    sparse_mask=make_sparse_mask(mask, fraction, mask_seed),
                    v_in=float(v_in), geometry_id=snapshot.geometry_id,
                    run_id=run_id)
    return sample.validate()


def assemble_input(sample, component, rdf=True, v_in_channel=False):
    '''Network input [C, D, H, W] and target [1, D, H, W] for one component.

    Channel 0 is the sparse component (zero off the sparse mask), channel 1
    the RDF unless rdf is False; v_in_channel appends v_in broadcast over
    the grid.'''
    check_component(component)
    dense = sample.component(component)
    channels = [dense * sample.sparse_mask]
    if rdf:
        if sample.rdf is None:
            raise DataError('sample %s has no RDF channel' % sample.run_id)
        channels.append(sample.rdf)
    if v_in_channel:
        channels.append(np.full(dense.shape, sample.v_in, dtype=dense.dtype))
    inputs = np.stack(channels).astype(np.float32)
    return inputs, dense[np.newaxis].astype(np.float32)


def assemble_batch(samples, component, rdf=True, v_in_channel=False):
    '''Stacks assemble_input over samples: (inputs [N, C, ...],
    targets [N, 1, ...], v_in [N])'''
    if not samples:
        raise DataError('cannot assemble an empty batch')
    pairs = [assemble_input(s, component, rdf, v_in_channel) for s in samples]
    inputs = np.stack([p[0] for p in pairs])
    targets = np.stack([p[1] for p in pairs])
    v_in = np.array([s.v_in for s in samples], dtype=np.float32)
    return inputs, targets, v_in

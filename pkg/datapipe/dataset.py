"""
datapipe/dataset.py

Turns a simulated population into a dataset directory.
"""
import logging
import os

from django.conf import settings

from datapipe.folds import fold_scales, kfold, write_folds
from datapipe.manifest import write_manifest, write_sample
from datapipe.models import (SPARSE_FRACTION, DatasetManifest, DataError,
                             SampleRecord)
from datapipe.preprocess import (build_sample, normalization_for_peak,
                                 snapshot_peak)
from datapipe.utils import derive_seed

LOGGER = logging.getLogger(__name__)

# get settings
try:
    KEEP_UNCONVERGED = settings.FLOWGEN_KEEP_UNCONVERGED
except:
    KEEP_UNCONVERGED = False


def final_snapshots(population, keep_unconverged=None):
    '''[(run, last snapshot)] in plan order'''
    if keep_unconverged is None:
        keep_unconverged = KEEP_UNCONVERGED
    selected = []
    for run in population.plan.runs:
        snapshots = population.snapshots.get(run.run_id)
        if not snapshots:
            raise DataError('run %s produced no snapshots' % run.run_id)
        snapshot = snapshots[-1]
        if not snapshot.converged and not keep_unconverged:
            LOGGER.warning('Skipping %s: pressure solve did not converge',
                           run.run_id)
            continue
        selected.append((run, snapshot))
    if not selected:
        raise DataError('no usable simulations in the population')
    return selected


def build_dataset(population, dataset_dir, seed, shape=None,
                  fraction=SPARSE_FRACTION, k=5, solver=None, config=None,
                  keep_unconverged=None, output_fn=None):
    '''Writes samples, manifest.json and folds.json under dataset_dir and
    returns the DatasetManifest'''
    selected = final_snapshots(population, keep_unconverged)
    # storage units only; each fold rescales to its own train peak
    peaks = [snapshot_peak(s) for _run, s in selected]
    normalization = normalization_for_peak(max(peaks))
    LOGGER.info('storage velocity scale %.6g m/s over %d runs',
                normalization.velocity_scale, len(selected))
    os.makedirs(dataset_dir, exist_ok=True)
    records = []
    sample_shape = None
    for index, (run, snapshot) in enumerate(selected):
        mask_seed = derive_seed(seed, index)
        sample = build_sample(snapshot, normalization, run.run_id, mask_seed,
                              fraction=fraction, shape=shape)
        relative, volume_shape, checksum = write_sample(dataset_dir, sample)
        sample_shape = volume_shape[1:]
        records.append(SampleRecord(
            run_id=run.run_id, geometry_id=run.geometry_id, v_in=run.v_in,
            v_in_normalized=sample.v_in, path=relative, shape=volume_shape,
            checksum=checksum, mask_seed=mask_seed, n_inside=sample.n_inside,
            n_sparse=sample.n_sparse, converged=snapshot.converged,
            peak_speed=peaks[index]))
        if output_fn:
            output_fn(message='Wrote sample %s' % run.run_id,
                      percent_done=int(100 * (index + 1) / len(selected)))
    geometry_ids = [g.id for g in population.plan.geometries
                    if any(r.geometry_id == g.id for r in records)]
    manifest = DatasetManifest(
        seed=seed, normalization=normalization, records=records,
        geometries=[g.to_dict() for g in population.plan.geometries
                    if g.id in geometry_ids],
        sparse_fraction=fraction, grid=list(sample_shape),
        solver=solver or {}, config=config or {})
    write_manifest(dataset_dir, manifest)
    if len(geometry_ids) >= 3:
        folds = kfold(geometry_ids, min(k, len(geometry_ids)), seed)
        write_folds(dataset_dir, fold_scales(folds, records), seed)
    else:
        LOGGER.warning('%d geometries are too few for fold splits; '
                       'folds.json not written', len(geometry_ids))
    return manifest

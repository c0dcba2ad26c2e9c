"""
datapipe/folds.py

Geometry-level cross-validation splits.
"""
import json
import logging
import os
from dataclasses import replace

import numpy as np

from datapipe.models import (FOLDS_FILENAME, FoldError, FoldSplit, Normalization,
                             PARTITIONS)

LOGGER = logging.getLogger(__name__)

MIN_GEOMETRIES = 3


def kfold(geometry_ids, k=5, seed=0):
    '''k splits over a seeded permutation of the geometries. Fold i tests
    on perm[i] and validates on perm[i + 1]; the rest train.'''
    ids = list(geometry_ids)
    if len(set(ids)) != len(ids):
        raise FoldError('duplicate geometry ids: %s' % ids)
    if len(ids) < MIN_GEOMETRIES:
        raise FoldError('need at least %d geometries for train/val/test, got %d'
                        % (MIN_GEOMETRIES, len(ids)))
    if k < 1 or k > len(ids):
        raise FoldError('cannot make %d folds from %d geometries' % (k, len(ids)))
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    folds = []
    for index in range(k):
        test = order[index]
        val = order[(index + 1) % len(order)]
        train = tuple(g for g in order if g not in (test, val))
        folds.append(FoldSplit(fold=index, train=train, val=(val,), test=(test,)))
    return folds


def fold_scales(folds, records):
    '''Sets each fold's velocity_scale to the peak speed of its train
    geometries, so val and test runs never influence the scale'''
    peaks = {}
    for record in records:
        peaks[record.geometry_id] = max(peaks.get(record.geometry_id, 0.0),
                                        record.peak_speed)
    scaled = []
    for split in folds:
        peak = max([peaks.get(g, 0.0) for g in split.train] + [0.0])
        if peak <= 0.0:
            raise FoldError('fold %d: train geometries %s hold no flow to '
                            'normalize against' % (split.fold, list(split.train)))
        scaled.append(replace(split, velocity_scale=peak))
    return scaled


def fold_normalization(split, stored):
    '''Normalization of one fold; `stored` is the dataset's storage
    normalization, used as is by fold files without a scale'''
    if split.velocity_scale is None:
        return stored
    return Normalization(velocity_scale=split.velocity_scale,
                         v_in_scale=stored.v_in_scale)


def split_records(records, split):
    '''Groups manifest records into {partition: [records]} for one fold'''
    groups = {name: [] for name in PARTITIONS}
    for record in records:
        partition = split.partition(record.geometry_id)
        if partition is None:
            raise FoldError('geometry %s of sample %s is in no partition of '
                            'fold %d' % (record.geometry_id, record.run_id,
                                         split.fold))
        groups[partition].append(record)
    return groups


def write_folds(dataset_dir, folds, seed):
    path = os.path.join(dataset_dir, FOLDS_FILENAME)
    data = {'seed': seed, 'k': len(folds), 'folds': [f.to_dict() for f in folds]}
    with open(path, 'w', encoding='utf-8') as fileref:
        json.dump(data, fileref, indent=2, sort_keys=True)
    LOGGER.info('Wrote %s', path)
    return path


def read_folds(dataset_dir):
    path = os.path.join(dataset_dir, FOLDS_FILENAME)
    try:
        with open(path, encoding='utf-8') as fileref:
            data = json.load(fileref)
        return [FoldSplit.from_dict(f) for f in data['folds']]
    except (OSError, ValueError, KeyError) as err:
        LOGGER.error('Read failed for %s: %s', path, err)
        raise FoldError('cannot read folds from %s: %s' % (path, err)) from err


def get_fold(dataset_dir, index):
    folds = read_folds(dataset_dir)
    if not 0 <= index < len(folds):
        raise FoldError('fold %d out of range, %s defines %d folds'
                        % (index, FOLDS_FILENAME, len(folds)))
    return folds[index]

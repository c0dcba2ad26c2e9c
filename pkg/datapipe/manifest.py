"""
datapipe/manifest.py

Dataset directory layout:

    manifest.json       DatasetManifest (UTF-8 JSON)
    folds.json          fold splits
    samples/<run>.sfv   one 6-channel volume per sample
"""
import json
import logging
import os

from datapipe.folds import fold_normalization, split_records
from datapipe.models import (MANIFEST_FILENAME, MANIFEST_VERSION, SAMPLES_DIR,
                             SAMPLE_CHANNELS, DataError, DatasetManifest,
                             ManifestError, Sample)
from datapipe.preprocess import rescale
from datapipe.volumes import read_header, read_volume, write_volume

LOGGER = logging.getLogger(__name__)


def manifest_path(dataset_dir):
    return os.path.join(dataset_dir, MANIFEST_FILENAME)


def write_manifest(dataset_dir, manifest):
    path = manifest_path(dataset_dir)
    try:
        with open(path, 'w', encoding='utf-8') as fileref:
            json.dump(manifest.to_dict(), fileref, indent=2, sort_keys=True)
    except OSError as err:
        LOGGER.error('Write failed for %s: %s', path, err)
        raise ManifestError('cannot write manifest %s: %s' % (path, err)) from err
    LOGGER.info('Wrote %s', path)
    return path


def read_manifest(dataset_dir):
    path = manifest_path(dataset_dir)
    try:
        with open(path, encoding='utf-8') as fileref:
            data = json.load(fileref)
    except OSError as err:
        raise ManifestError('manifest not found or unreadable: %s' % path) from err
    except ValueError as err:
        raise ManifestError('manifest is not valid JSON: %s' % path) from err
    if not isinstance(data, dict):
        raise ManifestError('manifest must be a JSON object: %s' % path)
    if data.get('version') != MANIFEST_VERSION:
        raise ManifestError('unsupported manifest version %r in %s (expected %d)'
                            % (data.get('version'), path, MANIFEST_VERSION))
    try:
        return DatasetManifest.from_dict(data)
    except (KeyError, TypeError) as err:
        raise ManifestError('manifest %s is missing %s' % (path, err)) from err


def verify_manifest(dataset_dir, manifest, full=False):
    '''Checks that every record's file exists with the recorded shape and
    checksum. With full the payloads are read and their checksums
    recomputed.'''
    for record in manifest.records:
        path = os.path.join(dataset_dir, record.path)
        if not os.path.exists(path):
            raise ManifestError('sample %s: missing file %s' % (record.run_id, path))
        shape, checksum = read_header(path)
        if list(shape) != list(record.shape):
            raise ManifestError('sample %s: %s holds %s, manifest records %s'
                                % (record.run_id, path, shape, record.shape))
        if checksum != record.checksum:
            raise ManifestError('sample %s: %s checksum %s, manifest records %s'
                                % (record.run_id, path, checksum, record.checksum))
        if full:
            read_volume(path)
    return True


def sample_path(run_id):
    return os.path.join(SAMPLES_DIR, '%s.sfv' % run_id)


def write_sample(dataset_dir, sample):
    '''Writes the sample volume; returns (relative path, shape, checksum)'''
    relative = sample_path(sample.run_id)
    path = os.path.join(dataset_dir, relative)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    volumes = sample.volumes()
    checksum = write_volume(path, volumes)
    return relative, list(volumes.shape), checksum


def read_sample(dataset_dir, record):
    volumes = read_volume(os.path.join(dataset_dir, record.path))
    if volumes.shape[0] != len(SAMPLE_CHANNELS):
        raise DataError('sample %s has %d channels, expected %d'
                        % (record.run_id, volumes.shape[0], len(SAMPLE_CHANNELS)))
    fields = dict(zip(SAMPLE_CHANNELS, volumes))
    return Sample(v_in=record.v_in_normalized, geometry_id=record.geometry_id,
                  run_id=record.run_id, **fields)


class SampleStore(object):
    '''Read access to a generated dataset directory'''

    def __init__(self, dataset_dir, verify=True):
        self.dataset_dir = dataset_dir
        if not os.path.exists(manifest_path(dataset_dir)):
            raise ManifestError('no dataset at %s (expected %s)'
                                % (dataset_dir, manifest_path(dataset_dir)))
        self.manifest = read_manifest(dataset_dir)
        if verify:
            verify_manifest(dataset_dir, self.manifest)
        self._cache = {}

    @property
    def records(self):
        return self.manifest.records

    @property
    def normalization(self):
        return self.manifest.normalization

    def __len__(self):
        return len(self.manifest.records)

    def load(self, run_id):
        if run_id not in self._cache:
            self._cache[run_id] = read_sample(self.dataset_dir,
                                              self.manifest.record(run_id))
        return self._cache[run_id]

    def samples(self, records=None):
        records = self.records if records is None else records
        return [self.load(r.run_id) for r in records]

    def fold_normalization(self, split):
        return fold_normalization(split, self.normalization)

    def fold_samples(self, split):
        '''{partition: [samples]} of one fold, velocities expressed in the
        fold's train-peak units'''
        target = self.fold_normalization(split)
        return {name: [rescale(self.load(r.run_id), self.normalization, target)
                       for r in group]
                for name, group in split_records(self.records, split).items()}

    def shape(self):
        if not self.records:
            raise ManifestError('dataset %s is empty' % self.dataset_dir)
        return tuple(self.records[0].shape[1:])

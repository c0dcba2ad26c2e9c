"""
datapipe/models.py

Samples, manifests and fold splits. Volumes are float32 arrays indexed
(z, y, x); velocities are stored in the units of the manifest's storage
normalization and rescaled to each fold's train peak on load.
"""
from dataclasses import dataclass, field, asdict

import numpy as np

from flowgen.models import COMPONENTS

SPARSE_FRACTION = 0.05
# inlet velocities are divided by the top of the inlet sweep
V_IN_SCALE = 0.5

MANIFEST_VERSION = 1
MANIFEST_FILENAME = 'manifest.json'
FOLDS_FILENAME = 'folds.json'
SAMPLES_DIR = 'samples'

# channel layout of a sample volume file
SAMPLE_CHANNELS = ('vx', 'vy', 'vz', 'rdf', 'ventricle_mask', 'sparse_mask')

PARTITIONS = ('train', 'val', 'test')


class DataError(Exception):
    '''Base class for data pipeline errors'''
    pass


class VolumeFormatError(DataError):
    '''A volume file is truncated, corrupt or of an unknown format'''
    pass


class ManifestError(DataError):
    '''Manifest missing, malformed or out of sync with the files'''
    pass


class MaskError(DataError):
    '''Sparse mask cannot be drawn'''
    pass


class FoldError(DataError):
    '''Fold split is impossible for the given geometries'''
    pass


class NormalizationError(DataError):
    '''Velocities cannot be normalized'''
    pass


def check_component(name):
    if name not in COMPONENTS:
        raise DataError('unknown velocity component %r, expected one of %s'
                        % (name, ', '.join(COMPONENTS)))
    return name


@dataclass(frozen=True)
class Normalization:
    '''Velocity components are divided by velocity_scale (a peak speed
    |v|, so the normalized peak speed is 1), v_in by v_in_scale'''
    velocity_scale: float
    v_in_scale: float = V_IN_SCALE

    def __post_init__(self):
        if not np.isfinite(self.velocity_scale) or self.velocity_scale <= 0:
            raise NormalizationError('velocity scale must be positive and '
                                     'finite, got %r' % self.velocity_scale)
        if self.v_in_scale <= 0:
            raise NormalizationError('v_in scale must be positive')

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(velocity_scale=float(data['velocity_scale']),
                   v_in_scale=float(data['v_in_scale']))


@dataclass
class Sample:
    '''One training example. All volumes share one grid; sparse_mask is
    the single mask applied to every component.'''
    vx: np.ndarray
    vy: np.ndarray
    vz: np.ndarray
    rdf: np.ndarray
    ventricle_mask: np.ndarray
    sparse_mask: np.ndarray
    v_in: float
    geometry_id: str
    run_id: str

    @property
    def shape(self):
        return self.vx.shape

    def component(self, name):
        return getattr(self, 'v' + check_component(name))

    @property
    def n_inside(self):
        return int(np.count_nonzero(self.ventricle_mask))

    @property
    def n_sparse(self):
        return int(np.count_nonzero(self.sparse_mask))

    def validate(self):
        for name in SAMPLE_CHANNELS:
            volume = getattr(self, name)
            if volume is not None and volume.shape != self.shape:
                raise DataError('sample %s: %s has shape %s, expected %s'
                                % (self.run_id, name, volume.shape, self.shape))
        if np.any((self.sparse_mask != 0) & (self.ventricle_mask == 0)):
            raise MaskError('sample %s: sparse mask leaves the ventricle'
                            % self.run_id)
        return self

    def volumes(self):
        '''Stacks the sample into the [6, D, H, W] file layout'''
        return np.stack([getattr(self, name) for name in SAMPLE_CHANNELS]
                        ).astype(np.float32)


@dataclass
class SampleRecord:
    run_id: str
    geometry_id: str
    v_in: float
    v_in_normalized: float
    path: str
    shape: list
    checksum: str
    mask_seed: int
    n_inside: int
    n_sparse: int
    converged: bool = True
    # largest raw speed |v| of the run, m/s
    peak_speed: float = 0.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class DatasetManifest:
    seed: int
    normalization: Normalization
    records: list = field(default_factory=list)
    geometries: list = field(default_factory=list)
    sparse_fraction: float = SPARSE_FRACTION
    grid: list = field(default_factory=list)
    solver: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    version: int = MANIFEST_VERSION

    def record(self, run_id):
        for record in self.records:
            if record.run_id == run_id:
                return record
        raise ManifestError('no sample %r in manifest' % run_id)

    @property
    def geometry_ids(self):
        ids = []
        for record in self.records:
            if record.geometry_id not in ids:
                ids.append(record.geometry_id)
        return ids

    def to_dict(self):
        return {'version': self.version,
                'seed': self.seed,
                'normalization': self.normalization.to_dict(),
                'sparse_fraction': self.sparse_fraction,
                'grid': list(self.grid),
                'solver': self.solver,
                'config': self.config,
                'geometries': self.geometries,
                'records': [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, data):
        return cls(version=data['version'], seed=data['seed'],
                   normalization=Normalization.from_dict(data['normalization']),
                   records=[SampleRecord.from_dict(r) for r in data['records']],
                   geometries=list(data.get('geometries', [])),
                   sparse_fraction=data.get('sparse_fraction', SPARSE_FRACTION),
                   grid=list(data.get('grid', [])),
                   solver=dict(data.get('solver', {})),
                   config=dict(data.get('config', {})))


@dataclass(frozen=True)
class FoldSplit:
    '''Geometry partitions of one fold. velocity_scale is the peak speed
    over the train geometries only; samples of the fold are expressed in
    units of it.'''
    fold: int
    train: tuple
    val: tuple
    test: tuple
    velocity_scale: float = None

    def __post_init__(self):
        seen = set()
        for name in PARTITIONS:
            ids = set(getattr(self, name))
            if seen & ids:
                raise FoldError('fold %d: %s shares geometries with another '
                                'partition: %s' % (self.fold, name,
                                                   sorted(seen & ids)))
            seen |= ids

    def partition(self, geometry_id):
        for name in PARTITIONS:
            if geometry_id in getattr(self, name):
                return name
        return None

    @property
    def geometry_ids(self):
        return tuple(self.train) + tuple(self.val) + tuple(self.test)

    def to_dict(self):
        data = {'fold': self.fold, 'train': list(self.train),
                'val': list(self.val), 'test': list(self.test)}
        if self.velocity_scale is not None:
            data['velocity_scale'] = self.velocity_scale
        return data

    @classmethod
    def from_dict(cls, data):
        scale = data.get('velocity_scale')
        return cls(fold=int(data['fold']), train=tuple(data['train']),
                   val=tuple(data['val']), test=tuple(data['test']),
                   velocity_scale=None if scale is None else float(scale))

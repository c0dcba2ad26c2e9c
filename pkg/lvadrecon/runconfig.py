"""
lvadrecon/runconfig.py

Resolved settings of one command invocation. Values come from the scale
preset, then an optional JSON config file, then command-line flags, each
overriding the one before.
"""
import json
import logging
import os
from dataclasses import dataclass, field

from django.conf import settings

from flowgen.models import GridSpec, SolverConfig
from networks.models import LVADNET3D, UNET3D, ModelConfig
from trainer.models import TrainConfig

LOGGER = logging.getLogger('lvadrecon')

try:
    SCALE_PRESETS = settings.SCALE_PRESETS
except:
    SCALE_PRESETS = {}

try:
    DEFAULT_SCALE = settings.DEFAULT_SCALE
except:
    DEFAULT_SCALE = 'desk'

try:
    DATA_ROOT = settings.DATA_ROOT
except:
    DATA_ROOT = 'data'


class RunConfigError(Exception):
    '''Unusable flags or config file'''
    pass


def load_config_file(path):
    '''Reads a UTF-8 JSON object of option values'''
    try:
        with open(path, encoding='utf-8') as fileref:
            data = json.load(fileref)
    except (OSError, ValueError) as err:
        raise RunConfigError('cannot read config file %s: %s' % (path, err)) from err
    if not isinstance(data, dict):
        raise RunConfigError('config file %s must hold a JSON object' % path)
    return data


@dataclass
class RunConfig:
    command: str
    scale: str
    seed: int
    values: dict = field(default_factory=dict)

    @classmethod
    def resolve(cls, command, flags, config_path=None):
        '''flags maps option name -> value; None means "not given"'''
        file_values = load_config_file(config_path) if config_path else {}
        given = {k: v for k, v in flags.items() if v is not None}
        scale = given.get('scale') or file_values.get('scale') or DEFAULT_SCALE
        if scale not in SCALE_PRESETS:
            raise RunConfigError('unknown scale preset %r, expected one of %s'
                                 % (scale, ', '.join(sorted(SCALE_PRESETS))))
        values = dict(SCALE_PRESETS[scale])
        values.update(file_values)
        values.update(given)
        values['scale'] = scale
        values.setdefault('data_root', DATA_ROOT)
        try:
            seed = int(values.get('seed', 0))
        except (TypeError, ValueError) as err:
            raise RunConfigError('seed must be an integer') from err
        values['seed'] = seed
        return cls(command=command, scale=scale, seed=seed, values=values)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def __getitem__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise RunConfigError('missing option %r' % key) from None

    def path(self, key, default_name):
        '''An explicit path option, or default_name under the data root'''
        return self.get(key) or os.path.join(self['data_root'], default_name)

    def to_dict(self):
        return {'command': self.command, 'scale': self.scale, 'seed': self.seed,
                'values': dict(sorted(self.values.items()))}

    def grid(self):
        return GridSpec(int(self['grid']), float(self['spacing_mm']) / 1000.0)

    def solver_config(self):
        kwargs = {'dt': float(self['dt']), 'steps': int(self['steps']),
                  'grid': self.grid()}
        for key in ('inner_iterations', 'poisson_maxiter', 'viscosity'):
            if self.get(key) is not None:
                kwargs[key] = self.get(key)
        return SolverConfig(**kwargs)

    def model_config(self, architecture=None, seed=None, **changes):
        architecture = architecture or self.get('model', LVADNET3D)
        if architecture not in (LVADNET3D, UNET3D):
            raise RunConfigError('unknown model %r' % architecture)
        factory = ModelConfig.lvadnet3d if architecture == LVADNET3D else ModelConfig.unet3d
        kwargs = {'scale_divisor': int(self['channel_divisor']),
                  'seed': self.seed if seed is None else seed,
                  'skips': not self.get('no_skips', False),
                  'rdf': not self.get('no_rdf', False),
                  'conditioning': self.get('conditioning') or 'latent'}
        kwargs.update(changes)
        return factory(**kwargs)

    def train_config(self, component=None, seed=None):
        return TrainConfig(component=component or self.get('component', 'x'),
                           lr0=float(self.get('lr0', 1e-3)),
                           lr_min=float(self.get('lr_min', 0.0)),
                           epochs=int(self['epochs']),
                           delta=float(self.get('delta', 0.5)),
                           batch_size=int(self['batch_size']),
                           seed=self.seed if seed is None else seed)

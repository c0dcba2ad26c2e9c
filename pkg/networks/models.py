"""
networks/models.py

Model configuration and latent bookkeeping for the reconstruction
networks. Parameters live in networks.builder.Model; these are plain
objects.
"""
from dataclasses import dataclass, asdict

LVADNET3D = 'lvadnet3d'
UNET3D = 'unet3d'
ARCHITECTURES = (LVADNET3D, UNET3D)

MAXPOOL = 'maxpool'
STRIDED = 'strided'
NONE = 'none'
DOWNSAMPLE_KINDS = (MAXPOOL, STRIDED, NONE)

LATENT = 'latent'
INPUT = 'input'
OFF = 'off'
CONDITIONING = (LATENT, INPUT, OFF)

DEFAULT_SCHEDULES = {
    LVADNET3D: (MAXPOOL, MAXPOOL, STRIDED, STRIDED, NONE),
    UNET3D: (MAXPOOL, MAXPOOL, MAXPOOL, NONE),
}


class NetworkError(Exception):
    '''Base class for network errors'''
    pass


class ConfigError(NetworkError):
    '''Model configuration is inconsistent, or weights do not fit it'''
    pass


class InputShapeError(NetworkError):
    '''Input does not match what the model was built for'''
    pass


@dataclass(frozen=True)
class ModelConfig:
    '''Topology of one reconstruction network.

    base_channels is the full-scale width of the first block; the built
    network uses base_channels // scale_divisor. rdf adds the distance
    field input channel, conditioning=input one more for v_in.'''
    architecture: str = LVADNET3D
    depth: int = 5
    base_channels: int = 16
    downsample_schedule: tuple = DEFAULT_SCHEDULES[LVADNET3D]
    skips: bool = True
    conditioning: str = LATENT
    scale_divisor: int = 1
    rdf: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'downsample_schedule',
                           tuple(self.downsample_schedule))
        self.validate()

    @classmethod
    def lvadnet3d(cls, **kwargs):
        kwargs.setdefault('depth', 5)
        kwargs.setdefault('downsample_schedule', DEFAULT_SCHEDULES[LVADNET3D])
        return cls(architecture=LVADNET3D, **kwargs)

    @classmethod
    def unet3d(cls, **kwargs):
        kwargs.setdefault('depth', 4)
        kwargs.setdefault('downsample_schedule', DEFAULT_SCHEDULES[UNET3D])
        return cls(architecture=UNET3D, **kwargs)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError('unknown architecture %r, expected one of %s'
                              % (self.architecture, ', '.join(ARCHITECTURES)))
        if self.conditioning not in CONDITIONING:
            raise ConfigError('unknown conditioning %r, expected one of %s'
                              % (self.conditioning, ', '.join(CONDITIONING)))
        if self.depth < 2:
            raise ConfigError('depth must be >= 2, got %d' % self.depth)
        if len(self.downsample_schedule) != self.depth:
            raise ConfigError('downsample schedule %s has %d entries for depth %d'
                              % (self.downsample_schedule,
                                 len(self.downsample_schedule), self.depth))
        for kind in self.downsample_schedule:
            if kind not in DOWNSAMPLE_KINDS:
                raise ConfigError('unknown downsampling %r' % kind)
        if self.downsample_schedule[-1] != NONE:
            raise ConfigError('the last encoder layer cannot downsample')
        if self.scale_divisor < 1 or self.base_channels % self.scale_divisor:
            raise ConfigError('scale divisor %d does not divide %d base channels'
                              % (self.scale_divisor, self.base_channels))
        if self.base_channels // self.scale_divisor < 1:
            raise ConfigError('no channels left after scaling')

    @property
    def channels(self):
        '''Width of the first block after scaling'''
        return self.base_channels // self.scale_divisor

    @property
    def input_channels(self):
        return 1 + int(self.rdf) + int(self.conditioning == INPUT)

    @property
    def reduction(self):
        '''Total spatial reduction factor of the encoder'''
        return 2 ** sum(1 for kind in self.downsample_schedule if kind != NONE)

    @property
    def latent_channels(self):
        return self.channels * 2 ** (self.depth - 1)

    def replace(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return ModelConfig(**data)

    def to_dict(self):
        data = asdict(self)
        data['downsample_schedule'] = list(self.downsample_schedule)
        return data


@dataclass
class LatentState:
    '''Intermediate tensors around the bottleneck. For UNet3D y_L is x_L;
    z and fused are None when conditioning is not latent.'''
    x_L: object
    y_L: object
    z: object = None
    fused: object = None

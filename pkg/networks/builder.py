"""
networks/builder.py

Allocated networks: parameters, the forward pass, and the model
builders.
"""
import logging
from collections import OrderedDict

import numpy as np

from tensorgrad.models import ConvBlockSpec, Tensor
from tensorgrad.ops import (broadcast_scalar, concat_channels, conv3d,
                            conv_block, conv_transpose3d, instance_norm3d,
                            maxpool3d, prelu, reshape)
from tensorgrad.utils import bias_uniform, kaiming_uniform, prelu_slopes

from networks.architecture import (KERNEL, check_input_shape,
                                   count_parameters, decoder_plan,
                                   encoder_plan, fan_in, parameter_shapes)
from networks.models import (LATENT, LVADNET3D, MAXPOOL, NONE, STRIDED, UNET3D,
                             ConfigError, InputShapeError, LatentState,
                             ModelConfig)

LOGGER = logging.getLogger(__name__)


def block(x, params, prefix, stride=1):
    '''conv 3^3 -> instance norm -> PReLU from params[prefix + ...]'''
    spec = ConvBlockSpec(params[prefix + '.weight'], params[prefix + '.bias'],
                         params[prefix + '.slope'], stride=(stride,) * 3,
                         padding=(KERNEL // 2,) * 3)
    return conv_block(x, spec)


def upsample(x, params, prefix):
    '''Transpose conv (k2, s2) doubling the extents, then norm and PReLU'''
    y = conv_transpose3d(x, params[prefix + '.weight'], params[prefix + '.bias'],
                         stride=2, padding=0)
    return prelu(instance_norm3d(y), params[prefix + '.slope'])


def as_batch_values(v_in, batch):
    '''v_in as a Tensor with one value per batch entry'''
    if not isinstance(v_in, Tensor):
        v_in = Tensor(np.broadcast_to(np.asarray(v_in, dtype=np.float64),
                                      (batch,)).copy())
    if not np.all(np.isfinite(v_in.values)):
        raise InputShapeError('v_in must be finite, got %s' % v_in.values)
    if v_in.size != 1 and v_in.shape != (batch,):
        raise InputShapeError('v_in %s does not match batch %d'
                              % (list(v_in.shape), batch))
    return v_in


def condition_latent(y_L, v_in, params, fusion_block=False):
    '''Broadcasts v_in to y_L's shape, concatenates along channels and
    fuses back to y_L's width. LVADNet3D fuses with a plain 1x1x1 conv,
    UNet3D with a conv block. Returns (z, fused).'''
    v = broadcast_scalar(v_in, y_L.shape)
    z = concat_channels([y_L, v])
    if fusion_block:
        return z, block(z, params, 'fuse')
    fused = conv3d(z, params['fuse.weight'], params.get('fuse.bias'),
                   stride=1, padding=0)
    return z, fused


class Model(object):
    '''A reconstruction network: config plus named parameter tensors.

    Instances are mutated in place by the optimizer; share a model across
    threads for inference only.'''

    def __init__(self, cfg, params=None):
        if not isinstance(cfg, ModelConfig):
            raise ConfigError('expected a ModelConfig, got %s'
                              % type(cfg).__name__)
        self.cfg = cfg
        self.shapes = parameter_shapes(cfg)
        self.encoder = encoder_plan(cfg)
        self.decoder = decoder_plan(cfg)
        self.params = params if params is not None else self._initialize()

    def _initialize(self):
        rng = np.random.default_rng(self.cfg.seed)
        params = OrderedDict()
        for name, shape in self.shapes.items():
            prefix, kind = name.rsplit('.', 1)
            if kind == 'weight':
                params[name] = kaiming_uniform(rng, shape, fan_in(shape))
            elif kind == 'bias':
                weight_shape = self.shapes[prefix + '.weight']
                params[name] = bias_uniform(rng, shape[0], fan_in(weight_shape))
            else:
                params[name] = prelu_slopes(shape[0])
            params[name].name = name
        return params

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return count_parameters(self.shapes)

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    def state_dict(self):
        return OrderedDict((name, p.values.copy()) for name, p in self.params.items())

    def load_state(self, state):
        '''Copies arrays from a name -> array mapping into the parameters'''
        missing = [name for name in self.shapes if name not in state]
        extra = [name for name in state if name not in self.shapes]
        if missing or extra:
            raise ConfigError('state does not fit %s: missing %s, unexpected %s'
                              % (self.cfg.architecture, missing, extra))
        for name, shape in self.shapes.items():
            values = np.asarray(state[name])
            if tuple(values.shape) != tuple(shape):
                raise ConfigError('parameter %s has shape %s, model expects %s'
                                  % (name, list(values.shape), list(shape)))
            param = self.params[name]
            param.values = values.astype(param.dtype).copy()
            param.zero_grad()

    def fingerprint(self):
        '''Everything that must agree for weights to be interchangeable'''
        data = self.cfg.to_dict()
        data.pop('seed')
        return data

    def condition_latent(self, y_L, v_in):
        if self.cfg.conditioning != LATENT:
            raise ConfigError('model is built with conditioning=%s'
                              % self.cfg.conditioning)
        v_in = as_batch_values(v_in, y_L.shape[0])
        _z, fused = condition_latent(y_L, v_in, self.params,
                                     fusion_block=self.cfg.architecture == UNET3D)
        return fused

    def encode(self, x, shapes=None):
        '''Returns (x_L, skips by layer index)'''
        skips = {}
        for layer in self.encoder:
            prefix = 'enc%d' % layer.index
            x = block(x, self.params, prefix + '.a')
            x = block(x, self.params, prefix + '.b')
            _record(shapes, prefix, x)
            skips[layer.index] = x
            if layer.downsample == MAXPOOL:
                x = maxpool3d(x)
            elif layer.downsample == STRIDED:
                x = block(x, self.params, prefix + '.down', stride=2)
            if layer.downsample != NONE:
                _record(shapes, 'down%d' % layer.index, x)
        return x, skips

    def latent(self, x_L, v_in, shapes=None):
        _record(shapes, 'x_L', x_L)
        y_L = x_L
        if self.cfg.architecture == LVADNET3D:
            y_L = block(y_L, self.params, 'latent.a')
            y_L = block(y_L, self.params, 'latent.b')
        _record(shapes, 'y_L', y_L)
        state = LatentState(x_L=x_L, y_L=y_L)
        if self.cfg.conditioning == LATENT:
            state.z, state.fused = condition_latent(
                y_L, v_in, self.params,
                fusion_block=self.cfg.architecture == UNET3D)
            _record(shapes, 'z', state.z)
            _record(shapes, 'fused', state.fused)
        return state

    def decode(self, x, skips, shapes=None):
        for layer in self.decoder:
            prefix = 'dec%d' % layer.index
            x = upsample(x, self.params, prefix + '.up')
            _record(shapes, 'up%d' % layer.index, x)
            if self.cfg.skips:
                x = concat_channels([x, skips[layer.index]])
            _record(shapes, 'cat%d' % layer.index, x)
            x = block(x, self.params, prefix + '.a')
            x = block(x, self.params, prefix + '.b')
            _record(shapes, prefix, x)
        return conv3d(x, self.params['head.weight'], self.params['head.bias'],
                      stride=1, padding=KERNEL // 2)

    def forward(self, inputs, v_in, shapes=None):
        '''inputs [N, C, D, H, W] (Tensor or array), v_in scalar or [N].
        Returns the prediction [N, 1, D, H, W]. When shapes is a dict the
        stage shapes are recorded into it.'''
        if not isinstance(inputs, Tensor):
            inputs = Tensor(inputs)
        check_input_shape(self.cfg, inputs.shape)
        v_in = as_batch_values(v_in, inputs.shape[0])
        _record(shapes, 'input', inputs)
        x_L, skips = self.encode(inputs, shapes)
        state = self.latent(x_L, v_in, shapes)
        x = state.fused if state.fused is not None else state.y_L
        out = self.decode(x, skips, shapes)
        _record(shapes, 'output', out)
        return out

    __call__ = forward


def _record(shapes, name, tensor):
    if shapes is not None:
        shapes[name] = tuple(tensor.shape)


def forward(model, inputs, v_in):
    '''Prediction for one sample [C, D, H, W] -> [1, D, H, W], or a batch
    [N, C, D, H, W] -> [N, 1, D, H, W]. Both forms stay on the active tape.'''
    if not isinstance(inputs, Tensor):
        inputs = Tensor(inputs)
    if inputs.ndim == 4:
        out = model.forward(reshape(inputs, (1,) + inputs.shape), v_in)
        return reshape(out, out.shape[1:])
    return model.forward(inputs, v_in)


def build_lvadnet3d(cfg):
    if cfg.architecture != LVADNET3D:
        raise ConfigError('build_lvadnet3d got a %s config' % cfg.architecture)
    model = Model(cfg)
    LOGGER.debug('built lvadnet3d: %d parameters', model.parameter_count())
    return model


def build_unet3d(cfg):
    if cfg.architecture != UNET3D:
        raise ConfigError('build_unet3d got a %s config' % cfg.architecture)
    model = Model(cfg)
    LOGGER.debug('built unet3d: %d parameters', model.parameter_count())
    return model


BUILDERS = {LVADNET3D: build_lvadnet3d, UNET3D: build_unet3d}


def build_model(cfg):
    return BUILDERS[cfg.architecture](cfg)


def parameter_count(model):
    '''Total weight, bias and slope elements of a Model, a ModelConfig or
    a name -> shape mapping'''
    if isinstance(model, Model):
        return model.parameter_count()
    if isinstance(model, ModelConfig):
        return count_parameters(parameter_shapes(model))
    return count_parameters(OrderedDict(
        (name, _shape_of(value)) for name, value in model.items()))


def _shape_of(value):
    if isinstance(value, tuple):
        return value
    if isinstance(value, Tensor):
        return value.shape
    return np.shape(value)

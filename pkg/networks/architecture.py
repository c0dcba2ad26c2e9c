"""
networks/architecture.py

Symbolic description of a network: the encoder and decoder plans, the
parameter shapes they imply, and shape propagation. Nothing here
allocates activations, so the full-scale ladder can be checked cheaply.
"""
from collections import OrderedDict, namedtuple

from tensorgrad.kernels import conv_output_extent, transpose_output_extent

from networks.models import (LVADNET3D, LATENT, MAXPOOL, NONE, STRIDED,
                             InputShapeError)

KERNEL = 3
UP_KERNEL = 2

EncoderLayer = namedtuple('EncoderLayer', 'index c_in c_mid c_out downsample')
DecoderLayer = namedtuple('DecoderLayer', 'index c_below c_out c_skip')


def encoder_plan(cfg):
    '''LVADNet3D: the first layer maps to C, every later layer keeps its
    input width in the first block and doubles it in the second.
    UNet3D: level l runs at C * 2^(l-1) in both blocks.'''
    layers = []
    c_in = cfg.input_channels
    for position, kind in enumerate(cfg.downsample_schedule):
        index = position + 1
        if cfg.architecture == LVADNET3D:
            if index == 1:
                c_mid = c_out = cfg.channels
            else:
                c_mid = c_in
                c_out = 2 * c_in
        else:
            c_mid = c_out = cfg.channels * 2 ** position
        layers.append(EncoderLayer(index, c_in, c_mid, c_out, kind))
        c_in = c_out
    return layers


def decoder_plan(cfg):
    '''One decoder layer per downsampling step, deepest first'''
    encoder = encoder_plan(cfg)
    layers = []
    c_below = encoder[-1].c_out
    for layer in reversed(encoder):
        if layer.downsample == NONE:
            continue
        c_skip = layer.c_out if cfg.skips else 0
        layers.append(DecoderLayer(layer.index, c_below, layer.c_out, c_skip))
        c_below = layer.c_out
    return layers


def _conv(shapes, prefix, c_out, c_in, kernel=KERNEL, slope=True, bias=True):
    shapes[prefix + '.weight'] = (c_out, c_in) + (kernel,) * 3
    if bias:
        shapes[prefix + '.bias'] = (c_out,)
    if slope:
        shapes[prefix + '.slope'] = (c_out,)


def parameter_shapes(cfg):
    '''OrderedDict of parameter name -> shape, in initialization order'''
    shapes = OrderedDict()
    for layer in encoder_plan(cfg):
        prefix = 'enc%d' % layer.index
        _conv(shapes, prefix + '.a', layer.c_mid, layer.c_in)
        _conv(shapes, prefix + '.b', layer.c_out, layer.c_mid)
        if layer.downsample == STRIDED:
            _conv(shapes, prefix + '.down', layer.c_out, layer.c_out)
    latent = cfg.latent_channels
    if cfg.architecture == LVADNET3D:
        _conv(shapes, 'latent.a', latent, latent)
        _conv(shapes, 'latent.b', latent, latent)
    if cfg.conditioning == LATENT:
        if cfg.architecture == LVADNET3D:
            # plain 1x1x1 fusion
            _conv(shapes, 'fuse', latent, 2 * latent, kernel=1, slope=False)
        else:
            _conv(shapes, 'fuse', latent, 2 * latent)
    for layer in decoder_plan(cfg):
        prefix = 'dec%d' % layer.index
        # transpose weights are [in, out, k, k, k]
        shapes[prefix + '.up.weight'] = (layer.c_below, layer.c_out) + (UP_KERNEL,) * 3
        shapes[prefix + '.up.bias'] = (layer.c_out,)
        shapes[prefix + '.up.slope'] = (layer.c_out,)
        _conv(shapes, prefix + '.a', layer.c_out, layer.c_out + layer.c_skip)
        _conv(shapes, prefix + '.b', layer.c_out, layer.c_out)
    _conv(shapes, 'head', 1, cfg.channels, slope=False)
    return shapes


def fan_in(weight_shape):
    # axis 1 is the input width for conv and the output width for
    # transpose weights, the same convention for both
    return weight_shape[1] * weight_shape[2] * weight_shape[3] * weight_shape[4]


def _count(shape):
    total = 1
    for extent in shape:
        total *= extent
    return total


def count_parameters(shapes):
    return sum(_count(shape) for shape in shapes.values())


def check_input_shape(cfg, shape):
    '''Validates a [N, C, D, H, W] input shape against cfg'''
    shape = tuple(int(n) for n in shape)
    if len(shape) != 5:
        raise InputShapeError('expected a [N, C, D, H, W] input, got %s'
                              % (list(shape),))
    if shape[1] != cfg.input_channels:
        raise InputShapeError('%s expects %d input channels (rdf=%s, '
                              'conditioning=%s), got input %s'
                              % (cfg.architecture, cfg.input_channels, cfg.rdf,
                                 cfg.conditioning, list(shape)))
    for extent in shape[2:]:
        if extent % cfg.reduction:
            raise InputShapeError('%s needs spatial extents divisible by %d, '
                                  'got %s' % (cfg.architecture, cfg.reduction,
                                              list(shape)))
    return shape


def trace_shapes(cfg, input_shape):
    '''Propagates an input shape through cfg without computing anything.
    Returns an OrderedDict of stage name -> shape; keys match the shapes
    recorded by builder.forward.'''
    n, _c, d, h, w = check_input_shape(cfg, input_shape)
    spatial = (d, h, w)
    trace = OrderedDict()
    trace['input'] = tuple(input_shape)
    for layer in encoder_plan(cfg):
        trace['enc%d' % layer.index] = (n, layer.c_out) + spatial
        if layer.downsample == MAXPOOL:
            spatial = tuple(s // 2 for s in spatial)
        elif layer.downsample == STRIDED:
            spatial = tuple(conv_output_extent(s, KERNEL, 2, 1) for s in spatial)
        if layer.downsample != NONE:
            trace['down%d' % layer.index] = (n, layer.c_out) + spatial
    latent = (n, cfg.latent_channels) + spatial
    trace['x_L'] = latent
    trace['y_L'] = latent
    if cfg.conditioning == LATENT:
        trace['z'] = (n, 2 * cfg.latent_channels) + spatial
        trace['fused'] = latent
    for layer in decoder_plan(cfg):
        spatial = tuple(transpose_output_extent(s, UP_KERNEL, 2, 0)
                        for s in spatial)
        trace['up%d' % layer.index] = (n, layer.c_out) + spatial
        trace['cat%d' % layer.index] = (n, layer.c_out + layer.c_skip) + spatial
        trace['dec%d' % layer.index] = (n, layer.c_out) + spatial
    trace['output'] = (n, 1) + spatial
    return trace

"""
tensorgrad/kernels.py

numpy kernels behind the differentiable operators. Everything here takes
and returns plain ndarrays; tape bookkeeping lives in ops.py.

Convolutions are computed by shift-and-accumulate: one tensordot per
kernel offset over a strided view of the padded input. Spatial layouts
are (batch, channel, depth, height, width).
"""
import itertools

import numpy as np

SPATIAL = (slice(None), slice(None))


def triple(value):
    '''Expands an int or a 3-sequence to a 3-tuple of ints'''
    if isinstance(value, (tuple, list)):
        if len(value) != 3:
            raise ValueError('expected 3 extents, got %s' % (value,))
        return tuple(int(v) for v in value)
    return (int(value),) * 3


def conv_output_extent(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def transpose_output_extent(size, kernel, stride, padding, output_padding=0):
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def _offsets(kernel):
    return itertools.product(*(range(k) for k in kernel))


def _window(origin, count, stride):
    '''Strided slices picking `count` positions starting at `origin`'''
    return tuple(slice(o, o + s * (n - 1) + 1, s)
                 for o, n, s in zip(origin, count, stride))


def _pad(x, padding):
    if not any(padding):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in padding))


def _correlate_weights(small, big, kernel, stride):
    '''Weight gradient shared by conv3d and its transpose:
    out[i, j, offset] = sum over batch and positions of
    small[:, i, z] * big[:, j, stride * z + offset]'''
    extent = small.shape[2:]
    grad = np.zeros((small.shape[1], big.shape[1]) + tuple(kernel),
                    dtype=np.result_type(small, big))
    for offset in _offsets(kernel):
        view = big[SPATIAL + _window(offset, extent, stride)]
        grad[SPATIAL + offset] = np.tensordot(
            small, view, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
    return grad


def conv3d_forward(x, weight, bias, stride, padding):
    kernel = weight.shape[2:]
    out_extent = tuple(
        conv_output_extent(x.shape[2 + i], kernel[i], stride[i], padding[i])
        for i in range(3))
    xp = _pad(x, padding)
    out = np.zeros((x.shape[0],) + out_extent + (weight.shape[0],),
                   dtype=np.result_type(x, weight))
    for offset in _offsets(kernel):
        view = xp[SPATIAL + _window(offset, out_extent, stride)]
        out += np.tensordot(view, weight[SPATIAL + offset], axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1)
    return out


def conv_transpose3d_forward(x, weight, bias, stride, padding,
                             output_padding=(0, 0, 0)):
    '''weight is [in, out, k, k, k], the same array a conv3d mapping
    out -> in would use'''
    kernel = weight.shape[2:]
    in_extent = x.shape[2:]
    out_extent = tuple(
        transpose_output_extent(in_extent[i], kernel[i], stride[i],
                                padding[i], output_padding[i])
        for i in range(3))
    full_extent = tuple((in_extent[i] - 1) * stride[i] + kernel[i]
                        + output_padding[i] for i in range(3))
    full = np.zeros((x.shape[0],) + full_extent + (weight.shape[1],),
                    dtype=np.result_type(x, weight))
    for offset in _offsets(kernel):
        target = (slice(None),) + _window(offset, in_extent, stride) + (slice(None),)
        full[target] += np.tensordot(x, weight[SPATIAL + offset], axes=([1], [0]))
    crop = (slice(None),) + tuple(
        slice(p, p + n) for p, n in zip(padding, out_extent)) + (slice(None),)
    out = np.ascontiguousarray(np.moveaxis(full[crop], -1, 1))
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1, 1)
    return out


def conv3d_backward(x, weight, grad, stride, padding, need_x=True, need_w=True):
    '''Returns (grad_x, grad_weight, grad_bias) of conv3d_forward'''
    kernel = weight.shape[2:]
    in_extent = x.shape[2:]
    out_extent = grad.shape[2:]
    grad_x = grad_w = None
    if need_x:
        # extents lost to floor division come back as output padding
        output_padding = tuple(
            in_extent[i] - transpose_output_extent(
                out_extent[i], kernel[i], stride[i], padding[i])
            for i in range(3))
        grad_x = conv_transpose3d_forward(
            grad, weight, None, stride, padding, output_padding)
    if need_w:
        grad_w = _correlate_weights(grad, _pad(x, padding), kernel, stride)
    return grad_x, grad_w, grad.sum(axis=(0, 2, 3, 4))


def conv_transpose3d_backward(x, weight, grad, stride, padding, output_padding,
                              need_x=True, need_w=True):
    '''Returns (grad_x, grad_weight, grad_bias) of conv_transpose3d_forward'''
    kernel = weight.shape[2:]
    in_extent = x.shape[2:]
    full_extent = tuple((in_extent[i] - 1) * stride[i] + kernel[i]
                        + output_padding[i] for i in range(3))
    full = np.zeros(grad.shape[:2] + full_extent, dtype=grad.dtype)
    full[SPATIAL + tuple(slice(p, p + n) for p, n in
                         zip(padding, grad.shape[2:]))] = grad
    grad_x = grad_w = None
    if need_x:
        grad_x = conv3d_forward(full, weight, None, stride, (0, 0, 0))
        grad_x = np.ascontiguousarray(
            grad_x[SPATIAL + tuple(slice(0, n) for n in in_extent)])
    if need_w:
        grad_w = _correlate_weights(x, full, kernel, stride)
    return grad_x, grad_w, grad.sum(axis=(0, 2, 3, 4))


def _blocks(x, window):
    n, c, d, h, w = x.shape
    k = window
    blocks = x.reshape(n, c, d // k, k, h // k, k, w // k, k)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7)
    return blocks.reshape(n, c, d // k, h // k, w // k, k ** 3)


def maxpool3d_forward(x, window):
    '''Non-overlapping max pooling. Returns (pooled, argmax) where argmax
    indexes each window in raster order, first occurrence on ties'''
    blocks = _blocks(x, window)
    argmax = np.argmax(blocks, axis=-1)
    pooled = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return pooled, argmax


def maxpool3d_backward(grad, argmax, x_shape, window):
    k = window
    n, c, d, h, w = grad.shape
    scatter = np.zeros(grad.shape + (k ** 3,), dtype=grad.dtype)
    np.put_along_axis(scatter, argmax[..., None], grad[..., None], axis=-1)
    scatter = scatter.reshape(n, c, d, h, w, k, k, k)
    scatter = scatter.transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return scatter.reshape(x_shape)


def instance_norm_forward(x, epsilon):
    axes = tuple(range(2, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    normed = (x - mean) * inv_std
    return normed, inv_std


def instance_norm_backward(grad, normed, inv_std):
    axes = tuple(range(2, grad.ndim))
    return inv_std * (grad - grad.mean(axis=axes, keepdims=True)
                      - normed * (grad * normed).mean(axis=axes, keepdims=True))


def huber(a, delta):
    absolute = np.abs(a)
    return np.where(absolute <= delta, 0.5 * a * a,
                    delta * (absolute - 0.5 * delta))


def huber_grad(a, delta):
    return np.clip(a, -delta, delta)

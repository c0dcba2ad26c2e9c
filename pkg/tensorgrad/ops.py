"""
tensorgrad/ops.py

Differentiable operators. Each operator is a Function subclass with a
functional wrapper; the wrappers validate shapes and raise ShapeError
with both offending shapes in the message.
"""
import numpy as np

from tensorgrad import kernels
from tensorgrad.models import Function, Tensor, GradientError, ShapeError


def _as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _unbroadcast(grad, shape):
    '''Sums grad down to shape, undoing numpy broadcasting'''
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        self.save_for_backward(a.shape, b.shape)
        return a + b

    def backward(self, grad):
        a_shape, b_shape = self.saved
        return _unbroadcast(grad, a_shape), _unbroadcast(grad, b_shape)


class Mul(Function):
    def forward(self, a, b):
        self.save_for_backward(a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Sum(Function):
    def forward(self, a):
        self.save_for_backward(a.shape)
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        shape, = self.saved
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    def forward(self, a):
        self.save_for_backward(a.shape)
        return np.asarray(a.mean(), dtype=a.dtype)

    def backward(self, grad):
        shape, = self.saved
        count = int(np.prod(shape))
        return (np.full(shape, grad / count, dtype=grad.dtype),)


class Reshape(Function):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, a):
        self.save_for_backward(a.shape)
        return a.reshape(self.shape)

    def backward(self, grad):
        shape, = self.saved
        return (grad.reshape(shape),)


class Conv3d(Function):
    def __init__(self, stride, padding):
        super().__init__()
        self.stride = stride
        self.padding = padding

    def forward(self, x, weight, bias=None):
        self.save_for_backward(x, weight)
        return kernels.conv3d_forward(x, weight, bias, self.stride, self.padding)

    def backward(self, grad):
        x, weight = self.saved
        grad_x, grad_w, grad_b = kernels.conv3d_backward(
            x, weight, grad, self.stride, self.padding,
            need_x=self.needs_input_grad[0], need_w=self.needs_input_grad[1])
        return (grad_x, grad_w, grad_b)[:len(self.needs_input_grad)]


class ConvTranspose3d(Function):
    def __init__(self, stride, padding, output_padding):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def forward(self, x, weight, bias=None):
        self.save_for_backward(x, weight)
        return kernels.conv_transpose3d_forward(
            x, weight, bias, self.stride, self.padding, self.output_padding)

    def backward(self, grad):
        x, weight = self.saved
        grad_x, grad_w, grad_b = kernels.conv_transpose3d_backward(
            x, weight, grad, self.stride, self.padding, self.output_padding,
            need_x=self.needs_input_grad[0], need_w=self.needs_input_grad[1])
        return (grad_x, grad_w, grad_b)[:len(self.needs_input_grad)]


class MaxPool3d(Function):
    def __init__(self, window):
        super().__init__()
        self.window = window

    def forward(self, x):
        pooled, argmax = kernels.maxpool3d_forward(x, self.window)
        self.save_for_backward(argmax, x.shape)
        return pooled

    def backward(self, grad):
        argmax, x_shape = self.saved
        return (kernels.maxpool3d_backward(grad, argmax, x_shape, self.window),)


class InstanceNorm3d(Function):
    def __init__(self, epsilon):
        super().__init__()
        self.epsilon = epsilon

    def forward(self, x):
        normed, inv_std = kernels.instance_norm_forward(x, self.epsilon)
        self.save_for_backward(normed, inv_std)
        return normed

    def backward(self, grad):
        normed, inv_std = self.saved
        return (kernels.instance_norm_backward(grad, normed, inv_std),)


class PReLU(Function):
    def forward(self, x, slope):
        shaped = self._shaped(slope, x.ndim)
        self.save_for_backward(x, shaped, slope.shape)
        return np.where(x >= 0, x, shaped * x)

    @staticmethod
    def _shaped(slope, ndim):
        # one slope per channel (axis 1) unless the slope is a scalar
        if slope.size == 1 or ndim < 2:
            return slope.reshape(())
        return slope.reshape((1, -1) + (1,) * (ndim - 2))

    def backward(self, grad):
        x, shaped, slope_shape = self.saved
        grad_x = np.where(x >= 0, grad, shaped * grad)
        weighted = grad * np.minimum(x, 0)
        if shaped.ndim == 0:
            grad_slope = np.asarray(weighted.sum()).reshape(slope_shape)
        else:
            axes = (0,) + tuple(range(2, x.ndim))
            grad_slope = weighted.sum(axis=axes).reshape(slope_shape)
        return grad_x, grad_slope


class Concat(Function):
    def forward(self, *arrays):
        self.save_for_backward(np.cumsum([a.shape[1] for a in arrays])[:-1])
        return np.concatenate(arrays, axis=1)

    def backward(self, grad):
        splits, = self.saved
        return tuple(np.split(grad, splits, axis=1))


class BroadcastScalar(Function):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, v):
        self.save_for_backward(v.shape)
        if v.ndim == 0 or v.size == 1:
            return np.full(self.shape, v.reshape(()), dtype=v.dtype)
        # one value per batch entry
        view = v.reshape((-1,) + (1,) * (len(self.shape) - 1))
        return np.ascontiguousarray(np.broadcast_to(view, self.shape))

    def backward(self, grad):
        v_shape, = self.saved
        if len(v_shape) == 0 or int(np.prod(v_shape)) == 1:
            return (np.asarray(grad.sum()).reshape(v_shape),)
        return (grad.reshape(grad.shape[0], -1).sum(axis=1).reshape(v_shape),)


class Huber(Function):
    def __init__(self, delta):
        super().__init__()
        self.delta = delta

    def forward(self, pred, target):
        residual = pred - target
        self.save_for_backward(residual)
        return np.asarray(kernels.huber(residual, self.delta).mean(),
                          dtype=residual.dtype)

    def backward(self, grad):
        residual, = self.saved
        grad_pred = grad * kernels.huber_grad(residual, self.delta) / residual.size
        return grad_pred, -grad_pred


def add(a, b):
    return Add.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def neg(a):
    return Neg.apply(a)


def tensor_sum(a):
    return Sum.apply(a)


def tensor_mean(a):
    return Mean.apply(a)


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError('reshape: cannot view %s as %s' % (a.shape, shape))
    return Reshape.apply(a, shape=shape)


def _check_conv_input(x, weight, in_axis, name):
    if x.ndim != 5:
        raise ShapeError('%s expects a [N, C, D, H, W] input, got %s'
                         % (name, list(x.shape)))
    if weight.ndim != 5:
        raise ShapeError('%s expects a 5-D weight, got %s'
                         % (name, list(weight.shape)))
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeError(
            '%s channel mismatch: input %s has %d channels, weight %s expects %d'
            % (name, list(x.shape), x.shape[1], list(weight.shape),
               weight.shape[in_axis]))


def _check_bias(bias, channels, weight):
    if bias is not None and bias.shape != (channels,):
        raise ShapeError('bias %s does not match weight %s'
                         % (list(bias.shape), list(weight.shape)))


def conv3d(x, weight, bias=None, stride=1, padding=1):
    '''3-D cross-correlation. weight is [out, in, k, k, k]; output extent
    per axis is floor((D + 2p - k) / s) + 1'''
    _check_conv_input(x, weight, 1, 'conv3d')
    _check_bias(bias, weight.shape[0], weight)
    stride = kernels.triple(stride)
    padding = kernels.triple(padding)
    if min(stride) < 1:
        raise ShapeError('conv3d stride must be >= 1, got %s' % (stride,))
    for axis in range(3):
        if x.shape[2 + axis] + 2 * padding[axis] < weight.shape[2 + axis]:
            raise ShapeError(
                'conv3d padded input %s is smaller than kernel %s'
                % (list(x.shape), list(weight.shape)))
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Conv3d.apply(*inputs, stride=stride, padding=padding)


def conv_transpose3d(x, weight, bias=None, stride=2, padding=0,
                     output_padding=0):
    '''Adjoint of conv3d with the same weight array. weight is
    [in, out, k, k, k]; output extent is (D - 1) s - 2p + k + output_padding'''
    _check_conv_input(x, weight, 0, 'conv_transpose3d')
    _check_bias(bias, weight.shape[1], weight)
    stride = kernels.triple(stride)
    padding = kernels.triple(padding)
    output_padding = kernels.triple(output_padding)
    if min(stride) < 1:
        raise ShapeError('conv_transpose3d stride must be >= 1, got %s'
                         % (stride,))
    if any(op >= s for op, s in zip(output_padding, stride)):
        raise ShapeError('output_padding %s must be smaller than stride %s'
                         % (output_padding, stride))
    for axis in range(3):
        extent = kernels.transpose_output_extent(
            x.shape[2 + axis], weight.shape[2 + axis], stride[axis],
            padding[axis], output_padding[axis])
        if extent < 1:
            raise ShapeError('conv_transpose3d input %s with weight %s has '
                             'empty output' % (list(x.shape), list(weight.shape)))
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return ConvTranspose3d.apply(*inputs, stride=stride, padding=padding,
                                 output_padding=output_padding)


def maxpool3d(x, window=2, stride=2):
    '''Non-overlapping max pooling; gradient goes to the first maximum
    of each window in scan order'''
    if window != stride:
        raise ShapeError('maxpool3d supports window == stride only, got '
                         'window %s stride %s' % (window, stride))
    if x.ndim != 5:
        raise ShapeError('maxpool3d expects a [N, C, D, H, W] input, got %s'
                         % (list(x.shape),))
    if any(extent % window for extent in x.shape[2:]):
        raise ShapeError('maxpool3d needs spatial extents divisible by %d, '
                         'got %s' % (window, list(x.shape)))
    return MaxPool3d.apply(x, window=window)


def instance_norm3d(x, epsilon=1e-5):
    '''Per (sample, channel) standardisation over the spatial axes, no
    learned affine'''
    if x.ndim < 3 or int(np.prod(x.shape[2:])) < 2:
        raise ShapeError('instance_norm3d needs >= 2 voxels per channel, '
                         'got %s' % (list(x.shape),))
    return InstanceNorm3d.apply(x, epsilon=float(epsilon))


def prelu(x, slope):
    slope = _as_tensor(slope, like=x)
    if slope.size != 1 and (x.ndim < 2 or slope.size != x.shape[1]):
        raise ShapeError('prelu slope %s does not match input %s'
                         % (list(slope.shape), list(x.shape)))
    return PReLU.apply(x, slope)


def concat_channels(xs):
    xs = list(xs)
    if not xs:
        raise ShapeError('concat_channels needs at least one input')
    if len(xs) == 1:
        return xs[0]
    reference = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(reference) or x.shape[0] != reference[0] \
                or x.shape[2:] != reference[2:]:
            raise ShapeError('concat_channels extent mismatch: %s'
                             % ', '.join(str(list(t.shape)) for t in xs))
    return Concat.apply(*xs)


def broadcast_scalar(v, target_shape):
    '''Fills target_shape with v. v may be a number, a scalar Tensor or a
    Tensor with one value per batch entry'''
    v = _as_tensor(v)
    target_shape = tuple(int(extent) for extent in target_shape)
    if v.size != 1 and (v.ndim != 1 or v.shape[0] != target_shape[0]):
        raise ShapeError('cannot broadcast %s to %s'
                         % (list(v.shape), list(target_shape)))
    return BroadcastScalar.apply(v, shape=target_shape)


def huber_loss(pred, target, delta=0.5):
    '''Mean Huber loss: a^2 / 2 for |a| <= delta, delta (|a| - delta / 2)
    beyond'''
    target = _as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise ShapeError('huber_loss shape mismatch: prediction %s, target %s'
                         % (list(pred.shape), list(target.shape)))
    if delta <= 0:
        raise ValueError('huber delta must be positive')
    return Huber.apply(pred, target, delta=float(delta))


def conv_block(x, spec):
    '''conv3d -> instance_norm3d -> prelu with the weights of a
    ConvBlockSpec'''
    y = conv3d(x, spec.weight, spec.bias, spec.stride, spec.padding)
    y = instance_norm3d(y, spec.norm_epsilon)
    return prelu(y, spec.prelu_slope)


def backward(loss):
    '''Populates .grad on every requires_grad leaf reachable from loss'''
    if not isinstance(loss, Tensor):
        raise GradientError('backward needs a Tensor, got %s'
                            % type(loss).__name__)
    if loss.size != 1:
        raise GradientError('backward needs a scalar loss, got shape %s'
                            % (list(loss.shape),))
    tape = loss._tape
    if tape is None:
        if loss.is_leaf and loss.requires_grad:
            loss.accumulate_grad(np.ones(loss.shape, dtype=loss.dtype))
            return
        raise GradientError('loss was not computed on an active tape')
    tape.backward(loss)



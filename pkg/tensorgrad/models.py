"""
tensorgrad/models.py

Tensor, Tape and the Function base class of the reverse-mode engine.
These are plain python objects, nothing here touches the database.
"""
import contextlib
import logging
import threading

import numpy as np
from django.conf import settings

LOGGER = logging.getLogger('lvadrecon')

# get settings
try:
    DEFAULT_DTYPE = settings.TENSORGRAD_DTYPE
except:
    DEFAULT_DTYPE = 'float32'

try:
    CHECK_FINITE = settings.TENSORGRAD_CHECK_FINITE
except:
    CHECK_FINITE = False

_state = threading.local()


class TensorError(Exception):
    '''Base class for tensorgrad errors'''
    pass


class ShapeError(TensorError):
    '''Operand shapes are incompatible with the operation'''
    pass


class GradientError(TensorError):
    '''backward() was called on something it cannot differentiate'''
    pass


class NonFiniteError(TensorError):
    '''An operation produced NaN or Inf from finite inputs'''
    pass


def get_default_dtype():
    '''Returns the numpy dtype used for new tensors on this thread'''
    return np.dtype(getattr(_state, 'dtype', None) or DEFAULT_DTYPE)


@contextlib.contextmanager
def default_dtype(dtype):
    '''Temporarily switch the numeric width for tensors created on this
    thread, e.g. `with default_dtype('float64'):` for gradient oracles'''
    previous = getattr(_state, 'dtype', None)
    _state.dtype = np.dtype(dtype).name
    try:
        yield
    finally:
        _state.dtype = previous


def current_tape():
    '''Returns the innermost active Tape on this thread, or None'''
    stack = getattr(_state, 'tapes', None)
    if stack:
        return stack[-1]
    return None


class Tensor(object):
    '''A dense array that can take part in reverse-mode differentiation.

    `values` is always an ndarray; 5-D tensors use the (batch, channel,
    depth, height, width) layout. `grad` stays None until backward() reaches
    the tensor.'''

    __array_priority__ = 100

    def __init__(self, values, requires_grad=False, dtype=None, name=None):
        if isinstance(values, Tensor):
            values = values.values
        self.values = np.asarray(values, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._fn = None
        self._tape = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_leaf(self):
        return self._fn is None

    def numpy(self):
        return self.values

    def item(self):
        return self.values.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        '''Returns a new leaf sharing no history with this tensor'''
        return Tensor(self.values.copy(), dtype=self.dtype)

    def accumulate_grad(self, grad):
        '''Adds grad into self.grad; fan-out accumulates additively'''
        if grad.shape != self.shape:
            raise GradientError(
                'gradient shape %s does not match tensor shape %s'
                % (grad.shape, self.shape))
        grad = grad.astype(self.dtype, copy=False)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    def _wrap(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(other, dtype=self.dtype)

    def __add__(self, other):
        from tensorgrad import ops
        return ops.add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        from tensorgrad import ops
        return ops.add(self, ops.neg(self._wrap(other)))

    def __rsub__(self, other):
        from tensorgrad import ops
        return ops.add(self._wrap(other), ops.neg(self))

    def __mul__(self, other):
        from tensorgrad import ops
        return ops.mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        from tensorgrad import ops
        return ops.neg(self)

    def sum(self):
        from tensorgrad import ops
        return ops.tensor_sum(self)

    def mean(self):
        from tensorgrad import ops
        return ops.tensor_mean(self)

    def backward(self):
        from tensorgrad import ops
        ops.backward(self)

    def __repr__(self):
        return 'Tensor(shape=%s, dtype=%s, requires_grad=%s)' % (
            list(self.shape), self.dtype.name, self.requires_grad)


class Tape(object):
    '''Ordered record of the operations executed while it is active.

    Use as a context manager; operations record themselves only when a
    tape is active and at least one of their inputs requires grad, so
    inference never builds a record. A tape can be run backward once.'''

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        if not hasattr(_state, 'tapes'):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tapes.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, fn, inputs, output):
        if self.consumed:
            raise GradientError('tape has already been run backward')
        self.records.append((fn, tuple(inputs), output))
        output._tape = self

    def backward(self, loss):
        '''Propagates d(loss)/d(.) to every reachable tensor that
        requires grad, walking the record once in reverse'''
        if self.consumed:
            raise GradientError('tape has already been run backward')
        if loss.size != 1:
            raise GradientError(
                'backward needs a scalar loss, got shape %s' % (list(loss.shape),))
        self.consumed = True
        pending = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for fn, inputs, output in reversed(self.records):
            grad = pending.pop(id(output), None)
            if grad is None:
                continue
            input_grads = fn.backward(grad)
            for tensor, tensor_grad in zip(inputs, input_grads):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    tensor.accumulate_grad(tensor_grad)
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + tensor_grad
                else:
                    pending[id(tensor)] = tensor_grad
        # the record holds every intermediate alive; drop it
        self.records = []


class Function(object):
    '''Base class for differentiable operations.

    Subclasses implement forward(*arrays) -> array and
    backward(grad) -> tuple with one entry (or None) per input.'''

    def __init__(self):
        self.saved = ()
        self.needs_input_grad = ()

    def save_for_backward(self, *arrays):
        self.saved = arrays

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **params):
        for tensor in inputs:
            if not isinstance(tensor, Tensor):
                raise TypeError('%s expects Tensor inputs, got %s'
                                % (cls.__name__, type(tensor).__name__))
        fn = cls(**params)
        tape = current_tape()
        recording = tape is not None and any(t.requires_grad for t in inputs)
        fn.needs_input_grad = tuple(t.requires_grad for t in inputs)
        values = fn.forward(*[t.values for t in inputs])
        if CHECK_FINITE and not np.all(np.isfinite(values)):
            if all(np.all(np.isfinite(t.values)) for t in inputs):
                raise NonFiniteError(
                    '%s produced non-finite values from finite inputs'
                    % cls.__name__)
        out = Tensor(values, dtype=values.dtype)
        if recording:
            out.requires_grad = True
            out._fn = fn
            tape.record(fn, inputs, out)
        return out


class ConvBlockSpec(object):
    '''Weights of one conv -> instance norm -> PReLU block.

    weight is [out, in, k, k, k], bias is [out], prelu_slope is one slope
    per output channel. kernel, stride and padding are 3-tuples.'''

    def __init__(self, weight, bias, prelu_slope, stride=(1, 1, 1),
                 padding=(1, 1, 1), norm_epsilon=1e-5):
        self.weight = weight
        self.bias = bias
        self.prelu_slope = prelu_slope
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.norm_epsilon = float(norm_epsilon)
        self.validate()

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def kernel(self):
        return tuple(self.weight.shape[2:])

    def parameters(self):
        return [self.weight, self.bias, self.prelu_slope]

    def validate(self):
        if self.weight.ndim != 5:
            raise ShapeError('conv weight must be [out, in, k, k, k], got %s'
                             % (list(self.weight.shape),))
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError('bias shape %s does not match weight %s'
                             % (list(self.bias.shape), list(self.weight.shape)))
        if self.prelu_slope.shape != (self.out_channels,):
            raise ShapeError('prelu slope shape %s does not match %d channels'
                             % (list(self.prelu_slope.shape), self.out_channels))
        if not np.all(np.isfinite(self.prelu_slope.values)):
            raise TensorError('prelu slope must be finite')
        if self.norm_epsilon <= 0:
            raise TensorError('norm epsilon must be positive')
        if min(self.stride) < 1:
            raise ShapeError('stride must be >= 1, got %s' % (self.stride,))

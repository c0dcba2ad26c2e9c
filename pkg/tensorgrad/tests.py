"""
Unit tests for tensorgrad
"""
from django.test import SimpleTestCase
from unittest.mock import patch

import numpy as np

from tensorgrad.models import (Tape, Tensor, ConvBlockSpec, GradientError,
                               NonFiniteError, ShapeError, default_dtype,
                               get_default_dtype)
from tensorgrad import kernels
from tensorgrad.ops import (backward, broadcast_scalar, concat_channels,
                            conv3d, conv_block, conv_transpose3d, huber_loss,
                            instance_norm3d, maxpool3d, prelu, reshape)
from tensorgrad.utils import (finite_diff_check, inner_product,
                              kaiming_uniform, bias_uniform, prelu_slopes)

GRAD_TOL = 1e-4
SEEDS = range(20)


def weighted_sum(y, rng):
    '''Random linear functional; plain sums hide some gradients'''
    return (y * Tensor(rng.standard_normal(y.shape), dtype=y.dtype)).sum()


class ConvolutionTests(SimpleTestCase):
    """Tests for conv3d and conv_transpose3d"""

    def test_conv3d_shape(self):
        """Same-padded 3x3x3 conv keeps the grid and maps to 16 channels"""
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((1, 2, 32, 32, 32)))
        w = Tensor(rng.standard_normal((16, 2, 3, 3, 3)))
        self.assertEqual(conv3d(x, w, stride=1, padding=1).shape,
                         (1, 16, 32, 32, 32))

    def test_conv3d_identity_kernel(self):
        """1x1x1 kernel of weight 1 and bias 0 is the identity"""
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((2, 1, 4, 5, 6)))
        w = Tensor(np.ones((1, 1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        y = conv3d(x, w, b, stride=1, padding=0)
        np.testing.assert_array_equal(y.values, x.values)

    def test_conv3d_channel_mismatch(self):
        """Channel mismatch names both shapes"""
        x = Tensor(np.zeros((1, 3, 4, 4, 4)))
        w = Tensor(np.zeros((8, 2, 3, 3, 3)))
        with self.assertRaises(ShapeError) as ctx:
            conv3d(x, w)
        self.assertIn('[1, 3, 4, 4, 4]', str(ctx.exception))
        self.assertIn('[8, 2, 3, 3, 3]', str(ctx.exception))

    def test_conv3d_kernel_larger_than_padded_input(self):
        """Kernel must fit inside the padded input"""
        with self.assertRaises(ShapeError):
            conv3d(Tensor(np.zeros((1, 1, 2, 2, 2))),
                   Tensor(np.zeros((1, 1, 5, 5, 5))), padding=1)

    def test_conv3d_gradient_of_sum(self):
        """Gradient of sum(conv3d) matches central differences"""
        with default_dtype('float64'):
            rng = np.random.default_rng(2)
            w = Tensor(rng.standard_normal((1, 1, 3, 3, 3)))
            x = rng.standard_normal((1, 1, 4, 4, 4))
            error = finite_diff_check(lambda t: conv3d(t, w).sum(), x)
        self.assertLess(error, GRAD_TOL)

    def test_conv3d_gradients_over_seeds(self):
        """Input, weight and bias gradients of plain and strided conv3d"""
        with default_dtype('float64'):
            for seed in SEEDS:
                rng = np.random.default_rng(seed)
                x = rng.standard_normal((1, 2, 4, 4, 4))
                w = rng.standard_normal((3, 2, 3, 3, 3))
                b = rng.standard_normal(3)
                for stride, padding in ((1, 1), (2, 1)):
                    r = np.random.default_rng(seed + 100)
                    weights = Tensor(r.standard_normal(
                        conv3d(Tensor(x), Tensor(w), Tensor(b), stride,
                               padding).shape))
                    errors = [
                        finite_diff_check(lambda t: (conv3d(
                            t, Tensor(w), Tensor(b), stride, padding)
                            * weights).sum(), x),
                        finite_diff_check(lambda t: (conv3d(
                            Tensor(x), t, Tensor(b), stride, padding)
                            * weights).sum(), w),
                        finite_diff_check(lambda t: (conv3d(
                            Tensor(x), Tensor(w), t, stride, padding)
                            * weights).sum(), b),
                    ]
                    self.assertLess(max(errors), GRAD_TOL,
                                    'seed %d stride %d' % (seed, stride))

    def test_conv_transpose3d_doubles_extents(self):
        """k=2, s=2, p=0 exactly doubles the grid"""
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((1, 256, 8, 8, 8)))
        w = Tensor(rng.standard_normal((256, 16, 2, 2, 2)))
        self.assertEqual(conv_transpose3d(x, w, stride=2, padding=0).shape,
                         (1, 16, 16, 16, 16))

    def test_conv_transpose3d_zero_input(self):
        """All-zero input with zero bias gives all-zero output"""
        rng = np.random.default_rng(4)
        w = Tensor(rng.standard_normal((4, 2, 2, 2, 2)))
        y = conv_transpose3d(Tensor(np.zeros((1, 4, 3, 3, 3))), w,
                             Tensor(np.zeros(2)))
        self.assertFalse(np.any(y.values))

    def test_conv_transpose3d_channel_mismatch(self):
        """Channel mismatch is rejected"""
        with self.assertRaises(ShapeError):
            conv_transpose3d(Tensor(np.zeros((1, 3, 2, 2, 2))),
                             Tensor(np.zeros((4, 2, 2, 2, 2))))

    def test_adjoint_identity(self):
        """<conv3d(u), v> == <u, conv_transpose3d(v)> for every model
        kernel/stride/padding configuration"""
        configs = [
            # kernel, stride, padding
            (3, 1, 1),
            (3, 2, 1),
            (2, 2, 0),
            (1, 1, 0),
        ]
        with default_dtype('float64'):
            for kernel, stride, padding in configs:
                for seed in range(5):
                    rng = np.random.default_rng(seed)
                    u = Tensor(rng.standard_normal((2, 3, 8, 8, 8)))
                    w = Tensor(rng.standard_normal((4, 3, kernel, kernel, kernel)))
                    forward = conv3d(u, w, stride=stride, padding=padding)
                    v = Tensor(rng.standard_normal(forward.shape))
                    output_padding = 8 - kernels.transpose_output_extent(
                        forward.shape[2], kernel, stride, padding)
                    adjoint = conv_transpose3d(v, w, stride=stride,
                                               padding=padding,
                                               output_padding=output_padding)
                    self.assertEqual(adjoint.shape, u.shape)
                    lhs = inner_product(forward.values, v.values)
                    rhs = inner_product(u.values, adjoint.values)
                    self.assertLess(abs(lhs - rhs) / abs(lhs), 1e-10)

    def test_conv_transpose3d_gradients_over_seeds(self):
        """Input and weight gradients of the decoder upsampling"""
        with default_dtype('float64'):
            for seed in SEEDS:
                rng = np.random.default_rng(seed)
                x = rng.standard_normal((1, 2, 2, 2, 2))
                w = rng.standard_normal((2, 3, 2, 2, 2))
                weights = Tensor(rng.standard_normal((1, 3, 4, 4, 4)))
                error_x = finite_diff_check(
                    lambda t: (conv_transpose3d(t, Tensor(w)) * weights).sum(), x)
                error_w = finite_diff_check(
                    lambda t: (conv_transpose3d(Tensor(x), t) * weights).sum(), w)
                self.assertLess(max(error_x, error_w), GRAD_TOL)

    def test_shape_algebra(self):
        """Output extents follow the closed forms for random valid configs"""
        rng = np.random.default_rng(5)
        for _ in range(40):
            size = int(rng.integers(3, 10))
            kernel = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 4))
            padding = int(rng.integers(0, 2))
            x = Tensor(np.zeros((1, 1, size, size + 1, size + 2)))
            w = Tensor(np.zeros((2, 1, kernel, kernel, kernel)))
            y = conv3d(x, w, stride=stride, padding=padding)
            expected = tuple((n + 2 * padding - kernel) // stride + 1
                             for n in x.shape[2:])
            self.assertEqual(y.shape[2:], expected)
            expected = tuple((n - 1) * stride - 2 * padding + kernel
                             for n in y.shape[2:])
            if min(expected) < 1:
                continue
            up = conv_transpose3d(y, w, stride=stride, padding=padding)
            self.assertEqual(up.shape[2:], expected)


class PoolingAndNormTests(SimpleTestCase):
    """Tests for maxpool3d and instance_norm3d"""

    def test_maxpool_constant_field(self):
        """Constant field pools to the same constant at half resolution"""
        y = maxpool3d(Tensor(np.full((1, 2, 4, 6, 8), 3.5)))
        self.assertEqual(y.shape, (1, 2, 2, 3, 4))
        self.assertTrue(np.all(y.values == 3.5))

    def test_maxpool_enumeration(self):
        """A 2x2x2 block holding 0..7 pools to 7"""
        x = Tensor(np.arange(8.0).reshape(1, 1, 2, 2, 2))
        self.assertEqual(maxpool3d(x).item(), 7.0)

    def test_maxpool_odd_extent(self):
        """Odd extents are rejected"""
        with self.assertRaises(ShapeError):
            maxpool3d(Tensor(np.zeros((1, 1, 3, 4, 4))))

    def test_maxpool_tie_goes_to_first(self):
        """On ties the first voxel in scan order receives the gradient"""
        x = Tensor(np.ones((1, 1, 2, 2, 2)), requires_grad=True)
        with Tape():
            y = maxpool3d(x).sum()
        backward(y)
        expected = np.zeros((1, 1, 2, 2, 2))
        expected[0, 0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_maxpool_gradients_over_seeds(self):
        """maxpool3d passes the finite-difference check"""
        with default_dtype('float64'):
            for seed in SEEDS:
                rng = np.random.default_rng(seed)
                x = rng.standard_normal((1, 2, 4, 4, 4))
                error = finite_diff_check(
                    lambda t: weighted_sum(maxpool3d(t),
                                           np.random.default_rng(seed)), x)
                self.assertLess(error, GRAD_TOL)

    def test_instance_norm_constant_channel(self):
        """Zero-variance channel normalises to zeros"""
        y = instance_norm3d(Tensor(np.full((1, 1, 3, 3, 3), 2.0)))
        self.assertFalse(np.any(y.values))

    def test_instance_norm_already_normalised(self):
        """Values {-1, 1} with mean 0 and variance 1 pass through"""
        x = np.array([-1.0, 1.0] * 4).reshape(1, 1, 2, 2, 2)
        with default_dtype('float64'):
            y = instance_norm3d(Tensor(x), epsilon=1e-5)
        np.testing.assert_allclose(y.values, x, atol=1e-5)

    def test_instance_norm_statistics(self):
        """Output has zero mean and unit variance per sample and channel"""
        with default_dtype('float64'):
            rng = np.random.default_rng(6)
            x = Tensor(rng.uniform(-3, 5, size=(2, 3, 4, 4, 4)))
            y = instance_norm3d(x).values
        self.assertLess(np.abs(y.mean(axis=(2, 3, 4))).max(), 1e-6)
        self.assertLess(np.abs(y.var(axis=(2, 3, 4)) - 1).max(), 1e-3)

    def test_instance_norm_single_voxel(self):
        """A channel needs at least two voxels"""
        with self.assertRaises(ShapeError):
            instance_norm3d(Tensor(np.zeros((1, 1, 1, 1, 1))))

    def test_instance_norm_gradients_over_seeds(self):
        """instance_norm3d passes the finite-difference check"""
        with default_dtype('float64'):
            for seed in SEEDS:
                rng = np.random.default_rng(seed)
                x = rng.standard_normal((1, 2, 3, 3, 3))
                error = finite_diff_check(
                    lambda t: weighted_sum(instance_norm3d(t),
                                           np.random.default_rng(seed)), x)
                self.assertLess(error, GRAD_TOL)


class ActivationTests(SimpleTestCase):
    """Tests for prelu, concat_channels and broadcast_scalar"""

    def test_prelu_values(self):
        """Positive inputs pass, negative inputs scale by the slope"""
        self.assertEqual(prelu(Tensor(2.0), 0.25).item(), 2.0)
        self.assertEqual(prelu(Tensor(-2.0), 0.25).item(), -0.5)

    def test_prelu_gradients_over_seeds(self):
        """Input and per-channel slope gradients"""
        with default_dtype('float64'):
            for seed in SEEDS:
                rng = np.random.default_rng(seed)
                x = rng.standard_normal((1, 3, 3, 3, 3))
                slope = rng.uniform(0.05, 0.5, size=3)
                error_x = finite_diff_check(
                    lambda t: weighted_sum(prelu(t, Tensor(slope)),
                                           np.random.default_rng(seed)), x)
                error_a = finite_diff_check(
                    lambda a: weighted_sum(prelu(Tensor(x), a),
                                           np.random.default_rng(seed)), slope)
                self.assertLess(max(error_x, error_a), GRAD_TOL)

    def test_prelu_slope_shape(self):
        """Slope count must match the channel count"""
        with self.assertRaises(ShapeError):
            prelu(Tensor(np.zeros((1, 3, 2, 2, 2))), Tensor(np.ones(2)))

    def test_concat_latent_shape(self):
        """Two 256-channel latents concatenate to 512 channels"""
        a = Tensor(np.zeros((1, 256, 8, 8, 8)))
        b = Tensor(np.ones((1, 256, 8, 8, 8)))
        self.assertEqual(concat_channels([a, b]).shape, (1, 512, 8, 8, 8))

    def test_concat_single_input(self):
        """A single input comes back unchanged"""
        a = Tensor(np.arange(8.0).reshape(1, 1, 2, 2, 2))
        self.assertIs(concat_channels([a]), a)

    def test_concat_spatial_mismatch(self):
        """Mismatched spatial extents list every shape"""
        with self.assertRaises(ShapeError) as ctx:
            concat_channels([Tensor(np.zeros((1, 2, 4, 4, 4))),
                             Tensor(np.zeros((1, 2, 4, 4, 2)))])
        self.assertIn('[1, 2, 4, 4, 2]', str(ctx.exception))

    def test_concat_gradient_splits(self):
        """Backward of concat is a slice per input"""
        with default_dtype('float64'):
            rng = np.random.default_rng(7)
            a = Tensor(rng.standard_normal((1, 2, 2, 2, 2)), requires_grad=True)
            b = Tensor(rng.standard_normal((1, 3, 2, 2, 2)), requires_grad=True)
            r = rng.standard_normal((1, 5, 2, 2, 2))
            with Tape():
                loss = (concat_channels([a, b]) * Tensor(r)).sum()
            backward(loss)
        np.testing.assert_array_equal(a.grad, r[:, :2])
        np.testing.assert_array_equal(b.grad, r[:, 2:])

    def test_concat_gradients_over_seeds(self):
        """concat_channels passes the finite-difference check"""
        with default_dtype('float64'):
            for seed in SEEDS:
                rng = np.random.default_rng(seed)
                x = rng.standard_normal((1, 2, 2, 2, 2))
                other = Tensor(rng.standard_normal((1, 1, 2, 2, 2)))
                error = finite_diff_check(
                    lambda t: weighted_sum(concat_channels([t, other, t]),
                                           np.random.default_rng(seed)), x)
                self.assertLess(error, GRAD_TOL)

    def test_broadcast_scalar_values(self):
        """Every element equals the scalar"""
        y = broadcast_scalar(0.3, [1, 256, 8, 8, 8])
        self.assertEqual(y.shape, (1, 256, 8, 8, 8))
        self.assertTrue(np.all(y.values == y.values.flat[0]))
        self.assertAlmostEqual(float(y.values.flat[0]), 0.3, places=6)
        self.assertFalse(np.any(broadcast_scalar(0.0, [1, 2, 2, 2, 2]).values))

    def test_broadcast_scalar_gradient_is_upstream_sum(self):
        """d/dv of <broadcast(v), r> is sum(r), exactly"""
        with default_dtype('float64'):
            rng = np.random.default_rng(8)
            v = Tensor(0.3, requires_grad=True)
            r = rng.standard_normal((1, 4, 2, 2, 2))
            with Tape():
                loss = (broadcast_scalar(v, r.shape) * Tensor(r)).sum()
            backward(loss)
        self.assertEqual(v.grad.item(), r.sum())

    def test_broadcast_per_sample(self):
        """A [N] tensor broadcasts one value per batch entry"""
        y = broadcast_scalar(Tensor([1.0, 2.0]), [2, 3, 2, 2, 2])
        self.assertTrue(np.all(y.values[0] == 1.0))
        self.assertTrue(np.all(y.values[1] == 2.0))

    def test_broadcast_gradients_over_seeds(self):
        """broadcast_scalar passes the finite-difference check"""
        with default_dtype('float64'):
            for seed in SEEDS:
                rng = np.random.default_rng(seed)
                error = finite_diff_check(
                    lambda v: weighted_sum(broadcast_scalar(v, [2, 2, 2, 2, 2]),
                                           np.random.default_rng(seed)),
                    rng.standard_normal(2))
                self.assertLess(error, GRAD_TOL)

    def test_reshape_gradients(self):
        with default_dtype('float64'):
            for seed in range(3):
                error = finite_diff_check(
                    lambda x: weighted_sum(reshape(x, (2, 1, 3, 2, 2)),
                                           np.random.default_rng(seed)),
                    np.random.default_rng(seed).standard_normal((2, 3, 2, 2)))
                self.assertLess(error, GRAD_TOL)

    def test_reshape_size_mismatch(self):
        with self.assertRaises(ShapeError):
            reshape(Tensor(np.zeros((2, 3))), (4, 2))


class LossAndBackwardTests(SimpleTestCase):
    """Tests for huber_loss, backward and finite_diff_check"""

    def test_huber_branches(self):
        """Quadratic below delta, linear above, zero at zero"""
        with default_dtype('float64'):
            zero = Tensor([0.0])
            self.assertAlmostEqual(huber_loss(Tensor([0.3]), zero, 0.5).item(), 0.045)
            self.assertAlmostEqual(huber_loss(Tensor([1.0]), zero, 0.5).item(), 0.375)
            self.assertEqual(huber_loss(zero, zero, 0.5).item(), 0.0)

    def test_huber_shape_mismatch(self):
        """Prediction and target must agree in shape"""
        with self.assertRaises(ShapeError):
            huber_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_huber_gradient_continuity(self):
        """Gradient is continuous across |a| = delta"""
        delta = 0.5
        below = kernels.huber_grad(np.array(delta * (1 - 1e-9)), delta)
        above = kernels.huber_grad(np.array(delta * (1 + 1e-9)), delta)
        self.assertLess(abs(below - above) / delta, 1e-6)

    def test_huber_gradients_over_seeds(self):
        """Residuals straddling delta pass the finite-difference check"""
        with default_dtype('float64'):
            for seed in SEEDS:
                rng = np.random.default_rng(seed)
                target = Tensor(rng.standard_normal(30))
                pred = target.values + rng.uniform(-1.5, 1.5, size=30)
                error = finite_diff_check(
                    lambda t: huber_loss(t, target, 0.5), pred)
                self.assertLess(error, GRAD_TOL)

    def test_backward_linear(self):
        """y = 3x at x = 2 gives dy/dx = 3"""
        x = Tensor(2.0, requires_grad=True)
        with Tape():
            y = x * 3.0
        backward(y)
        self.assertEqual(x.grad.item(), 3.0)

    def test_backward_fan_out(self):
        """x + x accumulates dy/dx = 2"""
        x = Tensor(5.0, requires_grad=True)
        with Tape():
            y = x + x
        backward(y)
        self.assertEqual(x.grad.item(), 2.0)

    def test_backward_non_scalar(self):
        """Non-scalar loss is rejected"""
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            y = x * 2.0
        with self.assertRaises(GradientError):
            backward(y)

    def test_backward_runs_once(self):
        """A tape is consumed by its backward pass"""
        x = Tensor(1.0, requires_grad=True)
        with Tape():
            y = x * 2.0
        backward(y)
        with self.assertRaises(GradientError):
            backward(y)

    def test_no_tape_no_record(self):
        """Without an active tape nothing is recorded"""
        x = Tensor(np.ones(3), requires_grad=True)
        y = (x * 2.0).sum()
        self.assertTrue(y.is_leaf)
        with self.assertRaises(GradientError):
            backward(y)
        with Tape() as tape:
            (x * Tensor(np.ones(3))).sum()
            (Tensor(np.ones(3)) * 2.0).sum()
        self.assertEqual(len(tape), 2)

    def test_gradient_reaches_unused_branch_as_none(self):
        """Leaves not reachable from the loss keep grad None"""
        x = Tensor(1.0, requires_grad=True)
        unused = Tensor(1.0, requires_grad=True)
        with Tape():
            y = x * 4.0
            unused * 2.0
        backward(y)
        self.assertIsNone(unused.grad)

    def test_finite_diff_sum(self):
        """f = sum has an all-ones gradient"""
        with default_dtype('float64'):
            x = np.random.default_rng(9).standard_normal(10)
            self.assertLess(finite_diff_check(lambda t: t.sum(), x), 1e-8)

    def test_finite_diff_sum_of_squares(self):
        """f = sum(x^2) with eps 1e-5"""
        with default_dtype('float64'):
            x = np.random.default_rng(10).uniform(0.5, 2.0, size=8)
            error = finite_diff_check(lambda t: (t * t).sum(), x, eps=1e-5)
        self.assertLess(error, 1e-8)

    def test_finite_diff_detects_wrong_gradient(self):
        """A broken backward is caught by the oracle"""
        with default_dtype('float64'):
            x = np.random.default_rng(11).uniform(0.5, 2.0, size=4)
            with patch('tensorgrad.ops.Mul.backward',
                       lambda self, grad: (grad, grad)):
                error = finite_diff_check(lambda t: (t * t).sum(), x)
        self.assertGreater(error, 0.1)


class EngineTests(SimpleTestCase):
    """Tests for dtype control, determinism and ConvBlockSpec"""

    def test_default_dtype_context(self):
        """default_dtype switches the width and restores it"""
        outer = get_default_dtype()
        with default_dtype('float64'):
            self.assertEqual(Tensor([1.0]).dtype, np.float64)
        self.assertEqual(get_default_dtype(), outer)

    def test_non_finite_guard(self):
        """With the guard on, overflow from finite inputs raises"""
        with default_dtype('float64'):
            big = Tensor([1e200])
            with patch('tensorgrad.models.CHECK_FINITE', True):
                with self.assertRaises(NonFiniteError):
                    big * big

    def test_conv_block_deterministic(self):
        """Identical seeds give bit-identical block outputs"""
        outputs = []
        for _ in range(2):
            rng = np.random.default_rng(12)
            spec = ConvBlockSpec(kaiming_uniform(rng, (4, 2, 3, 3, 3), 54),
                                 bias_uniform(rng, 4, 54), prelu_slopes(4))
            x = Tensor(rng.standard_normal((1, 2, 4, 4, 4)))
            outputs.append(conv_block(x, spec).values)
        np.testing.assert_array_equal(outputs[0], outputs[1])

    def test_conv_block_spec_validation(self):
        """Bias and slope shapes must match the weight"""
        rng = np.random.default_rng(13)
        weight = kaiming_uniform(rng, (4, 2, 3, 3, 3), 54)
        with self.assertRaises(ShapeError):
            ConvBlockSpec(weight, bias_uniform(rng, 3, 54), prelu_slopes(4))
        with self.assertRaises(ShapeError):
            ConvBlockSpec(weight, bias_uniform(rng, 4, 54), prelu_slopes(2))

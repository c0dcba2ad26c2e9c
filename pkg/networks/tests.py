"""
Unit tests for networks
"""
from collections import OrderedDict

from django.test import SimpleTestCase

import numpy as np

from tensorgrad.models import Tape, Tensor, default_dtype
from tensorgrad.ops import backward, huber_loss
from tensorgrad.utils import (check_parameter_gradients, finite_diff_check,
                              kaiming_uniform)

from networks.architecture import encoder_plan, parameter_shapes, trace_shapes
from networks.builder import (Model, build_lvadnet3d, build_model,
                              build_unet3d, condition_latent, forward,
                              parameter_count)
from networks.models import ConfigError, InputShapeError, ModelConfig


def tiny(architecture='lvadnet3d', **kwargs):
    '''Three-layer network on 8^3 inputs, latent 2^3'''
    schedule = ('maxpool', 'strided', 'none') if architecture == 'lvadnet3d' \
        else ('maxpool', 'maxpool', 'none')
    kwargs.setdefault('depth', 3)
    kwargs.setdefault('base_channels', 4)
    kwargs.setdefault('downsample_schedule', schedule)
    return ModelConfig(architecture=architecture, **kwargs)


def tiny_input(cfg, seed=0, batch=1):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((batch, cfg.input_channels, 8, 8, 8))


def normalized_bias(cfg, name):
    '''Biases that feed an instance norm have an exactly zero gradient'''
    prefix, _, kind = name.rpartition('.')
    if kind != 'bias' or prefix == 'head':
        return False
    return not (prefix == 'fuse' and cfg.architecture == 'lvadnet3d')


class ShapeLadderTests(SimpleTestCase):
    """Symbolic shape propagation"""

    def test_full_scale_ladder(self):
        """Channel ladder 2-16-16 | 16-16-32 | ... | 128-128-256"""
        ladder = [(l.c_in, l.c_mid, l.c_out)
                  for l in encoder_plan(ModelConfig.lvadnet3d())]
        self.assertEqual(ladder, [(2, 16, 16), (16, 16, 32), (32, 32, 64),
                                  (64, 64, 128), (128, 128, 256)])

    def test_full_scale_shapes(self):
        """[1,2,128^3] -> x_L [1,256,8^3] -> output [1,1,128^3]"""
        trace = trace_shapes(ModelConfig.lvadnet3d(), (1, 2, 128, 128, 128))
        self.assertEqual(trace['x_L'], (1, 256, 8, 8, 8))
        self.assertEqual(trace['z'], (1, 512, 8, 8, 8))
        self.assertEqual(trace['fused'], (1, 256, 8, 8, 8))
        self.assertEqual(trace['output'], (1, 1, 128, 128, 128))
        self.assertEqual(trace['down2'], (1, 32, 32, 32, 32))
        self.assertEqual(trace['down4'], (1, 128, 8, 8, 8))
        self.assertEqual(trace['cat1'], (1, 32, 128, 128, 128))

    def test_desk_shapes(self):
        """Divisor 4 at 32^3 keeps the topology"""
        cfg = ModelConfig.lvadnet3d(scale_divisor=4)
        trace = trace_shapes(cfg, (1, 2, 32, 32, 32))
        self.assertEqual(trace['x_L'], (1, 64, 2, 2, 2))
        self.assertEqual(trace['output'], (1, 1, 32, 32, 32))

    def test_desk_forward_matches_trace(self):
        """Recorded stage shapes equal the symbolic trace"""
        cfg = ModelConfig.lvadnet3d(scale_divisor=4)
        model = build_lvadnet3d(cfg)
        shapes = {}
        inputs = np.zeros((1, 2, 32, 32, 32), dtype=np.float32)
        out = model.forward(inputs, 0.5, shapes=shapes)
        self.assertEqual(out.shape, (1, 1, 32, 32, 32))
        self.assertEqual(shapes, dict(trace_shapes(cfg, inputs.shape)))

    def test_unet_shapes(self):
        """UNet3D bottleneck sits at 16^3 for 128^3 inputs"""
        trace = trace_shapes(ModelConfig.unet3d(), (1, 2, 128, 128, 128))
        self.assertEqual(trace['x_L'], (1, 128, 16, 16, 16))
        self.assertEqual(trace['output'], (1, 1, 128, 128, 128))

    def test_indivisible_extents_rejected(self):
        """Extents not divisible by the reduction factor are rejected"""
        with self.assertRaises(InputShapeError):
            trace_shapes(ModelConfig.lvadnet3d(), (1, 2, 120, 128, 128))
        model = build_model(tiny())
        with self.assertRaises(InputShapeError):
            model.forward(np.zeros((1, 2, 6, 8, 8)), 0.1)
        with self.assertRaisesRegex(InputShapeError, 'input channels'):
            model.forward(np.zeros((1, 3, 8, 8, 8)), 0.1)

    def test_skips_off_preserves_shapes(self):
        """Dropping skip connections changes no output shape"""
        on = tiny()
        off = tiny(skips=False)
        self.assertEqual(trace_shapes(on, (2, 2, 8, 8, 8))['output'],
                         trace_shapes(off, (2, 2, 8, 8, 8))['output'])
        out = build_model(off).forward(tiny_input(off, batch=2), [0.1, 0.2])
        self.assertEqual(out.shape, (2, 1, 8, 8, 8))


class ParameterTests(SimpleTestCase):
    """Parameter counts and state"""

    def test_count_single_conv(self):
        """A 1x1x1 256->256 conv with bias has 65,792 parameters"""
        self.assertEqual(parameter_count(OrderedDict(
            [('w', (256, 256, 1, 1, 1)), ('b', (256,))])), 65792)

    def test_doubling_width(self):
        """Doubling base channels roughly quadruples the count"""
        ratio = parameter_count(ModelConfig.lvadnet3d(base_channels=32)) / \
            float(parameter_count(ModelConfig.lvadnet3d(base_channels=16)))
        self.assertTrue(3.5 <= ratio <= 4.5, ratio)

    def test_lvadnet_larger_than_unet(self):
        self.assertGreater(parameter_count(ModelConfig.lvadnet3d()),
                           parameter_count(ModelConfig.unet3d()))

    def test_count_matches_allocation(self):
        model = build_model(tiny())
        self.assertEqual(parameter_count(model),
                         sum(p.size for p in model.parameters()))
        self.assertEqual(parameter_count(model), parameter_count(tiny()))

    def test_fusion_is_plain_conv(self):
        """LVADNet3D fuses with a 1x1x1 conv, UNet3D with a block"""
        shapes = parameter_shapes(ModelConfig.lvadnet3d())
        self.assertEqual(shapes['fuse.weight'], (256, 512, 1, 1, 1))
        self.assertNotIn('fuse.slope', shapes)
        shapes = parameter_shapes(ModelConfig.unet3d())
        self.assertEqual(shapes['fuse.weight'], (128, 256, 3, 3, 3))
        self.assertNotIn('fuse.weight', parameter_shapes(
            ModelConfig.lvadnet3d(conditioning='off')))

    def test_deterministic_init(self):
        """Same seed, same weights and outputs; another seed differs"""
        first = build_model(tiny(seed=3))
        second = build_model(tiny(seed=3))
        for (name, a), (_name, b) in zip(first.named_parameters(),
                                          second.named_parameters()):
            np.testing.assert_array_equal(a.values, b.values, err_msg=name)
        inputs = tiny_input(tiny())
        np.testing.assert_array_equal(first(inputs, 0.3).values,
                                      second(inputs, 0.3).values)
        other = build_model(tiny(seed=4))
        self.assertFalse(np.array_equal(first.params['enc1.a.weight'].values,
                                        other.params['enc1.a.weight'].values))

    def test_load_state(self):
        """State round trips; a skips=on state does not fit skips=off"""
        source = build_model(tiny(seed=1))
        target = build_model(tiny(seed=2))
        target.load_state(source.state_dict())
        inputs = tiny_input(tiny())
        np.testing.assert_array_equal(source(inputs, 0.2).values,
                                      target(inputs, 0.2).values)
        with self.assertRaises(ConfigError):
            build_model(tiny(skips=False)).load_state(source.state_dict())

    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            ModelConfig(architecture='resnet')
        with self.assertRaises(ConfigError):
            ModelConfig.lvadnet3d(depth=4)
        with self.assertRaises(ConfigError):
            ModelConfig.lvadnet3d(scale_divisor=3)
        with self.assertRaises(ConfigError):
            ModelConfig.lvadnet3d(conditioning='film')
        with self.assertRaises(ConfigError):
            build_unet3d(tiny())

    def test_config_round_trip(self):
        cfg = tiny(skips=False, conditioning='input')
        self.assertEqual(ModelConfig.from_dict(cfg.to_dict()), cfg)
        self.assertEqual(cfg.input_channels, 3)
        self.assertEqual(tiny(rdf=False, conditioning='off').input_channels, 1)


class ConditioningTests(SimpleTestCase):
    """Latent conditioning on v_in"""

    def test_full_scale_fusion(self):
        """[1,256,8^3] + scalar -> z [1,512,8^3] -> fused [1,256,8^3]"""
        rng = np.random.default_rng(0)
        params = {'fuse.weight': kaiming_uniform(rng, (256, 512, 1, 1, 1), 512),
                  'fuse.bias': Tensor(np.zeros(256))}
        y = Tensor(rng.standard_normal((1, 256, 8, 8, 8)))
        z, fused = condition_latent(y, Tensor([0.4]), params)
        self.assertEqual(z.shape, (1, 512, 8, 8, 8))
        self.assertEqual(fused.shape, (1, 256, 8, 8, 8))

    def test_zero_v_in(self):
        """v_in = 0 with zero bias is the conv of y_L with zero channels"""
        with default_dtype('float64'):
            rng = np.random.default_rng(1)
            weight = kaiming_uniform(rng, (4, 8, 1, 1, 1), 8)
            params = {'fuse.weight': weight, 'fuse.bias': Tensor(np.zeros(4))}
            y = rng.standard_normal((1, 4, 2, 2, 2))
            _z, fused = condition_latent(Tensor(y), Tensor([0.0]), params)
            padded = np.concatenate([y, np.zeros_like(y)], axis=1)
            expected = np.einsum('oi,nidhw->nodhw', weight.values[:, :, 0, 0, 0],
                                 padded)
            np.testing.assert_allclose(fused.values, expected, atol=1e-12)

    def test_latent_sensitivity(self):
        """Different v_in, different output"""
        model = build_model(tiny())
        inputs = tiny_input(tiny())
        diff = np.abs(model(inputs, 0.2).values - model(inputs, 0.8).values)
        self.assertGreater(diff.max(), 0.0)

    def test_off_ignores_v_in(self):
        """conditioning=off is bit-exact independent of v_in"""
        cfg = tiny(conditioning='off')
        model = build_model(cfg)
        inputs = tiny_input(cfg)
        np.testing.assert_array_equal(model(inputs, 0.2).values,
                                      model(inputs, 0.8).values)

    def test_gradient_reaches_v_in(self):
        """d loss / d v_in is nonzero and matches finite differences"""
        with default_dtype('float64'):
            cfg = tiny()
            model = build_model(cfg)
            inputs = Tensor(tiny_input(cfg))
            target = np.random.default_rng(5).standard_normal((1, 1, 8, 8, 8))

            def loss(v_in):
                return huber_loss(model(inputs, v_in), target)

            v_in = Tensor([0.3], requires_grad=True)
            with Tape():
                value = loss(v_in)
            backward(value)
            self.assertNotEqual(float(v_in.grad[0]), 0.0)
            self.assertLess(finite_diff_check(loss, np.array([0.3])), 1e-4)

    def test_no_gradient_without_conditioning(self):
        """With conditioning off v_in receives exactly zero gradient"""
        with default_dtype('float64'):
            cfg = tiny(conditioning='off')
            model = build_model(cfg)
            v_in = Tensor([0.3], requires_grad=True)
            with Tape():
                value = huber_loss(model(tiny_input(cfg), v_in),
                                   np.zeros((1, 1, 8, 8, 8)))
            backward(value)
            self.assertTrue(v_in.grad is None or not np.any(v_in.grad))

    def test_input_conditioning(self):
        """conditioning=input reads v_in from an extra input channel"""
        cfg = tiny(conditioning='input')
        model = build_model(cfg)
        self.assertNotIn('fuse.weight', model.params)
        out = model(tiny_input(cfg), 0.0)
        self.assertEqual(out.shape, (1, 1, 8, 8, 8))

    def test_model_condition_latent(self):
        model = build_model(tiny())
        fused = model.condition_latent(Tensor(np.ones((1, 16, 2, 2, 2))), 0.5)
        self.assertEqual(fused.shape, (1, 16, 2, 2, 2))
        with self.assertRaises(ConfigError):
            build_model(tiny(conditioning='off')).condition_latent(
                Tensor(np.ones((1, 16, 2, 2, 2))), 0.5)


class ForwardTests(SimpleTestCase):
    """End-to-end forward and backward"""

    def test_unet_forward(self):
        cfg = tiny('unet3d')
        out = build_unet3d(cfg).forward(tiny_input(cfg), 0.4)
        self.assertEqual(out.shape, (1, 1, 8, 8, 8))
        self.assertTrue(np.all(np.isfinite(out.values)))

    def test_single_sample_forward(self):
        """[C, D, H, W] in, [1, D, H, W] out"""
        cfg = tiny()
        out = forward(build_model(cfg), tiny_input(cfg)[0], 0.4)
        self.assertEqual(out.shape, (1, 8, 8, 8))

    def test_non_finite_v_in_rejected(self):
        with self.assertRaises(InputShapeError):
            build_model(tiny())(tiny_input(tiny()), float('nan'))

    def test_parameter_gradients(self):
        """Tape gradients of randomly chosen desk-scale weights match finite
        differences"""
        with default_dtype('float64'):
            cfg = ModelConfig.lvadnet3d(scale_divisor=4)
            model = build_model(cfg)
            rng = np.random.default_rng(11)
            inputs = Tensor(rng.standard_normal((1, cfg.input_channels, 32, 32, 32)))
            target = rng.standard_normal((1, 1, 32, 32, 32))

            def loss_fn():
                return huber_loss(model(inputs, 0.35), target)

            names = [name for name in model.params if not normalized_bias(cfg, name)]
            samples = []
            for _ in range(10):
                param = model.params[names[rng.integers(len(names))]]
                samples.append((param, int(rng.integers(param.size))))
            error = check_parameter_gradients(loss_fn, model.parameters(), samples)
        self.assertLess(error, 1e-3)

    def test_small_unet_parameter_gradients(self):
        with default_dtype('float64'):
            cfg = tiny('unet3d')
            model = build_model(cfg)
            inputs = Tensor(tiny_input(cfg, seed=2))
            target = np.random.default_rng(3).standard_normal((1, 1, 8, 8, 8))

            def loss_fn():
                return huber_loss(model(inputs, 0.35), target)

            samples = [(model.params[name], index) for name, index in (
                ('enc1.a.weight', 5), ('enc2.b.slope', 1),
                ('fuse.weight', 3), ('dec1.up.weight', 7),
                ('dec1.a.slope', 2), ('head.weight', 11), ('head.bias', 0))]
            error = check_parameter_gradients(loss_fn, model.parameters(), samples)
        self.assertLess(error, 1e-4)

    def test_single_sample_forward_keeps_tape(self):
        """The [C, D, H, W] form gives the same gradients as a batch of one"""
        with default_dtype('float64'):
            cfg = tiny()
            model = build_model(cfg)
            inputs = tiny_input(cfg, seed=4)
            target = np.random.default_rng(5).standard_normal((1, 1, 8, 8, 8))
            grads = []
            for values, wanted in ((inputs[0], target[0]), (inputs, target)):
                for param in model.parameters():
                    param.zero_grad()
                with Tape():
                    loss = huber_loss(forward(model, values, 0.3), wanted)
                backward(loss)
                grads.append(OrderedDict((name, param.grad.copy())
                                         for name, param in model.params.items()
                                         if param.grad is not None))
        self.assertTrue(grads[0])
        self.assertEqual(list(grads[0]), list(grads[1]))
        for name in grads[0]:
            np.testing.assert_allclose(grads[0][name], grads[1][name], rtol=1e-12,
                                       atol=1e-15, err_msg=name)

"""
Unit tests for trainer
"""
import os
import shutil
import tempfile
from collections import OrderedDict
from unittest.mock import patch

from django.test import SimpleTestCase, tag

import numpy as np

from datapipe.models import Sample
from networks.builder import Model
from networks.models import ModelConfig
from tensorgrad.models import Tensor
from tensorgrad.ops import backward as real_backward

from trainer.checkpoint import (decode_checkpoint, encode_checkpoint,
                                load_checkpoint, save_checkpoint)
from trainer.loop import BatchProducer, read_metrics, train
from trainer.models import (AdamState, Checkpoint, CheckpointError, EpochRow,
                            METRICS_COLUMNS, TrainConfig, TrainingDiverged,
                            TrainingError, config_fingerprint)
from trainer.optim import adam_step, cosine_lr

# single-sample fitting: held above zero so the last steps still move
OVERFIT_CONFIG = TrainConfig(epochs=500, batch_size=1, lr0=5e-3, lr_min=5e-4)


def tiny_model(seed=0, **kwargs):
    cfg = ModelConfig(architecture='lvadnet3d', depth=3, base_channels=4,
                      downsample_schedule=('maxpool', 'strided', 'none'),
                      seed=seed, **kwargs)
    return Model(cfg)


def make_sample(index, size=8):
    rng = np.random.default_rng(100 + index)
    idx = np.arange(size) - (size - 1) / 2.0
    z, y, x = np.meshgrid(idx, idx, idx, indexing='ij')
    mask = (x ** 2 + y ** 2 + z ** 2 <= (size / 2.0) ** 2).astype(np.float32)
    sparse = mask * (rng.uniform(size=mask.shape) < 0.2)
    fields = [(np.sin(x / 3.0 + index) * mask).astype(np.float32),
              (np.cos(y / 3.0) * mask).astype(np.float32),
              (0.1 * z * mask).astype(np.float32)]
    rdf = (mask * np.sqrt(x ** 2 + y ** 2 + z ** 2) / size).astype(np.float32)
    return Sample(vx=fields[0], vy=fields[1], vz=fields[2], rdf=rdf,
                  ventricle_mask=mask, sparse_mask=sparse.astype(np.float32),
                  v_in=0.2 + 0.1 * index, geometry_id='geom-%02d' % index,
                  run_id='run-%02d' % index)


def state_equal(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a) and a.keys() == b.keys()


class Interrupted(Exception):
    pass


class TempDirMixin(object):

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir, ignore_errors=True)


class ScheduleTests(SimpleTestCase):
    """Cosine learning-rate decay"""

    def test_endpoints_and_midpoint(self):
        self.assertEqual(cosine_lr(0, 100, 1e-3), 1e-3)
        self.assertAlmostEqual(cosine_lr(100, 100, 1e-3), 0.0, places=15)
        self.assertAlmostEqual(cosine_lr(50, 100, 1e-3), 5e-4, places=15)

    def test_floor(self):
        self.assertAlmostEqual(cosine_lr(40, 40, 1e-3, lr_min=1e-5), 1e-5,
                               places=15)

    def test_symmetry(self):
        total = 37
        for step in range(total + 1):
            self.assertAlmostEqual(
                cosine_lr(step, total, 1e-3, 2e-4)
                + cosine_lr(total - step, total, 1e-3, 2e-4),
                1.2e-3, places=14)

    def test_out_of_range(self):
        with self.assertRaises(TrainingError):
            cosine_lr(11, 10, 1e-3)
        with self.assertRaises(TrainingError):
            cosine_lr(0, 0, 1e-3)


class AdamTests(SimpleTestCase):
    """Bias-corrected Adam"""

    def params(self, *sizes):
        return OrderedDict(('p%d' % i, Tensor(np.linspace(-1, 1, n),
                                              requires_grad=True,
                                              dtype=np.float64))
                           for i, n in enumerate(sizes))

    def test_first_step_magnitude_is_lr(self):
        params = self.params(5)
        before = params['p0'].values.copy()
        grad = np.full(5, 0.37)
        adam_step(params, {'p0': grad}, AdamState(), lr=1e-3)
        np.testing.assert_allclose(before - params['p0'].values,
                                   np.full(5, 1e-3), rtol=1e-6)

    def test_zero_gradient_leaves_parameters(self):
        params = self.params(4)
        before = params['p0'].values.copy()
        state = AdamState()
        adam_step(params, {'p0': np.zeros(4)}, state, lr=1e-3)
        adam_step(params, {'p0': None}, state, lr=1e-3)
        np.testing.assert_array_equal(params['p0'].values, before)
        self.assertEqual(state.step, 2)

    def test_moments_do_not_mix(self):
        first, second = self.params(3, 3), self.params(3, 3)
        grads = {'p0': np.array([0.1, -0.2, 0.3]), 'p1': np.array([1.0, 2.0, 3.0])}
        perturbed = dict(grads, p0=np.array([5.0, 5.0, -5.0]))
        adam_step(first, grads, AdamState(), lr=1e-2)
        adam_step(second, perturbed, AdamState(), lr=1e-2)
        np.testing.assert_array_equal(first['p1'].values, second['p1'].values)

    def test_non_finite_gradient_rejected(self):
        params = self.params(3, 2)
        before = [p.values.copy() for p in params.values()]
        state = AdamState()
        with self.assertRaises(TrainingError):
            adam_step(params, {'p0': np.ones(3), 'p1': np.array([1.0, np.nan])},
                      state, lr=1e-3)
        self.assertEqual(state.step, 0)
        self.assertEqual(len(state.m), 0)
        for p, b in zip(params.values(), before):
            np.testing.assert_array_equal(p.values, b)

    def test_shape_mismatch(self):
        with self.assertRaises(TrainingError):
            adam_step(self.params(3), {'p0': np.ones(4)}, AdamState(), lr=1e-3)


class CheckpointTests(TempDirMixin, SimpleTestCase):
    """SFCK files"""

    def make(self, skips=True):
        model = tiny_model(skips=skips)
        cfg = TrainConfig(epochs=2)
        state = AdamState()
        grads = {n: np.full(p.shape, 0.01, dtype=np.float32)
                 for n, p in model.params.items()}
        adam_step(model.params, grads, state, lr=1e-3)
        rng = np.random.default_rng(5)
        rng.permutation(10)
        return model, cfg, Checkpoint(
            params=model.state_dict(), adam=state.copy(), epoch=1,
            fingerprint=config_fingerprint(model.fingerprint(), cfg),
            rng_state=rng.bit_generator.state, best_val=0.25, best_epoch=0,
            rows=[EpochRow(0, 4, 5e-4, 0.3, 0.25, 0)], meta={'note': 'x'})

    def test_round_trip(self):
        model, cfg, ckpt = self.make()
        path = save_checkpoint(os.path.join(self.tmpdir, 'c.sfck'), ckpt)
        loaded = load_checkpoint(path, ckpt.fingerprint)
        self.assertTrue(state_equal(loaded.params, ckpt.params))
        self.assertTrue(state_equal(loaded.adam.m, ckpt.adam.m))
        self.assertTrue(state_equal(loaded.adam.v, ckpt.adam.v))
        self.assertEqual(loaded.step, 1)
        self.assertEqual(loaded.epoch, 1)
        self.assertEqual(loaded.rows, ckpt.rows)
        self.assertEqual(loaded.meta, {'note': 'x'})
        rng = np.random.default_rng()
        rng.bit_generator.state = loaded.rng_state
        expected = np.random.default_rng(5)
        expected.permutation(10)
        np.testing.assert_array_equal(rng.permutation(10), expected.permutation(10))

    def test_encoding_is_deterministic(self):
        _model, _cfg, ckpt = self.make()
        self.assertEqual(encode_checkpoint(ckpt), encode_checkpoint(ckpt))

    def test_corruption_rejected(self):
        _model, _cfg, ckpt = self.make()
        data = bytearray(encode_checkpoint(ckpt))
        data[len(data) // 2] ^= 0x01
        with self.assertRaises(CheckpointError):
            decode_checkpoint(bytes(data))
        with self.assertRaises(CheckpointError):
            decode_checkpoint(bytes(data[:-20]))
        with self.assertRaises(CheckpointError):
            decode_checkpoint(b'XXXX' + bytes(data[4:]))

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(os.path.join(self.tmpdir, 'absent.sfck'))

    def test_skip_fingerprint_refused(self):
        _model, cfg, ckpt = self.make(skips=True)
        path = save_checkpoint(os.path.join(self.tmpdir, 'c.sfck'), ckpt)
        other = tiny_model(skips=False)
        with self.assertRaises(CheckpointError):
            load_checkpoint(path, config_fingerprint(other.fingerprint(), cfg))

    def test_resumed_step_is_bit_exact(self):
        model, _cfg, ckpt = self.make()
        path = save_checkpoint(os.path.join(self.tmpdir, 'c.sfck'), ckpt)
        rng = np.random.default_rng(9)
        grads = {n: rng.standard_normal(p.shape).astype(np.float32)
                 for n, p in model.params.items()}

        adam_step(model.params, grads, ckpt.adam, lr=7e-4)

        loaded = load_checkpoint(path)
        restored = tiny_model()
        restored.load_state(loaded.params)
        adam_step(restored.params, grads, loaded.adam, lr=7e-4)
        self.assertTrue(state_equal(restored.state_dict(), model.state_dict()))
        self.assertTrue(state_equal(loaded.adam.m, ckpt.adam.m))
        self.assertTrue(state_equal(loaded.adam.v, ckpt.adam.v))


class BatchProducerTests(SimpleTestCase):

    def test_order_preserved(self):
        samples = [make_sample(i) for i in range(5)]
        order = [3, 0, 4, 1, 2]
        batches = list(BatchProducer(samples, order, 2, 'x', depth=1))
        self.assertEqual([b[0].shape[0] for b in batches], [2, 2, 1])
        v_in = np.concatenate([b[2] for b in batches])
        np.testing.assert_allclose(v_in, [samples[i].v_in for i in order],
                                   rtol=1e-6)

    def test_producer_error_reaches_consumer(self):
        samples = [make_sample(0)]
        samples[0].rdf = None
        with self.assertRaises(Exception):
            list(BatchProducer(samples, [0], 1, 'x', rdf=True))


class TrainTests(TempDirMixin, SimpleTestCase):
    """Training loop"""

    def setUp(self):
        super().setUp()
        self.train_samples = [make_sample(i) for i in range(4)]
        self.val_samples = [make_sample(9)]

    def run_training(self, output_dir=None, **kwargs):
        kwargs.setdefault('epochs', 2)
        kwargs.setdefault('batch_size', 2)
        model = tiny_model()
        result = train(model, self.train_samples, self.val_samples,
                       TrainConfig(**kwargs), output_dir=output_dir)
        return model, result

    def test_one_epoch_writes_one_row(self):
        out = os.path.join(self.tmpdir, 'run')
        _model, result = self.run_training(out, epochs=1)
        self.assertEqual(len(result.rows), 1)
        self.assertEqual(result.steps, 2)
        with open(result.metrics_path) as fileref:
            lines = fileref.read().splitlines()
        self.assertEqual(lines[0], ','.join(METRICS_COLUMNS))
        self.assertEqual(len(lines), 2)
        self.assertTrue(os.path.exists(os.path.join(out, 'last.sfck')))
        self.assertTrue(os.path.exists(os.path.join(out, 'best.sfck')))
        self.assertTrue(np.isfinite(result.rows[0].val_huber))

    def test_lr_trace_matches_schedule(self):
        _model, result = self.run_training(epochs=3, lr0=2e-3, lr_min=1e-4)
        total = 6
        self.assertEqual(len(result.lr_trace), total)
        for step, lr in enumerate(result.lr_trace):
            self.assertEqual(lr, cosine_lr(step, total, 2e-3, 1e-4))

    def test_identical_seeds_identical_curves(self):
        first_model, first = self.run_training()
        second_model, second = self.run_training()
        self.assertEqual(first.train_losses, second.train_losses)
        self.assertEqual([r.val_huber for r in first.rows],
                         [r.val_huber for r in second.rows])
        self.assertTrue(state_equal(first_model.state_dict(),
                                    second_model.state_dict()))

    def test_checkpoints_identical_across_reruns(self):
        a, b = os.path.join(self.tmpdir, 'a'), os.path.join(self.tmpdir, 'b')
        self.run_training(a, epochs=1)
        self.run_training(b, epochs=1)
        with open(os.path.join(a, 'last.sfck'), 'rb') as fa, \
                open(os.path.join(b, 'last.sfck'), 'rb') as fb:
            self.assertEqual(fa.read(), fb.read())

    def test_resume_matches_uninterrupted(self):
        full_model, full = self.run_training(os.path.join(self.tmpdir, 'full'),
                                             epochs=3)
        out = os.path.join(self.tmpdir, 'resumed')
        cfg = TrainConfig(epochs=3, batch_size=2)

        def stop_after_first(**kwargs):
            raise Interrupted()

        with self.assertRaises(Interrupted):
            train(tiny_model(), self.train_samples, self.val_samples, cfg,
                  output_dir=out, output_fn=stop_after_first)
        self.assertEqual(len(read_metrics(os.path.join(out, 'metrics.csv'))), 1)

        model = tiny_model(seed=42)
        result = train(model, self.train_samples, self.val_samples, cfg,
                       output_dir=out, resume=True)
        self.assertEqual([r.step for r in result.rows], [2, 4, 6])
        self.assertEqual(result.train_losses, full.train_losses)
        self.assertTrue(state_equal(model.state_dict(), full_model.state_dict()))

    def test_resume_requires_checkpoint(self):
        with self.assertRaises(TrainingError):
            train(tiny_model(), self.train_samples, [], TrainConfig(epochs=1),
                  output_dir=self.tmpdir, resume=True)

    def test_resume_with_other_config_refused(self):
        self.run_training(self.tmpdir, epochs=1)
        with self.assertRaises(CheckpointError):
            train(tiny_model(), self.train_samples, [],
                  TrainConfig(epochs=1, batch_size=2, lr0=5e-3),
                  output_dir=self.tmpdir, resume=True)

    def test_divergence_saves_last_finite_state(self):
        model = tiny_model()
        before = model.state_dict()

        def nan_loss(pred, target, delta):
            return Tensor(np.array(np.nan, dtype=np.float32))

        with patch('trainer.loop.huber_loss', side_effect=nan_loss):
            with self.assertRaises(TrainingDiverged) as ctx:
                train(model, self.train_samples, [], TrainConfig(epochs=1),
                      output_dir=self.tmpdir)
        self.assertEqual(ctx.exception.step, 0)
        saved = load_checkpoint(ctx.exception.checkpoint)
        self.assertTrue(state_equal(saved.params, before))

    def test_non_finite_gradient_steps_rejected(self):
        model = tiny_model()
        before = model.state_dict()
        first = next(iter(model.params.values()))

        def poisoned(loss):
            real_backward(loss)
            first.grad = np.full(first.shape, np.inf, dtype=first.dtype)

        with patch('trainer.loop.backward', side_effect=poisoned):
            with self.assertLogs('trainer.loop', level='WARNING'):
                result = train(model, self.train_samples, [],
                               TrainConfig(epochs=1, batch_size=2))
        self.assertEqual(result.rejected_steps, 2)
        self.assertTrue(state_equal(model.state_dict(), before))

    def test_empty_training_set(self):
        with self.assertRaises(TrainingError):
            train(tiny_model(), [], [], TrainConfig(epochs=1))

    def test_input_conditioning_trains(self):
        model = tiny_model(conditioning='input')
        result = train(model, self.train_samples, [],
                       TrainConfig(epochs=1, batch_size=4))
        self.assertEqual(result.steps, 1)

    def test_overfit_single_sample_tiny(self):
        """A held learning rate lets a small model fit one sample closely"""
        sample = make_sample(0)
        result = train(tiny_model(), [sample], [], OVERFIT_CONFIG.replace(epochs=150))
        losses = np.array(result.train_losses)
        self.assertLess(losses.min(), 0.1 * losses[0])
        windows = losses.reshape(-1, 25).mean(axis=1)
        self.assertLess(windows[-1], windows[0])

    @tag('slow')
    def test_overfit_single_desk_sample(self):
        """Desk-scale LVADNet3D drives the Huber loss below 1e-4 within 500
        steps on one sample"""
        sample = make_sample(0, size=32)
        model = Model(ModelConfig.lvadnet3d(scale_divisor=4))
        result = train(model, [sample], [], OVERFIT_CONFIG)
        losses = np.array(result.train_losses)
        self.assertEqual(len(losses), 500)
        self.assertLess(losses.min(), 1e-4)
        windows = losses.reshape(-1, 50).mean(axis=1)
        self.assertTrue(np.all(np.diff(windows) <= 1e-6))

"""
Unit tests for evalkit
"""
import math
import os
import shutil
import tempfile
from unittest.mock import patch

from django.test import SimpleTestCase, tag

import numpy as np
from PIL import Image

from datapipe.dataset import build_dataset
from datapipe.folds import read_folds
from datapipe.manifest import SampleStore
from flowgen.models import FlowSnapshot, GridSpec, SolverConfig
from flowgen.population import Population, generate_population, plan_population
from networks.builder import build_model
from networks.models import ModelConfig
from trainer.models import TrainConfig

from evalkit import metrics
from evalkit.ablation import run_ablation, suite_variants
from evalkit.evaluate import evaluate_components, model_id, predict
from evalkit.export import colorize, export_slices
from evalkit.models import EvalError, MetricReport, MetricShapeError, MissingComponentError
from evalkit.reports import mean_rows, read_report, write_report


def tiny_lvadnet(**kwargs):
    return ModelConfig.lvadnet3d(depth=3, base_channels=4,
                                 downsample_schedule=('maxpool', 'strided', 'none'),
                                 **kwargs)


def tiny_unet(**kwargs):
    return ModelConfig.unet3d(depth=3, base_channels=4,
                              downsample_schedule=('maxpool', 'maxpool', 'none'),
                              **kwargs)


def fake_snapshot(geometry_id, v_in, seed, size=12):
    idx = np.arange(size) - (size - 1) / 2.0
    z, y, x = np.meshgrid(idx, idx, idx, indexing='ij')
    mask = (x ** 2 + y ** 2 + z ** 2 <= (size / 2.0 - 1) ** 2).astype(np.float64)
    rng = np.random.default_rng(seed)
    fields = [rng.uniform(-0.2, 0.2, mask.shape) * mask for _ in range(3)]
    return FlowSnapshot(vx=fields[0], vy=fields[1], vz=fields[2], mask=mask,
                        v_in=v_in, geometry_id=geometry_id, time_index=10)


class TempDirMixin(object):

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir, ignore_errors=True)


class DatasetMixin(TempDirMixin):
    '''Three geometries, two runs each, 12^3 samples, three folds'''

    def setUp(self):
        super().setUp()
        plan = plan_population(seed=0, n_geometries=3, inlets_per_geometry=2)
        population = Population(plan=plan)
        for index, run in enumerate(plan.runs):
            population.snapshots[run.run_id] = [
                fake_snapshot(run.geometry_id, run.v_in, seed=index)]
        self.dataset_dir = os.path.join(self.tmpdir, 'data')
        build_dataset(population, self.dataset_dir, seed=1, k=3)
        self.store = SampleStore(self.dataset_dir)
        self.folds = read_folds(self.dataset_dir)
        self.test_samples = self.store.fold_samples(self.folds[0])['test']


class MetricTests(SimpleTestCase):
    """mse, mae, rmse, psnr and the velocity magnitude"""

    def setUp(self):
        rng = np.random.default_rng(3)
        self.truth = rng.standard_normal((6, 5, 4))
        self.pred = self.truth + 0.1 * rng.standard_normal((6, 5, 4))

    def test_identity(self):
        self.assertEqual(metrics.mse(self.truth, self.truth), 0.0)
        self.assertEqual(metrics.mae(self.truth, self.truth), 0.0)
        self.assertEqual(metrics.rmse(self.truth, self.truth), 0.0)
        self.assertEqual(metrics.psnr(self.truth, self.truth), float('inf'))

    def test_constant_error(self):
        pred = self.truth + 0.1
        self.assertAlmostEqual(metrics.mse(pred, self.truth), 0.01, places=12)
        self.assertAlmostEqual(metrics.mae(pred, self.truth), 0.1, places=12)
        self.assertAlmostEqual(metrics.rmse(pred, self.truth), 0.1, places=12)

    def test_reference_arithmetic(self):
        """rmse and psnr match reference values to their rounding"""
        self.assertEqual(round(math.sqrt(1.90e-3), 4), 0.0436)
        self.assertAlmostEqual(metrics.psnr_from_mse(1.90e-3), 27.21, delta=0.005)
        self.assertAlmostEqual(metrics.psnr_from_mse(1.90e-3), 27.22, delta=0.02)
        self.assertEqual(round(metrics.psnr_from_mse(5.03e-2), 2), 12.98)

    def test_psnr_identity_at_unit_peak(self):
        value = metrics.mse(self.pred, self.truth)
        self.assertAlmostEqual(metrics.psnr(self.pred, self.truth),
                               -10.0 * math.log10(value), places=10)

    def test_psnr_decreases_with_mse(self):
        values = [metrics.psnr_from_mse(m, peak=2.0) for m in (1e-4, 1e-3, 1e-2, 1.0)]
        self.assertTrue(all(a > b for a, b in zip(values, values[1:])))

    def test_bad_peak(self):
        with self.assertRaises(EvalError):
            metrics.psnr_from_mse(0.1, peak=0)

    def test_symmetry_and_bounds(self):
        self.assertEqual(metrics.mse(self.pred, self.truth),
                         metrics.mse(self.truth, self.pred))
        self.assertEqual(metrics.mae(self.pred, self.truth),
                         metrics.mae(self.truth, self.pred))
        self.assertLessEqual(metrics.mae(self.pred, self.truth),
                             metrics.rmse(self.pred, self.truth))
        result = metrics.score(self.pred, self.truth)
        self.assertAlmostEqual(result['rmse'] ** 2, result['mse'],
                               delta=1e-12 * result['mse'])

    def test_shape_mismatch(self):
        with self.assertRaisesRegex(MetricShapeError, r'\[6, 5, 4\]'):
            metrics.mse(self.truth, self.truth[:, :, :3])
        with self.assertRaises(MetricShapeError):
            metrics.velocity_magnitude(np.zeros(3), np.zeros(3), np.zeros(4))

    def test_mask_restricts_domain(self):
        pred = np.zeros((2, 2, 2))
        truth = np.zeros((2, 2, 2))
        truth[0, 0, 0] = 1.0
        mask = np.zeros((2, 2, 2))
        mask[0, 0, :] = 1
        self.assertAlmostEqual(metrics.mse(pred, truth), 1.0 / 8)
        self.assertAlmostEqual(metrics.mse(pred, truth, mask), 0.5)
        with self.assertRaises(EvalError):
            metrics.mse(pred, truth, np.zeros((2, 2, 2)))

    def test_velocity_magnitude(self):
        self.assertEqual(metrics.velocity_magnitude(3.0, 4.0, 0.0), 5.0)
        np.testing.assert_array_equal(
            metrics.velocity_magnitude(*np.zeros((3, 2, 2, 2))), np.zeros((2, 2, 2)))
        v = np.linspace(-2, 2, 9)
        np.testing.assert_array_equal(
            metrics.velocity_magnitude(v, np.zeros(9), np.zeros(9)), np.abs(v))


class EvaluateTests(DatasetMixin, SimpleTestCase):
    """evaluate_components"""

    def models(self, components=('x', 'y', 'z')):
        return {c: build_model(tiny_lvadnet(seed=i)) for i, c in enumerate(components)}

    def test_perfect_models(self):
        with patch('evalkit.evaluate.predict',
                   side_effect=lambda model, sample, component: sample.component(component)):
            rows = evaluate_components(self.models(), self.test_samples, fold=2)
        self.assertEqual([r.component for r in rows], ['x', 'y', 'z', 'magnitude'])
        for row in rows:
            self.assertEqual(row.mse, 0.0)
            self.assertEqual(row.mae, 0.0)
            self.assertEqual(row.psnr_db, float('inf'))
            self.assertEqual(row.fold, 2)

    def test_magnitude_matches_direct_evaluation(self):
        models = self.models()
        rows = evaluate_components(models, self.test_samples)
        preds = [np.stack([predict(models[c], s, c) for s in self.test_samples])
                 for c in 'xyz']
        truths = [np.stack([s.component(c) for s in self.test_samples]) for c in 'xyz']
        direct = metrics.mse(metrics.velocity_magnitude(*preds),
                             metrics.velocity_magnitude(*truths))
        self.assertAlmostEqual(rows[-1].mse, direct, places=12)
        for row in rows:
            self.assertTrue(np.isfinite(row.mse))
            self.assertAlmostEqual(row.rmse ** 2, row.mse, delta=1e-12)

    def test_missing_component(self):
        with self.assertRaises(MissingComponentError):
            evaluate_components(self.models(('x', 'y')), self.test_samples)
        with self.assertLogs('evalkit.evaluate', level='WARNING'):
            rows = evaluate_components(self.models(('x', 'y')), self.test_samples,
                                       require_all=False)
        self.assertEqual([r.component for r in rows], ['x', 'y'])

    def test_in_mask_flag(self):
        models = self.models()
        full = evaluate_components(models, self.test_samples)
        inside = evaluate_components(models, self.test_samples, in_mask=True)
        self.assertNotEqual(full[0].mse, inside[0].mse)

    def test_report_flags(self):
        rows = evaluate_components(
            {'x': build_model(tiny_lvadnet(rdf=False, conditioning='off', skips=False))},
            self.test_samples, require_all=False)
        self.assertEqual(rows[0].model, 'lvadnet3d-noskip')
        self.assertFalse(rows[0].rdf)
        self.assertFalse(rows[0].vin)
        self.assertEqual(model_id(tiny_unet()), 'unet3d')


class ReportTests(TempDirMixin, SimpleTestCase):
    """Report CSV files"""

    def reports(self):
        return [MetricReport('lvadnet3d', 'x', 0.01, 0.08, 0.1, 20.0, fold=0),
                MetricReport('lvadnet3d', 'x', 0.03, 0.12, math.sqrt(0.03),
                             metrics.psnr_from_mse(0.03), fold=1),
                MetricReport('unet3d', 'x', 0.0, 0.0, 0.0, float('inf'), fold=0)]

    def test_mean_rows(self):
        rows = mean_rows(self.reports())
        self.assertEqual(len(rows), 2)
        self.assertAlmostEqual(rows[0].mse, 0.02)
        self.assertAlmostEqual(rows[0].mae, 0.1)
        self.assertAlmostEqual(rows[0].rmse ** 2, rows[0].mse)
        self.assertEqual(rows[0].fold, 'mean')

    def test_write_and_read(self):
        path = os.path.join(self.tmpdir, 'report.csv')
        self.assertEqual(write_report(path, self.reports()), 5)
        with open(path, encoding='utf-8') as fileref:
            lines = fileref.read().splitlines()
        self.assertEqual(lines[0], 'model,component,sparse,rdf,vin,fold,seed,'
                                   'mse,mae,rmse,psnr_db')
        self.assertTrue(lines[3].endswith(',inf'))
        rows = read_report(path)
        self.assertEqual(rows[:3], self.reports())
        self.assertEqual(rows[-1].psnr_db, float('inf'))

    def test_unwritable(self):
        with self.assertRaises(EvalError):
            write_report(os.path.join(self.tmpdir, 'missing', 'r.csv'), self.reports())


class ExportTests(TempDirMixin, SimpleTestCase):
    """Slice export"""

    def test_ramp_endpoints(self):
        image = colorize(np.array([[0.0, 0.5, 1.0]]), 0.0, 1.0)
        self.assertEqual(image[0].tolist(), [[0, 0, 255], [0, 255, 0], [255, 255, 0]])
        self.assertEqual(colorize(np.ones((2, 2)), 1.0, 1.0)[0, 0].tolist(), [0, 0, 255])

    def test_export_writes_images_and_values(self):
        rng = np.random.default_rng(0)
        truth = rng.standard_normal((6, 8, 10))
        paths = export_slices(truth + 0.1, truth, 'x', self.tmpdir, prefix='run-1')
        self.assertEqual([os.path.basename(p) for p in paths],
                         ['run-1_x_pred.ppm', 'run-1_x_true.ppm', 'run-1_x_slice.csv'])
        with Image.open(paths[0]) as image:
            # the x slice fixes the last axis, leaving depth x height
            self.assertEqual(image.size, (8, 6))
            self.assertEqual(image.mode, 'RGB')
        with open(paths[2], encoding='utf-8') as fileref:
            self.assertEqual(len(fileref.read().splitlines()), 1 + 6 * 8)

    def test_magnitude_and_mismatch(self):
        volume = np.zeros((4, 4, 4))
        paths = export_slices(volume, volume, 'magnitude', self.tmpdir)
        self.assertTrue(all(os.path.exists(p) for p in paths))
        with self.assertRaises(MetricShapeError):
            export_slices(volume, volume[:2], 'x', self.tmpdir)


class AblationTests(DatasetMixin, SimpleTestCase):
    """Ablation suites"""

    def run_suite(self, suite, **kwargs):
        kwargs.setdefault('fit', False)
        return run_ablation(suite, self.store, self.folds[:1], tiny_lvadnet(),
                            TrainConfig(epochs=1, batch_size=2),
                            unet_base=tiny_unet(), **kwargs)

    def test_suite_shapes(self):
        self.assertEqual(len(suite_variants('skip', tiny_lvadnet())), 6)
        self.assertEqual(len(suite_variants('inputs', tiny_lvadnet(),
                                            unet_base=tiny_unet())), 6)
        self.assertEqual(len(suite_variants('models', tiny_lvadnet(),
                                            unet_base=tiny_unet())), 2)
        with self.assertRaises(EvalError):
            suite_variants('dropout', tiny_lvadnet())

    def test_skip_suite_untrained(self):
        result = self.run_suite('skip')
        self.assertEqual(len(result.table), 6)
        self.assertEqual({r.model for r in result.table},
                         {'lvadnet3d', 'lvadnet3d-noskip'})
        self.assertEqual(sorted({r.component for r in result.table}), ['x', 'y', 'z'])
        for row in result.table:
            self.assertTrue(np.isfinite(row.mse))

    def test_inputs_suite_untrained(self):
        result = self.run_suite('inputs')
        self.assertEqual(len(result.table), 6)
        self.assertEqual({r.component for r in result.table}, {'magnitude'})
        flags = {(r.model, r.rdf, r.vin) for r in result.table}
        self.assertIn(('lvadnet3d', False, False), flags)
        self.assertIn(('unet3d', True, True), flags)

    def test_models_suite_untrained(self):
        result = self.run_suite('models')
        self.assertEqual(len(result.table), 8)

    def test_trained_suite_with_seeds(self):
        out = os.path.join(self.tmpdir, 'runs')
        result = self.run_suite('skip', components=('x',), seeds=(0, 1),
                                fit=True, output_dir=out)
        self.assertEqual(len(result.reports), 4)
        self.assertEqual(len(result.table), 2)
        self.assertEqual(len(os.listdir(out)), 4)
        for row in result.table:
            self.assertEqual(row.seed, 'mean')
            self.assertTrue(np.isfinite(row.mse))


@tag('slow')
class AblationDirectionTests(TempDirMixin, SimpleTestCase):
    """Trained ablations on a reduced simulated population rank the
    configurations the expected way"""

    SEEDS = (0, 1, 2)

    def setUp(self):
        super().setUp()
        solver = SolverConfig(steps=40, grid=GridSpec(16, 0.009))
        population = generate_population(5, solver, n_geometries=4,
                                         inlets_per_geometry=3, workers=1)
        dataset_dir = os.path.join(self.tmpdir, 'data')
        build_dataset(population, dataset_dir, seed=5, shape=solver.grid.shape, k=4)
        self.store = SampleStore(dataset_dir)
        self.folds = read_folds(dataset_dir)[:1]
        self.train_cfg = TrainConfig(epochs=40, batch_size=2, lr0=3e-3, lr_min=3e-4)

    def mean_mse(self, result):
        return {(row.model, row.component, row.rdf, row.vin): row.mse
                for row in result.table}

    def test_skips_lower_test_error(self):
        result = run_ablation('skip', self.store, self.folds, tiny_lvadnet(),
                              self.train_cfg, seeds=self.SEEDS)
        table = self.mean_mse(result)
        for component in ('x', 'y', 'z'):
            with_skips = table[('lvadnet3d', component, True, True)]
            without = table[('lvadnet3d-noskip', component, True, True)]
            self.assertLess(with_skips, without, component)

    def test_inputs_ranked(self):
        """sparse + RDF + v_in <= sparse + RDF <= sparse alone"""
        result = run_ablation('inputs', self.store, self.folds, tiny_lvadnet(),
                              self.train_cfg, seeds=self.SEEDS, components=('x',),
                              unet_base=tiny_unet())
        table = self.mean_mse(result)
        self.assertEqual(len(table), 6)
        sparse_only = table[('lvadnet3d', 'x', False, False)]
        with_rdf = table[('lvadnet3d', 'x', True, False)]
        with_v_in = table[('lvadnet3d', 'x', True, True)]
        self.assertLessEqual(with_v_in, with_rdf)
        self.assertLessEqual(with_rdf, sparse_only)

"""
Tests for the run configuration, the self-checks and the management
commands
"""
import json
import os
import shutil
import tempfile
from io import StringIO
from unittest.mock import patch

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, tag

import numpy as np

from datapipe.manifest import read_manifest
from datapipe.models import DataError
from evalkit.models import MissingComponentError
from evalkit.reports import read_report
from flowgen.models import SolverError
from networks.models import ConfigError
from process.models import Process
from trainer.loop import read_metrics
from trainer.models import CheckpointError, TrainingDiverged

from lvadrecon.runconfig import RunConfig, RunConfigError
from lvadrecon.utils import EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE, exit_code


class TempDirMixin(object):

    def setUp(self):
        self.tmpdir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmpdir, ignore_errors=True)


class RunConfigTests(TempDirMixin, SimpleTestCase):
    """Preset, config file and flag precedence"""

    def write_config(self, data):
        path = os.path.join(self.tmpdir, 'run.json')
        with open(path, 'w', encoding='utf-8') as fileref:
            json.dump(data, fileref)
        return path

    def test_preset_defaults(self):
        cfg = RunConfig.resolve('train', {'scale': 'desk', 'seed': None})
        self.assertEqual(cfg['grid'], 32)
        self.assertEqual(cfg.seed, 0)
        self.assertEqual(cfg.model_config().channels, 4)
        self.assertEqual(cfg.train_config().batch_size, 4)
        self.assertAlmostEqual(cfg.grid().spacing_mm, 4.5)

    def test_full_scale_preset(self):
        cfg = RunConfig.resolve('train', {'scale': 'paper'})
        self.assertEqual(cfg.model_config().channels, 16)
        self.assertEqual(cfg.train_config().epochs, 100)
        self.assertEqual(cfg.train_config().batch_size, 1)

    def test_flags_override_file(self):
        path = self.write_config({'epochs': 7, 'seed': 3, 'lr0': 5e-4})
        cfg = RunConfig.resolve('train', {'epochs': 2, 'seed': None}, path)
        self.assertEqual(cfg.train_config().epochs, 2)
        self.assertEqual(cfg.train_config().lr0, 5e-4)
        self.assertEqual(cfg.seed, 3)

    def test_file_selects_scale(self):
        cfg = RunConfig.resolve('generate', {}, self.write_config({'scale': 'paper'}))
        self.assertEqual(cfg['grid'], 128)

    def test_serialized(self):
        cfg = RunConfig.resolve('train', {'component': 'y', 'data_root': '/d'})
        data = json.loads(json.dumps(cfg.to_dict()))
        self.assertEqual(data['values']['component'], 'y')
        self.assertEqual(data['values']['data_root'], '/d')
        self.assertEqual(data['scale'], 'desk')

    def test_errors(self):
        with self.assertRaises(RunConfigError):
            RunConfig.resolve('train', {'scale': 'huge'})
        with self.assertRaises(RunConfigError):
            RunConfig.resolve('train', {}, os.path.join(self.tmpdir, 'absent.json'))
        with self.assertRaises(RunConfigError):
            RunConfig.resolve('train', {}, self.write_config([1, 2]))
        with self.assertRaises(RunConfigError):
            RunConfig.resolve('train', {})['no_such_option']

    def test_exit_codes(self):
        self.assertEqual(exit_code(RunConfigError('x')), EXIT_USAGE)
        self.assertEqual(exit_code(ConfigError('x')), EXIT_USAGE)
        self.assertEqual(exit_code(MissingComponentError('x')), EXIT_USAGE)
        self.assertEqual(exit_code(DataError('x')), EXIT_DATA)
        self.assertEqual(exit_code(CheckpointError('x')), EXIT_DATA)
        self.assertEqual(exit_code(TrainingDiverged('x')), EXIT_NUMERIC)
        self.assertEqual(exit_code(SolverError('x')), EXIT_NUMERIC)
        self.assertIsNone(exit_code(KeyError('x')))


class SelfcheckTests(SimpleTestCase):
    """manage.py selfcheck"""

    def test_single_check_passes(self):
        out = StringIO()
        call_command('selfcheck', only='psnr', stdout=out)
        self.assertIn('PASS', out.getvalue())
        self.assertIn('1 checks passed', out.getvalue())

    def test_adjoint_check_passes(self):
        out = StringIO()
        call_command('selfcheck', only='adjoint', stdout=out)
        self.assertIn('adjoint', out.getvalue())

    def test_injected_gradient_bug_fails(self):
        """A wrong Huber derivative makes the gradient check fail"""
        def wrong(residual, delta):
            return 2.0 * np.clip(residual, -delta, delta)

        with patch('lvadrecon.checks.GRAD_SEEDS', 1), \
                patch('tensorgrad.kernels.huber_grad', side_effect=wrong):
            with self.assertRaises(CommandError) as ctx:
                call_command('selfcheck', only='gradients', stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_NUMERIC)
        self.assertIn('gradients', str(ctx.exception))

    def test_unknown_check(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('selfcheck', only='nothing')
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)


class CommandErrorTests(TempDirMixin, TestCase):
    """Exit codes and cleanup of the pipeline commands"""

    def test_generate_failure_removes_output(self):
        output = os.path.join(self.tmpdir, 'dataset')
        with patch('lvadrecon.management.commands.generate.generate_population',
                   side_effect=SolverError('pressure solve blew up')):
            with self.assertRaises(CommandError) as ctx:
                call_command('generate', output=output, stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_NUMERIC)
        self.assertFalse(os.path.exists(output))
        proc = Process.objects.get(name='generate')
        self.assertTrue(proc.exited)
        self.assertEqual(proc.exitcode, EXIT_NUMERIC)

    def test_generate_refuses_non_empty_output(self):
        with open(os.path.join(self.tmpdir, 'keep.txt'), 'w') as fileref:
            fileref.write('x')
        with self.assertRaises(CommandError) as ctx:
            call_command('generate', output=self.tmpdir, stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)
        self.assertTrue(os.path.exists(os.path.join(self.tmpdir, 'keep.txt')))

    def test_train_without_dataset_names_manifest(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('train', dataset=os.path.join(self.tmpdir, 'none'),
                         stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_DATA)
        self.assertIn('manifest.json', str(ctx.exception))

    def test_evaluate_bad_checkpoint_flag(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('evaluate', data_root=self.tmpdir, checkpoint=['w=path'],
                         stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)
        self.assertIn('w=path', str(ctx.exception))

    def test_missing_required_flag(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('ablate', stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)

    def test_bad_config_file(self):
        with self.assertRaises(CommandError) as ctx:
            call_command('train', config=os.path.join(self.tmpdir, 'none.json'),
                         stdout=StringIO())
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)

    def test_status(self):
        out = StringIO()
        call_command('status', stdout=out)
        self.assertIn('no recorded processes', out.getvalue())
        Process.objects.create(name='train', pid=12, statustext='Trained epoch 1/2',
                               percentdone=50)
        out = StringIO()
        call_command('status', 'train', stdout=out)
        self.assertIn('Trained epoch 1/2', out.getvalue())
        self.assertIn('running', out.getvalue())


@tag('slow')
class PipelineTests(TempDirMixin, TestCase):
    """generate -> train -> evaluate -> ablate at desk scale with a short
    solver run"""

    def generate(self, name, **kwargs):
        output = os.path.join(self.tmpdir, name)
        call_command('generate', output=output, geometries=3, inlets=1, steps=2,
                     seed=7, stdout=StringIO(), **kwargs)
        return output

    def test_generate_train_evaluate(self):
        dataset = self.generate('dataset')
        manifest = read_manifest(dataset)
        self.assertEqual(len(manifest.records), 3)
        self.assertEqual(manifest.config['values']['geometries'], 3)
        self.assertEqual(manifest.grid, [32, 32, 32])
        again = read_manifest(self.generate('again'))
        self.assertEqual([r.checksum for r in manifest.records],
                         [r.checksum for r in again.records])

        run = os.path.join(self.tmpdir, 'run')
        call_command('train', dataset=dataset, output=run, component='x',
                     fold=0, epochs=1, stdout=StringIO())
        self.assertEqual(len(read_metrics(os.path.join(run, 'metrics.csv'))), 1)
        self.assertTrue(os.path.exists(os.path.join(run, 'best.sfck')))
        self.assertTrue(os.path.exists(os.path.join(run, 'run.json')))

        report = os.path.join(self.tmpdir, 'report.csv')
        with self.assertLogs('evalkit.evaluate', level='WARNING'):
            call_command('evaluate', dataset=dataset, fold=0, report=report,
                         checkpoint=['x=%s' % os.path.join(run, 'best.sfck')],
                         slices=os.path.join(self.tmpdir, 'slices'),
                         stdout=StringIO())
        rows = read_report(report)
        self.assertEqual([r.component for r in rows], ['x', 'x'])
        self.assertEqual(rows[-1].fold, 'mean')
        self.assertTrue(os.listdir(os.path.join(self.tmpdir, 'slices')))

    def test_ablate_untrained(self):
        dataset = self.generate('dataset')
        report = os.path.join(self.tmpdir, 'skip.csv')
        call_command('ablate', suite='skip', dataset=dataset, seeds=1,
                     untrained=True, report=report, stdout=StringIO())
        rows = read_report(report)
        self.assertEqual(len([r for r in rows if r.fold == 'mean']), 6)

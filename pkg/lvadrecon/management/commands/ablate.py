"""
manage.py ablate

Runs one ablation suite over folds and seeds and writes its report CSV:
per-run rows followed by the mean row of every configuration.
"""
import os

from django.core.management.base import CommandError

from datapipe.folds import read_folds
from datapipe.manifest import SampleStore
from evalkit.ablation import run_ablation
from evalkit.models import SUITES
from evalkit.reports import write_report

from lvadrecon.utils import EXIT_USAGE, PipelineCommand, write_json


def parse_folds(value, count):
    '''"all" or a comma separated list of fold indices'''
    if value in (None, ''):
        return [0]
    if value == 'all':
        return list(range(count))
    try:
        folds = [int(item) for item in str(value).split(',')]
    except ValueError:
        raise CommandError('--folds expects "all" or indices like 0,2',
                           returncode=EXIT_USAGE) from None
    bad = [f for f in folds if not 0 <= f < count]
    if bad:
        raise CommandError('fold(s) %s out of range, dataset has %d'
                           % (bad, count), returncode=EXIT_USAGE)
    return folds


class Command(PipelineCommand):
    help = 'Run an ablation suite (skip, inputs or models)'
    option_keys = ('suite', 'dataset', 'output', 'model', 'folds', 'seeds',
                   'components', 'epochs', 'batch_size', 'lr0', 'lr_min',
                   'delta', 'report', 'peak', 'in_mask', 'untrained')

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--suite', choices=SUITES, required=True)
        parser.add_argument('--dataset')
        parser.add_argument('--output', help='directory for the training runs')
        parser.add_argument('--model', choices=('lvadnet3d', 'unet3d'),
                            help='base model of the skip suite')
        parser.add_argument('--folds', help='"all" or indices like 0,2 '
                            '(default 0)')
        parser.add_argument('--seeds', type=int,
                            help='seeds per configuration (default 3)')
        parser.add_argument('--components', help='subset like x or x,y,z')
        parser.add_argument('--epochs', type=int)
        parser.add_argument('--batch-size', dest='batch_size', type=int)
        parser.add_argument('--lr0', type=float)
        parser.add_argument('--lr-min', dest='lr_min', type=float)
        parser.add_argument('--delta', type=float)
        parser.add_argument('--report')
        parser.add_argument('--peak', type=float)
        parser.add_argument('--in-mask', dest='in_mask', action='store_true',
                            default=None)
        parser.add_argument('--untrained', action='store_true', default=None,
                            help='score freshly initialised models')

    def run(self, cfg, options, output_fn):
        suite = cfg['suite']
        dataset = cfg.path('dataset', 'dataset')
        store = SampleStore(dataset)
        all_folds = read_folds(dataset)
        folds = [all_folds[i] for i in parse_folds(cfg.get('folds'), len(all_folds))]
        seeds = [cfg.seed + i for i in range(int(cfg.get('seeds') or 3))]
        components = tuple((cfg.get('components') or 'x,y,z').split(','))
        base = cfg.model_config()
        peak = float(cfg.get('peak') or 1.0)
        output = cfg.path('output', os.path.join('ablations', suite))
        result = run_ablation(suite, store, folds, base, cfg.train_config(),
                              seeds=seeds, components=components, peak=peak,
                              in_mask=bool(cfg.get('in_mask')),
                              fit=not cfg.get('untrained'), output_dir=output,
                              output_fn=output_fn)
        report = cfg.get('report') or os.path.join(
            cfg['data_root'], 'reports', 'ablate-%s.csv' % suite)
        os.makedirs(os.path.dirname(os.path.abspath(report)), exist_ok=True)
        rows = write_report(report, result.reports, peak=peak)
        write_json(os.path.splitext(report)[0] + '.json', cfg.to_dict())
        self.stdout.write('Wrote %d rows (%d configurations) to %s'
                          % (rows, len(result.table), report))

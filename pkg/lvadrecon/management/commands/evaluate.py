"""
manage.py evaluate

Scores component checkpoints on the test partition of a fold and writes
the report CSV, optionally with mid-plane slice images.
"""
import logging
import os

from django.core.management.base import CommandError

from datapipe.folds import get_fold
from datapipe.manifest import SampleStore
from evalkit.evaluate import evaluate_components, predict
from evalkit.export import export_slices
from evalkit.metrics import velocity_magnitude
from evalkit.models import MAGNITUDE
from evalkit.reports import write_report
from flowgen.models import COMPONENTS
from networks.builder import build_model
from networks.models import ModelConfig
from trainer.checkpoint import load_checkpoint
from trainer.models import BEST_CHECKPOINT

from lvadrecon.management.commands.train import run_dir
from lvadrecon.utils import EXIT_USAGE, PipelineCommand, write_json

LOGGER = logging.getLogger('lvadrecon')


def load_model(path):
    '''Rebuilds the network stored in a checkpoint'''
    ckpt = load_checkpoint(path)
    model = build_model(ModelConfig.from_dict(ckpt.meta['model']))
    model.load_state(ckpt.params)
    return model


def parse_checkpoints(values):
    '''["x=path", ...] -> {"x": path}'''
    paths = {}
    for value in values or ():
        component, sep, path = value.partition('=')
        if not sep or component not in COMPONENTS or not path:
            raise CommandError('--checkpoint expects <x|y|z>=<path>, got %r'
                               % value, returncode=EXIT_USAGE)
        paths[component] = path
    return paths


class Command(PipelineCommand):
    help = 'Evaluate component checkpoints on the test partition of a fold'
    option_keys = ('dataset', 'model', 'fold', 'report', 'peak', 'in_mask',
                   'slices')

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--dataset')
        parser.add_argument('--model', choices=('lvadnet3d', 'unet3d'),
                            help='find best.sfck of the default run directories')
        parser.add_argument('--checkpoint', action='append', metavar='C=PATH',
                            help='checkpoint of component C; repeatable')
        parser.add_argument('--fold', type=int)
        parser.add_argument('--report', help='report CSV path')
        parser.add_argument('--peak', type=float, help='PSNR peak (default 1)')
        parser.add_argument('--in-mask', dest='in_mask', action='store_true',
                            default=None, help='score ventricle voxels only')
        parser.add_argument('--slices', help='directory for slice images')

    def checkpoints(self, cfg, paths, fold):
        if not paths:
            model = cfg.get('model') or 'lvadnet3d'
            for component in COMPONENTS:
                path = os.path.join(run_dir(cfg, model, component, fold),
                                    BEST_CHECKPOINT)
                if os.path.exists(path):
                    paths[component] = path
        if not paths:
            raise CommandError('no checkpoints given or found',
                               returncode=EXIT_USAGE)
        return paths

    def run(self, cfg, options, output_fn):
        paths = parse_checkpoints(options.get('checkpoint'))
        dataset = cfg.path('dataset', 'dataset')
        store = SampleStore(dataset)
        fold = int(cfg.get('fold') or 0)
        samples = store.fold_samples(get_fold(dataset, fold))['test']
        paths = self.checkpoints(cfg, paths, fold)
        cfg.values['checkpoints'] = paths
        models = {c: load_model(p) for c, p in sorted(paths.items())}
        peak = float(cfg.get('peak') or 1.0)
        reports = evaluate_components(models, samples, fold=fold, seed=cfg.seed,
                                      peak=peak, in_mask=bool(cfg.get('in_mask')),
                                      require_all=False)
        report = cfg.get('report') or os.path.join(
            cfg['data_root'], 'reports', 'evaluate-fold%d.csv' % fold)
        os.makedirs(os.path.dirname(os.path.abspath(report)), exist_ok=True)
        rows = write_report(report, reports, peak=peak)
        write_json(os.path.splitext(report)[0] + '.json', cfg.to_dict())
        if cfg.get('slices'):
            self.export(models, samples, cfg['slices'])
        self.stdout.write('Wrote %d rows to %s' % (rows, report))

    def export(self, models, samples, directory):
        for sample in samples:
            preds = {c: predict(m, sample, c) for c, m in models.items()}
            for component, pred in preds.items():
                export_slices(pred, sample.component(component), component,
                              directory, prefix=sample.run_id)
            if len(preds) == len(COMPONENTS):
                export_slices(velocity_magnitude(*(preds[c] for c in COMPONENTS)),
                              velocity_magnitude(sample.vx, sample.vy, sample.vz),
                              MAGNITUDE, directory, prefix=sample.run_id)

"""
manage.py train

Trains one (model, component, fold) tuple.
"""
import os

from datapipe.folds import get_fold
from datapipe.manifest import SampleStore
from networks.builder import build_model
from trainer.loop import train_fold

from lvadrecon.utils import PipelineCommand, write_json

RUN_CONFIG_FILENAME = 'run.json'


def run_dir(cfg, model, component, fold):
    return os.path.join(cfg['data_root'], 'runs',
                        '%s-%s-fold%d' % (model, component, fold))


class Command(PipelineCommand):
    help = 'Train one model for one velocity component on one fold'
    option_keys = ('dataset', 'output', 'model', 'component', 'fold', 'epochs',
                   'batch_size', 'lr0', 'lr_min', 'delta', 'no_skips', 'no_rdf',
                   'conditioning')

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--dataset', help='dataset directory '
                            '(default <data root>/dataset)')
        parser.add_argument('--output', help='run directory (default '
                            '<data root>/runs/<model>-<component>-fold<k>)')
        parser.add_argument('--model', choices=('lvadnet3d', 'unet3d'))
        parser.add_argument('--component', choices=('x', 'y', 'z'))
        parser.add_argument('--fold', type=int)
        parser.add_argument('--epochs', type=int)
        parser.add_argument('--batch-size', dest='batch_size', type=int)
        parser.add_argument('--lr0', type=float)
        parser.add_argument('--lr-min', dest='lr_min', type=float)
        parser.add_argument('--delta', type=float, help='Huber delta')
        parser.add_argument('--no-skips', dest='no_skips', action='store_true',
                            default=None)
        parser.add_argument('--no-rdf', dest='no_rdf', action='store_true',
                            default=None)
        parser.add_argument('--conditioning', choices=('latent', 'input', 'off'))
        parser.add_argument('--resume', action='store_true')

    def run(self, cfg, options, output_fn):
        dataset = cfg.path('dataset', 'dataset')
        store = SampleStore(dataset)
        fold = int(cfg.get('fold') or 0)
        split = get_fold(dataset, fold)
        model_cfg = cfg.model_config()
        train_cfg = cfg.train_config()
        output = cfg.get('output') or run_dir(cfg, model_cfg.architecture,
                                              train_cfg.component, fold)
        model = build_model(model_cfg)
        result = train_fold(store, split, model, train_cfg, output_dir=output,
                            resume=options['resume'], output_fn=output_fn)
        write_json(os.path.join(output, RUN_CONFIG_FILENAME), cfg.to_dict())
        last = result.rows[-1]
        self.stdout.write('Trained %s/%s fold %d: %d epochs, train %.4g, '
                          'val %.4g, best epoch %d -> %s'
                          % (model_cfg.architecture, train_cfg.component, fold,
                             len(result.rows), last.train_huber, last.val_huber,
                             result.best_epoch, result.best_checkpoint))

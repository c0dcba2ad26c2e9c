"""
manage.py generate

Simulates a ventricle population and writes the dataset: samples,
manifest.json and folds.json.
"""
import logging
import os
import shutil

from django.core.management.base import CommandError

from datapipe.dataset import build_dataset
from flowgen.population import generate_population

from lvadrecon.utils import EXIT_USAGE, PipelineCommand

LOGGER = logging.getLogger('lvadrecon')


class Command(PipelineCommand):
    help = 'Generate a synthetic LVAD flow dataset'
    option_keys = ('output', 'geometries', 'inlets', 'runs', 'folds',
                   'workers', 'keep_unconverged', 'steps', 'grid')

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--output', help='dataset directory '
                            '(default <data root>/dataset)')
        parser.add_argument('--geometries', type=int,
                            help='number of ventricle geometries (default 8)')
        parser.add_argument('--inlets', type=int,
                            help='inlet velocities per geometry')
        parser.add_argument('--runs', type=int,
                            help='total simulations split over the geometries '
                            '(default 47 for 8 geometries)')
        parser.add_argument('--folds', type=int, help='fold count (default 5)')
        parser.add_argument('--workers', type=int)
        parser.add_argument('--steps', type=int, help='solver time steps')
        parser.add_argument('--grid', type=int, help='grid size per axis')
        parser.add_argument('--keep-unconverged', dest='keep_unconverged',
                            action='store_true', default=None)
        parser.add_argument('--force', action='store_true',
                            help='replace an existing output directory')

    def run(self, cfg, options, output_fn):
        output = cfg.path('output', 'dataset')
        if os.path.exists(output) and os.listdir(output):
            if not options['force']:
                raise CommandError('%s exists and is not empty (use --force)'
                                   % output, returncode=EXIT_USAGE)
            shutil.rmtree(output)
        solver = cfg.solver_config()
        try:
            population = generate_population(
                cfg.seed, solver, n_geometries=int(cfg.get('geometries') or 8),
                inlets_per_geometry=cfg.get('inlets'),
                total_runs=cfg.get('runs'), workers=cfg.get('workers'),
                output_fn=output_fn)
            manifest = build_dataset(
                population, output, cfg.seed, shape=solver.grid.shape,
                k=int(cfg.get('folds') or 5), solver=solver.to_dict(),
                config=cfg.to_dict(),
                keep_unconverged=cfg.get('keep_unconverged'),
                output_fn=output_fn)
        except BaseException:
            LOGGER.error('generate failed; removing %s', output)
            shutil.rmtree(output, ignore_errors=True)
            raise
        self.stdout.write('Wrote %d samples over %d geometries to %s'
                          % (len(manifest.records), len(manifest.geometry_ids),
                             output))

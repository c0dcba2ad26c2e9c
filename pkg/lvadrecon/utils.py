"""
lvadrecon/utils.py

Shared plumbing of the management commands: common flags, RunConfig
resolution, process status, and the exit-code contract

    0 success, 1 usage error, 2 data error, 3 numeric failure
"""
import json
import logging
import os
import sys
from contextlib import contextmanager

from django.core.management.base import BaseCommand, CommandError

from datapipe.models import DataError
from evalkit.models import EvalError, MissingComponentError
from flowgen.models import GeometryError, SolverError
from networks.models import NetworkError
from process.utils import finish_process, start_process, status_recorder
from tensorgrad.models import TensorError
from trainer.models import (CheckpointError, NonFiniteGradient,
                            TrainingDiverged, TrainingError)

from lvadrecon.runconfig import RunConfig, RunConfigError

LOGGER = logging.getLogger('lvadrecon')

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# checked in order; the first matching class decides the exit code
ERROR_CODES = (
    (RunConfigError, EXIT_USAGE),
    (NetworkError, EXIT_USAGE),
    (MissingComponentError, EXIT_USAGE),
    (CheckpointError, EXIT_DATA),
    (TrainingDiverged, EXIT_NUMERIC),
    (NonFiniteGradient, EXIT_NUMERIC),
    (SolverError, EXIT_NUMERIC),
    (TensorError, EXIT_NUMERIC),
    (TrainingError, EXIT_USAGE),
    (GeometryError, EXIT_USAGE),
    (DataError, EXIT_DATA),
    (EvalError, EXIT_DATA),
    (OSError, EXIT_DATA),
)


def exit_code(err):
    for cls, code in ERROR_CODES:
        if isinstance(err, cls):
            return code
    return None


def _usage_error(parser, message):
    if parser.called_from_command_line:
        parser.print_usage(sys.stderr)
        sys.stderr.write('%s: error: %s\n' % (parser.prog, message))
        sys.exit(EXIT_USAGE)
    raise CommandError('Error: %s' % message, returncode=EXIT_USAGE)


def write_json(path, data):
    with open(path, 'w', encoding='utf-8') as fileref:
        json.dump(data, fileref, indent=2, sort_keys=True)
        fileref.write('\n')
    LOGGER.info('Wrote %s', path)
    return path


class PipelineCommand(BaseCommand):
    '''Base class of the pipeline commands. Subclasses implement run(cfg,
    options, output_fn) and list their RunConfig keys in `option_keys`.'''
    option_keys = ()

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.error = lambda message: _usage_error(parser, message)
        return parser

    def add_arguments(self, parser):
        parser.add_argument('--config', help='UTF-8 JSON file of option '
                            'values; flags override it')
        parser.add_argument('--scale', choices=('desk', 'paper'),
                            help='scale preset')
        parser.add_argument('--seed', type=int)
        parser.add_argument('--data-root', dest='data_root',
                            help='default location of datasets and runs')

    def run_config(self, options):
        keys = ('scale', 'seed', 'data_root') + tuple(self.option_keys)
        flags = {key: options.get(key) for key in keys}
        return RunConfig.resolve(self.command_name(), flags, options.get('config'))

    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    @contextmanager
    def tracked(self):
        '''Records start, progress and exit of this command in the process
        table; yields the progress callback'''
        name = self.command_name()
        start_process(name)
        try:
            yield status_recorder(name)
        except CommandError as err:
            finish_process(name, err.returncode, str(err))
            raise
        except Exception as err:
            finish_process(name, exit_code(err) or 1, str(err))
            raise
        finish_process(name, 0, 'done')

    def handle(self, *args, **options):
        try:
            cfg = self.run_config(options)
            with self.tracked() as output_fn:
                return self.run(cfg, options, output_fn)
        except CommandError:
            raise
        except Exception as err:
            code = exit_code(err)
            if code is None:
                raise
            LOGGER.error('%s failed: %s', self.command_name(), err)
            raise CommandError(str(err), returncode=code) from err

    def run(self, cfg, options, output_fn):
        raise NotImplementedError

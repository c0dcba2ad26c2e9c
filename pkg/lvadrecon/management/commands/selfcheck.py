"""
manage.py selfcheck

Runs the numeric self-checks; exits 3 when any fails.
"""
from django.core.management.base import BaseCommand, CommandError

from lvadrecon.checks import CHECKS, run_checks
from lvadrecon.utils import EXIT_NUMERIC, EXIT_USAGE


class Command(BaseCommand):
    help = 'Run gradient, adjoint, solver, mask and metric self-checks'

    def add_arguments(self, parser):
        parser.add_argument('--only', help='run one check: %s'
                            % ', '.join(CHECKS))

    def handle(self, *args, **options):
        only = options.get('only')
        if only and only not in CHECKS:
            raise CommandError('unknown check %r, expected one of %s'
                               % (only, ', '.join(CHECKS)), returncode=EXIT_USAGE)
        results = run_checks(only)
        for result in results:
            self.stdout.write('%-14s %s  %s (%.1fs)'
                              % (result.name, 'PASS' if result.passed else 'FAIL',
                                 result.detail, result.seconds))
        failed = [r.name for r in results if not r.passed]
        if failed:
            raise CommandError('%d of %d checks failed: %s'
                               % (len(failed), len(results), ', '.join(failed)),
                               returncode=EXIT_NUMERIC)
        self.stdout.write('%d checks passed' % len(results))

"""
manage.py status

Shows the recorded state of long-running commands.
"""
from django.core.management.base import BaseCommand

from process.utils import process_status


class Command(BaseCommand):
    help = 'Show progress of generate, train, evaluate and ablate runs'

    def add_arguments(self, parser):
        parser.add_argument('name', nargs='?', help='one command name')

    def handle(self, *args, **options):
        rows = process_status(options.get('name'))
        if not rows:
            self.stdout.write('no recorded processes')
            return
        for row in rows:
            state = 'exit %d' % row['exitcode'] if row['exited'] else 'running'
            self.stdout.write('%-10s pid %-7d %-8s %3d%%  %s'
                              % (row['name'], row['pid'], state,
                                 row['percentdone'], row['statustext']))

from unittest.mock import patch

from django.db import DatabaseError
from django.test import TestCase

from process.models import Process
from process.utils import (finish_process, process_status, record_status,
                           start_process, status_recorder)


class ProcessStatusTests(TestCase):
    """Status records of long-running commands"""

    def test_record_creates_and_updates(self):
        record_status('generate', message='Simulated geom-00-r00 (1/6)',
                      percent_done=16)
        record_status('generate', percent_done=33)
        proc = Process.objects.get(name='generate')
        self.assertEqual(proc.statustext, 'Simulated geom-00-r00 (1/6)')
        self.assertEqual(proc.percentdone, 33)
        self.assertEqual(Process.objects.count(), 1)

    def test_zero_percent_is_recorded(self):
        record_status('train', percent_done=50)
        record_status('train', percent_done=0)
        self.assertEqual(Process.objects.get(name='train').percentdone, 0)

    def test_lifecycle(self):
        start_process('ablate')
        status_recorder('ablate')(message='Ablation skip 3/6', percent_done=50)
        finish_process('ablate', exitcode=3, message='loss diverged')
        status = process_status('ablate')[0]
        self.assertTrue(status['exited'])
        self.assertEqual(status['exitcode'], 3)
        self.assertEqual(status['percentdone'], 50)
        self.assertEqual(status['statustext'], 'loss diverged')

    def test_success_completes(self):
        start_process('evaluate')
        finish_process('evaluate')
        self.assertEqual(process_status('evaluate')[0]['percentdone'], 100)
        self.assertEqual(len(process_status()), 1)

    def test_database_errors_do_not_propagate(self):
        with patch.object(Process, 'save', side_effect=DatabaseError('locked')):
            with self.assertLogs('lvadrecon', level='WARNING'):
                record_status('generate', message='x')
        self.assertFalse(Process.objects.filter(name='generate').exists())

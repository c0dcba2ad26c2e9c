''' process/utils.py '''
import logging
import os

from django.db import DatabaseError

from .models import Process

LOGGER = logging.getLogger('lvadrecon')


def _save(proc_rec):
    # status rows are advisory; a missing or locked database never stops a run
    try:
        proc_rec.save()
    except DatabaseError as err:
        LOGGER.warning('Could not record status for %s: %s', proc_rec.name, err)


def _get(processname):
    try:
        return Process.objects.get(name=processname)
    except Process.DoesNotExist:
        return Process(name=processname)
    except DatabaseError as err:
        LOGGER.warning('Could not read status for %s: %s', processname, err)
        return Process(name=processname)


def record_status(processname, message=None, percent_done=None):
    '''Record process feedback so we can display it during long-running
    operations'''
    proc_rec = _get(processname)
    if message:
        proc_rec.statustext = message[:256]
    if percent_done is not None:
        proc_rec.percentdone = percent_done
    _save(proc_rec)


def start_process(processname, message='started'):
    '''Resets the record of processname for a new run of this process'''
    proc_rec = _get(processname)
    proc_rec.pid = os.getpid()
    proc_rec.exited = False
    proc_rec.exitcode = 0
    proc_rec.percentdone = 0
    proc_rec.statustext = message
    _save(proc_rec)


def finish_process(processname, exitcode=0, message=None):
    proc_rec = _get(processname)
    proc_rec.exited = True
    proc_rec.exitcode = exitcode
    if message:
        proc_rec.statustext = message[:256]
    if exitcode == 0:
        proc_rec.percentdone = 100
    _save(proc_rec)


def status_recorder(processname):
    '''An output_fn(message=..., percent_done=...) writing to processname'''
    def record(message=None, percent_done=None):
        record_status(processname, message=message, percent_done=percent_done)
    return record


def process_status(processname=None):
    '''Status dicts of all recorded processes, or of one'''
    processes = Process.objects.all()
    if processname:
        processes = processes.filter(name=processname)
    return [{'name': p.name, 'pid': p.pid, 'exited': p.exited,
             'exitcode': p.exitcode, 'statustext': p.statustext,
             'percentdone': p.percentdone} for p in processes]

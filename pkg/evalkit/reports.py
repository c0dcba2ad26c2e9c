"""
evalkit/reports.py

Report CSV files: one row per (configuration, fold, seed) and a mean row
per configuration.
"""
import csv
import logging
import math
from collections import OrderedDict

import numpy as np

from evalkit.metrics import psnr_from_mse
from evalkit.models import MEAN, METRIC_NAMES, REPORT_COLUMNS, EvalError, MetricReport

LOGGER = logging.getLogger(__name__)


def mean_rows(reports, peak=1.0):
    '''Aggregates reports sharing a configuration key.

    mse and mae are averaged; rmse and psnr are derived from the mean mse
    so every row keeps rmse^2 == mse.'''
    groups = OrderedDict()
    for report in reports:
        groups.setdefault(report.key, []).append(report)
    rows = []
    for group in groups.values():
        first = group[0]
        value = float(np.mean([r.mse for r in group]))
        rows.append(MetricReport(
            model=first.model, component=first.component, sparse=first.sparse,
            rdf=first.rdf, vin=first.vin, fold=MEAN, seed=MEAN, mse=value,
            mae=float(np.mean([r.mae for r in group])),
            rmse=math.sqrt(value), psnr_db=psnr_from_mse(value, peak)))
    return rows


def _format(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return repr(value)
    return str(value)


def write_report(path, reports, with_mean=True, peak=1.0):
    '''Writes reports (and their mean rows) to path; returns the row count'''
    rows = list(reports)
    if with_mean:
        rows += mean_rows(reports, peak)
    try:
        with open(path, 'w', newline='', encoding='utf-8') as fileref:
            writer = csv.writer(fileref)
            writer.writerow(REPORT_COLUMNS)
            for row in rows:
                data = row.to_dict()
                writer.writerow([_format(data[name]) for name in REPORT_COLUMNS])
    except OSError as err:
        LOGGER.error('Write failed for %s: %s', path, err)
        raise EvalError('cannot write report %s: %s' % (path, err)) from err
    LOGGER.info('Wrote %s', path)
    return len(rows)


def _parse(name, text):
    if name in ('sparse', 'rdf', 'vin'):
        return text == 'true'
    if name in ('fold', 'seed'):
        return text if text == MEAN else int(text)
    if name in METRIC_NAMES:
        return float(text)
    return text


def read_report(path):
    with open(path, newline='', encoding='utf-8') as fileref:
        return [MetricReport(**{name: _parse(name, item[name])
                                for name in REPORT_COLUMNS})
                for item in csv.DictReader(fileref)]

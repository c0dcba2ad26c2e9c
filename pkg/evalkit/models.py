"""
evalkit/models.py

Metric reports and the errors raised while scoring reconstructions.
"""
from dataclasses import dataclass, asdict

MAGNITUDE = 'magnitude'
MEAN = 'mean'

REPORT_COLUMNS = ('model', 'component', 'sparse', 'rdf', 'vin', 'fold',
                  'seed', 'mse', 'mae', 'rmse', 'psnr_db')
METRIC_NAMES = ('mse', 'mae', 'rmse', 'psnr_db')

SKIP_SUITE = 'skip'
INPUTS_SUITE = 'inputs'
MODELS_SUITE = 'models'
SUITES = (SKIP_SUITE, INPUTS_SUITE, MODELS_SUITE)


class EvalError(Exception):
    '''Base class for evaluation errors'''
    pass


class MetricShapeError(EvalError):
    '''Prediction and truth do not share a shape'''
    pass


class MissingComponentError(EvalError):
    '''A component model needed for the evaluation is absent'''
    pass


@dataclass
class MetricReport:
    '''One report row. fold and seed are ints, or "mean" for aggregate
    rows.'''
    model: str
    component: str
    mse: float
    mae: float
    rmse: float
    psnr_db: float
    sparse: bool = True
    rdf: bool = True
    vin: bool = True
    fold: object = 0
    seed: object = 0

    @property
    def key(self):
        '''Everything that identifies a configuration, fold and seed aside'''
        return (self.model, self.component, self.sparse, self.rdf, self.vin)

    def to_dict(self):
        return asdict(self)

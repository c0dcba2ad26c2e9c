"""
trainer/models.py

Training configuration, optimizer state, checkpoints and results.
"""
import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field, asdict, replace

from flowgen.models import COMPONENTS

METRICS_COLUMNS = ('epoch', 'step', 'lr', 'train_huber', 'val_huber', 'wall_ms')
LAST_CHECKPOINT = 'last.sfck'
BEST_CHECKPOINT = 'best.sfck'
DIVERGED_CHECKPOINT = 'last_finite.sfck'
METRICS_FILENAME = 'metrics.csv'


class TrainingError(Exception):
    '''Base class for training errors'''
    pass


class CheckpointError(TrainingError):
    '''Checkpoint unreadable, corrupt, or written for another configuration'''
    pass


class NonFiniteGradient(TrainingError):
    '''An optimizer step was handed NaN or Inf gradients'''
    pass


class TrainingDiverged(TrainingError):
    '''The loss became non-finite; `checkpoint` names the last finite state'''

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    component: str = 'x'
    lr0: float = 1e-3
    lr_min: float = 0.0
    epochs: int = 100
    delta: float = 0.5
    batch_size: int = 1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise TrainingError('unknown component %r' % self.component)
        if self.lr0 <= 0 or self.lr_min < 0 or self.lr_min > self.lr0:
            raise TrainingError('need 0 <= lr_min <= lr0 and lr0 > 0 '
                                '(lr0 %s, lr_min %s)' % (self.lr0, self.lr_min))
        if self.delta <= 0:
            raise TrainingError('huber delta must be positive')
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError('epochs and batch size must be >= 1')
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise TrainingError('invalid Adam hyperparameters')

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def config_fingerprint(model_fingerprint, train_cfg):
    '''sha256 over everything a checkpoint must agree with to be resumed'''
    payload = {'model': model_fingerprint, 'train': train_cfg.to_dict()}
    encoded = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(encoded.encode('utf-8')).digest()


class AdamState(object):
    '''First and second moments per parameter name, plus the step count'''

    def __init__(self, step=0, m=None, v=None):
        self.step = step
        self.m = m if m is not None else OrderedDict()
        self.v = v if v is not None else OrderedDict()

    def copy(self):
        return AdamState(self.step,
                         OrderedDict((k, a.copy()) for k, a in self.m.items()),
                         OrderedDict((k, a.copy()) for k, a in self.v.items()))


@dataclass
class EpochRow:
    epoch: int
    step: int
    lr: float
    train_huber: float
    val_huber: float
    wall_ms: int

    def to_dict(self):
        return asdict(self)


@dataclass
class Checkpoint:
    params: OrderedDict
    adam: AdamState
    epoch: int
    fingerprint: bytes
    rng_state: dict
    best_val: float = float('inf')
    best_epoch: int = -1
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def step(self):
        return self.adam.step


@dataclass
class TrainResult:
    rows: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    steps: int = 0
    rejected_steps: int = 0
    best_val: float = float('inf')
    best_epoch: int = -1
    last_checkpoint: str = None
    best_checkpoint: str = None
    metrics_path: str = None

    @property
    def train_losses(self):
        return [row.train_huber for row in self.rows]

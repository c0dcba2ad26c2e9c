"""
trainer/loop.py

The training loop: shuffled mini-batches, Huber loss, Adam with a
per-step cosine schedule, per-epoch validation, best/last checkpoints
and resumption.
"""
import csv
import logging
import math
import os
import queue
import threading
import time
from collections import OrderedDict

import numpy as np

from django.conf import settings

from datapipe.preprocess import assemble_batch
from networks.models import INPUT
from tensorgrad.models import Tape, Tensor
from tensorgrad.ops import backward, huber_loss
from trainer.checkpoint import load_checkpoint, save_checkpoint
from trainer.models import (BEST_CHECKPOINT, DIVERGED_CHECKPOINT,
                            LAST_CHECKPOINT, METRICS_COLUMNS,
                            METRICS_FILENAME, AdamState, Checkpoint,
                            EpochRow, NonFiniteGradient, TrainingDiverged,
                            TrainingError, TrainResult, config_fingerprint)
from trainer.optim import adam_step, cosine_lr

LOGGER = logging.getLogger(__name__)

try:
    PREFETCH = settings.TRAINER_PREFETCH
except:
    PREFETCH = 2

_DONE = object()


class BatchProducer(object):
    '''Assembles the batches of one epoch on a worker thread.

    Batches come out in exactly the order given; the queue is bounded so
    the producer runs at most `depth` batches ahead of the consumer.'''

    def __init__(self, samples, order, batch_size, component, rdf=True,
                 v_in_channel=False, depth=None):
        self.samples = samples
        self.order = list(order)
        self.batch_size = batch_size
        self.component = component
        self.rdf = rdf
        self.v_in_channel = v_in_channel
        self.queue = queue.Queue(maxsize=max(1, depth or PREFETCH))
        self.stopped = threading.Event()
        self.thread = threading.Thread(target=self._run, daemon=True)

    def _put(self, item):
        while not self.stopped.is_set():
            try:
                self.queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _run(self):
        try:
            for start in range(0, len(self.order), self.batch_size):
                batch = [self.samples[i]
                         for i in self.order[start:start + self.batch_size]]
                item = assemble_batch(batch, self.component, rdf=self.rdf,
                                      v_in_channel=self.v_in_channel)
                if not self._put(item):
                    return
        except Exception as err:
            self._put(err)
            return
        self._put(_DONE)

    def __iter__(self):
        self.thread.start()
        try:
            while True:
                item = self.queue.get()
                if item is _DONE:
                    return
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.stopped.set()
            self.thread.join()


def steps_per_epoch(n_samples, batch_size):
    return int(math.ceil(n_samples / float(batch_size)))


def _input_flags(model):
    return {'rdf': model.cfg.rdf, 'v_in_channel': model.cfg.conditioning == INPUT}


def evaluate_loss(model, samples, cfg):
    '''Mean Huber loss over samples, without recording a tape'''
    if not samples:
        return float('nan')
    total = 0.0
    for start in range(0, len(samples), cfg.batch_size):
        batch = samples[start:start + cfg.batch_size]
        inputs, targets, v_in = assemble_batch(batch, cfg.component,
                                               **_input_flags(model))
        pred = model.forward(Tensor(inputs), v_in)
        loss = huber_loss(pred, Tensor(targets), cfg.delta)
        total += float(loss.item()) * len(batch)
    return total / len(samples)


def write_metrics(path, rows):
    with open(path, 'w', newline='') as fileref:
        writer = csv.writer(fileref)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([row.epoch, row.step, repr(row.lr),
                             repr(row.train_huber), repr(row.val_huber),
                             row.wall_ms])
    return path


def read_metrics(path):
    '''Rows of a metrics CSV; an absent file has none'''
    if not os.path.exists(path):
        return []
    rows = []
    with open(path, newline='') as fileref:
        for item in csv.DictReader(fileref):
            rows.append(EpochRow(epoch=int(item['epoch']),
                                 step=int(item['step']),
                                 lr=float(item['lr']),
                                 train_huber=float(item['train_huber']),
                                 val_huber=float(item['val_huber']),
                                 wall_ms=int(item['wall_ms'])))
    return rows


def _checkpoint(model, state, epoch, fingerprint, rng, best_val, best_epoch,
                rows, meta):
    # wall time stays out of checkpoints so reruns write identical files
    timeless = [EpochRow(r.epoch, r.step, r.lr, r.train_huber, r.val_huber, 0)
                for r in rows]
    return Checkpoint(params=model.state_dict(), adam=state.copy(), epoch=epoch,
                      fingerprint=fingerprint,
                      rng_state=rng.bit_generator.state,
                      best_val=best_val, best_epoch=best_epoch,
                      rows=timeless, meta=meta)


def train(model, train_samples, val_samples, cfg, output_dir=None,
          resume=False, output_fn=None):
    '''Fits model to train_samples for cfg.epochs epochs.

    With output_dir, last.sfck and metrics.csv are written after every
    epoch and best.sfck whenever the validation loss improves; resume
    continues from last.sfck. Returns a TrainResult.'''
    if not train_samples:
        raise TrainingError('training set is empty')
    fingerprint = config_fingerprint(model.fingerprint(), cfg)
    meta = {'model': model.cfg.to_dict(), 'train': cfg.to_dict(),
            'n_train': len(train_samples), 'n_val': len(val_samples)}
    per_epoch = steps_per_epoch(len(train_samples), cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    result = TrainResult()
    start_epoch = 0

    paths = {}
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        paths = {name: os.path.join(output_dir, name)
                 for name in (LAST_CHECKPOINT, BEST_CHECKPOINT,
                              DIVERGED_CHECKPOINT, METRICS_FILENAME)}
        result.metrics_path = paths[METRICS_FILENAME]

    if resume:
        if not output_dir or not os.path.exists(paths[LAST_CHECKPOINT]):
            raise TrainingError('nothing to resume: no %s in %s'
                                % (LAST_CHECKPOINT, output_dir))
        ckpt = load_checkpoint(paths[LAST_CHECKPOINT], fingerprint)
        model.load_state(ckpt.params)
        state = ckpt.adam.copy()
        rng.bit_generator.state = ckpt.rng_state
        start_epoch = ckpt.epoch
        result.best_val, result.best_epoch = ckpt.best_val, ckpt.best_epoch
        wall = {r.epoch: r.wall_ms for r in read_metrics(paths[METRICS_FILENAME])}
        result.rows = [EpochRow(r.epoch, r.step, r.lr, r.train_huber,
                                r.val_huber, wall.get(r.epoch, 0))
                       for r in ckpt.rows]
        result.last_checkpoint = paths[LAST_CHECKPOINT]
        if os.path.exists(paths[BEST_CHECKPOINT]):
            result.best_checkpoint = paths[BEST_CHECKPOINT]
        LOGGER.info('Resuming %s at epoch %d, step %d',
                    output_dir, start_epoch, start_epoch * per_epoch)

    flags = _input_flags(model)
    params = model.params
    for epoch in range(start_epoch, cfg.epochs):
        started = time.monotonic()
        order = rng.permutation(len(train_samples))
        producer = BatchProducer(train_samples, order, cfg.batch_size,
                                 cfg.component, depth=PREFETCH, **flags)
        losses = []
        for index, (inputs, targets, v_in) in enumerate(producer):
            step = epoch * per_epoch + index
            lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min)
            result.lr_trace.append(lr)
            model.zero_grad()
            with Tape():
                pred = model.forward(Tensor(inputs), v_in)
                loss = huber_loss(pred, Tensor(targets), cfg.delta)
            value = float(loss.item())
            if not math.isfinite(value):
                path = None
                if output_dir:
                    path = save_checkpoint(paths[DIVERGED_CHECKPOINT], _checkpoint(
                        model, state, epoch, fingerprint, rng,
                        result.best_val, result.best_epoch, result.rows, meta))
                LOGGER.error('Loss became %s at step %d', value, step)
                raise TrainingDiverged('loss became %s at step %d' % (value, step),
                                       checkpoint=path, step=step)
            backward(loss)
            grads = OrderedDict((name, p.grad) for name, p in params.items())
            try:
                adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            except NonFiniteGradient as err:
                LOGGER.warning('Rejected step %d: %s', step, err)
                result.rejected_steps += 1
            losses.append(value)
            result.steps += 1

        train_huber = float(np.mean(losses))
        val_huber = evaluate_loss(model, val_samples, cfg)
        row = EpochRow(epoch=epoch, step=(epoch + 1) * per_epoch,
                       lr=result.lr_trace[-1], train_huber=train_huber,
                       val_huber=val_huber,
                       wall_ms=int(round((time.monotonic() - started) * 1000)))
        result.rows.append(row)
        LOGGER.info('epoch %d: train %.6g val %.6g', epoch, train_huber, val_huber)

        # without a validation set the training loss selects the best model
        score = val_huber if val_samples else train_huber
        improved = score < result.best_val
        if improved:
            result.best_val, result.best_epoch = score, epoch
        if output_dir:
            ckpt = _checkpoint(model, state, epoch + 1, fingerprint, rng,
                               result.best_val, result.best_epoch,
                               result.rows, meta)
            if improved:
                result.best_checkpoint = save_checkpoint(paths[BEST_CHECKPOINT], ckpt)
            result.last_checkpoint = save_checkpoint(paths[LAST_CHECKPOINT], ckpt)
            write_metrics(paths[METRICS_FILENAME], result.rows)
        if output_fn:
            output_fn(message='Trained epoch %d/%d' % (epoch + 1, cfg.epochs),
                      percent_done=int(100 * (epoch + 1) / cfg.epochs))
    return result


def train_fold(store, split, model, cfg, output_dir=None, resume=False,
               output_fn=None):
    '''Trains on the train partition of one fold, validating on its val
    partition'''
    groups = store.fold_samples(split)
    LOGGER.info('fold %d: %d train, %d val, %d test samples, velocity scale %.6g',
                split.fold, len(groups['train']), len(groups['val']),
                len(groups['test']), store.fold_normalization(split).velocity_scale)
    return train(model, groups['train'], groups['val'], cfg, output_dir=output_dir,
                 resume=resume, output_fn=output_fn)

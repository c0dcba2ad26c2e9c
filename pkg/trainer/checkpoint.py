"""
trainer/checkpoint.py

SFCK checkpoint files, little-endian throughout:

    magic "SFCK" | u32 version | 32-byte config fingerprint (sha256) |
    u32 meta length | meta (UTF-8 JSON) | u32 array count |
    per array: u16 name length | name | u8 ndim | u32 dims | float32 data |
    u64 FNV-1a over everything before it

Arrays are named param/<name>, adam_m/<name> and adam_v/<name>.
"""
import json
import logging
import os
import struct
from collections import OrderedDict

import numpy as np

from datapipe.utils import fnv1a64
from trainer.models import AdamState, Checkpoint, CheckpointError, EpochRow

LOGGER = logging.getLogger(__name__)

MAGIC = b'SFCK'
VERSION = 1
PREFIXES = ('param/', 'adam_m/', 'adam_v/')


def _named_arrays(checkpoint):
    arrays = []
    for name, values in checkpoint.params.items():
        arrays.append(('param/' + name, values))
    for name, values in checkpoint.adam.m.items():
        arrays.append(('adam_m/' + name, values))
    for name, values in checkpoint.adam.v.items():
        arrays.append(('adam_v/' + name, values))
    return arrays


def encode_checkpoint(checkpoint):
    if len(checkpoint.fingerprint) != 32:
        raise CheckpointError('fingerprint must be 32 bytes')
    meta = {'epoch': checkpoint.epoch,
            'step': checkpoint.adam.step,
            'rng_state': checkpoint.rng_state,
            'best_val': checkpoint.best_val,
            'best_epoch': checkpoint.best_epoch,
            'rows': [row.to_dict() for row in checkpoint.rows],
            'meta': checkpoint.meta}
    meta_bytes = json.dumps(meta, sort_keys=True).encode('utf-8')
    parts = [MAGIC, struct.pack('<I', VERSION), checkpoint.fingerprint,
             struct.pack('<I', len(meta_bytes)), meta_bytes]
    arrays = _named_arrays(checkpoint)
    parts.append(struct.pack('<I', len(arrays)))
    for name, values in arrays:
        encoded = name.encode('utf-8')
        values = np.ascontiguousarray(values, dtype='<f4')
        parts.append(struct.pack('<H', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<B', values.ndim))
        parts.append(struct.pack('<%dI' % values.ndim, *values.shape))
        parts.append(values.tobytes())
    body = b''.join(parts)
    return body + struct.pack('<Q', fnv1a64(body))


class _Reader(object):

    def __init__(self, data, source):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, size):
        if self.offset + size > len(self.data):
            raise CheckpointError('%s is truncated at byte %d'
                                  % (self.source, self.offset))
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def decode_checkpoint(data, source='<bytes>'):
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError('%s is too short to be a checkpoint' % source)
    body, trailer = data[:-8], data[-8:]
    (stored,) = struct.unpack('<Q', trailer)
    if body[:4] != MAGIC:
        raise CheckpointError('%s: bad magic %r' % (source, body[:4]))
    if fnv1a64(body) != stored:
        raise CheckpointError('%s: checksum mismatch, file is corrupt' % source)
    reader = _Reader(body, source)
    reader.take(4)
    (version,) = reader.unpack('<I')
    if version != VERSION:
        raise CheckpointError('%s: unsupported version %d' % (source, version))
    fingerprint = reader.take(32)
    (meta_length,) = reader.unpack('<I')
    try:
        meta = json.loads(reader.take(meta_length).decode('utf-8'))
    except ValueError as err:
        raise CheckpointError('%s: unreadable metadata' % source) from err
    (count,) = reader.unpack('<I')
    groups = {prefix: OrderedDict() for prefix in PREFIXES}
    for _ in range(count):
        (name_length,) = reader.unpack('<H')
        name = reader.take(name_length).decode('utf-8')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack('<%dI' % ndim) if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) * 4
        values = np.frombuffer(reader.take(size), dtype='<f4').reshape(shape)
        for prefix in PREFIXES:
            if name.startswith(prefix):
                groups[prefix][name[len(prefix):]] = values.astype(np.float32)
                break
        else:
            raise CheckpointError('%s: unknown array %s' % (source, name))
    if reader.offset != len(body):
        raise CheckpointError('%s: %d trailing bytes' % (source, len(body) - reader.offset))
    adam = AdamState(step=meta['step'], m=groups['adam_m/'], v=groups['adam_v/'])
    return Checkpoint(params=groups['param/'], adam=adam, epoch=meta['epoch'],
                      fingerprint=fingerprint, rng_state=meta['rng_state'],
                      best_val=meta['best_val'], best_epoch=meta['best_epoch'],
                      rows=[EpochRow(**row) for row in meta['rows']],
                      meta=meta['meta'])


def save_checkpoint(path, checkpoint):
    '''Writes atomically through a temporary file next to path'''
    data = encode_checkpoint(checkpoint)
    tmp_path = path + '.tmp'
    try:
        with open(tmp_path, 'wb') as fileref:
            fileref.write(data)
        os.replace(tmp_path, path)
    except OSError as err:
        LOGGER.error('Write failed for %s: %s', path, err)
        raise CheckpointError('cannot write %s: %s' % (path, err)) from err
    LOGGER.info('Wrote %s', path)
    return path


def load_checkpoint(path, fingerprint=None):
    '''Reads a checkpoint; with fingerprint the stored one must match'''
    try:
        with open(path, 'rb') as fileref:
            data = fileref.read()
    except OSError as err:
        raise CheckpointError('cannot read checkpoint %s: %s' % (path, err)) from err
    checkpoint = decode_checkpoint(data, source=path)
    if fingerprint is not None and checkpoint.fingerprint != fingerprint:
        raise CheckpointError('%s was written for a different model or '
                              'training configuration' % path)
    return checkpoint

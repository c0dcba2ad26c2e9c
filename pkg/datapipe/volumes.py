"""
datapipe/volumes.py

SFV1 volume files:

    magic "SFV1" | u32 version | u32 channels | u32 D | u32 H | u32 W |
    u8 dtype tag (1 = float32) | payload | u64 FNV-1a of the payload

All little-endian; the payload is channel-major, then depth, row-major.
"""
import logging
import os
import struct

import numpy as np

from datapipe.models import DataError, VolumeFormatError
from datapipe.utils import fnv1a64, format_checksum

LOGGER = logging.getLogger(__name__)

MAGIC = b'SFV1'
VERSION = 1
DTYPE_FLOAT32 = 1
HEADER = struct.Struct('<4sIIIIIB')
TRAILER = struct.Struct('<Q')
MAX_EXTENT = 2 ** 32 - 1


def as_volume(field):
    '''[D, H, W] or [C, D, H, W] -> little-endian float32 [C, D, H, W]'''
    volume = np.asarray(field)
    if volume.ndim == 3:
        volume = volume[np.newaxis]
    if volume.ndim != 4:
        raise VolumeFormatError('volumes are 3-D or 4-D, got shape %s'
                                % (volume.shape,))
    if any(n < 1 or n > MAX_EXTENT for n in volume.shape):
        raise VolumeFormatError('shape %s does not fit the volume header'
                                % (volume.shape,))
    return np.ascontiguousarray(volume, dtype='<f4')


def encode_volume(field):
    '''Returns (file bytes, payload checksum)'''
    volume = as_volume(field)
    payload = volume.tobytes()
    checksum = fnv1a64(payload)
    header = HEADER.pack(MAGIC, VERSION, *volume.shape, DTYPE_FLOAT32)
    return header + payload + TRAILER.pack(checksum), checksum


def decode_volume(data, source='<bytes>'):
    if len(data) < HEADER.size + TRAILER.size:
        raise VolumeFormatError('%s: %d bytes is shorter than an empty volume'
                                % (source, len(data)))
    magic, version, channels, depth, height, width, dtype = \
        HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise VolumeFormatError('%s: bad magic %r' % (source, magic))
    if version != VERSION:
        raise VolumeFormatError('%s: unsupported version %d' % (source, version))
    if dtype != DTYPE_FLOAT32:
        raise VolumeFormatError('%s: unsupported dtype tag %d' % (source, dtype))
    shape = (channels, depth, height, width)
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    actual = len(data) - HEADER.size - TRAILER.size
    if actual != expected:
        raise VolumeFormatError('%s: header declares %s (%d payload bytes) but '
                                'the file holds %d' % (source, shape, expected, actual))
    payload = data[HEADER.size:HEADER.size + expected]
    (stored,) = TRAILER.unpack_from(data, HEADER.size + expected)
    computed = fnv1a64(payload)
    if stored != computed:
        raise VolumeFormatError('%s: checksum mismatch (stored %s, computed %s)'
                                % (source, format_checksum(stored),
                                   format_checksum(computed)))
    return np.frombuffer(payload, dtype='<f4').reshape(shape).copy()


def write_volume(path, field):
    '''Writes field to path and returns its checksum as a hex string'''
    data, checksum = encode_volume(field)
    try:
        with open(path, 'wb') as fileref:
            fileref.write(data)
    except OSError as err:
        LOGGER.error('Write failed for %s: %s', path, err)
        raise DataError('cannot write %s: %s' % (path, err)) from err
    LOGGER.debug('Wrote %s', path)
    return format_checksum(checksum)


def read_volume(path):
    '''Reads a [C, D, H, W] float32 volume, validating header and checksum'''
    try:
        with open(path, 'rb') as fileref:
            data = fileref.read()
    except OSError as err:
        LOGGER.error('Read failed for %s: %s', path, err)
        raise DataError('cannot read %s: %s' % (path, err)) from err
    return decode_volume(data, source=os.fspath(path))


def read_header(path):
    '''Returns (shape, stored checksum hex) without reading the payload'''
    try:
        with open(path, 'rb') as fileref:
            header = fileref.read(HEADER.size)
            fileref.seek(-TRAILER.size, os.SEEK_END)
            trailer = fileref.read(TRAILER.size)
    except OSError as err:
        raise DataError('cannot read %s: %s' % (path, err)) from err
    if len(header) < HEADER.size or len(trailer) < TRAILER.size:
        raise VolumeFormatError('%s: truncated header' % path)
    magic, version, channels, depth, height, width, _dtype = HEADER.unpack(header)
    if magic != MAGIC or version != VERSION:
        raise VolumeFormatError('%s: not an SFV%d volume' % (path, VERSION))
    (stored,) = TRAILER.unpack(trailer)
    return (channels, depth, height, width), format_checksum(stored)

''' datapipe/utils.py '''
import logging

import numpy as np

LOGGER = logging.getLogger(__name__)

FNV_OFFSET = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
MASK64 = 0xffffffffffffffff

try:
    from numba import njit
except ImportError:
    njit = None
    LOGGER.debug('numba not available, using the python checksum loop')


def _fnv1a_python(data):
    value = FNV_OFFSET
    for byte in bytes(data):
        value = ((value ^ byte) * FNV_PRIME) & MASK64
    return value


if njit is not None:
    @njit(cache=True)
    def _fnv1a_kernel(data, offset, prime):
        value = offset
        for i in range(data.shape[0]):
            value = (value ^ np.uint64(data[i])) * prime
        return value
else:
    _fnv1a_kernel = None


def fnv1a64(data):
    '''64-bit FNV-1a over a bytes-like object, returned as an int'''
    buffer = np.frombuffer(memoryview(data).cast('B'), dtype=np.uint8)
    if _fnv1a_kernel is None:
        return _fnv1a_python(buffer)
    return int(_fnv1a_kernel(buffer, np.uint64(FNV_OFFSET), np.uint64(FNV_PRIME)))


def format_checksum(value):
    return '%016x' % value


def derive_seed(seed, index):
    '''Independent 32-bit seed for item `index` of a run seeded by `seed`'''
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])

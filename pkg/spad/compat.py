#
# python-spad: structured pruning adapters.
#
# This program is free software: you can redistribute it and/or modify it under
# the terms of the GNU Lesser General Public License as published by the Free
# Software Foundation, either version 3 of the License, or (at your option) any
# later version.
#
# This program is distributed in the hope that it will be useful, but WITHOUT
# ANY WARRANTY; without even the implied warranty of MERCHANTABILITY or FITNESS
# FOR A PARTICULAR PURPOSE.  See the GNU Lesser General Public License for more
# details.
#
# You should have received a copy of the GNU General Public License along with
# this program.  If not, see <http://www.gnu.org/licenses/>.
#

"""
Environment adaptation: thread caps, seeded random generators and mask
bit packing.

"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

THREADS_ENV = "SPA_THREADS"


def worker_count():
    """
    Number of worker threads the package may use. Honours the SPA_THREADS
    environment variable; defaults to the CPU count.

    """
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            count = int(env)
        except ValueError:
            raise ValueError("%s must be an integer, got %r" % (THREADS_ENV, env))
        return max(1, count)
    return os.cpu_count() or 1


def get_rng(seed):
    """
    Return a numpy Generator for a seed. Identical seeds yield bit-identical
    streams; every random draw in spad goes through one of these.

    """
    if seed is None:
        raise ValueError("a seed is required")
    return np.random.Generator(np.random.PCG64(int(seed)))


def parallel_map(fn, items):
    """
    Map fn over items using at most :func:`worker_count` threads,
    preserving order. Runs inline when only one worker is available.

    """
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def pack_bits(mask):
    """Pack a boolean vector into little-endian-bit-order bytes."""
    return np.packbits(np.asarray(mask, dtype=bool), bitorder="little").tobytes()


def unpack_bits(buf, length):
    """Inverse of :func:`pack_bits`."""
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    return bits[:length].astype(bool)

# Copyright 2019 Google LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""
Library for reading and writing PTW tensor files.

File layout, all little-endian:
  char[4]: 'PTW1'
  uint32: entry count
  per entry:
    uint16: name length, followed by the UTF-8 name
    uint8: rank, followed by rank uint32 dims
    float32[product(dims)]: values, row-major
"""

import collections
import os
import struct

import numpy as np

MAGIC = b'PTW1'


class FormatError(ValueError):
    pass


class MissingEntryError(KeyError):
    def __init__(self, name, path=None):
        self.name = name
        where = ' in %s' % path if path else ''
        super().__init__('missing entry %r%s' % (name, where))


class EntryShapeError(ValueError):
    def __init__(self, name, expected, actual):
        self.name = name
        super().__init__('entry %r: expected shape %s, got %s' % (
            name, tuple(expected), tuple(actual)))


def to_bytes(entries):
    """Serializes an ordered mapping of name -> array."""
    chunks = [MAGIC, struct.pack('<I', len(entries))]
    for name, value in entries.items():
        name_bytes = name.encode('utf-8')
        value = np.asarray(value)
        assert len(name_bytes) < 2 ** 16, 'name too long: %s' % name
        assert value.ndim < 2 ** 8, '%s: rank %d too large' % (name, value.ndim)
        chunks.append(struct.pack('<H', len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack('<B', value.ndim))
        chunks.append(struct.pack('<%dI' % value.ndim, *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype='<f4').tobytes())
    return b''.join(chunks)


def from_bytes(buf):
    """Parses a PTW buffer into an OrderedDict of float32 arrays.

    Nothing is returned unless the whole buffer parses.
    """
    view = memoryview(buf)
    offset = 0

    def take(count, what):
        nonlocal offset
        if offset + count > len(view):
            raise FormatError('truncated file: expected %dB of %s at offset %d, '
                              'only %dB left' % (count, what, offset,
                                                 len(view) - offset))
        chunk = view[offset:offset + count]
        offset += count
        return chunk

    magic = bytes(take(len(MAGIC), 'magic'))
    if magic != MAGIC:
        raise FormatError('expected magic %r, got %r' % (MAGIC, magic))
    count, = struct.unpack('<I', take(4, 'entry count'))

    entries = collections.OrderedDict()
    for _ in range(count):
        name_len, = struct.unpack('<H', take(2, 'name length'))
        try:
            name = bytes(take(name_len, 'name')).decode('utf-8')
        except UnicodeDecodeError as e:
            raise FormatError('entry name is not UTF-8: %s' % e)
        rank, = struct.unpack('<B', take(1, 'rank of %s' % name))
        dims = struct.unpack('<%dI' % rank, take(4 * rank, 'dims of %s' % name))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(4 * size, 'values of %s' % name), dtype='<f4')
        if name in entries:
            raise FormatError('duplicate entry %r' % name)
        entries[name] = values.astype(np.float32).reshape(dims)

    if offset != len(view):
        raise FormatError('%dB of trailing data after %d entries' % (
            len(view) - offset, count))
    return entries


def write_entries(entries, dst_path):
    """Writes entries to dst_path.

    The data goes to a temp file next to dst_path first and is renamed into
    place, so a partially written file is never observed.
    """
    data = to_bytes(entries)
    write_path = dst_path + '.tmp'
    with open(write_path, 'wb') as f:
        f.write(data)
    os.replace(write_path, dst_path)


def read_entries(path):
    with open(path, 'rb') as f:
        data = f.read()
    try:
        return from_bytes(data)
    except FormatError as e:
        raise FormatError('%s: %s' % (path, e))


def require(entries, name, shape=None, path=None):
    """Fetches entries[name], checking its shape if given."""
    if name not in entries:
        raise MissingEntryError(name, path)
    value = entries[name]
    if shape is not None and tuple(value.shape) != tuple(shape):
        raise EntryShapeError(name, shape, value.shape)
    return value

'''
Binary model checkpoint.

Layout (little-endian):
    4 bytes   magic "EFPN"
    uint32    format version
    uint32    header length, followed by the UTF-8 JSON header {"config": ..., "metadata": ...}
    uint32    parameter count, then per parameter:
        uint16 name length, name (UTF-8), uint8 ndim, ndim x uint32 dims, float32 values in row-major order
'''
from __future__ import annotations
import json
import struct
from typing import Any, Dict, Optional, Tuple
import numpy as np
from efpn_model import EfpnConfig, EfpnModel, build
from errors import CheckpointFileError, ConfigurationError

MAGIC = b'EFPN'
VERSION = 1


def save_checkpoint(model: EfpnModel, path: str, metadata: Optional[Dict[str, Any]] = None) -> None:
    meta = dict(model.metadata)
    meta.update(metadata or {})
    header = json.dumps({'config': model.config.toDict(), 'metadata': meta}, sort_keys=True).encode('utf-8')
    chunks = [MAGIC, struct.pack('<II', VERSION, len(header)), header, struct.pack('<I', len(model.parameters))]
    for name, p in model.parameters.items():
        encodedName = name.encode('utf-8')
        shape = p.tensor.shape
        chunks.append(struct.pack('<H', len(encodedName)) + encodedName)
        chunks.append(struct.pack(f'<B{len(shape)}I', len(shape), *shape))
        chunks.append(np.ascontiguousarray(p.tensor.data, dtype='<f4').tobytes())
    try:
        with open(path, 'wb') as f:
            f.write(b''.join(chunks))
    except OSError as e:
        raise CheckpointFileError(f'Checkpoint {path} cannot be written: {e}') from e


class _Reader:
    def __init__(self, data: bytes, path: str) -> None:
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFileError(f'Checkpoint {self.path} is truncated at byte {len(self.data)} '
                                      f'(needed {self.offset + size})')
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> EfpnModel:
    '''
    Rebuilds the model stored in path. Nothing is returned unless every parameter matches the stored config.
    The stored metadata is available as model.metadata.
    '''
    try:
        with open(path, 'rb') as f:
            reader = _Reader(f.read(), path)
    except OSError as e:
        raise CheckpointFileError(f'Checkpoint {path} cannot be read: {e}') from e

    if reader.take(4) != MAGIC:
        raise CheckpointFileError(f'{path} is not an EFPN checkpoint (bad magic)')
    version, headerLength = reader.unpack('<II')
    if version != VERSION:
        raise CheckpointFileError(f'Checkpoint {path} has format version {version}, expected {VERSION}')
    try:
        header = json.loads(reader.take(headerLength).decode('utf-8'))
        config = EfpnConfig.fromDict(header['config'])
        model = build(config, seed=0)
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ConfigurationError) as e:
        raise CheckpointFileError(f'Checkpoint {path} has an invalid header: {e}') from e

    (count,) = reader.unpack('<I')
    if count != len(model.parameters):
        raise CheckpointFileError(f'Checkpoint {path} stores {count} parameters, its config defines {len(model.parameters)}')
    values: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nameLength,) = reader.unpack('<H')
        name = reader.take(nameLength).decode('utf-8', errors='replace')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I')
        if name not in model.parameters or name in values:
            raise CheckpointFileError(f'Checkpoint {path} has unknown or repeated parameter {name}')
        if tuple(shape) != model.parameters[name].shape:
            raise CheckpointFileError(f'Checkpoint {path}: parameter {name} has shape {tuple(shape)}, '
                                      f'config expects {model.parameters[name].shape}')
        size = int(np.prod(shape)) if ndim else 1
        values[name] = np.frombuffer(reader.take(4 * size), dtype='<f4').reshape(shape).astype(np.float32)
    if reader.offset != len(reader.data):
        raise CheckpointFileError(f'Checkpoint {path} has {len(reader.data) - reader.offset} trailing bytes')

    for name, array in values.items():
        model.parameters[name].tensor.data = array
    model.metadata = header.get('metadata', {})
    return model
